//! Command-line front end and the audit label server.

pub mod commands;
pub mod server;

use spatialcheck::audit::AuditError;
use spatialcheck::checker::{CheckError, ConfigError};
use spatialcheck::detection::DetectionError;
use spatialcheck::metrics::MetricsError;
use spatialcheck::prompts::DatasetError;
use spatialcheck::run::RunError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;

fn detection_code(e: &DetectionError) -> i32 {
    match e {
        DetectionError::Backend { .. } | DetectionError::Protocol { .. } => EXIT_BACKEND,
        _ => EXIT_INVALID,
    }
}

fn check_code(e: &CheckError) -> i32 {
    match e {
        CheckError::Detection(d) => detection_code(d),
        _ => EXIT_INVALID,
    }
}

/// Map an error to the process exit code: 2 for validation and integrity
/// failures, 3 for detector backend failures, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<RunError>() {
            return match e {
                RunError::Backend(d) => detection_code(d),
                RunError::Check(c) => check_code(c),
                RunError::Io { .. } => EXIT_OTHER,
                RunError::Integrity(_) | RunError::Manifest { .. } | RunError::Metrics(_) | RunError::Json(_) => {
                    EXIT_INVALID
                }
            };
        }
        if let Some(e) = cause.downcast_ref::<DetectionError>() {
            return detection_code(e);
        }
        if let Some(e) = cause.downcast_ref::<CheckError>() {
            return check_code(e);
        }
        if let Some(e) = cause.downcast_ref::<DatasetError>() {
            return match e {
                DatasetError::Io(_) => EXIT_OTHER,
                _ => EXIT_INVALID,
            };
        }
        if let Some(e) = cause.downcast_ref::<ConfigError>() {
            return match e {
                ConfigError::Io(_) => EXIT_OTHER,
                _ => EXIT_INVALID,
            };
        }
        if let Some(e) = cause.downcast_ref::<AuditError>() {
            return match e {
                AuditError::Io(_) => EXIT_OTHER,
                _ => EXIT_INVALID,
            };
        }
        if cause.downcast_ref::<MetricsError>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_INVALID;
        }
    }
    EXIT_OTHER
}
