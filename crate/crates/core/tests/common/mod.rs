//! Shared test support: a naive rule oracle, random scene generation and
//! synthetic outcome builders.
#![allow(dead_code)]

pub mod fixtures;
pub mod oracle;
pub mod pipeline;
pub mod scenes;
