//! SHA-256 content digests for prompt files, configs and run artifacts.

use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};

/// Lowercase 64-char hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a file's exact bytes.
pub fn hash_file(path: impl AsRef<Path>) -> io::Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// One `sha256.txt` line: digest, two spaces, file name (coreutils format).
pub fn checksum_line(digest: &str, file_name: &str) -> String {
    format!("{digest}  {file_name}\n")
}
