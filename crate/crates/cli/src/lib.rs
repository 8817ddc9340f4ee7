//! Pipeline orchestration behind the `mmca` binary.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod pipeline;

use mmca::Error;

/// Stable category name of an error, for the one-line error report.
pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Io(_) => "io",
        Error::Csv(_) => "csv",
        Error::Json(_) => "json",
        Error::Num(_) => "numeric",
        Error::Header(_) => "header",
        Error::SegmentIndex(_) => "segment-index",
        Error::Invalid(_) => "invalid-input",
        Error::Config(_) => "config",
        Error::Format(_) => "format",
        Error::NonFinite(_) => "non-finite",
    }
}

/// `{"error":{"kind":...,"message":...}}` on one line.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ");
    serde_json::json!({ "error": { "kind": error_kind(e), "message": msg } }).to_string()
}
