//! Run configuration, on-disk formats, synthetic data generators and the
//! commands behind the `xref` binary.

pub mod commands;
pub mod config;
pub mod formats;
pub mod re_corpus;
pub mod wikihop;

pub use config::RunConfig;

use crate::error::Error;

/// One-line JSON description of a failure, for stderr.
///
/// `file`, `line` and `field` are `null` when the error has no source location.
pub fn error_json(e: &Error) -> String {
    let (file, line, field) = match e {
        Error::Parse { file, line, field, .. } => (
            Some(file.display().to_string()),
            Some(*line),
            field.clone(),
        ),
        Error::Io { path, .. } => (Some(path.display().to_string()), None, None),
        _ => (None, None, None),
    };
    let message = match e {
        Error::Parse { message, .. } => message.clone(),
        other => other.to_string(),
    };
    serde_json::json!({
        "error": e.kind(),
        "file": file,
        "line": line,
        "field": field,
        "message": message,
    })
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    #[test]
    fn error_line_is_single_json_object() {
        let e = Error::Parse {
            file: PathBuf::from("run.toml"),
            line: 7,
            field: Some("reader.head_dim".into()),
            message: "bad\nvalue".into(),
        };
        let s = error_json(&e);
        assert!(!s.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["file"], "run.toml");
        assert_eq!(v["line"], 7);
        assert_eq!(v["field"], "reader.head_dim");
        let v: serde_json::Value = serde_json::from_str(&error_json(&Error::Config("x".into()))).unwrap();
        assert!(v["file"].is_null());
    }
}
