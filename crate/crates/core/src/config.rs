//! `key = value` configuration text with `#` comments.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One `key = value` assignment with its 1-based line number.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse_assignments(text: &str, path: &Path) -> Result<Vec<Assignment>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected `key = value`, found `{line}`"),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "empty key".into(),
            });
        }
        out.push(Assignment { line: i + 1, key: key.to_string(), value: value.to_string() });
    }
    Ok(out)
}

pub fn read_assignments(path: &Path) -> Result<Vec<Assignment>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_assignments(&text, path)
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, found `{value}`"))),
    }
}

/// Comma-separated list, e.g. `0.2,0.5`.
pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignments_and_comments() {
        let text = "# header\nlr = 0.001  # trailing\n\n  epochs=3\n";
        let a = parse_assignments(text, Path::new("x.conf")).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!((a[0].line, a[0].key.as_str(), a[0].value.as_str()), (2, "lr", "0.001"));
        assert_eq!((a[1].line, a[1].key.as_str(), a[1].value.as_str()), (4, "epochs", "3"));

        match parse_assignments("ok = 1\nbroken line\n", Path::new("x.conf")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert_eq!(parse_list::<f64>("rhos", "0.2, 0.5").unwrap(), vec![0.2, 0.5]);
        assert!(parse_value::<usize>("epochs", "-1").is_err());
        assert!(parse_bool("flag", "maybe").is_err());
    }
}
