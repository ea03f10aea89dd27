//! Line-oriented `key = value` settings with `#` comments.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Parses every non-blank, non-comment line into an [`Entry`].
pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (key, value) = body.split_once('=').ok_or_else(|| Error::Config {
            line,
            detail: format!("expected `key = value`, got `{body}`"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(Error::Config {
                line,
                detail: format!("empty key or value in `{body}`"),
            });
        }
        if out.iter().any(|e: &Entry| e.key == key) {
            return Err(Error::Config {
                line,
                detail: format!("duplicate key `{key}`"),
            });
        }
        out.push(Entry {
            line,
            key: key.to_string(),
            value: value.to_string(),
        });
    }
    Ok(out)
}

/// A settings struct that accepts some keys.
pub trait Settings {
    /// `None` when `key` is not one of ours.
    fn set(&mut self, key: &str, value: &str) -> Option<Result<(), String>>;

    /// Current values, in a stable order.
    fn entries(&self) -> Vec<(&'static str, String)>;

    fn validate(&self) -> Result<(), String> {
        Ok(())
    }
}

/// Parses `value` as `T`, for use inside [`Settings::set`].
pub fn value<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: Display,
{
    value.parse().map_err(|e| format!("bad value `{value}`: {e}"))
}

/// Applies `text` to the first target that knows each key. Unknown keys are
/// errors.
pub fn apply(text: &str, targets: &mut [&mut dyn Settings]) -> Result<()> {
    for e in parse(text)? {
        let mut known = false;
        for t in targets.iter_mut() {
            if let Some(r) = t.set(&e.key, &e.value) {
                r.map_err(|detail| Error::Config {
                    line: e.line,
                    detail: format!("{}: {detail}", e.key),
                })?;
                known = true;
                break;
            }
        }
        if !known {
            return Err(Error::Config {
                line: e.line,
                detail: format!("unknown key `{}`", e.key),
            });
        }
    }
    for t in targets.iter() {
        t.validate().map_err(|detail| Error::Config { line: 0, detail })?;
    }
    Ok(())
}

pub fn render(s: &dyn Settings) -> String {
    s.entries()
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Default, Debug, PartialEq)]
    struct Demo {
        rate: f64,
        steps: usize,
    }

    impl Settings for Demo {
        fn set(&mut self, key: &str, v: &str) -> Option<Result<(), String>> {
            Some(match key {
                "rate" => value(v).map(|x| self.rate = x),
                "steps" => value(v).map(|x| self.steps = x),
                _ => return None,
            })
        }

        fn entries(&self) -> Vec<(&'static str, String)> {
            vec![("rate", self.rate.to_string()), ("steps", self.steps.to_string())]
        }
    }

    #[test]
    fn parses_comments_and_blank_lines() {
        let mut d = Demo::default();
        apply("# header\n\nrate = 0.5  # inline\nsteps=3\n", &mut [&mut d]).unwrap();
        assert_eq!(d, Demo { rate: 0.5, steps: 3 });
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let mut d = Demo::default();
        let err = apply("rate = 1\nspeed = 2\n", &mut [&mut d]).unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }), "{err}");
    }

    #[test]
    fn malformed_lines_and_values() {
        let mut d = Demo::default();
        assert!(apply("rate 1\n", &mut [&mut d]).is_err());
        assert!(apply("steps = -1\n", &mut [&mut d]).is_err());
        assert!(apply("rate = 1\nrate = 2\n", &mut [&mut d]).is_err());
    }

    #[test]
    fn render_round_trips() {
        let d = Demo { rate: 0.25, steps: 7 };
        let mut back = Demo::default();
        apply(&render(&d), &mut [&mut back]).unwrap();
        assert_eq!(back, d);
    }
}
