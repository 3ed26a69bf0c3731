//! Line-oriented text records with float arrays stored either as decimals
//! or as one trailing little-endian `f32` blob.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::fmt_sig;

const BLOB_MARKER: &[u8] = b"binary_data ";

#[derive(Debug, Error, Clone, PartialEq)]
#[error("line {line}: field `{field}`: {msg}")]
pub struct CodecError {
    pub line: usize,
    pub field: String,
    pub msg: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FloatFormat {
    /// Scientific decimals with this many significant digits.
    Decimal(usize),
    Binary32,
}

impl Default for FloatFormat {
    fn default() -> Self {
        FloatFormat::Decimal(9)
    }
}

impl fmt::Display for FloatFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FloatFormat::Decimal(d) => write!(f, "decimal{d}"),
            FloatFormat::Binary32 => f.write_str("binary32"),
        }
    }
}

impl FromStr for FloatFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "binary32" {
            return Ok(FloatFormat::Binary32);
        }
        match s.strip_prefix("decimal").map(str::parse::<usize>) {
            Some(Ok(d)) if (1..=17).contains(&d) => Ok(FloatFormat::Decimal(d)),
            _ => Err(format!("unknown float format `{s}` (expected decimal<1..17> or binary32)")),
        }
    }
}

pub struct RecordWriter {
    format: FloatFormat,
    text: String,
    blob: Vec<u8>,
}

impl RecordWriter {
    pub fn new(format: FloatFormat) -> Self {
        Self {
            format,
            text: String::new(),
            blob: Vec::new(),
        }
    }

    pub fn line(&mut self, s: impl AsRef<str>) {
        self.text.push_str(s.as_ref());
        self.text.push('\n');
    }

    pub fn floats(&mut self, values: &[f64]) {
        match self.format {
            FloatFormat::Decimal(d) => {
                let parts: Vec<String> = values.iter().map(|v| fmt_sig(*v, d)).collect();
                self.line(parts.join(" "));
            }
            FloatFormat::Binary32 => {
                for v in values {
                    self.blob.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        if self.format == FloatFormat::Binary32 {
            self.text.push_str(&format!("binary_data {}\n", self.blob.len()));
            let mut out = self.text.into_bytes();
            out.extend_from_slice(&self.blob);
            out
        } else {
            self.text.into_bytes()
        }
    }
}

pub struct RecordReader {
    format: FloatFormat,
    lines: Vec<String>,
    pos: usize,
    blob: Vec<u8>,
    blob_pos: usize,
}

impl RecordReader {
    /// `format_key` names the header line (second line) carrying the float format.
    pub fn new(bytes: &[u8], format_key: &str) -> Result<Self, CodecError> {
        let (text_bytes, blob) = match find_blob(bytes) {
            Some((split, blob_start, len)) => {
                if bytes.len() - blob_start != len {
                    return Err(CodecError {
                        line: 0,
                        field: "binary_data".into(),
                        msg: format!("expected {len} bytes, found {}", bytes.len() - blob_start),
                    });
                }
                (&bytes[..split], bytes[blob_start..].to_vec())
            }
            None => (bytes, Vec::new()),
        };
        let text = std::str::from_utf8(text_bytes).map_err(|e| CodecError {
            line: 0,
            field: "header".into(),
            msg: format!("not valid UTF-8: {e}"),
        })?;
        let lines = text.lines().map(str::to_string).collect();
        let mut reader = Self {
            format: FloatFormat::Decimal(9),
            lines,
            pos: 0,
            blob,
            blob_pos: 0,
        };
        // line 1 is the magic, validated by the caller
        reader.pos = 1;
        let fmt = reader.expect(format_key)?;
        reader.format = fmt.parse().map_err(|msg| reader.err(format_key, msg))?;
        reader.pos = 0;
        Ok(reader)
    }

    pub fn format(&self) -> FloatFormat {
        self.format
    }

    pub fn line_no(&self) -> usize {
        self.pos
    }

    pub fn err(&self, field: &str, msg: impl Into<String>) -> CodecError {
        CodecError {
            line: self.pos,
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn next_line(&mut self) -> Option<String> {
        while self.pos < self.lines.len() {
            let l = self.lines[self.pos].trim().to_string();
            self.pos += 1;
            if !l.is_empty() && !l.starts_with('#') {
                return Some(l);
            }
        }
        None
    }

    /// Next line, which must start with `key`; returns the rest.
    pub fn expect(&mut self, key: &str) -> Result<String, CodecError> {
        let Some(line) = self.next_line() else {
            return Err(self.err(key, "unexpected end of file"));
        };
        let (k, rest) = line.split_once(' ').unwrap_or((&line, ""));
        if k != key {
            return Err(self.err(key, format!("expected `{key}`, found `{k}`")));
        }
        Ok(rest.trim().to_string())
    }

    pub fn floats(&mut self, count: usize, field: &str) -> Result<Vec<f64>, CodecError> {
        match self.format {
            FloatFormat::Decimal(_) => {
                if count == 0 {
                    return Ok(Vec::new());
                }
                let line = self.next_line().ok_or_else(|| self.err(field, "missing float line"))?;
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(|s| s.parse::<f64>().map_err(|_| self.err(field, format!("`{s}` is not a number"))))
                    .collect::<Result<_, _>>()?;
                if vals.len() != count {
                    return Err(self.err(field, format!("expected {count} values, found {}", vals.len())));
                }
                Ok(vals)
            }
            FloatFormat::Binary32 => {
                let end = self.blob_pos + count * 4;
                if end > self.blob.len() {
                    return Err(self.err(field, "binary data exhausted"));
                }
                let vals = self.blob[self.blob_pos..end]
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                    .collect();
                self.blob_pos = end;
                Ok(vals)
            }
        }
    }
}

/// Returns (end of text, start of blob, declared blob length).
fn find_blob(bytes: &[u8]) -> Option<(usize, usize, usize)> {
    let mut start = 0;
    while start < bytes.len() {
        let end = bytes[start..].iter().position(|b| *b == b'\n').map(|p| start + p)?;
        let line = &bytes[start..end];
        if line.starts_with(BLOB_MARKER) {
            let len = std::str::from_utf8(&line[BLOB_MARKER.len()..]).ok()?.trim().parse().ok()?;
            return Some((start, end + 1, len));
        }
        start = end + 1;
    }
    None
}

/// Splits `key=value` tokens.
pub fn kv_fields(s: &str) -> Vec<(&str, &str)> {
    s.split_whitespace().filter_map(|t| t.split_once('=')).collect()
}

pub fn kv_get<'a>(fields: &[(&'a str, &'a str)], key: &str) -> Option<&'a str> {
    fields.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(format: FloatFormat) -> Vec<f64> {
        let mut w = RecordWriter::new(format);
        w.line("magic 1");
        w.line(format!("float_format {format}"));
        w.line("block a");
        w.floats(&[0.1, -2.5, 1.0 / 3.0]);
        w.line("block b");
        w.floats(&[7.0]);
        let bytes = w.finish();
        let mut r = RecordReader::new(&bytes, "float_format").unwrap();
        r.expect("magic").unwrap();
        r.expect("float_format").unwrap();
        r.expect("block").unwrap();
        let mut out = r.floats(3, "a").unwrap();
        r.expect("block").unwrap();
        out.extend(r.floats(1, "b").unwrap());
        out
    }

    #[test]
    fn decimal17_exact() {
        assert_eq!(roundtrip(FloatFormat::Decimal(17)), vec![0.1, -2.5, 1.0 / 3.0, 7.0]);
    }

    #[test]
    fn binary32_rounds_to_f32() {
        let v = roundtrip(FloatFormat::Binary32);
        assert_eq!(v[0], f64::from(0.1f32));
        assert_eq!(v[3], 7.0);
    }

    #[test]
    fn format_parse() {
        assert_eq!("decimal9".parse::<FloatFormat>().unwrap(), FloatFormat::Decimal(9));
        assert!("decimal99".parse::<FloatFormat>().is_err());
    }
}
