//! Binary and CSV feature matrices.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! "OTFEAT01"            8 bytes
//! dtype                 u8   (0 = f64, 1 = f32)
//! rows, cols            u64, u64
//! tag length, tag       u16, UTF-8 bytes (length 0 = no tag)
//! payload               rows·cols values, row-major
//! ```
//!
//! CSV files hold one frame per line; an optional first line `# tag: <tag>`
//! carries the tag and other `#` lines are ignored.

use std::path::Path;

use crate::conversion::FeatureMatrix;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::write_atomic;

pub const FEATURE_MAGIC: &[u8; 8] = b"OTFEAT01";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F64),
            1 => Ok(Dtype::F32),
            other => Err(Error::Format(format!("unknown feature dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Dtype::F64),
            "f32" => Ok(Dtype::F32),
            other => Err(Error::Validation(format!("unknown dtype `{other}` (expected f64 or f32)"))),
        }
    }
}

/// Serializes `features`; an empty tag is written as no tag.
pub fn encode_features(features: &FeatureMatrix, dtype: Dtype) -> Result<Vec<u8>> {
    let tag = features.tag.as_deref().unwrap_or("");
    let tag_len = u16::try_from(tag.len())
        .map_err(|_| Error::Validation(format!("tag of {} bytes exceeds the 65535-byte limit", tag.len())))?;
    let (rows, cols) = features.frames.shape();
    let mut out = Vec::with_capacity(8 + 1 + 16 + 2 + tag.len() + rows * cols * dtype.size());
    out.extend_from_slice(FEATURE_MAGIC);
    out.push(dtype.code());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    out.extend_from_slice(&tag_len.to_le_bytes());
    out.extend_from_slice(tag.as_bytes());
    for (i, &v) in features.frames.as_slice().iter().enumerate() {
        match dtype {
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            Dtype::F32 => {
                let narrow = v as f32;
                if !narrow.is_finite() {
                    return Err(Error::Validation(format!("value {v:e} at index {i} overflows f32")));
                }
                out.extend_from_slice(&narrow.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let slice = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(slice)
            }
            None => Err(Error::Format(format!("truncated file while reading {what}"))),
        }
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses a binary feature file, with its dtype.
pub fn decode_features(bytes: &[u8]) -> Result<(FeatureMatrix, Dtype)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != FEATURE_MAGIC {
        return Err(Error::Format("not a feature file (bad magic)".into()));
    }
    let dtype = Dtype::from_code(r.take(1, "dtype")?[0])?;
    let rows = usize::try_from(r.u64("rows")?).map_err(|_| Error::Format("row count too large".into()))?;
    let cols = usize::try_from(r.u64("cols")?).map_err(|_| Error::Format("column count too large".into()))?;
    let tag_len = u16::from_le_bytes(r.take(2, "tag length")?.try_into().expect("2 bytes")) as usize;
    let tag = std::str::from_utf8(r.take(tag_len, "tag")?)
        .map_err(|_| Error::Format("tag is not valid UTF-8".into()))?
        .to_string();
    let count = rows.checked_mul(cols).ok_or_else(|| Error::Format("rows × cols overflows".into()))?;
    let payload_len = count.checked_mul(dtype.size()).ok_or_else(|| Error::Format("payload size overflows".into()))?;
    if bytes.len() - r.pos != payload_len {
        return Err(Error::Format(format!(
            "payload has {} bytes, expected {payload_len} for {rows}×{cols} {:?}",
            bytes.len() - r.pos,
            dtype
        )));
    }
    let payload = r.take(payload_len, "payload")?;
    let values: Vec<f64> = match dtype {
        Dtype::F64 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
        Dtype::F32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
    };
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format(format!("non-finite value at payload index {i}")));
    }
    let frames = Matrix::from_vec(rows, cols, values)?;
    let mut features = FeatureMatrix::new(frames)?;
    if !tag.is_empty() {
        features.tag = Some(tag);
    }
    Ok((features, dtype))
}

/// Parses CSV text: one frame per line, comma separated.
pub fn parse_csv(text: &str) -> Result<FeatureMatrix> {
    let mut tag = None;
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if let Some(comment) = line.strip_prefix('#') {
            if rows == 0 && tag.is_none() {
                if let Some(t) = comment.trim_start().strip_prefix("tag:") {
                    tag = Some(t.trim().to_string());
                }
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let before = values.len();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Format(format!("line {}: `{}` is not a number", lineno + 1, field.trim()))
            })?;
            if !v.is_finite() {
                return Err(Error::Format(format!("line {}: non-finite value", lineno + 1)));
            }
            values.push(v);
        }
        let width = values.len() - before;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(Error::Format(format!("line {}: {width} columns, expected {c}", lineno + 1)));
            }
            _ => {}
        }
        rows += 1;
    }
    let frames = Matrix::from_vec(rows, cols.unwrap_or(0), values)?;
    let mut features = FeatureMatrix::new(frames)?;
    features.tag = tag.filter(|t| !t.is_empty());
    Ok(features)
}

/// CSV text whose numbers parse back to the same `f64` bits.
pub fn to_csv(features: &FeatureMatrix) -> String {
    let mut out = String::new();
    if let Some(tag) = features.tag.as_deref().filter(|t| !t.is_empty()) {
        out.push_str(&format!("# tag: {tag}\n"));
    }
    for row in features.frames.row_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Reads a feature file, as CSV when the extension is `.csv`.
pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let describe = |e: Error| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    };
    if is_csv(path) {
        let text = std::fs::read_to_string(path)?;
        parse_csv(&text).map_err(describe)
    } else {
        let bytes = std::fs::read(path)?;
        decode_features(&bytes).map(|(f, _)| f).map_err(describe)
    }
}

/// Writes atomically, as CSV when the extension is `.csv`.
pub fn write_features(path: &Path, features: &FeatureMatrix, dtype: Dtype) -> Result<()> {
    if is_csv(path) {
        write_atomic(path, to_csv(features).as_bytes())
    } else {
        write_atomic(path, &encode_features(features, dtype)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureMatrix {
        let m = Matrix::from_rows(&[[0.1, -2.5e-7, 3.0], [1e300, -0.0, 7.25]]).unwrap();
        FeatureMatrix::new(m).unwrap().with_tag("spk-α")
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let f = sample();
        let bytes = encode_features(&f, Dtype::F64).unwrap();
        let (back, dtype) = decode_features(&bytes).unwrap();
        assert_eq!(dtype, Dtype::F64);
        assert_eq!(back.tag, f.tag);
        let a: Vec<u64> = f.frames.as_slice().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.frames.as_slice().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(encode_features(&back, Dtype::F64).unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let f = FeatureMatrix::new(Matrix::from_rows(&[[1.0, 2.0]]).unwrap()).unwrap();
        let bytes = encode_features(&f, Dtype::F32).unwrap();
        assert_eq!(&bytes[..8], b"OTFEAT01");
        assert_eq!(bytes[8], 1);
        assert_eq!(u64::from_le_bytes(bytes[9..17].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[17..25].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(bytes[25..27].try_into().unwrap()), 0);
        assert_eq!(bytes.len(), 27 + 8);
        assert_eq!(f32::from_le_bytes(bytes[31..35].try_into().unwrap()), 2.0);
    }

    #[test]
    fn f32_round_trip_after_narrowing() {
        let f = FeatureMatrix::new(Matrix::from_rows(&[[0.5, 1.25], [-3.0, 1e-3]]).unwrap()).unwrap();
        let once = decode_features(&encode_features(&f, Dtype::F32).unwrap()).unwrap().0;
        let twice = encode_features(&once, Dtype::F32).unwrap();
        assert_eq!(encode_features(&f, Dtype::F32).unwrap(), twice);
        assert!(encode_features(&sample(), Dtype::F32).is_err());
    }

    #[test]
    fn rejects_bad_magic_and_lengths() {
        let mut bytes = encode_features(&sample(), Dtype::F64).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_features(&bad), Err(Error::Format(_))));
        bytes.push(0);
        assert!(matches!(decode_features(&bytes), Err(Error::Format(_))));
        bytes.truncate(bytes.len() - 9);
        assert!(matches!(decode_features(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode_features(b"OTFEAT"), Err(Error::Format(_))));
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let f = sample();
        let back = parse_csv(&to_csv(&f)).unwrap();
        assert_eq!(back.tag, f.tag);
        let a: Vec<u64> = f.frames.as_slice().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.frames.as_slice().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_rejects_ragged_rows() {
        assert!(parse_csv("1,2\n3\n").is_err());
        assert!(parse_csv("1,x\n").is_err());
        assert_eq!(parse_csv("# note\n\n1, 2\n").unwrap().frames.shape(), (1, 2));
    }
}
