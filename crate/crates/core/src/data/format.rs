//! Binary dataset container and the `time_s,value` CSV import format.
//!
//! Header (64 bytes, little-endian):
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 8    | magic `DREMDATA`               |
//! | 8      | 4    | version                        |
//! | 12     | 4    | flags (bit 0: clean present)    |
//! | 16     | 8    | gates per record `T`           |
//! | 24     | 8    | record count                   |
//! | 32     | 8    | generator seed                 |
//! | 40     | 16   | units, UTF-8, zero padded      |
//! | 56     | 8    | reserved                       |
//!
//! Each record is `3T + 2` f64 values: gates, clean, noisy, eps, scale.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use super::{NormMeta, SignalRecord};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DREMDATA";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 64;
pub const DEFAULT_UNITS: &str = "nV/m^2";
const FLAG_CLEAN: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub signal_len: usize,
    pub seed: u64,
    pub units: String,
    /// Whether `clean` carries ground truth; otherwise it is zero-filled.
    pub has_clean: bool,
    pub records: Vec<SignalRecord>,
}

impl Dataset {
    pub fn byte_len(signal_len: usize, count: usize) -> usize {
        HEADER_LEN + count * (3 * signal_len + 2) * 8
    }
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let t = ds.signal_len;
    let units = ds.units.as_bytes();
    if units.len() > 16 {
        return Err(Error::Format(format!("units `{}` longer than 16 bytes", ds.units)));
    }
    let mut out = Vec::with_capacity(Dataset::byte_len(t, ds.records.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(if ds.has_clean { FLAG_CLEAN } else { 0 }).to_le_bytes());
    out.extend_from_slice(&(t as u64).to_le_bytes());
    out.extend_from_slice(&(ds.records.len() as u64).to_le_bytes());
    out.extend_from_slice(&ds.seed.to_le_bytes());
    let mut padded = [0u8; 16];
    padded[..units.len()].copy_from_slice(units);
    out.extend_from_slice(&padded);
    out.extend_from_slice(&[0u8; 8]);
    for (i, r) in ds.records.iter().enumerate() {
        if r.gate_times.len() != t || r.clean.len() != t || r.noisy.len() != t {
            return Err(Error::Format(format!("record {i} does not have {t} gates")));
        }
        for v in r.gate_times.iter().chain(&r.clean).chain(&r.noisy) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&r.norm.eps.to_le_bytes());
        out.extend_from_slice(&r.norm.scale.to_le_bytes());
    }
    Ok(out)
}

fn take<const N: usize>(bytes: &[u8], at: usize) -> [u8; N] {
    let mut a = [0u8; N];
    a.copy_from_slice(&bytes[at..at + N]);
    a
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            needed: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(bytes, 8));
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let flags = u32::from_le_bytes(take(bytes, 12));
    let t = u64::from_le_bytes(take(bytes, 16)) as usize;
    let count = u64::from_le_bytes(take(bytes, 24)) as usize;
    let seed = u64::from_le_bytes(take(bytes, 32));
    let units_raw: [u8; 16] = take(bytes, 40);
    let end = units_raw.iter().position(|&b| b == 0).unwrap_or(16);
    let units = core::str::from_utf8(&units_raw[..end])
        .map_err(|_| Error::Format("units are not UTF-8".into()))?
        .into();
    let needed = t
        .checked_mul(3)
        .and_then(|x| x.checked_add(2))
        .and_then(|x| x.checked_mul(8))
        .and_then(|x| x.checked_mul(count))
        .and_then(|x| x.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format("header sizes overflow".into()))?;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            needed,
            found: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - needed)));
    }
    let mut pos = HEADER_LEN;
    let mut read = |n: usize| {
        let v: Vec<f64> = bytes[pos..pos + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        pos += 8 * n;
        v
    };
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let gate_times = read(t);
        let clean = read(t);
        let noisy = read(t);
        let meta = read(2);
        records.push(SignalRecord {
            gate_times,
            clean,
            noisy,
            norm: NormMeta {
                eps: meta[0],
                scale: meta[1],
            },
        });
    }
    Ok(Dataset {
        signal_len: t,
        seed,
        units,
        has_clean: flags & FLAG_CLEAN != 0,
        records,
    })
}

const CSV_HEADER: &str = "time_s,value";

fn csv_error(line: usize, message: String) -> Error {
    Error::Config { line, message }
}

/// Parses blank-line separated `time_s,value` blocks into `(times, values)`.
/// A `time_s,value` header line may open any block.
pub fn parse_forward_csv(text: &str) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut blocks = Vec::new();
    let mut times: Vec<f64> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut flush = |times: &mut Vec<f64>, values: &mut Vec<f64>| {
        if !times.is_empty() {
            blocks.push((core::mem::take(times), core::mem::take(values)));
        }
    };
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            flush(&mut times, &mut values);
            continue;
        }
        if times.is_empty() && line.replace(' ', "") == CSV_HEADER {
            continue;
        }
        let mut cells = line.split(',').map(str::trim);
        let (Some(a), Some(b), None) = (cells.next(), cells.next(), cells.next()) else {
            return Err(csv_error(line_no, format!("expected two columns, got `{line}`")));
        };
        let parse = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| csv_error(line_no, format!("non-numeric cell `{s}`")))
        };
        let (t, v) = (parse(a)?, parse(b)?);
        if t <= 0.0 {
            return Err(csv_error(line_no, format!("gate time must be > 0, got {t}")));
        }
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(csv_error(line_no, format!("gate times not increasing ({prev} then {t})")));
            }
        }
        times.push(t);
        values.push(v);
    }
    flush(&mut times, &mut values);
    Ok(blocks)
}

/// Inverse of [`parse_forward_csv`]; values print at full precision.
pub fn format_forward_csv<'a>(blocks: impl IntoIterator<Item = (&'a [f64], &'a [f64])>) -> String {
    let mut s = String::new();
    for (i, (times, values)) in blocks.into_iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        s.push_str(CSV_HEADER);
        s.push('\n');
        for (t, v) in times.iter().zip(values) {
            let _ = writeln!(s, "{t:?},{v:?}");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn record(k: f64) -> SignalRecord {
        SignalRecord {
            gate_times: vec![1e-5, 1e-4, 1e-3],
            clean: vec![k, k / 3.0, k / 7.0],
            noisy: vec![k + 0.1, -0.2, k / 9.0],
            norm: NormMeta::default(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = Dataset {
            signal_len: 3,
            seed: 42,
            units: "nV/m^2".into(),
            has_clean: true,
            records: vec![record(1.0), record(core::f64::consts::PI)],
        };
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(bytes.len(), Dataset::byte_len(3, 2));
        assert_eq!(decode_dataset(&bytes).unwrap(), ds);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let ds = Dataset {
            signal_len: 200,
            seed: 1,
            units: "nV/m^2".into(),
            has_clean: false,
            records: vec![],
        };
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(decode_dataset(&bytes).unwrap(), ds);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let ds = Dataset {
            signal_len: 3,
            seed: 0,
            units: "nV/m^2".into(),
            has_clean: true,
            records: vec![record(2.0)],
        };
        let bytes = encode_dataset(&ds).unwrap();
        assert!(matches!(decode_dataset(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        assert!(matches!(decode_dataset(&bytes[..10]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::Format(_))));
        let mut v2 = bytes;
        v2[8] = 2;
        assert_eq!(
            decode_dataset(&v2),
            Err(Error::Version {
                found: 2,
                expected: VERSION
            })
        );
    }

    #[test]
    fn csv_parsing() {
        let one = parse_forward_csv("time_s,value\n1e-5,3.5\n2e-5,1.25\n").unwrap();
        assert_eq!(one, vec![(vec![1e-5, 2e-5], vec![3.5, 1.25])]);
        let two = parse_forward_csv("1,2\n2,1\n\n\n1,5\n3,4\n").unwrap();
        assert_eq!(two.len(), 2);
        for (text, line) in [
            ("1,2\n-1,3\n", 2),
            ("1,2\n1,3\n", 2),
            ("1,abc\n", 1),
            ("time_s,value\n1,2,3\n", 2),
        ] {
            match parse_forward_csv(text) {
                Err(Error::Config { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let t = vec![1e-5, 1.2345678901234567e-4, 0.01];
        let v = vec![1.0 / 3.0, -2.5e-17, 123456.789];
        let text = format_forward_csv([(t.as_slice(), v.as_slice()), (t.as_slice(), t.as_slice())]);
        let back = parse_forward_csv(&text).unwrap();
        assert_eq!(back, vec![(t.clone(), v), (t.clone(), t)]);
    }
}
