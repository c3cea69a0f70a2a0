//! File formats: trajectory CSV, binary checkpoints and small text helpers.
//!
//! # Checkpoint layout
//!
//! All integers are little-endian.
//!
//! | field | type |
//! |---|---|
//! | magic `CALVNET1` | 8 bytes |
//! | seed | u64 |
//! | problem name | u32 length + UTF-8 bytes |
//! | hidden width, hidden layers | u32, u32 |
//! | slice count | u32 |
//! | per slice: name, head code (255 = scalar), offset, length | u32 + bytes, u8, u64, u64 |
//! | parameter count | u64 |
//! | parameters | f64 each |

use std::fs;
use std::path::Path;

use crate::autodiff::{ParameterStore, Slice};
use crate::error::{Error, Result};
use crate::networks::{Head, NetworkShape};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CALVNET1";
const SCALAR_CODE: u8 = 255;

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// A float with 17 significant digits, enough to read back the same bits.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn format_csv<S: AsRef<str>>(header: &[S], rows: &[Vec<f64>]) -> String {
    let mut out = header.iter().map(|h| h.as_ref()).collect::<Vec<_>>().join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|&v| format_float(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn write_csv<S: AsRef<str>>(path: &Path, header: &[S], rows: &[Vec<f64>]) -> Result<()> {
    write_text(path, &format_csv(header, rows))
}

/// Header and numeric rows of a CSV file written by [`write_csv`].
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::usage("empty CSV"))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::usage(format!("CSV row {}: {e}", i + 1)))?;
        if row.len() != header.len() {
            return Err(Error::usage(format!(
                "CSV row {} has {} cells, header has {}",
                i + 1,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    parse_csv(&read_text(path)?)
}

/// Trained parameters together with what is needed to rebuild the problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub problem: String,
    pub seed: u64,
    pub shape: NetworkShape,
    /// Head of every network slice; slices not listed are scalars.
    pub heads: Vec<(String, Head)>,
    pub params: ParameterStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&self.seed.to_le_bytes());
        put_str(&mut b, &self.problem);
        b.extend_from_slice(&(self.shape.width as u32).to_le_bytes());
        b.extend_from_slice(&(self.shape.hidden_layers as u32).to_le_bytes());
        let slices = self.params.slices();
        b.extend_from_slice(&(slices.len() as u32).to_le_bytes());
        for s in slices {
            put_str(&mut b, &s.name);
            let code = self
                .heads
                .iter()
                .find(|(n, _)| *n == s.name)
                .map_or(SCALAR_CODE, |(_, h)| h.code());
            b.push(code);
            b.extend_from_slice(&(s.offset as u64).to_le_bytes());
            b.extend_from_slice(&(s.len as u64).to_le_bytes());
        }
        let values = self.params.values();
        b.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::usage("not a checkpoint file (bad magic)"));
        }
        let seed = r.u64()?;
        let problem = r.string()?;
        let shape = NetworkShape {
            width: r.u32()? as usize,
            hidden_layers: r.u32()? as usize,
        };
        let count = r.u32()? as usize;
        let mut slices = Vec::with_capacity(count);
        let mut heads = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let code = r.take(1)?[0];
            if code != SCALAR_CODE {
                let head = Head::from_code(code)
                    .ok_or_else(|| Error::usage(format!("unknown head code {code}")))?;
                heads.push((name.clone(), head));
            }
            slices.push(Slice {
                name,
                offset: r.u64()? as usize,
                len: r.u64()? as usize,
            });
        }
        let n = r.u64()? as usize;
        if bytes.len() - r.pos != 8 * n {
            return Err(Error::usage("checkpoint length does not match its parameter count"));
        }
        let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<f64>>>()?;
        Ok(Self {
            problem,
            seed,
            shape,
            heads,
            params: ParameterStore::from_parts(values, slices)?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Checks that `template` (a freshly built store for the same problem)
    /// has the same slice layout and returns the stored values in it.
    pub fn restore_into(&self, template: &ParameterStore) -> Result<ParameterStore> {
        if template.slices() != self.params.slices() {
            return Err(Error::usage(
                "checkpoint parameter layout does not match the configured problem",
            ));
        }
        Ok(self.params.clone())
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::usage("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::usage("checkpoint string is not UTF-8"))
    }
}
