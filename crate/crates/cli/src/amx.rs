//! AMX activation container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "AMX1" | u32 N | u32 K | N*K f32, row-major | [u32 len | len bytes of UTF-8 JSON]
//! ```

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::fsio::write_atomic;

pub const MAGIC: &[u8; 4] = b"AMX1";
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AmxMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    /// Any further keys, preserved on round trip.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmxFile {
    n: u32,
    k: u32,
    data: Vec<f32>,
    pub metadata: Option<AmxMetadata>,
}

impl AmxFile {
    pub fn new(n: usize, k: usize, data: Vec<f32>, metadata: Option<AmxMetadata>) -> CliResult<Self> {
        let (n32, k32) = match (u32::try_from(n), u32::try_from(k)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => return Err(CliError::Data(format!("dimensions {n}x{k} exceed the u32 header"))),
        };
        if n.checked_mul(k) != Some(data.len()) {
            return Err(CliError::Data(format!("{n}x{k} header but {} values", data.len())));
        }
        Ok(Self { n: n32, k: k32, data, metadata })
    }

    /// Rows are samples. Values are narrowed to f32.
    pub fn from_matrix(m: &DMatrix<f64>, metadata: Option<AmxMetadata>) -> CliResult<Self> {
        let data = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)] as f32)).collect();
        Self::new(m.nrows(), m.ncols(), data, metadata)
    }

    pub fn n(&self) -> usize {
        self.n as usize
    }

    pub fn k(&self) -> usize {
        self.k as usize
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.k(), |i, j| self.data[i * self.k() + j] as f64)
    }

    pub fn to_bytes(&self) -> CliResult<Vec<u8>> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.n.to_le_bytes());
        out.extend_from_slice(&self.k.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(meta) = &self.metadata {
            let json = serde_json::to_vec(meta).map_err(|e| CliError::Data(format!("metadata: {e}")))?;
            let len = u32::try_from(json.len()).map_err(|_| CliError::Data("metadata block too large".into()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(&json);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> CliResult<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(CliError::Data(format!("AMX file is {} bytes, shorter than its header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(CliError::Data(format!("bad AMX magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        let k = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        let count = (n as usize)
            .checked_mul(k as usize)
            .ok_or_else(|| CliError::Data(format!("AMX dimensions {n}x{k} overflow")))?;
        let payload_end = count
            .checked_mul(4)
            .and_then(|b| b.checked_add(HEADER_LEN))
            .ok_or_else(|| CliError::Data(format!("AMX dimensions {n}x{k} overflow")))?;
        if bytes.len() < payload_end {
            return Err(CliError::Data(format!(
                "AMX header declares {n}x{k} values ({} bytes) but only {} payload bytes are present",
                4 * count,
                bytes.len() - HEADER_LEN
            )));
        }
        let data = bytes[HEADER_LEN..payload_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();

        let rest = &bytes[payload_end..];
        let metadata = if rest.is_empty() {
            None
        } else {
            if rest.len() < 4 {
                return Err(CliError::Data(format!("{} stray bytes after the AMX payload", rest.len())));
            }
            let len = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
            if rest.len() - 4 != len {
                return Err(CliError::Data(format!(
                    "AMX metadata block declares {len} bytes, {} present",
                    rest.len() - 4
                )));
            }
            let text = std::str::from_utf8(&rest[4..]).map_err(|e| CliError::Data(format!("AMX metadata is not UTF-8: {e}")))?;
            Some(serde_json::from_str(text).map_err(|e| CliError::Data(format!("AMX metadata is not valid JSON: {e}")))?)
        };
        Ok(Self { n, k, data, metadata })
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, |f| f.write_all(&bytes))
    }
}
