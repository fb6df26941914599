//! `ALGO1` tensor files: a short text header followed by raw int8 bytes.
//!
//! ```text
//! ALGO1
//! dims 32 128
//! dtype int8
//! scale 0.015625
//! <32 * 128 bytes, row-major>
//! ```

use std::fs;
use std::path::Path;

use attnlego_core::Int8Matrix;
use thiserror::Error;

pub const MAGIC: &str = "ALGO1";
pub const MAX_DIMS: usize = 3;

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub scale: f64,
    pub data: Vec<i8>,
}

fn take_line<'a>(bytes: &mut &'a [u8]) -> Option<&'a str> {
    let end = bytes.iter().position(|&b| b == b'\n')?;
    let line = std::str::from_utf8(&bytes[..end]).ok()?;
    *bytes = &bytes[end + 1..];
    Some(line)
}

impl TensorFile {
    pub fn new(dims: Vec<usize>, scale: f64, data: Vec<i8>) -> Result<Self, String> {
        if dims.is_empty() || dims.len() > MAX_DIMS {
            return Err(format!("expected 1 to {MAX_DIMS} dims, got {}", dims.len()));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(format!("scale {scale} must be positive and finite"));
        }
        let want: usize = dims.iter().product();
        if data.len() != want {
            return Err(format!(
                "payload has {} bytes, dims need {want}",
                data.len()
            ));
        }
        Ok(Self { dims, scale, data })
    }

    pub fn from_matrix(m: &Int8Matrix) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            scale: m.scale(),
            data: m.data().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<Int8Matrix, String> {
        let [rows, cols] = self.dims[..] else {
            return Err(format!(
                "expected a 2-D tensor, got {} dims",
                self.dims.len()
            ));
        };
        Int8Matrix::new(rows, cols, self.data.clone(), self.scale).map_err(|e| e.to_string())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dims: Vec<String> = self.dims.iter().map(usize::to_string).collect();
        let mut out = format!(
            "{MAGIC}\ndims {}\ndtype int8\nscale {}\n",
            dims.join(" "),
            self.scale
        )
        .into_bytes();
        out.extend(self.data.iter().map(|&v| v as u8));
        out
    }

    pub fn parse(mut bytes: &[u8]) -> Result<Self, String> {
        let mut header = |what: &str| {
            take_line(&mut bytes).ok_or_else(|| format!("truncated header, expected {what}"))
        };
        if header("magic")? != MAGIC {
            return Err(format!("missing {MAGIC} magic"));
        }
        let dims_line = header("dims")?;
        let dtype_line = header("dtype")?;
        let scale_line = header("scale")?;
        let dims = dims_line
            .strip_prefix("dims ")
            .ok_or("expected `dims`")?
            .split(' ')
            .map(|d| d.parse::<usize>().map_err(|_| format!("bad dim `{d}`")))
            .collect::<Result<Vec<_>, _>>()?;
        if dtype_line != "dtype int8" {
            return Err(format!("unsupported `{dtype_line}`"));
        }
        let scale: f64 = scale_line
            .strip_prefix("scale ")
            .ok_or("expected `scale`")?
            .parse()
            .map_err(|_| format!("bad `{scale_line}`"))?;
        let want: usize = dims.iter().product();
        if bytes.len() != want {
            return Err(format!(
                "payload has {} bytes, dims need {want}",
                bytes.len()
            ));
        }
        Self::new(dims, scale, bytes.iter().map(|&b| b as i8).collect())
    }

    pub fn read(path: &Path) -> Result<Self, TensorFileError> {
        let name = path.display().to_string();
        let bytes = fs::read(path).map_err(|source| TensorFileError::Io {
            path: name.clone(),
            source,
        })?;
        Self::parse(&bytes).map_err(|message| TensorFileError::Format {
            path: name,
            message,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), TensorFileError> {
        fs::write(path, self.to_bytes()).map_err(|source| TensorFileError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}
