//! Tensors fed to the accelerator: int8 weight matrices and token rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::AttentionConfig;
use crate::error::{check_index, Result, SimError};
use crate::input_process::Bank;

/// Row-major int8 matrix with a real-valued scale (`real = code * scale`).
#[derive(Debug, Clone, PartialEq)]
pub struct Int8Matrix {
    rows: usize,
    cols: usize,
    data: Vec<i8>,
    scale: f64,
}

impl Int8Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<i8>, scale: f64) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SimError::Shape(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(SimError::InvalidArgument(format!(
                "matrix scale {scale} must be positive"
            )));
        }
        Ok(Self {
            rows,
            cols,
            data,
            scale,
        })
    }

    pub fn zeros(rows: usize, cols: usize, scale: f64) -> Result<Self> {
        Self::new(rows, cols, vec![0; rows * cols], scale)
    }

    pub fn from_rows(rows: &[Vec<i8>], scale: f64) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(SimError::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat(), scale)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[i8] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> i8 {
        self.data[r * self.cols + c]
    }

    pub fn column(&self, c: usize) -> Result<Vec<i8>> {
        check_index("column", c, self.cols)?;
        Ok((0..self.rows).map(|r| self.get(r, c)).collect())
    }

    pub fn dequantize(&self) -> RealMatrix {
        RealMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v as f64 * self.scale).collect(),
        }
    }
}

/// Row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RealMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SimError::Shape(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(SimError::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `self * other`.
    pub fn matmul(&self, other: &RealMatrix) -> Result<RealMatrix> {
        if self.cols != other.rows {
            return Err(SimError::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            let dst = &mut out[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                for (d, &b) in dst.iter_mut().zip(other.row(k)) {
                    *d += a * b;
                }
            }
        }
        RealMatrix::new(self.rows, other.cols, out)
    }
}

/// `W_Q`, `W_K`, `W_V`, each `d_model x d_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub q: Int8Matrix,
    pub k: Int8Matrix,
    pub v: Int8Matrix,
}

impl Weights {
    pub fn bank(&self, bank: Bank) -> &Int8Matrix {
        match bank {
            Bank::Q => &self.q,
            Bank::K => &self.k,
            Bank::V => &self.v,
        }
    }
}

/// Everything one inference run consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub weights: Weights,
    /// `seq_len x d_model`.
    pub tokens: Int8Matrix,
}

impl Workload {
    pub fn validate(&self, config: &AttentionConfig) -> Result<()> {
        let want_w = (config.d_model, config.d_k);
        for bank in Bank::ALL {
            let got = self.weights.bank(bank).shape();
            if got != want_w {
                return Err(SimError::Shape(format!(
                    "W_{bank:?} is {}x{}, config wants {}x{}",
                    got.0, got.1, want_w.0, want_w.1
                )));
            }
        }
        let want_t = (config.seq_len, config.d_model);
        if self.tokens.shape() != want_t {
            return Err(SimError::Shape(format!(
                "tokens are {}x{}, config wants {}x{}",
                self.tokens.rows(),
                self.tokens.cols(),
                want_t.0,
                want_t.1
            )));
        }
        Ok(())
    }

    /// Random int8 workload for `config`, reproducible from `seed`.
    ///
    /// Token codes are uniform on [-127, 127] with scale 2^-6 and weight
    /// codes uniform on [-127, 127] with scale 2^-9.
    pub fn random(config: &AttentionConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |rows: usize, cols: usize, scale: f64| {
            let data = (0..rows * cols)
                .map(|_| rng.gen_range(-127i8..=127))
                .collect();
            Int8Matrix::new(rows, cols, data, scale).expect("shape by construction")
        };
        let w_scale = (-9f64).exp2();
        let q = mat(config.d_model, config.d_k, w_scale);
        let k = mat(config.d_model, config.d_k, w_scale);
        let v = mat(config.d_model, config.d_k, w_scale);
        let tokens = mat(config.seq_len, config.d_model, (-6f64).exp2());
        Self {
            weights: Weights { q, k, v },
            tokens,
        }
    }
}
