//! Behavioral model of one APIM macro: a weight-stationary array of signed
//! 8-bit cells with port-shared rows/columns and a column ADC.
//!
//! Input port `p` drives rows `p * rows_per_port + row_step`; output port `q`
//! senses column `q * cols_per_port + col_group`. One `mvm_step` activates one
//! row per input port against one column per output port and costs one cycle.

use serde::{Deserialize, Serialize};

use crate::error::{check_index, check_len, Result, SimError};
use crate::numerics::{adc_convert, saturating_accumulate, AdcConfig};

/// Width of the per-column accumulators that collect step results.
pub const ACCUMULATOR_BITS: u32 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApimGeometry {
    pub rows: usize,
    pub cols: usize,
    pub input_parallelism: usize,
    pub output_parallelism: usize,
}

impl ApimGeometry {
    pub fn new(
        rows: usize,
        cols: usize,
        input_parallelism: usize,
        output_parallelism: usize,
    ) -> Result<Self> {
        let g = Self {
            rows,
            cols,
            input_parallelism,
            output_parallelism,
        };
        g.validate()?;
        Ok(g)
    }

    /// 128x128 macro with 16 input and 16 output ports.
    pub fn input_process_default() -> Self {
        Self {
            rows: 128,
            cols: 128,
            input_parallelism: 16,
            output_parallelism: 16,
        }
    }

    /// 32x32 macro used by the score engine.
    pub fn score_default() -> Self {
        Self {
            rows: 32,
            cols: 32,
            input_parallelism: 16,
            output_parallelism: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0
            || self.cols == 0
            || self.input_parallelism == 0
            || self.output_parallelism == 0
        {
            return Err(SimError::InvalidArgument(
                "APIM geometry must be non-zero".into(),
            ));
        }
        if !self.rows.is_multiple_of(self.input_parallelism) {
            return Err(SimError::InvalidArgument(format!(
                "input parallelism {} does not divide {} rows",
                self.input_parallelism, self.rows
            )));
        }
        if !self.cols.is_multiple_of(self.output_parallelism) {
            return Err(SimError::InvalidArgument(format!(
                "output parallelism {} does not divide {} cols",
                self.output_parallelism, self.cols
            )));
        }
        Ok(())
    }

    pub fn rows_per_port(&self) -> usize {
        self.rows / self.input_parallelism
    }

    pub fn cols_per_port(&self) -> usize {
        self.cols / self.output_parallelism
    }

    /// Cycles for one full matrix-vector product.
    pub fn mvm_cycles(&self) -> u64 {
        (self.rows_per_port() * self.cols_per_port()) as u64
    }

    /// `(row_step, col_group)` for step number `index`, row_step-major.
    pub fn step_coords(&self, index: usize) -> (usize, usize) {
        (index / self.cols_per_port(), index % self.cols_per_port())
    }
}

/// Reusable port/partial-sum buffers for [`ApimMacro::accumulate_step`].
#[derive(Debug, Clone, Default)]
pub struct StepScratch {
    ports: Vec<i8>,
    partial: Vec<i64>,
}

impl StepScratch {
    fn resize(&mut self, g: &ApimGeometry) {
        self.ports.resize(g.input_parallelism, 0);
        self.partial.resize(g.output_parallelism, 0);
    }
}

#[derive(Debug, Clone)]
pub struct ApimMacro {
    geometry: ApimGeometry,
    cells: Vec<i8>,
    write_counts: Vec<u32>,
    adc: AdcConfig,
}

impl ApimMacro {
    pub fn new(geometry: ApimGeometry, adc: AdcConfig) -> Result<Self> {
        geometry.validate()?;
        adc.validate()?;
        let n = geometry.rows * geometry.cols;
        Ok(Self {
            geometry,
            cells: vec![0; n],
            write_counts: vec![0; n],
            adc,
        })
    }

    pub fn geometry(&self) -> &ApimGeometry {
        &self.geometry
    }

    pub fn adc(&self) -> &AdcConfig {
        &self.adc
    }

    fn check_cell(&self, row: usize, col: usize) -> Result<usize> {
        check_index("row", row, self.geometry.rows)?;
        check_index("col", col, self.geometry.cols)?;
        Ok(row * self.geometry.cols + col)
    }

    pub fn write_cell(&mut self, row: usize, col: usize, value: i8) -> Result<()> {
        let i = self.check_cell(row, col)?;
        self.cells[i] = value;
        self.write_counts[i] += 1;
        Ok(())
    }

    pub fn read_cell(&self, row: usize, col: usize) -> Result<i8> {
        Ok(self.cells[self.check_cell(row, col)?])
    }

    /// Number of times a cell has been written since construction.
    pub fn write_count(&self, row: usize, col: usize) -> Result<u32> {
        Ok(self.write_counts[self.check_cell(row, col)?])
    }

    pub fn max_write_count(&self) -> u32 {
        self.write_counts.iter().copied().max().unwrap_or(0)
    }

    /// One port-parallel step; returns `output_parallelism` ADC-converted
    /// partial sums, one per output port.
    pub fn mvm_step(&self, inputs: &[i8], row_step: usize, col_group: usize) -> Result<Vec<i64>> {
        let mut out = vec![0; self.geometry.output_parallelism];
        self.mvm_step_into(inputs, row_step, col_group, &mut out)?;
        Ok(out)
    }

    /// Allocation-free form of [`mvm_step`](Self::mvm_step).
    pub fn mvm_step_into(
        &self,
        inputs: &[i8],
        row_step: usize,
        col_group: usize,
        out: &mut [i64],
    ) -> Result<()> {
        let g = &self.geometry;
        check_len("mvm_step inputs", inputs.len(), g.input_parallelism)?;
        check_len("mvm_step outputs", out.len(), g.output_parallelism)?;
        check_index("row_step", row_step, g.rows_per_port())?;
        check_index("col_group", col_group, g.cols_per_port())?;
        let rpp = g.rows_per_port();
        let cpp = g.cols_per_port();
        out.iter_mut().for_each(|o| *o = 0);
        for (port, &x) in inputs.iter().enumerate() {
            if x == 0 {
                continue;
            }
            let row = port * rpp + row_step;
            let base = row * g.cols + col_group;
            let x = x as i64;
            for (q, o) in out.iter_mut().enumerate() {
                *o += x * self.cells[base + q * cpp] as i64;
            }
        }
        for o in out.iter_mut() {
            *o = adc_convert(*o, &self.adc);
        }
        Ok(())
    }

    /// Gathers the inputs seen by the ports at `row_step` from a full
    /// `rows`-long input vector.
    pub fn port_inputs(&self, input: &[i8], row_step: usize, ports: &mut [i8]) {
        let rpp = self.geometry.rows_per_port();
        for (p, slot) in ports.iter_mut().enumerate() {
            *slot = input[p * rpp + row_step];
        }
    }

    /// Adds the step at `(row_step, col_group)` into `acc` (one entry per
    /// column) with saturating 24-bit accumulation.
    pub fn accumulate_step(
        &self,
        input: &[i8],
        row_step: usize,
        col_group: usize,
        acc: &mut [i64],
        scratch: &mut StepScratch,
    ) -> Result<()> {
        let g = self.geometry;
        check_len("accumulate_step input", input.len(), g.rows)?;
        check_len("accumulate_step accumulators", acc.len(), g.cols)?;
        scratch.resize(&g);
        self.port_inputs(input, row_step, &mut scratch.ports);
        self.mvm_step_into(&scratch.ports, row_step, col_group, &mut scratch.partial)?;
        let cpp = g.cols_per_port();
        for (q, p) in scratch.partial.iter().enumerate() {
            let col = q * cpp + col_group;
            acc[col] = saturating_accumulate(acc[col], *p, ACCUMULATOR_BITS);
        }
        Ok(())
    }

    /// Full matrix-vector product `W^T x` by iterating every step in
    /// row_step-major order. Returns the column accumulators and the cycle
    /// count.
    pub fn mvm_full(&self, input: &[i8]) -> Result<(Vec<i64>, u64)> {
        let g = self.geometry;
        check_len("mvm_full input", input.len(), g.rows)?;
        let mut acc = vec![0i64; g.cols];
        let mut scratch = StepScratch::default();
        let steps = g.mvm_cycles() as usize;
        for i in 0..steps {
            let (rs, cg) = g.step_coords(i);
            self.accumulate_step(input, rs, cg, &mut acc, &mut scratch)?;
        }
        Ok((acc, steps as u64))
    }
}
