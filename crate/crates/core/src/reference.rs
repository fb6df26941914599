//! Golden models.
//!
//! * [`attention_float`]: double-precision `softmax(Q K^T / sqrt(d_k)) V`.
//! * [`attention_fixed_reference`]: the simulator's arithmetic written as
//!   plain loops (same ADC steps, accumulator widths, requantizers, exponent
//!   table and normalizer) with no state machines, DMA or scheduling. The
//!   simulator is required to match it bit for bit.
//! * [`compare`]: element-wise error report.

use serde::Serialize;

use crate::config::{resolve_shifts, AttentionConfig, ResolvedShifts, PROBABILITY_FRACTION_BITS};
use crate::error::{Result, SimError};
use crate::input_process::{Bank, STACK_SUM_BITS};
use crate::numerics::{
    adc_convert, dequantize, quantize, round_half_even_div, saturate_signed, saturating_accumulate,
    shift_round_saturate, FixedWord,
};
use crate::pim_macro::{ApimGeometry, ACCUMULATOR_BITS};
use crate::workload::{Int8Matrix, RealMatrix, Workload};

/// Row softmax with max subtraction.
pub fn softmax_float(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(SimError::InvalidArgument(
            "softmax of an empty vector".into(),
        ));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `softmax(Q K^T / sqrt(d_k)) V`, row-wise softmax.
pub fn attention_float(
    q: &RealMatrix,
    k: &RealMatrix,
    v: &RealMatrix,
    d_k: usize,
) -> Result<RealMatrix> {
    if q.cols != k.cols {
        return Err(SimError::Shape(format!(
            "Q has {} columns, K has {}",
            q.cols, k.cols
        )));
    }
    if k.rows != v.rows {
        return Err(SimError::Shape(format!(
            "K has {} rows, V has {}",
            k.rows, v.rows
        )));
    }
    if d_k == 0 {
        return Err(SimError::InvalidArgument("d_k must be non-zero".into()));
    }
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut out = Vec::with_capacity(q.rows * v.cols);
    for i in 0..q.rows {
        let scores: Vec<f64> = (0..k.rows)
            .map(|j| {
                q.row(i)
                    .iter()
                    .zip(k.row(j))
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    * scale
            })
            .collect();
        let weights = softmax_float(&scores)?;
        for c in 0..v.cols {
            out.push(
                weights
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * v.get(j, c))
                    .sum(),
            );
        }
    }
    RealMatrix::new(q.rows, v.cols, out)
}

/// Float attention of a workload: `Q = X W_Q` etc. from dequantized codes.
pub fn attention_float_for(workload: &Workload, d_k: usize) -> Result<RealMatrix> {
    let x = workload.tokens.dequantize();
    let q = x.matmul(&workload.weights.q.dequantize())?;
    let k = x.matmul(&workload.weights.k.dequantize())?;
    let v = x.matmul(&workload.weights.v.dequantize())?;
    attention_float(&q, &k, &v, d_k)
}

/// Every intermediate of the fixed-point pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedOutputs {
    pub q: Int8Matrix,
    pub k: Int8Matrix,
    pub v: Int8Matrix,
    /// `seq_len x seq_len` int8 scores.
    pub scores: Vec<Vec<i8>>,
    /// `seq_len x seq_len` Q0.8 probabilities.
    pub probs: Vec<Vec<u8>>,
    /// `seq_len x d_k` int8 attention outputs.
    pub outputs: Int8Matrix,
    pub shifts: ResolvedShifts,
}

/// One requantized projection row, following the macro stacking, port
/// sharing and step order of the hardware.
fn project_token(
    x: &[i8],
    w: &Int8Matrix,
    g: &ApimGeometry,
    config: &AttentionConfig,
    shift: u32,
) -> Vec<i8> {
    let d_k = w.cols();
    let rpp = g.rows_per_port();
    let mut stack = vec![0i64; d_k];
    let mut acc = vec![0i64; d_k];
    let mut partial = vec![0i64; d_k];
    for m in 0..config.d_model / g.rows {
        acc.iter_mut().for_each(|a| *a = 0);
        for rs in 0..rpp {
            partial.iter_mut().for_each(|p| *p = 0);
            for port in 0..g.input_parallelism {
                let r = m * g.rows + port * rpp + rs;
                let xv = x[r] as i64;
                if xv == 0 {
                    continue;
                }
                for (p, &wv) in partial.iter_mut().zip(w.row(r)) {
                    *p += xv * wv as i64;
                }
            }
            for (a, &p) in acc.iter_mut().zip(&partial) {
                *a = saturating_accumulate(*a, adc_convert(p, &config.adc), ACCUMULATOR_BITS);
            }
        }
        for (s, &a) in stack.iter_mut().zip(&acc) {
            *s = saturating_accumulate(*s, a, STACK_SUM_BITS);
        }
    }
    stack
        .iter()
        .map(|&s| shift_round_saturate(s, shift, 8) as i8)
        .collect()
}

fn score_entry(q: &[i8], k: &[i8], g: &ApimGeometry, config: &AttentionConfig, shift: u32) -> i8 {
    let rpp = g.rows_per_port();
    let mut total = 0i64;
    for s in 0..config.d_k / g.rows {
        let mut acc = 0i64;
        for rs in 0..rpp {
            let partial: i64 = (0..g.input_parallelism)
                .map(|p| {
                    let d = s * g.rows + p * rpp + rs;
                    q[d] as i64 * k[d] as i64
                })
                .sum();
            acc = saturating_accumulate(acc, adc_convert(partial, &config.adc), ACCUMULATOR_BITS);
        }
        total = saturating_accumulate(total, acc, STACK_SUM_BITS);
    }
    shift_round_saturate(total, shift, 8) as i8
}

fn exp_table(config: &AttentionConfig) -> Result<Vec<u16>> {
    (0..256u16)
        .map(|i| {
            let code = i as u8 as i8 as i64;
            let x = dequantize(FixedWord::new(code, config.lut_in_format)?);
            Ok(quantize(x.exp(), config.lut_out_format)?.raw() as u16)
        })
        .collect()
}

fn softmax_row(scores: &[i8], table: &[u16]) -> Vec<u8> {
    let max = *scores.iter().max().expect("non-empty row") as i64;
    let exps: Vec<u64> = scores
        .iter()
        .map(|&v| table[saturate_signed(v as i64 - max, 8) as i8 as u8 as usize] as u64)
        .collect();
    let sum: u64 = exps.iter().sum();
    exps.iter()
        .map(|&e| {
            if sum == 0 {
                0
            } else {
                round_half_even_div((e as i128) << PROBABILITY_FRACTION_BITS, sum as i128)
                    .clamp(0, 255) as u8
            }
        })
        .collect()
}

/// Cycle-free fixed-point attention with the simulator's exact numerics.
pub fn attention_fixed_reference(
    workload: &Workload,
    config: &AttentionConfig,
) -> Result<FixedOutputs> {
    let shifts = resolve_shifts(config, workload)?;
    let g = config.input_apim;
    let project = |bank: Bank| -> Result<Int8Matrix> {
        let w = workload.weights.bank(bank);
        let rows: Vec<Vec<i8>> = (0..config.seq_len)
            .map(|t| {
                project_token(
                    workload.tokens.row(t),
                    w,
                    &g,
                    config,
                    shifts.projection(bank),
                )
            })
            .collect();
        Int8Matrix::from_rows(&rows, shifts.projection_scales[bank.index()])
    };
    let q = project(Bank::Q)?;
    let k = project(Bank::K)?;
    let v = project(Bank::V)?;

    let sg = config.score_apim;
    let scores: Vec<Vec<i8>> = (0..config.seq_len)
        .map(|t| {
            (0..config.seq_len)
                .map(|j| score_entry(q.row(t), k.row(j), &sg, config, shifts.score))
                .collect()
        })
        .collect();

    let table = exp_table(config)?;
    let probs: Vec<Vec<u8>> = scores.iter().map(|row| softmax_row(row, &table)).collect();
    let outputs = value_stage(&probs, &v, shifts.value, shifts.output_scale)?;
    Ok(FixedOutputs {
        q,
        k,
        v,
        scores,
        probs,
        outputs,
        shifts,
    })
}

/// `out[t][c] = requant(sum_j p[t][j] * v[j][c], shift)`.
pub fn value_stage(
    probs: &[Vec<u8>],
    v: &Int8Matrix,
    shift: u32,
    scale: f64,
) -> Result<Int8Matrix> {
    let rows: Vec<Vec<i8>> = probs
        .iter()
        .map(|p| {
            (0..v.cols())
                .map(|c| {
                    let sum: i64 = p
                        .iter()
                        .enumerate()
                        .map(|(j, &pj)| pj as i64 * v.get(j, c) as i64)
                        .sum();
                    shift_round_saturate(sum, shift, 8) as i8
                })
                .collect()
        })
        .collect();
    Int8Matrix::from_rows(&rows, scale)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub max_abs_error: f64,
    pub mean_abs_error: f64,
    pub bit_exact: bool,
    pub within_tolerance: bool,
    pub mismatch_count: usize,
    /// `(row, col)` of differing elements, first 64 only.
    pub mismatches: Vec<(usize, usize)>,
}

const MAX_REPORTED_MISMATCHES: usize = 64;

/// Element-wise comparison; `within_tolerance` when the largest absolute
/// error is at most `tolerance`.
pub fn compare(
    simulated: &RealMatrix,
    reference: &RealMatrix,
    tolerance: f64,
) -> Result<ComparisonReport> {
    if (simulated.rows, simulated.cols) != (reference.rows, reference.cols) {
        return Err(SimError::Shape(format!(
            "comparing {}x{} against {}x{}",
            simulated.rows, simulated.cols, reference.rows, reference.cols
        )));
    }
    let mut max_abs_error = 0.0f64;
    let mut total = 0.0;
    let mut mismatch_count = 0;
    let mut mismatches = Vec::new();
    for (i, (a, b)) in simulated.data.iter().zip(&reference.data).enumerate() {
        let err = (a - b).abs();
        max_abs_error = max_abs_error.max(err);
        total += err;
        if a != b {
            mismatch_count += 1;
            if mismatches.len() < MAX_REPORTED_MISMATCHES {
                mismatches.push((i / simulated.cols.max(1), i % simulated.cols.max(1)));
            }
        }
    }
    let n = simulated.data.len();
    Ok(ComparisonReport {
        max_abs_error,
        mean_abs_error: if n == 0 { 0.0 } else { total / n as f64 },
        bit_exact: mismatch_count == 0,
        within_tolerance: max_abs_error <= tolerance,
        mismatch_count,
        mismatches,
    })
}

/// Compares raw codes; errors are in LSBs.
pub fn compare_codes(
    simulated: &Int8Matrix,
    reference: &Int8Matrix,
    tolerance_lsb: f64,
) -> Result<ComparisonReport> {
    let lsb = |m: &Int8Matrix| {
        RealMatrix::new(
            m.rows(),
            m.cols(),
            m.data().iter().map(|&v| v as f64).collect(),
        )
    };
    compare(&lsb(simulated)?, &lsb(reference)?, tolerance_lsb)
}
