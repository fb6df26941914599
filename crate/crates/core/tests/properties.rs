use attnlego_core::controller::{format_trace, parse_trace, ModuleId, TraceRecord};
use attnlego_core::dma::{pack_beats, transfer_cycles, unpack_beats, ChannelId, DmaChannel};
use attnlego_core::input_process::{InputProcessConfig, STACK_SUM_BITS};
use attnlego_core::numerics::{
    adc_convert, dequantize, quantize, round_half_even_div, saturate_signed, shift_round_saturate,
    AdcConfig,
};
use attnlego_core::reference::{attention_float, softmax_float};
use attnlego_core::score::ScoreConfig;
use attnlego_core::softmax::generate_exp_lut;
use attnlego_core::{
    run_inference, ApimGeometry, ApimMacro, AttentionConfig, Bank, InputProcess, QFormat,
    RealMatrix, Score, Softmax, Workload,
};
use proptest::prelude::*;

fn default_softmax() -> Softmax {
    Softmax::new(
        generate_exp_lut(QFormat::signed_q(4, 3), QFormat::unsigned_q(1, 15)).unwrap(),
        32,
    )
    .unwrap()
}

proptest! {
    #[test]
    fn quantize_error_within_half_lsb(x in -15.9f64..15.9, i in 0u32..5, f in 0u32..12) {
        let fmt = QFormat::signed_q(i, f);
        let w = quantize(x, fmt).unwrap();
        prop_assert!(fmt.contains_code(w.raw()));
        if x >= fmt.min_value() && x <= fmt.max_value() {
            prop_assert!((dequantize(w) - x).abs() <= fmt.scale() / 2.0 + 1e-12);
        }
    }

    #[test]
    fn saturate_is_clamp(v in any::<i64>(), width in 1u32..=32) {
        let lo = -(1i64 << (width - 1));
        let hi = (1i64 << (width - 1)) - 1;
        prop_assert_eq!(saturate_signed(v, width), v.clamp(lo, hi));
    }

    #[test]
    fn round_half_even_div_nearest(n in -1_000_000i128..1_000_000, d in 1i128..1000) {
        let q = round_half_even_div(n, d);
        let err = (q * d - n).abs();
        prop_assert!(2 * err <= d);
        if 2 * err == d {
            prop_assert_eq!(q % 2, 0);
        }
    }

    #[test]
    fn shift_round_saturate_matches_float(v in -(1i64 << 40)..(1i64 << 40), s in 0u32..30) {
        let exact = v as f64 / (1u64 << s) as f64;
        let want = exact.round_ties_even().clamp(-128.0, 127.0) as i64;
        prop_assert_eq!(shift_round_saturate(v, s, 8), want);
    }

    #[test]
    fn adc_ideal_identity(s in any::<i32>()) {
        prop_assert_eq!(adc_convert(s as i64, &AdcConfig::ideal()), s as i64);
    }

    #[test]
    fn adc_quantized_error_bound(bits in 1u32..=10, fs in 1000i64..1_000_000, frac in -1.0f64..1.0) {
        let adc = AdcConfig::quantized(bits, fs);
        let step = adc.step();
        let s = (frac * fs as f64) as i64;
        let out = adc_convert(s, &adc);
        // the top code sits one step below +full_scale
        let top = (adc.max_code() as f64 + 0.5) * step;
        if (s as f64) < top {
            prop_assert!(((out - s) as f64).abs() <= step / 2.0 + 0.5);
        }
        prop_assert!(out as f64 >= adc.min_code() as f64 * step - 0.5);
        prop_assert!(out as f64 <= adc.max_code() as f64 * step + 0.5);
    }

    #[test]
    fn adc_is_monotone(bits in 1u32..=8, a in -400_000i64..400_000, b in -400_000i64..400_000) {
        let adc = AdcConfig::quantized(bits, 258_048);
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(adc_convert(lo, &adc) <= adc_convert(hi, &adc));
    }

    #[test]
    fn macro_write_read_identity(cells in proptest::collection::vec((0usize..32, 0usize..32, any::<i8>()), 1..64)) {
        let mut m = ApimMacro::new(ApimGeometry::score_default(), AdcConfig::ideal()).unwrap();
        let mut shadow = vec![0i8; 32 * 32];
        for &(r, c, v) in &cells {
            m.write_cell(r, c, v).unwrap();
            shadow[r * 32 + c] = v;
        }
        for r in 0..32 {
            for c in 0..32 {
                prop_assert_eq!(m.read_cell(r, c).unwrap(), shadow[r * 32 + c]);
            }
        }
    }

    #[test]
    fn macro_mvm_is_exact_in_ideal_mode(
        w in proptest::collection::vec(any::<i8>(), 32 * 32),
        x in proptest::collection::vec(any::<i8>(), 32),
    ) {
        let mut m = ApimMacro::new(ApimGeometry::score_default(), AdcConfig::ideal()).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                m.write_cell(r, c, w[r * 32 + c]).unwrap();
            }
        }
        let (acc, cycles) = m.mvm_full(&x).unwrap();
        prop_assert_eq!(cycles, 4);
        for c in 0..32 {
            let want: i64 = (0..32).map(|r| x[r] as i64 * w[r * 32 + c] as i64).sum();
            prop_assert_eq!(acc[c], want);
        }
    }

    #[test]
    fn softmax_normalization(v in proptest::collection::vec(any::<i8>(), 1..300)) {
        let mut sm = default_softmax();
        let (p, cycles) = sm.softmax_vector(&v).unwrap();
        prop_assert_eq!(cycles, 2 * v.len().div_ceil(32) as u64);
        let sum: i64 = p.iter().map(|&x| x as i64).sum();
        prop_assert!((sum - 256).abs() <= v.len() as i64);
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v[i] > v[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
        prop_assert!(sm.is_idle());
    }

    #[test]
    fn softmax_shift_invariance(v in proptest::collection::vec(-60i8..60, 1..100), c in -60i8..60) {
        let mut sm = default_softmax();
        let shifted: Vec<i8> = v.iter().map(|&x| x + c).collect();
        prop_assert_eq!(sm.softmax_vector(&v).unwrap().0, sm.softmax_vector(&shifted).unwrap().0);
    }

    #[test]
    fn softmax_float_rows_sum_to_one(v in proptest::collection::vec(-50.0f64..50.0, 1..64)) {
        let p = softmax_float(&v).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dma_round_trip(payload in proptest::collection::vec(any::<u8>(), 0..600), bytes in 1u32..=8) {
        let bus = bytes * 8;
        let beats = pack_beats(&payload, bus);
        prop_assert_eq!(beats.len() as u64, transfer_cycles(payload.len() as u64 * 8, bus));
        prop_assert_eq!(unpack_beats(&beats, bus, payload.len()), payload.clone());
        let mut ch = DmaChannel::new(ChannelId::MemToIp, bus).unwrap();
        let t = ch.start_transfer(&payload).unwrap();
        let mut cycles = 0;
        loop {
            let s = ch.step();
            cycles += 1;
            if s.done {
                prop_assert_eq!(s.delivered.unwrap(), payload);
                break;
            }
            prop_assert!(s.delivered.is_none());
        }
        prop_assert_eq!(cycles, t.cycles.max(1));
    }

    #[test]
    fn trace_round_trip(recs in proptest::collection::vec((0u64..1000, 0usize..5, "[a-z_:./0-9]{1,20}", any::<u64>()), 0..40)) {
        let mut recs: Vec<TraceRecord> = recs
            .into_iter()
            .map(|(cycle, m, event, digest)| TraceRecord { cycle, module: ModuleId::ALL[m], event, digest })
            .collect();
        recs.sort_by_key(|r| r.cycle);
        prop_assert_eq!(parse_trace(&format_trace(&recs)).unwrap(), recs);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn input_process_write_read_and_project(seed in any::<u64>(), shift in 0u32..20) {
        let cfg = AttentionConfig { seq_len: 1, ..AttentionConfig::desk_small() };
        let w = Workload::random(&cfg, seed);
        let mut ip = InputProcess::new(InputProcessConfig::from_attention(&cfg)).unwrap();
        for c in 0..cfg.d_k {
            let col = w.weights.q.column(c).unwrap();
            prop_assert_eq!(ip.write_column(Bank::Q, c, &col).unwrap(), 128);
            prop_assert_eq!(ip.read_column(Bank::Q, c).unwrap(), (col, 128));
        }
        ip.set_requant_shift(Bank::Q, shift);
        let x = w.tokens.row(0);
        let (q, cycles) = ip.compute_projection(Bank::Q, x).unwrap();
        prop_assert_eq!(cycles, 64);
        for (c, &qc) in q.iter().enumerate() {
            let exact: i64 = (0..cfg.d_model).map(|r| x[r] as i64 * w.weights.q.get(r, c) as i64).sum();
            let exact = saturate_signed(exact, STACK_SUM_BITS);
            prop_assert_eq!(qc as i64, shift_round_saturate(exact, shift, 8));
        }
        prop_assert_eq!(ip.max_cell_writes(), 1);
    }

    #[test]
    fn score_row_is_requantized_dot(rows in proptest::collection::vec(proptest::collection::vec(any::<i8>(), 32), 32), q in proptest::collection::vec(any::<i8>(), 32), shift in 0u32..16) {
        let cfg = AttentionConfig::desk_small();
        let mut s = Score::new(ScoreConfig::from_attention(&cfg)).unwrap();
        for (t, r) in rows.iter().enumerate() {
            prop_assert_eq!(s.load_k_row(t, r).unwrap(), cfg.k_load_cycles as u64);
        }
        s.set_requant_shift(shift);
        let (row, cycles) = s.compute_score_row(&q).unwrap();
        prop_assert_eq!(cycles, 5);
        for (t, r) in rows.iter().enumerate() {
            prop_assert_eq!(s.stored_k(t).unwrap(), r.clone());
            let dot: i64 = r.iter().zip(&q).map(|(&a, &b)| a as i64 * b as i64).sum();
            prop_assert_eq!(row[t] as i64, shift_round_saturate(dot, shift, 8));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn runs_are_deterministic_and_schedule_free(seed in any::<u64>(), seq_len in 1usize..9) {
        let cfg = AttentionConfig { seq_len, ..AttentionConfig::desk_small() };
        let w = Workload::random(&cfg, seed);
        let a = run_inference(&w, &cfg).unwrap();
        let b = run_inference(&w, &cfg).unwrap();
        prop_assert_eq!(&a.trace, &b.trace);
        prop_assert_eq!(a.stats.to_json(), b.stats.to_json());
        prop_assert_eq!(&a.outputs, &b.outputs);
        let seq = run_inference(&w, &AttentionConfig { pipeline: false, ..cfg.clone() }).unwrap();
        prop_assert_eq!(&seq.outputs, &a.outputs);
        prop_assert_eq!(&seq.probs, &a.probs);
        let total: u64 = a.stats.states.values().map(|s| s.cycles).sum();
        prop_assert_eq!(total, a.stats.total_cycles);
        for m in a.stats.modules.values() {
            prop_assert!((0.0..=1.0).contains(&m.utilization));
        }
    }
}

#[test]
fn float_attention_rows_are_convex_combinations() {
    let q = RealMatrix::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.5], vec![-0.7, 0.1]]).unwrap();
    let v = RealMatrix::from_rows(&[vec![1.0], vec![5.0], vec![-2.0]]).unwrap();
    let o = attention_float(&q, &q, &v, 2).unwrap();
    for x in &o.data {
        assert!((-2.0..=5.0).contains(x));
    }
    // V = 1 everywhere gives exactly the weight sum
    let ones = RealMatrix::new(3, 1, vec![1.0; 3]).unwrap();
    let s = attention_float(&q, &q, &ones, 2).unwrap();
    for x in &s.data {
        assert!((x - 1.0).abs() < 1e-12);
    }
}
