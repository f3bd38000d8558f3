//! Property tests of the invariants that hold for any input.

use msnic_core::analysis::{bd_metrics, RDCurve};
use msnic_core::codec::{psnr_db, quantize_round, range_decode, range_encode, universal_quantize, CodedStream};
use msnic_core::densities::{discretize, GaussianCdf, IntegerPmf};
use msnic_core::harness::ExperimentConfig;
use msnic_core::tensor::log_mean_exp;
use msnic_core::trainer::{lr_schedule, TrainConfig};
use msnic_core::{GridMode, HierModel, SeededRng, Tensor};
use proptest::prelude::*;

fn pmf(sigma: f64, offset: f64) -> IntegerPmf {
    discretize(&GaussianCdf { sigma }, offset, 1.0 - 1e-6, 16).unwrap()
}

/// A monotone R-D curve from positive rate steps and quality steps.
fn curve() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.05f64..0.5, 0.5f64..3.0), 4..7).prop_map(|steps| {
        let (mut r, mut q) = (0.05, 25.0);
        steps
            .into_iter()
            .map(|(dr, dq)| {
                r += dr;
                q += dq;
                (r, q)
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coder_roundtrips_any_symbols(
        sigma in 0.01f64..20.0,
        offset in -0.5f64..0.5,
        syms in prop::collection::vec(-100_000i64..100_000, 1..200),
    ) {
        let p = pmf(sigma, offset);
        let tables = vec![&p; syms.len()];
        let bytes = range_encode(&syms, &tables).unwrap();
        prop_assert_eq!(range_decode(&bytes, &tables).unwrap(), syms);
    }

    #[test]
    fn pmf_counts_fill_the_precision(sigma in 0.01f64..50.0, offset in -0.5f64..0.5) {
        let p = pmf(sigma, offset);
        prop_assert_eq!(p.counts.iter().map(|&c| c as u64).sum::<u64>(), 1u64 << 16);
        prop_assert!(p.counts.iter().all(|&c| c > 0));
        prop_assert!(p.lo <= p.hi);
    }

    #[test]
    fn stream_parser_rejects_garbage_without_panicking(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        if let Ok(s) = CodedStream::from_bytes(&bytes) {
            prop_assert_eq!(CodedStream::from_bytes(&s.to_bytes()).unwrap().to_bytes(), s.to_bytes());
        }
    }

    #[test]
    fn rounding_is_idempotent(values in prop::collection::vec(-1e6f64..1e6, 1..64)) {
        let t = Tensor::vector(&values);
        let once = quantize_round(&t);
        let twice = quantize_round(&once);
        prop_assert_eq!(twice.data(), once.data());
        prop_assert!(once.data().iter().zip(&values).all(|(q, v)| (q - v).abs() <= 0.5));
    }

    #[test]
    fn dithered_error_stays_in_the_cell(values in prop::collection::vec(-1e3f64..1e3, 1..64), seed in any::<u64>()) {
        let t = Tensor::vector(&values);
        let (q, _) = universal_quantize(&t, &mut SeededRng::new(seed, 0));
        prop_assert!(q.data().iter().zip(&values).all(|(q, v)| (q - v).abs() <= 0.5 + 1e-9));
    }

    #[test]
    fn log_mean_exp_shifts_with_its_input(values in prop::collection::vec(-700f64..700.0, 1..32), c in -500f64..500.0) {
        let n = values.len();
        let a = log_mean_exp(&Tensor::new(vec![1, n], values.clone()).unwrap(), 1).item();
        let shifted: Vec<f64> = values.iter().map(|v| v + c).collect();
        let b = log_mean_exp(&Tensor::new(vec![1, n], shifted).unwrap(), 1).item();
        prop_assert!((b - a - c).abs() <= 1e-9 * (1.0 + a.abs() + c.abs()), "{} vs {}", b, a + c);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(a <= max + 1e-12 && a >= max - (n as f64).ln() - 1e-12);
    }

    #[test]
    fn bd_is_antisymmetric(a in curve(), dq in -1.0f64..1.0, factor in 0.8f64..1.25) {
        let b: Vec<(f64, f64)> = a.iter().map(|(r, q)| (r * factor, q + dq)).collect();
        let (ca, cb) = (RDCurve::from_pairs("a", &a).unwrap(), RDCurve::from_pairs("b", &b).unwrap());
        let ab = bd_metrics(&ca, &cb).unwrap();
        let ba = bd_metrics(&cb, &ca).unwrap();
        prop_assert!((ab.bd_metric + ba.bd_metric).abs() <= 1e-6, "{:?} {:?}", ab, ba);
        if ab.bd_br_percent.is_finite() && ba.bd_br_percent.is_finite() {
            let prod = (1.0 + ab.bd_br_percent / 100.0) * (1.0 + ba.bd_br_percent / 100.0);
            prop_assert!((prod - 1.0).abs() <= 1e-6, "{}", prod);
        }
    }

    #[test]
    fn psnr_falls_as_error_grows(a in 1e-3f64..1e4, b in 1e-3f64..1e4) {
        prop_assume!(a < b);
        prop_assert!(psnr_db(a) > psnr_db(b));
    }

    #[test]
    fn lr_schedule_stays_between_floor_and_base(step in 0usize..5000, total in 1usize..5000) {
        let cfg = TrainConfig::new(0.01, GridMode::Elbo);
        let lr = lr_schedule(step, total, &cfg);
        prop_assert!(lr <= cfg.lr_base * (1.0 + 1e-12));
        prop_assert!(lr >= cfg.lr_base * cfg.lr_floor_fraction * (1.0 - 1e-12));
        if step > 0 {
            prop_assert!(lr <= lr_schedule(step - 1, total, &cfg));
        }
    }

    #[test]
    fn config_overrides_roundtrip(lambda in 1e-5f64..1.0, k in 1usize..64, seed in any::<u32>()) {
        let sets = vec![format!("lambda={lambda:e}"), format!("k={k}"), format!("seed={seed}")];
        let c = ExperimentConfig::parse("", &sets).unwrap();
        prop_assert_eq!((c.lambda, c.k, c.seed), (lambda, k, seed as u64));
        let text = toml::to_string(&c).unwrap();
        prop_assert_eq!(ExperimentConfig::parse(&text, &[]).unwrap(), c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoints_roundtrip(seed in any::<u64>(), direct_y in any::<bool>()) {
        let m = HierModel::new(msnic_core::ArchConfig::toy(), direct_y, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = HierModel::load(&path).unwrap();
        prop_assert_eq!(back.fingerprint(), m.fingerprint());
        prop_assert_eq!(back.params(), m.params());
        prop_assert_eq!(back.direct_y(), direct_y);
    }
}
