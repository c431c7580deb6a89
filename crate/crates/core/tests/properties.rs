//! Property-based checks over geometry, the machine model, the formulas
//! and the schedules.

use chiplet_cnn_sim::analytic::{self, ccr_approx_chain, ratio_to_f64};
use chiplet_cnn_sim::cli::synthetic_data;
use chiplet_cnn_sim::kernels::oracle_conv_layer;
use chiplet_cnn_sim::machine::{ClusterId, Machine, MachineConfig};
use chiplet_cnn_sim::schedules::{run_schedule, ScheduleKind};
use chiplet_cnn_sim::tensor::{output_width, LayerHyperparams, Precision, Volume};
use proptest::prelude::*;

proptest! {
    /// The flat layout round-trips through (x, y, d, b) coordinates.
    #[test]
    fn volume_layout_round_trip(
        w in 1usize..6, h in 1usize..6, d in 1usize..4, b in 1usize..3
    ) {
        let mut v: Volume<f64> = Volume::zeros(w, h, d, b);
        let mut counter = 0.0;
        for bi in 0..b {
            for di in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        v.set(x, y, di, bi, counter);
                        counter += 1.0;
                    }
                }
            }
        }
        // width innermost, batch outermost
        for (i, val) in v.data().iter().enumerate() {
            prop_assert_eq!(*val, i as f64);
        }
        for bi in 0..b {
            for di in 0..d {
                let view = v.slice_view(di, bi).unwrap();
                prop_assert_eq!(view.as_slice().len(), w * h);
                prop_assert_eq!(view.get(0, 0), v.get(0, 0, di, bi));
            }
        }
    }

    /// The output width formula agrees with enumerating filter placements.
    #[test]
    fn output_width_matches_enumeration(
        wi in 1usize..48, p in 0usize..4, f in 1usize..10, s in 1usize..5
    ) {
        let padded = wi + 2 * p;
        let placements: Vec<usize> = (0..=padded)
            .filter(|x| x % s == 0 && x + f <= padded)
            .collect();
        match output_width(wi, p, f, s) {
            Ok(wo) => {
                prop_assert_eq!(wo, placements.len());
                // the last placement reaches the end of the padded plane
                prop_assert_eq!(placements.last().copied(), Some(padded - f));
            }
            Err(_) => {
                let feasible = padded >= f && (padded - f) % s == 0;
                prop_assert!(!feasible);
            }
        }
    }

    /// The network level is symmetric and monotone in quadrant distance.
    #[test]
    fn network_level_symmetry(a in 0usize..128, b in 0usize..128) {
        let m = Machine::new(MachineConfig::default()).unwrap();
        let (a, b) = (ClusterId(a), ClusterId(b));
        if a == b {
            prop_assert!(m.network_level(a, b).is_err());
        } else {
            prop_assert_eq!(
                m.network_level(a, b).unwrap(),
                m.network_level(b, a).unwrap()
            );
        }
    }

    /// Off-chip loads never increase with a deeper output stack, and the
    /// headline CCR never decreases.
    #[test]
    fn stacking_monotone(delta in 1usize..24) {
        let cfg = MachineConfig::default();
        let h = LayerHyperparams::new(16, 8, 24, 3, 1, 1, 1, Precision::Single).unwrap();
        let shallow = analytic::predict(ScheduleKind::ConvAlg2, &h, Some(delta), &cfg).unwrap();
        let deep = analytic::predict(ScheduleKind::ConvAlg2, &h, Some(delta + 1), &cfg).unwrap();
        prop_assert!(deep.offchip_load_words <= shallow.offchip_load_words);
        prop_assert!(deep.ccr_mac_per_word >= shallow.ccr_mac_per_word);
    }

    /// Traffic counters are data-independent: scaling the inputs changes
    /// values, never movement.
    #[test]
    fn counters_data_independent(seed in 0u64..50, scale in 1u8..5) {
        let cfg = MachineConfig::default();
        let h = LayerHyperparams::new(6, 3, 4, 3, 1, 1, 1, Precision::Double).unwrap();
        let (input, filters) = synthetic_data::<f64>(&h, seed);
        let mut scaled = input.clone();
        let alpha = scale as f64;
        for bi in 0..h.b {
            for d in 0..h.di {
                for y in 0..h.wi {
                    for x in 0..h.wi {
                        scaled.set(x, y, d, bi, alpha * input.get(x, y, d, bi));
                    }
                }
            }
        }
        let (out_a, t_a) =
            run_schedule(ScheduleKind::ConvAlg1, &cfg, &h, &input, &filters, None).unwrap();
        let (out_b, t_b) =
            run_schedule(ScheduleKind::ConvAlg1, &cfg, &h, &scaled, &filters, None).unwrap();
        prop_assert_eq!(t_a, t_b);
        // and the oracle is linear in the input
        for (a, b) in out_a.data().iter().zip(out_b.data().iter()) {
            prop_assert!((alpha * a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    /// The approximation chain orders as exact <= (WO=WI) < (DI large) < F^2.
    #[test]
    fn approx_chain_ordered(
        wi in 2usize..32, di in 1usize..256, f_idx in 0usize..3
    ) {
        let f = [1usize, 3, 5][f_idx];
        prop_assume!(wi >= f);
        let h = LayerHyperparams::new(wi, di, 4, f, (f - 1) / 2, 1, 1, Precision::Single).unwrap();
        let (exact, wo_eq_wi, di_large, field_only) = ccr_approx_chain(&h);
        prop_assert!(exact <= wo_eq_wi);
        prop_assert!(wo_eq_wi < di_large);
        prop_assert!(di_large < field_only);
        prop_assert_eq!(field_only, num_rational::Ratio::from((f * f) as u64));
        // with same-sized planes the first simplification is exact
        if h.wo == h.wi {
            prop_assert_eq!(exact, wo_eq_wi);
        }
    }

    /// The oracle is additive over input depth slices.
    #[test]
    fn oracle_additive_over_depth(seed in 0u64..50) {
        let h = LayerHyperparams::new(5, 2, 3, 3, 1, 1, 1, Precision::Double).unwrap();
        let h1 = LayerHyperparams::new(5, 1, 3, 3, 1, 1, 1, Precision::Double).unwrap();
        let (input, filters) = synthetic_data::<f64>(&h, seed);
        let full = oracle_conv_layer(&h, &input, &filters).unwrap();
        // split into per-depth-slice layers and sum the results
        let mut parts: Vec<Volume<f64>> = Vec::new();
        for d in 0..h.di {
            let mut vin: Volume<f64> = Volume::zeros(h.wi, h.wi, 1, 1);
            for y in 0..h.wi {
                for x in 0..h.wi {
                    vin.set(x, y, 0, 0, input.get(x, y, d, 0));
                }
            }
            let mut fil = chiplet_cnn_sim::tensor::Filters::zeros(h.f, 1, h.do_);
            for o in 0..h.do_ {
                let src = filters.kernel(d, o).unwrap().as_slice().to_vec();
                fil.kernel_mut(0, o).copy_from_slice(&src);
            }
            parts.push(oracle_conv_layer(&h1, &vin, &fil).unwrap());
        }
        for i in 0..full.len() {
            let sum: f64 = parts.iter().map(|p| p.data()[i]).sum();
            let want = full.data()[i];
            prop_assert!((sum - want).abs() <= 1e-12 + 1e-12 * want.abs());
        }
    }

    /// Machine balance classification flips exactly at the balance point.
    #[test]
    fn classification_threshold(macs_rate in 1u64..64, words_rate in 1u64..64) {
        let mut cfg = MachineConfig::default();
        cfg.macs_per_cluster_per_cycle.single = macs_rate;
        cfg.offchip_words_per_cycle.single = words_rate;
        let h = LayerHyperparams::new(16, 8, 24, 3, 1, 1, 1, Precision::Single).unwrap();
        let pred = analytic::predict(ScheduleKind::ConvAlg1, &h, None, &cfg).unwrap();
        let class = analytic::classify(&pred, &cfg, Precision::Single);
        let ccr = pred.ccr_mac_per_word;
        // exact cross-multiplied comparison against clusters * rate / words
        let expect_memory =
            ccr.numer() * words_rate < cfg.clusters as u64 * macs_rate * ccr.denom();
        prop_assert_eq!(
            class.class == analytic::Boundedness::MemoryBound,
            expect_memory,
            "ccr {} balance {}/{}", ratio_to_f64(ccr), cfg.clusters as u64 * macs_rate, words_rate
        );
    }
}
