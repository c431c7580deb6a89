//! Closed-form evaluation of every complexity and CCR formula, plus bound
//! classification against a machine balance.
//!
//! All CCRs are kept as exact rationals; floats appear only at render
//! time. The counter predictions mirror the schedule walks exactly and are
//! the reference the simulator is cross-validated against.

use crate::machine::{InterClusterWords, MachineConfig, NetworkLevel};
use crate::schedules::ScheduleKind;
use crate::tensor::{LayerHyperparams, Precision};
use num_rational::Ratio;

/// Clusters sharing one input depth slice ring (one L2 quadrant).
const REUSE_RING: u64 = 16;

pub type Ccr = Ratio<u64>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AnalyticError {
    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),
}

/// Formula-evaluated counterparts of a `TrafficReport`, plus CCR values.
///
/// The counter fields predict the simulator exactly, including the
/// main-memory fallback the reuse schedule takes when a quadrant ring is
/// not fully populated. `offchip_ccr_mac_per_word` is always evaluated
/// from the published reuse formulas; `in_formula_regime` records whether
/// the counters coincide with them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnalyticPrediction {
    pub kind: ScheduleKind,
    pub delta_o: Option<usize>,
    pub macs: u64,
    pub offchip_load_words: u64,
    pub offchip_store_words: u64,
    pub inter_cluster_words: InterClusterWords,
    pub sync_messages: u64,
    pub peak_local_mem_words: u64,
    pub peak_local_mem_bytes: u64,
    /// Single-buffered minimum footprint per cluster, in words.
    pub min_footprint_words: u64,
    pub active_clusters: usize,
    /// Headline CCR of the schedule, per its published equation.
    pub ccr_mac_per_word: Ccr,
    /// `ccr_mac_per_word * 2 / word_bytes`.
    pub ccr_flop_per_byte: Ccr,
    /// MACs over off-chip words (loads and stores).
    pub offchip_ccr_mac_per_word: Ccr,
    pub in_formula_regime: bool,
    /// Published reuse figures, set for the reuse schedule only:
    /// off-chip input words (1/16)·ceil(DO/ΔO)·DI·WI² and inter-cluster
    /// slice words (15/16)·ceil(DO/ΔO)·DI·WI².
    pub formula_offchip_input_words: Option<u64>,
    pub formula_inter_cluster_words: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundedness {
    ComputeBound,
    MemoryBound,
}

/// Classification of a prediction against a machine balance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundClass {
    pub class: Boundedness,
    /// Balance used for the cut, as (chiplet MAC/cycle, off-chip words/cycle).
    pub machine_balance: (u64, u64),
}

fn sq(x: usize) -> u64 {
    (x * x) as u64
}


/// Per-level inter-cluster words of one whole-tree reduction of a
/// `volume_words`-word private volume on every cluster.
fn tree_reduction_words(cfg: &MachineConfig, volume_words: u64) -> InterClusterWords {
    let mut out = InterClusterWords::default();
    let c = cfg.clusters as u64;
    let l1 = cfg.clusters_per_l1_quad as u64;
    let l2 = cfg.clusters_per_l2_quad() as u64;
    let l3 = cfg.clusters_per_l3_quad() as u64;
    let mut stride = 1u64;
    while stride < c {
        let transfers = c / (2 * stride);
        // survivor 0 reads partner at distance `stride`; every pair in the
        // step is congruent, so the level is the level of (0, stride)
        let level = if stride < l1 {
            NetworkLevel::L1
        } else if stride < l2 {
            NetworkLevel::L2
        } else if stride < l3 {
            NetworkLevel::L3
        } else {
            NetworkLevel::CrossL3
        };
        out.add(level, transfers * volume_words);
        stride *= 2;
    }
    out
}

/// Evaluate the closed-form counters and CCRs for one schedule run.
pub fn predict(
    kind: ScheduleKind,
    h: &LayerHyperparams,
    delta_o: Option<usize>,
    cfg: &MachineConfig,
) -> Result<AnalyticPrediction, AnalyticError> {
    cfg.validate()
        .map_err(|e| AnalyticError::InvalidConfiguration(e.to_string()))?;
    let wb = h.word_bytes() as u64;
    let wi2 = sq(h.wi);
    let wo2 = sq(h.wo);
    let f2 = sq(h.f);
    let di = h.di as u64;
    let do_ = h.do_ as u64;
    let b = h.b as u64;
    let clusters = cfg.clusters as u64;

    let stack = match (kind.uses_stacking(), delta_o) {
        (true, Some(d)) if d >= 1 => d as u64,
        (true, _) => {
            return Err(AnalyticError::InvalidConfiguration(format!(
                "{} needs a stack depth of at least 1",
                kind.name()
            )))
        }
        (false, _) => match kind {
            ScheduleKind::ConvAlg1 => 1,
            ScheduleKind::FcAlg4 => do_,
            _ => unreachable!(),
        },
    };

    if kind.is_conv() && h.b != 1 {
        return Err(AnalyticError::InvalidConfiguration(
            "conv schedules are unbatched (b = 1)".into(),
        ));
    }
    if !kind.is_conv() && !h.is_fully_connected() {
        return Err(AnalyticError::InvalidConfiguration(
            "fc schedules require f = wi, p = 0, s = 1".into(),
        ));
    }

    let pred = match kind {
        ScheduleKind::ConvAlg1 | ScheduleKind::ConvAlg2 | ScheduleKind::ConvAlg3 => {
            let tasks = do_.div_ceil(stack);
            let w_max = stack.min(do_);
            let macs = wo2 * f2 * di * do_;
            let filter_loads = do_ * di * f2;
            let stores = do_ * wo2;
            let reuse = kind == ScheduleKind::ConvAlg3;
            if reuse {
                if di < REUSE_RING {
                    return Err(AnalyticError::InvalidConfiguration(format!(
                        "input depth {di} below the reuse ring size {REUSE_RING}"
                    )));
                }
                if cfg.clusters_per_l2_quad() as u64 != REUSE_RING {
                    return Err(AnalyticError::InvalidConfiguration(
                        "input slice reuse needs 16-cluster L2 quadrants".into(),
                    ));
                }
            }

            let (input_main_slices, inter, sync) = if reuse {
                // slice acquisitions per group of up to 16 ring positions:
                // each 16-slice block opens with one main-memory load per
                // cluster; the wrap position also takes the trailing
                // partial block from main; a partial ring's last position
                // has no neighbor and loads everything from main
                let blocks = di.div_ceil(REUSE_RING);
                let rem = di % REUSE_RING;
                let mut main = 0u64;
                let mut inter = InterClusterWords::default();
                let mut sync = 0u64;
                let mut first = 0u64;
                while first < tasks {
                    let g = (tasks - first).min(REUSE_RING);
                    for k in 0..g {
                        let has_neighbor = g > 1 && (k + 1) % REUSE_RING < g;
                        let own_main = if !has_neighbor {
                            di
                        } else if k == REUSE_RING - 1 && rem != 0 {
                            blocks - 1 + rem
                        } else {
                            blocks
                        };
                        main += own_main;
                        let handoffs = di - own_main;
                        if handoffs > 0 {
                            let level = if k % 4 == 3 {
                                NetworkLevel::L2
                            } else {
                                NetworkLevel::L1
                            };
                            inter.add(level, handoffs * wi2);
                            sync += handoffs;
                        }
                    }
                    first += g;
                }
                (main, inter, sync)
            } else {
                (tasks * di, InterClusterWords::default(), 0)
            };
            let loads = input_main_slices * wi2 + filter_loads;

            let peak_words = w_max * wo2
                + di.min(2) * wi2
                + (di * w_max).min(2) * f2
                + if reuse { wi2 } else { 0 };
            let min_footprint = w_max * wo2 + wi2 + f2 + if reuse { wi2 } else { 0 };

            // headline CCR: the stacked main-memory equation; identical
            // for the reuse variant, which only reroutes the same words
            let overall_words = tasks * di * wi2 + filter_loads + stores;
            let ccr = Ratio::new(macs, overall_words);

            // off-chip CCR from the reuse formulas: 1/16 of the input
            // slices come from main memory
            let slice_words = tasks * di * wi2;
            let (offchip_ccr, in_regime) = if reuse {
                let formula_loads =
                    Ratio::new(slice_words, REUSE_RING) + Ratio::from(filter_loads + stores);
                let in_regime = tasks % REUSE_RING == 0 && di % REUSE_RING == 0;
                (Ratio::from(macs) / formula_loads, in_regime)
            } else {
                (Ratio::new(macs, loads + stores), true)
            };

            AnalyticPrediction {
                kind,
                delta_o,
                macs,
                offchip_load_words: loads,
                offchip_store_words: stores,
                inter_cluster_words: inter,
                sync_messages: sync,
                peak_local_mem_words: peak_words,
                peak_local_mem_bytes: peak_words * wb,
                min_footprint_words: min_footprint,
                active_clusters: (tasks.min(clusters)) as usize,
                ccr_mac_per_word: ccr,
                ccr_flop_per_byte: ccr * Ratio::new(2, wb),
                offchip_ccr_mac_per_word: offchip_ccr,
                in_formula_regime: in_regime,
                formula_offchip_input_words: reuse.then(|| slice_words / REUSE_RING),
                formula_inter_cluster_words: reuse
                    .then(|| slice_words - slice_words / REUSE_RING),
            }
        }
        ScheduleKind::FcAlg4 | ScheduleKind::FcAlg5 => {
            if !clusters.is_power_of_two() {
                return Err(AnalyticError::InvalidConfiguration(
                    "tree reduction needs a power-of-two cluster count".into(),
                ));
            }
            let stacks = do_.div_ceil(stack);
            let w_max = stack.min(do_);
            let macs = wi2 * b * do_ * di;
            let loads = stacks * di * b * wi2 + do_ * di * wi2;
            let stores = do_ * b;
            // every stack reduces width * b words over the whole tree;
            // the widths sum to do
            let inter = tree_reduction_words(cfg, do_ * b);
            let peak_words = w_max * b + wi2 * b + w_max.min(2) * wi2;
            let min_footprint = w_max * b + wi2 * (b + 1);
            let ccr = Ratio::new(b * do_, stacks * b + do_);
            AnalyticPrediction {
                kind,
                delta_o,
                macs,
                offchip_load_words: loads,
                offchip_store_words: stores,
                inter_cluster_words: inter,
                sync_messages: 0,
                peak_local_mem_words: peak_words,
                peak_local_mem_bytes: peak_words * wb,
                min_footprint_words: min_footprint,
                active_clusters: (di.min(clusters)) as usize,
                ccr_mac_per_word: ccr,
                ccr_flop_per_byte: ccr * Ratio::new(2, wb),
                offchip_ccr_mac_per_word: Ratio::new(macs, loads + stores),
                in_formula_regime: true,
                formula_offchip_input_words: None,
                formula_inter_cluster_words: None,
            }
        }
    };
    Ok(pred)
}

/// The four successive values of the first conv schedule's CCR
/// simplification: exact; under WO = WI; under DI >> 1; and the final
/// receptive-field-only approximation F^2.
pub fn ccr_approx_chain(h: &LayerHyperparams) -> (Ccr, Ccr, Ccr, Ccr) {
    let wi2 = sq(h.wi);
    let wo2 = sq(h.wo);
    let f2 = sq(h.f);
    let di = h.di as u64;
    let exact = Ratio::new(di * wi2 * f2, di * (wi2 + f2) + wo2);
    let wo_eq_wi = Ratio::new(di * wi2 * f2, di * (wi2 + f2) + wi2);
    let di_large = Ratio::new(wi2 * f2, wi2 + f2);
    let field_only = Ratio::from(f2);
    (exact, wo_eq_wi, di_large, field_only)
}

/// Memory-bound iff the CCR is below the machine balance for the layer's
/// precision (chiplet MAC/cycle over off-chip words/cycle).
pub fn classify(pred: &AnalyticPrediction, cfg: &MachineConfig, p: Precision) -> BoundClass {
    let (macs_per_cycle, words_per_cycle) = cfg.machine_balance(p);
    // compare ccr >= macs/words by cross-multiplication, words >= 1
    let ccr = pred.ccr_mac_per_word;
    let lhs = ccr.numer() * words_per_cycle;
    let rhs = macs_per_cycle * ccr.denom();
    let class = if lhs >= rhs {
        Boundedness::ComputeBound
    } else {
        Boundedness::MemoryBound
    };
    BoundClass {
        class,
        machine_balance: (macs_per_cycle, words_per_cycle),
    }
}

/// Render a rational to one decimal, rounding half to even.
pub fn render_1dp(r: Ccr) -> String {
    let n10 = r.numer() * 10;
    let d = *r.denom();
    let q = n10 / d;
    let rem = n10 % d;
    let q = match (2 * rem).cmp(&d) {
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => {
            if q % 2 == 0 {
                q
            } else {
                q + 1
            }
        }
        std::cmp::Ordering::Less => q,
    };
    format!("{}.{}", q / 10, q % 10)
}

pub fn ratio_to_f64(r: Ccr) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Least one-decimal KiB figure that bounds `bytes` from above, as quoted
/// for space budgets ("less than x.y KiB").
pub fn kib_upper_1dp(bytes: u64) -> String {
    let tenths = (bytes * 10).div_ceil(1024);
    format!("{}.{}", tenths / 10, tenths % 10)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::LayerHyperparams;

    fn typical_conv(p: Precision) -> LayerHyperparams {
        LayerHyperparams::new(32, 128, 128, 3, 1, 1, 1, p).unwrap()
    }

    #[test]
    fn alg1_typical_ccr() {
        let h = typical_conv(Precision::Single);
        let pred = predict(ScheduleKind::ConvAlg1, &h, None, &MachineConfig::default()).unwrap();
        assert_eq!(pred.macs, 150_994_944);
        assert_eq!(render_1dp(pred.ccr_mac_per_word), "8.9");
        assert_eq!(render_1dp(pred.ccr_flop_per_byte), "4.4");
        let hd = typical_conv(Precision::Double);
        let predd = predict(ScheduleKind::ConvAlg1, &hd, None, &MachineConfig::default()).unwrap();
        assert_eq!(render_1dp(predd.ccr_flop_per_byte), "2.2");
        assert_eq!(pred.inter_cluster_words.total(), 0);
    }

    #[test]
    fn alg2_typical_ccr() {
        let cfg = MachineConfig::default();
        let hs = typical_conv(Precision::Single);
        let ps = predict(ScheduleKind::ConvAlg2, &hs, Some(24), &cfg).unwrap();
        assert_eq!(render_1dp(ps.ccr_mac_per_word), "141.8");
        assert_eq!(render_1dp(ps.ccr_flop_per_byte), "70.9");
        let hd = typical_conv(Precision::Double);
        let pd = predict(ScheduleKind::ConvAlg2, &hd, Some(12), &cfg).unwrap();
        assert_eq!(render_1dp(pd.ccr_mac_per_word), "87.8");
        assert_eq!(ps.macs, pd.macs);
    }

    #[test]
    fn alg3_offchip_ccr_from_formulas() {
        let cfg = MachineConfig::default();
        let hs = typical_conv(Precision::Single);
        let ps = predict(ScheduleKind::ConvAlg3, &hs, Some(23), &cfg).unwrap();
        assert_eq!(render_1dp(ps.offchip_ccr_mac_per_word), "460.8");
        assert!(!ps.in_formula_regime); // 6 tasks do not fill a 16-ring
        let hd = typical_conv(Precision::Double);
        let pd = predict(ScheduleKind::ConvAlg3, &hd, Some(11), &cfg).unwrap();
        assert_eq!(render_1dp(pd.offchip_ccr_mac_per_word), "400.7");
    }

    #[test]
    fn fc_typical_ccr() {
        let cfg = MachineConfig::default();
        let hs = LayerHyperparams::fully_connected(7, 4, 768, 32, Precision::Single).unwrap();
        let ps = predict(ScheduleKind::FcAlg4, &hs, None, &cfg).unwrap();
        assert_eq!(render_1dp(ps.ccr_mac_per_word), "30.7");
        assert_eq!(render_1dp(ps.ccr_flop_per_byte), "15.4");
        let hd = LayerHyperparams::fully_connected(7, 4, 384, 32, Precision::Double).unwrap();
        let pd = predict(ScheduleKind::FcAlg4, &hd, None, &cfg).unwrap();
        assert_eq!(render_1dp(pd.ccr_mac_per_word), "29.5");
        let h5 = LayerHyperparams::fully_connected(7, 4, 4096, 32, Precision::Single).unwrap();
        let p5 = predict(ScheduleKind::FcAlg5, &h5, Some(768), &cfg).unwrap();
        assert_eq!(render_1dp(p5.ccr_mac_per_word), "30.6");
        let h5d = LayerHyperparams::fully_connected(7, 4, 4096, 32, Precision::Double).unwrap();
        let p5d = predict(ScheduleKind::FcAlg5, &h5d, Some(384), &cfg).unwrap();
        assert_eq!(render_1dp(p5d.ccr_mac_per_word), "29.5");
    }

    #[test]
    fn fc_reduction_split() {
        let w = tree_reduction_words(&MachineConfig::default(), 1);
        assert_eq!(w.l1, 96);
        assert_eq!(w.l2, 24);
        assert_eq!(w.l3, 6);
        assert_eq!(w.cross_l3, 1);
        assert_eq!(w.total(), 127);
    }

    #[test]
    fn approx_chain_values() {
        let h = typical_conv(Precision::Single);
        let (exact, a2, a3, a4) = ccr_approx_chain(&h);
        assert_eq!(a4, Ratio::from(9));
        assert!(exact <= a2 && a2 < a3 && a3 < a4);
        // F = 1 with large WI: all four converge to 1
        let h1 = LayerHyperparams::new(512, 1024, 8, 1, 0, 1, 1, Precision::Single).unwrap();
        let (e, b2, b3, b4) = ccr_approx_chain(&h1);
        for r in [e, b2, b3] {
            assert!((ratio_to_f64(r) - 1.0).abs() < 2e-3);
        }
        assert_eq!(b4, Ratio::from(1));
        // small layer: monotone approach toward F^2
        let h2 = LayerHyperparams::new(8, 4, 4, 3, 1, 1, 1, Precision::Single).unwrap();
        let (e2, c2, c3, c4) = ccr_approx_chain(&h2);
        assert!(e2 <= c2 && c2 < c3 && c3 < c4);
        assert_eq!(c4, Ratio::from(9));
    }

    #[test]
    fn classify_boundaries() {
        let cfg = MachineConfig::default();
        let h = typical_conv(Precision::Double);
        let pred = predict(ScheduleKind::ConvAlg1, &h, None, &cfg).unwrap();
        // default double balance: 128 * 8 / 8 = 128 MAC/word, 8.9 < 128
        let c = classify(&pred, &cfg, Precision::Double);
        assert_eq!(c.class, Boundedness::MemoryBound);
        assert_eq!(c.machine_balance, (1024, 8));
        // ccr exactly at the balance counts as compute-bound
        let mut cfg2 = cfg.clone();
        cfg2.macs_per_cluster_per_cycle.double = 0;
        let c2 = classify(&pred, &cfg2, Precision::Double);
        assert_eq!(c2.class, Boundedness::ComputeBound);
    }

    #[test]
    fn render_rounding() {
        assert_eq!(render_1dp(Ratio::new(885, 100)), "8.8"); // half to even
        assert_eq!(render_1dp(Ratio::new(875, 100)), "8.8");
        assert_eq!(render_1dp(Ratio::new(886, 100)), "8.9");
        assert_eq!(render_1dp(Ratio::new(9, 1)), "9.0");
        assert_eq!(kib_upper_1dp(2057 * 4), "8.1");
        assert_eq!(kib_upper_1dp(2057 * 8), "16.1");
    }
}
