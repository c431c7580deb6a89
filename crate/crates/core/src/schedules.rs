//! The five layer schedules, executed against the machine model with real
//! data. Each run produces the output volume plus an exact `TrafficReport`.
//!
//! Reference execution is a sequential, deterministic walk over the
//! parallel tasks. Tasks are assigned round-robin: task `t` runs on
//! cluster `t mod clusters`, so consecutive task indices land on
//! consecutive in-quadrant cluster ids.
//!
//! Data movement is materialized from the canonical input volume; where a
//! slice arrives from a neighboring cluster the values are identical by
//! construction, so sourcing affects only counters and the schedule
//! validity assertions.

use crate::kernels::{conv2d_accumulate, elem_mac_flat, KernelError};
use crate::machine::{
    ClusterId, DmaSource, InterClusterWords, Machine, MachineConfig, MachineError, TrafficReport,
    TransferTicket,
};
use crate::tensor::{Element, Filters, LayerHyperparams, Precision, TensorError, Volume};
use serde::{Deserialize, Serialize};

/// Clusters sharing one input depth slice ring: one L2 quadrant.
const REUSE_RING: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScheduleError {
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("stack depth must be at least 1, got {0}")]
    InvalidStackDepth(usize),
    #[error("input depth {0} below the reuse ring size {REUSE_RING}")]
    UnsupportedDepth(usize),
    #[error("schedule needs {0}")]
    UnsupportedTopology(String),
    #[error("no feasible stack depth: even 1 does not fit the local memory budget")]
    NoFeasibleDepth,
    #[error("schedule does not take a stack depth")]
    NotStacked,
    #[error("no partial volumes to reduce")]
    EmptyInput,
}

/// The five published schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    ConvAlg1,
    ConvAlg2,
    ConvAlg3,
    FcAlg4,
    FcAlg5,
}

impl ScheduleKind {
    pub fn is_conv(self) -> bool {
        matches!(self, Self::ConvAlg1 | Self::ConvAlg2 | Self::ConvAlg3)
    }

    pub fn uses_stacking(self) -> bool {
        matches!(self, Self::ConvAlg2 | Self::ConvAlg3 | Self::FcAlg5)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::ConvAlg1 => "conv_alg1",
            Self::ConvAlg2 => "conv_alg2",
            Self::ConvAlg3 => "conv_alg3",
            Self::FcAlg4 => "fc_alg4",
            Self::FcAlg5 => "fc_alg5",
        }
    }
}

/// Round-robin task placement.
#[inline]
fn cluster_of(task: usize, clusters: usize) -> ClusterId {
    ClusterId(task % clusters)
}

/// Largest stack depth whose footprint fits the reservation policy.
///
/// Conv stacks budget the non-reserved memory for output depth slices;
/// the input-reuse variant additionally sets one input slice aside as the
/// share buffer. FC stacks budget the non-reserved memory for the private
/// output stack.
pub fn max_stack_depth(
    kind: ScheduleKind,
    h: &LayerHyperparams,
    cfg: &MachineConfig,
) -> Result<usize, ScheduleError> {
    if !kind.uses_stacking() {
        return Err(ScheduleError::NotStacked);
    }
    let wb = h.word_bytes();
    let free = cfg.local_mem_bytes.saturating_sub(cfg.reserved_buffer_bytes);
    let per_unit = match kind {
        ScheduleKind::ConvAlg2 => h.wo * h.wo * wb,
        ScheduleKind::ConvAlg3 => {
            let share = h.wi * h.wi * wb;
            return match free.saturating_sub(share) / (h.wo * h.wo * wb) {
                0 => Err(ScheduleError::NoFeasibleDepth),
                d => Ok(d),
            };
        }
        ScheduleKind::FcAlg5 => h.b * wb,
        _ => unreachable!(),
    };
    match free / per_unit {
        0 => Err(ScheduleError::NoFeasibleDepth),
        d => Ok(d),
    }
}

fn check_conv_run<T: Element>(
    h: &LayerHyperparams,
    input: &Volume<T>,
    filters: &Filters<T>,
) -> Result<(), ScheduleError> {
    if T::PRECISION != h.precision {
        return Err(KernelError::ShapeMismatch(format!(
            "element precision {:?} != layer precision {:?}",
            T::PRECISION,
            h.precision
        ))
        .into());
    }
    if h.b != 1 || input.batch() != 1 {
        return Err(KernelError::ShapeMismatch("conv schedules are unbatched (b = 1)".into()).into());
    }
    if input.width() != h.wi || input.height() != h.wi || input.depth() != h.di {
        return Err(KernelError::ShapeMismatch(format!(
            "input {}x{}x{} does not match wi={} di={}",
            input.width(),
            input.height(),
            input.depth(),
            h.wi,
            h.di
        ))
        .into());
    }
    if filters.field() != h.f || filters.in_depth() != h.di || filters.out_depth() != h.do_ {
        return Err(KernelError::ShapeMismatch("filter extents do not match layer".into()).into());
    }
    Ok(())
}

/// An in-flight transfer whose payload becomes visible at wait time.
struct PendingLoad<T> {
    ticket: TransferTicket,
    payload: Vec<T>,
}

fn wait_load<T: Element>(m: &mut Machine, p: PendingLoad<T>) -> Result<Vec<T>, ScheduleError> {
    m.dma_wait(p.ticket)?;
    Ok(p.payload)
}

struct ConvTaskLayout {
    out_bytes: usize,
    in_bytes: usize,
    filt_bytes: usize,
    share_bytes: usize,
}

impl ConvTaskLayout {
    fn new(h: &LayerHyperparams, width: usize, reuse: bool) -> Self {
        let wb = h.word_bytes();
        let in_bufs = h.di.min(2);
        let filt_bufs = (h.di * width).min(2);
        Self {
            out_bytes: width * h.wo * h.wo * wb,
            in_bytes: in_bufs * h.wi * h.wi * wb,
            filt_bytes: filt_bufs * h.f * h.f * wb,
            share_bytes: if reuse { h.wi * h.wi * wb } else { 0 },
        }
    }

    fn total(&self) -> usize {
        self.out_bytes + self.in_bytes + self.filt_bytes + self.share_bytes
    }
}

/// Shared walk for the three conv schedules. `stack` is the output depth
/// slices per task; `reuse` turns on the L2-quadrant input slice ring.
fn run_conv_engine<T: Element>(
    cfg: &MachineConfig,
    h: &LayerHyperparams,
    input: &Volume<T>,
    filters: &Filters<T>,
    stack: usize,
    reuse: bool,
) -> Result<(Volume<T>, TrafficReport), ScheduleError> {
    check_conv_run(h, input, filters)?;
    if stack < 1 {
        return Err(ScheduleError::InvalidStackDepth(stack));
    }
    if reuse {
        if h.di < REUSE_RING {
            return Err(ScheduleError::UnsupportedDepth(h.di));
        }
        if cfg.clusters_per_l2_quad() != REUSE_RING {
            return Err(ScheduleError::UnsupportedTopology(format!(
                "{REUSE_RING}-cluster L2 quadrants for input slice reuse"
            )));
        }
    }
    let mut m = Machine::new(cfg.clone())?;
    let wi_words = (h.wi * h.wi) as u64;
    let f_words = (h.f * h.f) as u64;
    let tasks = h.do_.div_ceil(stack);
    m.set_active_clusters(tasks.min(cfg.clusters));

    let mut out = Volume::zeros(h.wo, h.wo, h.do_, 1);

    let load_input = |m: &mut Machine,
                      c: ClusterId,
                      src: DmaSource,
                      d: usize|
     -> Result<PendingLoad<T>, ScheduleError> {
        let ticket = m.dma_load(c, src, wi_words, h.precision)?;
        Ok(PendingLoad {
            ticket,
            payload: input.slice_view(d, 0)?.as_slice().to_vec(),
        })
    };
    let load_filter = |m: &mut Machine,
                       c: ClusterId,
                       d: usize,
                       o: usize|
     -> Result<PendingLoad<T>, ScheduleError> {
        let ticket = m.dma_load(c, DmaSource::MainMemory, f_words, h.precision)?;
        Ok(PendingLoad {
            ticket,
            payload: filters.kernel(d, o)?.as_slice().to_vec(),
        })
    };

    for group_first in (0..tasks).step_by(REUSE_RING) {
        let group_size = (tasks - group_first).min(REUSE_RING);
        for task in group_first..group_first + group_size {
            let c = cluster_of(task, cfg.clusters);
            let begin = task * stack;
            let end = (begin + stack).min(h.do_);
            let width = end - begin;

            let layout = ConvTaskLayout::new(h, width, reuse);
            m.alloc(c, layout.total())?;

            let mut out_stack = vec![T::default(); width * h.wo * h.wo];

            // Input slice visit order. The reuse schedule walks 16-slice
            // blocks, each rotated by the in-quadrant position, so the
            // ring wrap stays in step; the plain schedules go 0..di.
            let ring_pos = task % REUSE_RING;
            let block_of = |j: usize| {
                let t = j / REUSE_RING * REUSE_RING;
                (t, (h.di - t).min(REUSE_RING))
            };
            let slice_at = move |j: usize| {
                if !reuse {
                    return j;
                }
                let (t, m) = block_of(j);
                t + (ring_pos + j) % m
            };

            // Neighbor one position up the ring holds the next slice. The
            // last task of a partial group has no neighbor and falls back
            // to main memory for every slice.
            let neighbor_pos = (ring_pos + 1) % REUSE_RING;
            let neighbor = if reuse && group_size > 1 && neighbor_pos < group_size {
                Some(cluster_of(group_first + neighbor_pos, cfg.clusters))
            } else {
                None
            };

            let input_source = |j: usize| -> DmaSource {
                let Some(n) = neighbor else {
                    return DmaSource::MainMemory;
                };
                let (t, m) = block_of(j);
                // every block opens with a fresh main-memory load on every
                // cluster; the wrap handoff is in step only in full blocks
                if j == t || (neighbor_pos == 0 && m < REUSE_RING) {
                    return DmaSource::MainMemory;
                }
                // schedule validity: the neighbor held this slice in the
                // previous epoch
                let held = t + (neighbor_pos + j - 1) % m;
                assert_eq!(held, slice_at(j), "neighbor handoff out of step");
                DmaSource::Cluster(n)
            };

            // Filter (di, do) pairs in walk order, double-buffered uniformly.
            let filter_pair = |k: usize| (slice_at(k / width), begin + k % width);
            let filter_total = h.di * width;

            let mut in_cur = Some(load_input(&mut m, c, input_source(0), slice_at(0))?);
            let (d0, o0) = filter_pair(0);
            let mut filt_cur = Some(load_filter(&mut m, c, d0, o0)?);
            let mut filt_issued = 1usize;

            for j in 0..h.di {
                let in_next = if j + 1 < h.di {
                    let src = input_source(j + 1);
                    if let DmaSource::Cluster(n) = src {
                        m.sync_increment(n, c)?;
                    }
                    Some(load_input(&mut m, c, src, slice_at(j + 1))?)
                } else {
                    None
                };
                let in_data = wait_load(&mut m, in_cur.take().expect("input pipeline"))?;

                for o in begin..end {
                    if filt_issued < filter_total {
                        let (dn, on) = filter_pair(filt_issued);
                        let next = load_filter(&mut m, c, dn, on)?;
                        let prev = filt_cur.replace(next).expect("filter pipeline");
                        let kernel = wait_load(&mut m, prev)?;
                        conv2d_accumulate(
                            &mut out_stack[(o - begin) * h.wo * h.wo..(o - begin + 1) * h.wo * h.wo],
                            &in_data,
                            h.wi,
                            &kernel,
                            h.f,
                            h.p,
                            h.s,
                            h.wo,
                        );
                        filt_issued += 1;
                    } else {
                        let prev = filt_cur.take().expect("filter pipeline");
                        let kernel = wait_load(&mut m, prev)?;
                        conv2d_accumulate(
                            &mut out_stack[(o - begin) * h.wo * h.wo..(o - begin + 1) * h.wo * h.wo],
                            &in_data,
                            h.wi,
                            &kernel,
                            h.f,
                            h.p,
                            h.s,
                            h.wo,
                        );
                    }
                    m.add_macs((h.wo * h.wo) as u64 * f_words);
                }
                in_cur = in_next;
            }
            debug_assert!(in_cur.is_none() && filt_cur.is_none());

            let store = m.dma_store(c, (width * h.wo * h.wo) as u64, h.precision)?;
            m.dma_wait(store)?;
            for o in begin..end {
                let mut dst = out.slice_view_mut(o, 0)?;
                dst.as_mut_slice()
                    .copy_from_slice(&out_stack[(o - begin) * h.wo * h.wo..(o - begin + 1) * h.wo * h.wo]);
            }

            m.free(c, layout.total())?;
        }
    }

    let report = m.into_report()?;
    Ok((out, report))
}

/// Output depth slices parallelized over clusters, one per task.
pub fn run_conv_alg1<T: Element>(
    cfg: &MachineConfig,
    h: &LayerHyperparams,
    input: &Volume<T>,
    filters: &Filters<T>,
) -> Result<(Volume<T>, TrafficReport), ScheduleError> {
    run_conv_engine(cfg, h, input, filters, 1, false)
}

/// Stacks of output depth slices parallelized over clusters.
pub fn run_conv_alg2<T: Element>(
    cfg: &MachineConfig,
    h: &LayerHyperparams,
    input: &Volume<T>,
    filters: &Filters<T>,
    delta_o: usize,
) -> Result<(Volume<T>, TrafficReport), ScheduleError> {
    run_conv_engine(cfg, h, input, filters, delta_o, false)
}

/// Stacks of output depth slices with L2-quadrant input slice reuse:
/// the 16 clusters of a quadrant pass each input slice around a ring, so
/// most slices are loaded from a neighbor instead of main memory.
pub fn run_conv_alg3<T: Element>(
    cfg: &MachineConfig,
    h: &LayerHyperparams,
    input: &Volume<T>,
    filters: &Filters<T>,
    delta_o: usize,
) -> Result<(Volume<T>, TrafficReport), ScheduleError> {
    run_conv_engine(cfg, h, input, filters, delta_o, true)
}

fn check_fc_run<T: Element>(
    h: &LayerHyperparams,
    input: &Volume<T>,
    filters: &Filters<T>,
    cfg: &MachineConfig,
) -> Result<(), ScheduleError> {
    if T::PRECISION != h.precision {
        return Err(KernelError::ShapeMismatch("element precision mismatch".into()).into());
    }
    if !h.is_fully_connected() {
        return Err(
            KernelError::ShapeMismatch("fully-connected layer requires f = wi, wo = 1".into())
                .into(),
        );
    }
    if input.width() != h.wi
        || input.height() != h.wi
        || input.depth() != h.di
        || input.batch() != h.b
    {
        return Err(KernelError::ShapeMismatch("input extents do not match layer".into()).into());
    }
    if filters.field() != h.f || filters.in_depth() != h.di || filters.out_depth() != h.do_ {
        return Err(KernelError::ShapeMismatch("filter extents do not match layer".into()).into());
    }
    if !cfg.clusters.is_power_of_two() {
        return Err(ScheduleError::UnsupportedTopology(
            "a power-of-two cluster count for tree reduction".into(),
        ));
    }
    Ok(())
}

/// Pairwise tree reduction of one private volume per cluster, following
/// the quadrant tree: the in-quadrant partner with the next-lower index
/// survives each step. Sums every volume into `partials[0]` and returns
/// the inter-cluster words it moved, split by level.
///
/// The caller must have the partial volumes allocated in the ledger.
pub fn tree_reduce<T: Element>(
    m: &mut Machine,
    partials: &mut [Vec<T>],
    precision: Precision,
) -> Result<InterClusterWords, ScheduleError> {
    if partials.is_empty() {
        return Err(ScheduleError::EmptyInput);
    }
    let clusters = partials.len();
    if !clusters.is_power_of_two() {
        return Err(ScheduleError::UnsupportedTopology(
            "a power-of-two cluster count for tree reduction".into(),
        ));
    }
    let words = partials[0].len() as u64;
    let mut moved = InterClusterWords::default();
    let mut stride = 1;
    while stride < clusters {
        for base in (0..clusters).step_by(2 * stride) {
            let survivor = ClusterId(base);
            let partner = ClusterId(base + stride);
            if words > 0 {
                let level = m.network_level(survivor, partner)?;
                moved.add(level, words);
                let t = m.dma_load(survivor, DmaSource::Cluster(partner), words, precision)?;
                m.dma_wait(t)?;
            }
            let (head, tail) = partials.split_at_mut(base + stride);
            let dst = &mut head[base];
            let src = &tail[0];
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += *s;
            }
        }
        stride *= 2;
    }
    Ok(moved)
}

/// FC layer: input depth slices parallelized over clusters, private output
/// volumes tree-reduced at the end.
pub fn run_fc_alg4<T: Element>(
    cfg: &MachineConfig,
    h: &LayerHyperparams,
    input: &Volume<T>,
    filters: &Filters<T>,
) -> Result<(Volume<T>, TrafficReport), ScheduleError> {
    run_fc_engine(cfg, h, input, filters, h.do_)
}

/// FC layer processed in stacks of `delta_o` output depth slices; each
/// stack runs the parallel-input-slices schedule and is reduced and
/// stored before the next begins.
pub fn run_fc_alg5<T: Element>(
    cfg: &MachineConfig,
    h: &LayerHyperparams,
    input: &Volume<T>,
    filters: &Filters<T>,
    delta_o: usize,
) -> Result<(Volume<T>, TrafficReport), ScheduleError> {
    if delta_o < 1 {
        return Err(ScheduleError::InvalidStackDepth(delta_o));
    }
    run_fc_engine(cfg, h, input, filters, delta_o)
}

fn run_fc_engine<T: Element>(
    cfg: &MachineConfig,
    h: &LayerHyperparams,
    input: &Volume<T>,
    filters: &Filters<T>,
    delta_o: usize,
) -> Result<(Volume<T>, TrafficReport), ScheduleError> {
    check_fc_run(h, input, filters, cfg)?;
    if delta_o < 1 {
        return Err(ScheduleError::InvalidStackDepth(delta_o));
    }
    let mut m = Machine::new(cfg.clone())?;
    let wb = h.word_bytes();
    let wi_words = (h.wi * h.wi) as u64;
    m.set_active_clusters(h.di.min(cfg.clusters));

    let mut out = Volume::zeros(1, 1, h.do_, h.b);
    let root = ClusterId(0);

    for begin in (0..h.do_).step_by(delta_o) {
        let end = (begin + delta_o).min(h.do_);
        let width = end - begin;
        let stack_words = width * h.b;

        // private output stacks, one per cluster
        for c in 0..cfg.clusters {
            m.alloc(ClusterId(c), stack_words * wb)?;
        }
        let mut partials: Vec<Vec<T>> = vec![vec![T::default(); stack_words]; cfg.clusters];

        for di in 0..h.di {
            let c = cluster_of(di, cfg.clusters);
            let in_bytes = h.wi * h.wi * h.b * wb;
            let filt_bytes = width.min(2) * h.wi * h.wi * wb;
            m.alloc(c, in_bytes + filt_bytes)?;

            let in_ticket = m.dma_load(c, DmaSource::MainMemory, wi_words * h.b as u64, h.precision)?;
            let mut batch: Vec<&[T]> = Vec::with_capacity(h.b);
            let mut filt_cur = Some(PendingLoad {
                ticket: m.dma_load(c, DmaSource::MainMemory, wi_words, h.precision)?,
                payload: filters.kernel(di, begin)?.as_slice().to_vec(),
            });
            m.dma_wait(in_ticket)?;
            for b in 0..h.b {
                batch.push(input.slice_view(di, b)?.as_slice());
            }

            let partial = &mut partials[c.0];
            for o in begin..end {
                if o + 1 < end {
                    let next = PendingLoad {
                        ticket: m.dma_load(c, DmaSource::MainMemory, wi_words, h.precision)?,
                        payload: filters.kernel(di, o + 1)?.as_slice().to_vec(),
                    };
                    let prev = filt_cur.replace(next).expect("filter pipeline");
                    let kernel = wait_load(&mut m, prev)?;
                    for (b, plane) in batch.iter().enumerate() {
                        partial[(o - begin) + width * b] += elem_mac_flat(plane, &kernel);
                        m.add_macs(wi_words);
                    }
                } else {
                    let prev = filt_cur.take().expect("filter pipeline");
                    let kernel = wait_load(&mut m, prev)?;
                    for (b, plane) in batch.iter().enumerate() {
                        partial[(o - begin) + width * b] += elem_mac_flat(plane, &kernel);
                        m.add_macs(wi_words);
                    }
                }
            }
            m.free(c, in_bytes + filt_bytes)?;
        }

        tree_reduce(&mut m, &mut partials, h.precision)?;

        let store = m.dma_store(root, stack_words as u64, h.precision)?;
        m.dma_wait(store)?;
        for b in 0..h.b {
            for o in begin..end {
                out.set(0, 0, o, b, partials[0][(o - begin) + width * b]);
            }
        }

        for c in 0..cfg.clusters {
            m.free(ClusterId(c), stack_words * wb)?;
        }
    }

    let report = m.into_report()?;
    Ok((out, report))
}

/// Dispatch over the schedule kinds. `delta_o` is required for the
/// stacked kinds and ignored by the others.
pub fn run_schedule<T: Element>(
    kind: ScheduleKind,
    cfg: &MachineConfig,
    h: &LayerHyperparams,
    input: &Volume<T>,
    filters: &Filters<T>,
    delta_o: Option<usize>,
) -> Result<(Volume<T>, TrafficReport), ScheduleError> {
    let stack = || delta_o.ok_or(ScheduleError::InvalidStackDepth(0));
    match kind {
        ScheduleKind::ConvAlg1 => run_conv_alg1(cfg, h, input, filters),
        ScheduleKind::ConvAlg2 => run_conv_alg2(cfg, h, input, filters, stack()?),
        ScheduleKind::ConvAlg3 => run_conv_alg3(cfg, h, input, filters, stack()?),
        ScheduleKind::FcAlg4 => run_fc_alg4(cfg, h, input, filters),
        ScheduleKind::FcAlg5 => run_fc_alg5(cfg, h, input, filters, stack()?),
    }
}

/// Per-element tolerance for schedules that reorder accumulation.
pub fn tolerances(p: Precision) -> (f64, f64) {
    match p {
        Precision::Single => (1e-5, 1e-6),
        Precision::Double => (1e-12, 1e-14),
    }
}

/// Largest tolerance violation between two equally-shaped volumes:
/// `max(|sim - oracle| - (rtol * |oracle| + atol))`, negative when all
/// elements pass. Also returns the raw max absolute error.
pub fn compare_volumes<T: Element>(
    sim: &Volume<T>,
    oracle: &Volume<T>,
    rtol: f64,
    atol: f64,
) -> (f64, f64) {
    debug_assert_eq!(sim.len(), oracle.len());
    let mut worst = f64::NEG_INFINITY;
    let mut max_abs = 0.0f64;
    for (s, o) in sim.data().iter().zip(oracle.data().iter()) {
        let s = s.to_f64();
        let o = o.to_f64();
        let err = (s - o).abs();
        max_abs = max_abs.max(err);
        worst = worst.max(err - (rtol * o.abs() + atol));
    }
    (worst, max_abs)
}
