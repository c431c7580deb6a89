//! Batch front door: config loading, schedule execution with oracle and
//! formula cross-checks, roofline sweeps, and the golden-number suite.
//!
//! Exit codes: 0 all checks pass; 1 counter or numeric mismatch; 2 config
//! error; 3 local memory overflow.

use crate::analytic::{
    self, ratio_to_f64, render_1dp, AnalyticPrediction, BoundClass, Boundedness,
};
use crate::kernels::{oracle_conv_layer, oracle_fc_layer};
use crate::machine::{MachineConfig, MachineError, TrafficReport};
use crate::schedules::{
    compare_volumes, max_stack_depth, run_schedule, tolerances, ScheduleError, ScheduleKind,
};
use crate::tensor::{Element, Filters, LayerHyperparams, Precision, Volume};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_MISMATCH: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_OVERFLOW: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    /// Anything wrong with inputs: file IO, parse, invalid geometry.
    Config(String),
    /// A cluster blew its local memory budget.
    Overflow(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Overflow(m) => write!(f, "local memory overflow: {m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Overflow(_) => EXIT_OVERFLOW,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn schedule_err(e: ScheduleError) -> CliError {
    match e {
        ScheduleError::Machine(MachineError::LocalMemoryOverflow {
            cluster,
            current,
            requested,
            capacity,
        }) => CliError::Overflow(format!(
            "cluster {cluster} needs {} bytes ({} held + {requested} requested) \
             against a {capacity}-byte local memory",
            current + requested,
            current
        )),
        other => CliError::Config(other.to_string()),
    }
}

// ---------------------------------------------------------------------------
// Config file

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub layer: LayerSection,
    pub precision: Precision,
    pub schedule: ScheduleKind,
    #[serde(default)]
    pub delta_o: Option<DeltaO>,
    #[serde(default)]
    pub machine: MachineConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_data")]
    pub data: String,
}

fn default_data() -> String {
    "synthetic".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSection {
    pub wi: usize,
    pub di: usize,
    #[serde(rename = "do")]
    pub do_: usize,
    pub f: usize,
    #[serde(default)]
    pub p: usize,
    #[serde(default = "one")]
    pub s: usize,
    #[serde(default = "one")]
    pub b: usize,
}

fn one() -> usize {
    1
}

/// Stack depth: a literal or "auto" for the largest feasible value.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(untagged)]
pub enum DeltaO {
    Value(usize),
    Keyword(String),
}

impl DeltaO {
    fn parse(s: &str) -> Result<Self, CliError> {
        if s == "auto" {
            Ok(DeltaO::Keyword("auto".into()))
        } else {
            s.parse()
                .map(DeltaO::Value)
                .map_err(|_| CliError::Config(format!("delta-o must be an integer or \"auto\", got {s:?}")))
        }
    }
}

/// A config resolved against CLI overrides, ready to execute.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub kind: ScheduleKind,
    pub h: LayerHyperparams,
    pub machine: MachineConfig,
    pub delta_o: Option<usize>,
    pub seed: u64,
    pub data: String,
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(config_err)
}

pub fn resolve(cfg: &RunConfig, over: &Overrides) -> Result<Resolved, CliError> {
    let precision = over.precision.unwrap_or(cfg.precision);
    let l = &cfg.layer;
    let h = LayerHyperparams::new(l.wi, l.di, l.do_, l.f, l.p, l.s, l.b, precision)
        .map_err(config_err)?;
    let machine = cfg.machine.clone();
    machine.validate().map_err(config_err)?;

    let delta = over.delta_o.clone().or_else(|| cfg.delta_o.clone());
    let delta_o = if cfg.schedule.uses_stacking() {
        match delta {
            Some(DeltaO::Value(v)) if v >= 1 => Some(v),
            Some(DeltaO::Value(v)) => {
                return Err(CliError::Config(format!("delta_o must be at least 1, got {v}")))
            }
            Some(DeltaO::Keyword(k)) if k == "auto" => {
                Some(max_stack_depth(cfg.schedule, &h, &machine).map_err(config_err)?)
            }
            Some(DeltaO::Keyword(k)) => {
                return Err(CliError::Config(format!(
                    "delta_o must be an integer or \"auto\", got {k:?}"
                )))
            }
            None => {
                return Err(CliError::Config(format!(
                    "schedule {} needs delta_o (an integer or \"auto\")",
                    cfg.schedule.name()
                )))
            }
        }
    } else {
        None
    };

    Ok(Resolved {
        kind: cfg.schedule,
        h,
        machine,
        delta_o,
        seed: over.seed.unwrap_or(cfg.seed),
        data: cfg.data.clone(),
    })
}

// ---------------------------------------------------------------------------
// Data: synthetic generation and the tensor file format

const VOLUME_TAG: u32 = 1;
const FILTERS_TAG: u32 = 2;

/// Deterministic values in [-1, 1) for reproducible oracle comparisons.
pub fn synthetic_data<T: Element>(h: &LayerHyperparams, seed: u64) -> (Volume<T>, Filters<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut input = Volume::zeros(h.wi, h.wi, h.di, h.b);
    for b in 0..h.b {
        for d in 0..h.di {
            for y in 0..h.wi {
                for x in 0..h.wi {
                    input.set(x, y, d, b, T::from_f64(rng.gen_range(-1.0..1.0)));
                }
            }
        }
    }
    let mut filters = Filters::zeros(h.f, h.di, h.do_);
    for o in 0..h.do_ {
        for d in 0..h.di {
            for v in filters.kernel_mut(d, o) {
                *v = T::from_f64(rng.gen_range(-1.0..1.0));
            }
        }
    }
    (input, filters)
}

fn write_header<W: Write>(
    w: &mut W,
    tag: u32,
    dims: [u32; 4],
    precision: Precision,
) -> std::io::Result<()> {
    for v in [tag, dims[0], dims[1], dims[2], dims[3]] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&[match precision {
        Precision::Single => 4u8,
        Precision::Double => 8u8,
    }])
}

fn read_header<R: Read>(r: &mut R) -> std::io::Result<(u32, [u32; 4], u8)> {
    let mut buf = [0u8; 4];
    let mut vals = [0u32; 5];
    for v in vals.iter_mut() {
        r.read_exact(&mut buf)?;
        *v = u32::from_le_bytes(buf);
    }
    let mut p = [0u8; 1];
    r.read_exact(&mut p)?;
    Ok((vals[0], [vals[1], vals[2], vals[3], vals[4]], p[0]))
}

fn write_words<T: Element, W: Write>(w: &mut W, data: &[T]) -> std::io::Result<()> {
    match T::PRECISION {
        Precision::Single => {
            for v in data {
                w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
            }
        }
        Precision::Double => {
            for v in data {
                w.write_all(&v.to_f64().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_words<T: Element, R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<T>> {
    let mut out = Vec::with_capacity(n);
    match T::PRECISION {
        Precision::Single => {
            let mut buf = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                out.push(T::from_f64(f32::from_le_bytes(buf) as f64));
            }
        }
        Precision::Double => {
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                out.push(T::from_f64(f64::from_le_bytes(buf)));
            }
        }
    }
    Ok(out)
}

fn check_precision_byte<T: Element>(byte: u8) -> Result<(), CliError> {
    let expect = T::PRECISION.word_bytes() as u8;
    if byte != expect {
        return Err(CliError::Config(format!(
            "tensor file holds {byte}-byte words, layer expects {expect}-byte"
        )));
    }
    Ok(())
}

pub fn write_volume<T: Element>(path: &Path, v: &Volume<T>) -> Result<(), CliError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(config_err)?);
    write_header(
        &mut w,
        VOLUME_TAG,
        [
            v.width() as u32,
            v.height() as u32,
            v.depth() as u32,
            v.batch() as u32,
        ],
        T::PRECISION,
    )
    .map_err(config_err)?;
    write_words(&mut w, v.data()).map_err(config_err)
}

pub fn read_volume<T: Element>(path: &Path) -> Result<Volume<T>, CliError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(config_err)?);
    let (tag, dims, p) = read_header(&mut r).map_err(config_err)?;
    if tag != VOLUME_TAG {
        return Err(CliError::Config(format!(
            "expected a volume file (tag {VOLUME_TAG}), got tag {tag}"
        )));
    }
    check_precision_byte::<T>(p)?;
    let [w, h, d, b] = dims.map(|x| x as usize);
    let data = read_words(&mut r, w * h * d * b).map_err(config_err)?;
    Volume::from_data(w, h, d, b, data).map_err(config_err)
}

pub fn write_filters<T: Element>(path: &Path, f: &Filters<T>) -> Result<(), CliError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(config_err)?);
    write_header(
        &mut w,
        FILTERS_TAG,
        [
            f.field() as u32,
            f.field() as u32,
            f.in_depth() as u32,
            f.out_depth() as u32,
        ],
        T::PRECISION,
    )
    .map_err(config_err)?;
    write_words(&mut w, f.data()).map_err(config_err)
}

pub fn read_filters<T: Element>(path: &Path) -> Result<Filters<T>, CliError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(config_err)?);
    let (tag, dims, p) = read_header(&mut r).map_err(config_err)?;
    if tag != FILTERS_TAG {
        return Err(CliError::Config(format!(
            "expected a filters file (tag {FILTERS_TAG}), got tag {tag}"
        )));
    }
    check_precision_byte::<T>(p)?;
    let [f0, f1, di, do_] = dims.map(|x| x as usize);
    if f0 != f1 {
        return Err(CliError::Config(format!(
            "filters must be square, got {f0}x{f1}"
        )));
    }
    let data = read_words(&mut r, f0 * f1 * di * do_).map_err(config_err)?;
    Filters::from_data(f0, di, do_, data).map_err(config_err)
}

fn load_data<T: Element>(res: &Resolved) -> Result<(Volume<T>, Filters<T>), CliError> {
    if res.data == "synthetic" {
        Ok(synthetic_data(&res.h, res.seed))
    } else {
        let dir = Path::new(&res.data);
        Ok((
            read_volume(&dir.join("input.tensor"))?,
            read_filters(&dir.join("filters.tensor"))?,
        ))
    }
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Serialize)]
pub struct ConfigReport {
    pub schedule: &'static str,
    pub precision: String,
    pub wi: usize,
    pub di: usize,
    pub wo: usize,
    #[serde(rename = "do")]
    pub do_: usize,
    pub f: usize,
    pub p: usize,
    pub s: usize,
    pub b: usize,
    pub delta_o: Option<usize>,
    pub seed: u64,
    pub data: String,
}

impl ConfigReport {
    fn new(res: &Resolved) -> Self {
        Self {
            schedule: res.kind.name(),
            precision: res.h.precision.to_string(),
            wi: res.h.wi,
            di: res.h.di,
            wo: res.h.wo,
            do_: res.h.do_,
            f: res.h.f,
            p: res.h.p,
            s: res.h.s,
            b: res.h.b,
            delta_o: res.delta_o,
            seed: res.seed,
            data: res.data.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CcrReport {
    pub value: f64,
    pub rendered: String,
}

impl CcrReport {
    fn new(r: analytic::Ccr) -> Self {
        Self {
            value: ratio_to_f64(r),
            rendered: render_1dp(r),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyticReport {
    pub macs: u64,
    pub offchip_load_words: u64,
    pub offchip_store_words: u64,
    pub inter_cluster_words: crate::machine::InterClusterWords,
    pub inter_cluster_total: u64,
    pub sync_messages: u64,
    pub peak_local_mem_bytes: u64,
    pub min_footprint_words: u64,
    pub min_footprint_kib: String,
    pub active_clusters: usize,
    pub ccr_mac_per_word: CcrReport,
    pub ccr_flop_per_byte: CcrReport,
    pub offchip_ccr_mac_per_word: CcrReport,
    pub in_formula_regime: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub formula_offchip_input_words: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub formula_inter_cluster_words: Option<u64>,
}

impl AnalyticReport {
    fn new(p: &AnalyticPrediction, word_bytes: u64) -> Self {
        Self {
            macs: p.macs,
            offchip_load_words: p.offchip_load_words,
            offchip_store_words: p.offchip_store_words,
            inter_cluster_words: p.inter_cluster_words,
            inter_cluster_total: p.inter_cluster_words.total(),
            sync_messages: p.sync_messages,
            peak_local_mem_bytes: p.peak_local_mem_bytes,
            min_footprint_words: p.min_footprint_words,
            min_footprint_kib: analytic::kib_upper_1dp(p.min_footprint_words * word_bytes),
            active_clusters: p.active_clusters,
            ccr_mac_per_word: CcrReport::new(p.ccr_mac_per_word),
            ccr_flop_per_byte: CcrReport::new(p.ccr_flop_per_byte),
            offchip_ccr_mac_per_word: CcrReport::new(p.offchip_ccr_mac_per_word),
            in_formula_regime: p.in_formula_regime,
            formula_offchip_input_words: p.formula_offchip_input_words,
            formula_inter_cluster_words: p.formula_inter_cluster_words,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub class: &'static str,
    pub machine_balance_macs_per_cycle: u64,
    pub machine_balance_words_per_cycle: u64,
}

impl BoundReport {
    fn new(b: BoundClass) -> Self {
        Self {
            class: match b.class {
                Boundedness::ComputeBound => "compute_bound",
                Boundedness::MemoryBound => "memory_bound",
            },
            machine_balance_macs_per_cycle: b.machine_balance.0,
            machine_balance_words_per_cycle: b.machine_balance.1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MatchReport {
    pub macs: bool,
    pub offchip_load_words: bool,
    pub offchip_store_words: bool,
    pub inter_cluster_words: bool,
    pub sync_messages: bool,
    pub peak_local_mem_bytes: bool,
    pub active_clusters: bool,
    pub all: bool,
}

impl MatchReport {
    fn new(t: &TrafficReport, a: &AnalyticPrediction) -> Self {
        let mut m = Self {
            macs: t.macs == a.macs,
            offchip_load_words: t.offchip_load_words == a.offchip_load_words,
            offchip_store_words: t.offchip_store_words == a.offchip_store_words,
            inter_cluster_words: t.inter_cluster_words == a.inter_cluster_words,
            sync_messages: t.sync_messages == a.sync_messages,
            peak_local_mem_bytes: t.peak_local_mem_bytes as u64 == a.peak_local_mem_bytes,
            active_clusters: t.active_clusters == a.active_clusters,
            all: false,
        };
        m.all = m.macs
            && m.offchip_load_words
            && m.offchip_store_words
            && m.inter_cluster_words
            && m.sync_messages
            && m.peak_local_mem_bytes
            && m.active_clusters;
        m
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub max_abs_error: f64,
    pub rtol: f64,
    pub atol: f64,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub config: ConfigReport,
    pub traffic: TrafficReport,
    pub analytic: AnalyticReport,
    pub matches: MatchReport,
    pub oracle: OracleReport,
    pub bound: BoundReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeReport {
    pub config: ConfigReport,
    pub analytic: AnalyticReport,
    pub bound: BoundReport,
}

// ---------------------------------------------------------------------------
// Output plumbing

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutFormat {
    Json,
    Csv,
}

/// Flatten a JSON tree into dotted-key CSV rows for diff-friendly output.
fn flatten_json(prefix: &str, v: &serde_json::Value, rows: &mut Vec<(String, String)>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, val) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_json(&key, val, rows);
            }
        }
        serde_json::Value::Array(items) => {
            for (i, val) in items.iter().enumerate() {
                flatten_json(&format!("{prefix}[{i}]"), val, rows);
            }
        }
        other => rows.push((prefix.to_string(), render_scalar(other))),
    }
}

fn render_scalar(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn render_report<S: Serialize>(report: &S, format: OutFormat) -> Result<String, CliError> {
    let value = serde_json::to_value(report).map_err(config_err)?;
    Ok(match format {
        OutFormat::Json => {
            let mut s = serde_json::to_string_pretty(&value).map_err(config_err)?;
            s.push('\n');
            s
        }
        OutFormat::Csv => {
            let mut rows = Vec::new();
            flatten_json("", &value, &mut rows);
            let mut s = String::from("key,value\n");
            for (k, v) in rows {
                let _ = writeln!(s, "{k},{v}");
            }
            s
        }
    })
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(config_err),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// Commands

fn execute_run<T: Element>(res: &Resolved) -> Result<(TrafficReport, OracleReport), CliError> {
    let (input, filters) = load_data::<T>(res)?;
    let (sim, traffic) =
        run_schedule(res.kind, &res.machine, &res.h, &input, &filters, res.delta_o)
            .map_err(schedule_err)?;
    let oracle = if res.kind.is_conv() {
        oracle_conv_layer(&res.h, &input, &filters)
    } else {
        oracle_fc_layer(&res.h, &input, &filters)
    }
    .map_err(config_err)?;
    let (rtol, atol) = tolerances(res.h.precision);
    let (worst, max_abs) = compare_volumes(&sim, &oracle, rtol, atol);
    Ok((
        traffic,
        OracleReport {
            max_abs_error: max_abs,
            rtol,
            atol,
            within_tolerance: worst <= 0.0,
        },
    ))
}

pub fn cmd_run(res: &Resolved, format: OutFormat, out: Option<&Path>) -> Result<i32, CliError> {
    let pred =
        analytic::predict(res.kind, &res.h, res.delta_o, &res.machine).map_err(config_err)?;
    let (traffic, oracle) = match res.h.precision {
        Precision::Single => execute_run::<f32>(res),
        Precision::Double => execute_run::<f64>(res),
    }
    .map_err(|e| match e {
        CliError::Overflow(m) => CliError::Overflow(format!(
            "{m}; the schedule requires {} words per cluster",
            pred.min_footprint_words
        )),
        other => other,
    })?;
    let matches = MatchReport::new(&traffic, &pred);
    let ok = matches.all && oracle.within_tolerance;
    let report = RunReport {
        config: ConfigReport::new(res),
        traffic,
        analytic: AnalyticReport::new(&pred, res.h.word_bytes() as u64),
        matches,
        oracle,
        bound: BoundReport::new(analytic::classify(&pred, &res.machine, res.h.precision)),
    };
    emit(&render_report(&report, format)?, out)?;
    Ok(if ok { EXIT_OK } else { EXIT_MISMATCH })
}

pub fn cmd_analyze(res: &Resolved, format: OutFormat, out: Option<&Path>) -> Result<i32, CliError> {
    let pred =
        analytic::predict(res.kind, &res.h, res.delta_o, &res.machine).map_err(config_err)?;
    let report = AnalyzeReport {
        config: ConfigReport::new(res),
        analytic: AnalyticReport::new(&pred, res.h.word_bytes() as u64),
        bound: BoundReport::new(analytic::classify(&pred, &res.machine, res.h.precision)),
    };
    emit(&render_report(&report, format)?, out)?;
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub param: String,
    pub value: usize,
    pub ccr_mac_per_word: f64,
    pub ccr_rendered: String,
    pub offchip_words: u64,
    pub class: &'static str,
}

/// Parse "1,2,3" lists and "1..24" inclusive ranges.
pub fn parse_values(spec: &str) -> Result<Vec<usize>, CliError> {
    let spec = spec.trim();
    if let Some((lo, hi)) = spec.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(config_err)?;
        let hi: usize = hi.trim().parse().map_err(config_err)?;
        if lo > hi {
            return Err(CliError::Config(format!("empty range {lo}..{hi}")));
        }
        return Ok((lo..=hi).collect());
    }
    let vals: Result<Vec<usize>, _> = spec
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse())
        .collect();
    let vals = vals.map_err(config_err)?;
    if vals.is_empty() {
        return Err(CliError::Config("empty sweep value list".into()));
    }
    Ok(vals)
}

pub fn sweep_rows(res: &Resolved, param: &str, values: &[usize]) -> Result<Vec<SweepRow>, CliError> {
    if values.is_empty() {
        return Err(CliError::Config("empty sweep value list".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let h0 = res.h;
        let (h, delta) = match param {
            "delta_o" => (h0, Some(v)),
            "b" => (
                LayerHyperparams::new(h0.wi, h0.di, h0.do_, h0.f, h0.p, h0.s, v, h0.precision)
                    .map_err(config_err)?,
                res.delta_o,
            ),
            "do" => (
                LayerHyperparams::new(h0.wi, h0.di, v, h0.f, h0.p, h0.s, h0.b, h0.precision)
                    .map_err(config_err)?,
                res.delta_o,
            ),
            "f" => (
                LayerHyperparams::new(h0.wi, h0.di, h0.do_, v, h0.p, h0.s, h0.b, h0.precision)
                    .map_err(config_err)?,
                res.delta_o,
            ),
            "wi" => (
                LayerHyperparams::new(v, h0.di, h0.do_, h0.f, h0.p, h0.s, h0.b, h0.precision)
                    .map_err(config_err)?,
                res.delta_o,
            ),
            other => {
                return Err(CliError::Config(format!(
                    "unknown sweep parameter {other:?}; expected delta_o, b, do, f or wi"
                )))
            }
        };
        let delta = if res.kind.uses_stacking() {
            match delta {
                Some(d) => Some(d),
                None => return Err(CliError::Config("sweep needs delta_o for stacked schedules".into())),
            }
        } else {
            None
        };
        let pred = analytic::predict(res.kind, &h, delta, &res.machine).map_err(config_err)?;
        let bound = analytic::classify(&pred, &res.machine, h.precision);
        rows.push(SweepRow {
            param: param.to_string(),
            value: v,
            ccr_mac_per_word: ratio_to_f64(pred.ccr_mac_per_word),
            ccr_rendered: render_1dp(pred.ccr_mac_per_word),
            offchip_words: pred.offchip_load_words + pred.offchip_store_words,
            class: BoundReport::new(bound).class,
        });
    }
    Ok(rows)
}

pub fn cmd_sweep(
    res: &Resolved,
    param: &str,
    values: &[usize],
    format: OutFormat,
    out: Option<&Path>,
) -> Result<i32, CliError> {
    let rows = sweep_rows(res, param, values)?;
    let text = match format {
        OutFormat::Csv => {
            let mut s = String::from("param,value,ccr_mac_per_word,ccr_rendered,offchip_words,class\n");
            for r in &rows {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    r.param, r.value, r.ccr_mac_per_word, r.ccr_rendered, r.offchip_words, r.class
                );
            }
            s
        }
        OutFormat::Json => {
            let mut s = serde_json::to_string_pretty(&rows).map_err(config_err)?;
            s.push('\n');
            s
        }
    };
    emit(&text, out)?;
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// Paper suite

struct Suite {
    lines: Vec<String>,
    failures: usize,
}

impl Suite {
    fn new() -> Self {
        Self {
            lines: Vec::new(),
            failures: 0,
        }
    }

    fn row(&mut self, name: &str, expected: impl std::fmt::Display, got: impl std::fmt::Display) {
        let e = expected.to_string();
        let g = got.to_string();
        let pass = e == g;
        if !pass {
            self.failures += 1;
        }
        self.lines.push(format!(
            "{} {name}: expected {e}, got {g}",
            if pass { "PASS" } else { "FAIL" }
        ));
    }

    fn note(&mut self, text: &str) {
        self.lines.push(format!("NOTE {text}"));
    }
}

/// Every quoted golden number, checked at desk scale against the current
/// machine config. Simulated rows use reduced FC sizes so the suite stays
/// fast; formula rows use the exact published layers.
pub fn cmd_paper_suite(machine: &MachineConfig, out: Option<&Path>) -> Result<i32, CliError> {
    machine.validate().map_err(config_err)?;
    let mut suite = Suite::new();

    run_paper_suite(machine, &mut suite)?;

    let mut text = suite.lines.join("\n");
    text.push('\n');
    let _ = writeln!(
        text,
        "{} rows, {} failed",
        suite.lines.iter().filter(|l| !l.starts_with("NOTE")).count(),
        suite.failures
    );
    emit(&text, out)?;
    Ok(if suite.failures == 0 { EXIT_OK } else { EXIT_MISMATCH })
}

fn run_paper_suite(machine: &MachineConfig, suite: &mut Suite) -> Result<(), CliError> {
    use crate::tensor::output_width;

    // 1. output geometry
    suite.row(
        "output_width(32,1,3,1)",
        32,
        output_width(32, 1, 3, 1).map_err(config_err)?,
    );
    suite.row(
        "output_width(7,0,7,1)",
        1,
        output_width(7, 0, 7, 1).map_err(config_err)?,
    );

    let conv = |p| LayerHyperparams::new(32, 128, 128, 3, 1, 1, 1, p).map_err(config_err);
    let hs = conv(Precision::Single)?;
    let hd = conv(Precision::Double)?;

    // 2. parallel output slices: golden counters and CCR
    {
        let res = Resolved {
            kind: ScheduleKind::ConvAlg1,
            h: hs,
            machine: machine.clone(),
            delta_o: None,
            seed: 0,
            data: "synthetic".into(),
        };
        let (traffic, oracle) = execute_run::<f32>(&res)?;
        suite.row("alg1 simulated macs", 150_994_944u64, traffic.macs);
        suite.row("alg1 inter-cluster words", 0u64, traffic.inter_cluster_words.total());
        suite.row("alg1 oracle exact", true, oracle.max_abs_error == 0.0);
        let p = analytic::predict(ScheduleKind::ConvAlg1, &hs, None, machine).map_err(config_err)?;
        suite.row("alg1 ccr", "8.9", render_1dp(p.ccr_mac_per_word));
        suite.row("alg1 sp flop/B", "4.4", render_1dp(p.ccr_flop_per_byte));
        let pd = analytic::predict(ScheduleKind::ConvAlg1, &hd, None, machine).map_err(config_err)?;
        suite.row("alg1 dp flop/B", "2.2", render_1dp(pd.ccr_flop_per_byte));

        // 3. footprint
        suite.row("alg1 footprint words", 2057u64, p.min_footprint_words);
        suite.row(
            "alg1 footprint single KiB",
            "8.1",
            analytic::kib_upper_1dp(p.min_footprint_words * 4),
        );
        suite.row(
            "alg1 footprint double KiB",
            "16.1",
            analytic::kib_upper_1dp(p.min_footprint_words * 8),
        );
    }

    // 4. stacked output slices
    {
        let ds = max_stack_depth(ScheduleKind::ConvAlg2, &hs, machine).map_err(config_err)?;
        let dd = max_stack_depth(ScheduleKind::ConvAlg2, &hd, machine).map_err(config_err)?;
        suite.row("alg2 auto delta_o single", 24usize, ds);
        suite.row("alg2 auto delta_o double", 12usize, dd);
        let ps = analytic::predict(ScheduleKind::ConvAlg2, &hs, Some(ds), machine).map_err(config_err)?;
        let pd = analytic::predict(ScheduleKind::ConvAlg2, &hd, Some(dd), machine).map_err(config_err)?;
        suite.row("alg2 ccr single", "141.8", render_1dp(ps.ccr_mac_per_word));
        suite.row("alg2 ccr double", "87.8", render_1dp(pd.ccr_mac_per_word));
        let res = Resolved {
            kind: ScheduleKind::ConvAlg2,
            h: hs,
            machine: machine.clone(),
            delta_o: Some(ds),
            seed: 0,
            data: "synthetic".into(),
        };
        let (traffic, _) = execute_run::<f32>(&res)?;
        suite.row("alg2 macs equal alg1", 150_994_944u64, traffic.macs);
    }

    // 5. input slice reuse
    {
        let ds = max_stack_depth(ScheduleKind::ConvAlg3, &hs, machine).map_err(config_err)?;
        let dd = max_stack_depth(ScheduleKind::ConvAlg3, &hd, machine).map_err(config_err)?;
        suite.row("alg3 auto delta_o single", 23usize, ds);
        suite.row("alg3 auto delta_o double", 11usize, dd);
        let ps = analytic::predict(ScheduleKind::ConvAlg3, &hs, Some(ds), machine).map_err(config_err)?;
        let pd = analytic::predict(ScheduleKind::ConvAlg3, &hd, Some(dd), machine).map_err(config_err)?;
        suite.row(
            "alg3 formula offchip input words (single)",
            49_152u64,
            ps.formula_offchip_input_words.unwrap_or(0),
        );
        suite.row(
            "alg3 formula inter-cluster slice words (single)",
            737_280u64,
            ps.formula_inter_cluster_words.unwrap_or(0),
        );
        suite.row(
            "alg3 offchip ccr single",
            "460.8",
            render_1dp(ps.offchip_ccr_mac_per_word),
        );
        suite.row(
            "alg3 offchip ccr double",
            "400.7",
            render_1dp(pd.offchip_ccr_mac_per_word),
        );
        suite.note(
            "alg3 quoted off-chip CCRs 541.4 (single) and 540.6 (double) are a \
             documented discrepancy; the formulas evaluate to 460.8 and 400.7",
        );

        // conservation against the plain stacked schedule at equal delta_o
        let res3 = Resolved {
            kind: ScheduleKind::ConvAlg3,
            h: hs,
            machine: machine.clone(),
            delta_o: Some(ds),
            seed: 0,
            data: "synthetic".into(),
        };
        let (t3, _) = execute_run::<f32>(&res3)?;
        let p2 = analytic::predict(ScheduleKind::ConvAlg2, &hs, Some(ds), machine).map_err(config_err)?;
        let filter_words = (hs.do_ * hs.di * hs.f * hs.f) as u64;
        suite.row(
            "alg3 input conservation",
            p2.offchip_load_words - filter_words,
            t3.offchip_load_words - filter_words + t3.inter_cluster_words.total(),
        );
    }

    // 6. fc, parallel input slices
    {
        let h4s = LayerHyperparams::fully_connected(7, 128, 4096, 32, Precision::Single)
            .map_err(config_err)?;
        let p4 = analytic::predict(ScheduleKind::FcAlg4, &h4s, None, machine).map_err(config_err)?;
        suite.row("alg4 space formula words", 132_689u64, p4.min_footprint_words);
        let res = Resolved {
            kind: ScheduleKind::FcAlg4,
            h: LayerHyperparams::fully_connected(7, 4, 4096, 32, Precision::Single)
                .map_err(config_err)?,
            machine: machine.clone(),
            delta_o: None,
            seed: 0,
            data: "synthetic".into(),
        };
        let overflowed = matches!(execute_run::<f32>(&res), Err(CliError::Overflow(_)));
        suite.row("alg4 DO=4096 overflows", true, overflowed);
        let lim_s = max_stack_depth(ScheduleKind::FcAlg5, &h4s, machine).map_err(config_err)?;
        let h4d = LayerHyperparams::fully_connected(7, 128, 4096, 32, Precision::Double)
            .map_err(config_err)?;
        let lim_d = max_stack_depth(ScheduleKind::FcAlg5, &h4d, machine).map_err(config_err)?;
        suite.row("alg4 DO limit single", 768usize, lim_s);
        suite.row("alg4 DO limit double", 384usize, lim_d);
        let hs4 = LayerHyperparams::fully_connected(7, 128, lim_s, 32, Precision::Single)
            .map_err(config_err)?;
        let hd4 = LayerHyperparams::fully_connected(7, 128, lim_d, 32, Precision::Double)
            .map_err(config_err)?;
        let ps = analytic::predict(ScheduleKind::FcAlg4, &hs4, None, machine).map_err(config_err)?;
        let pd = analytic::predict(ScheduleKind::FcAlg4, &hd4, None, machine).map_err(config_err)?;
        suite.row("alg4 ccr single", "30.7", render_1dp(ps.ccr_mac_per_word));
        suite.row("alg4 ccr double", "29.5", render_1dp(pd.ccr_mac_per_word));

        // reduced desk size for the simulated reduction split
        let clusters = machine.clusters as u64;
        let hdesk = LayerHyperparams::fully_connected(7, 16, 48, 4, Precision::Single)
            .map_err(config_err)?;
        let resd = Resolved {
            kind: ScheduleKind::FcAlg4,
            h: hdesk,
            machine: machine.clone(),
            delta_o: None,
            seed: 0,
            data: "synthetic".into(),
        };
        let (t, _) = execute_run::<f32>(&resd)?;
        let unit = (hdesk.do_ * hdesk.b) as u64;
        suite.row(
            "alg4 reduction total words",
            (clusters - 1) * unit,
            t.inter_cluster_words.total(),
        );
        let pdesk = analytic::predict(ScheduleKind::FcAlg4, &hdesk, None, machine).map_err(config_err)?;
        suite.row(
            "alg4 reduction per-level split",
            format!("{:?}", pdesk.inter_cluster_words),
            format!("{:?}", t.inter_cluster_words),
        );
    }

    // 7. fc, stacked output slices
    {
        let h5s = LayerHyperparams::fully_connected(7, 128, 4096, 32, Precision::Single)
            .map_err(config_err)?;
        let h5d = LayerHyperparams::fully_connected(7, 128, 4096, 32, Precision::Double)
            .map_err(config_err)?;
        let lim_s = max_stack_depth(ScheduleKind::FcAlg5, &h5s, machine).map_err(config_err)?;
        let lim_d = max_stack_depth(ScheduleKind::FcAlg5, &h5d, machine).map_err(config_err)?;
        suite.row("alg5 delta_o limit single", 768usize, lim_s);
        suite.row("alg5 delta_o limit double", 384usize, lim_d);
        let ps = analytic::predict(ScheduleKind::FcAlg5, &h5s, Some(lim_s), machine)
            .map_err(config_err)?;
        let pd = analytic::predict(ScheduleKind::FcAlg5, &h5d, Some(lim_d), machine)
            .map_err(config_err)?;
        suite.row("alg5 ccr single", "30.6", render_1dp(ps.ccr_mac_per_word));
        suite.row("alg5 ccr double", "29.5", render_1dp(pd.ccr_mac_per_word));

        // delta_o = do degenerates to the unstacked schedule
        let hdesk = LayerHyperparams::fully_connected(7, 16, 48, 4, Precision::Single)
            .map_err(config_err)?;
        let mk = |kind, delta| Resolved {
            kind,
            h: hdesk,
            machine: machine.clone(),
            delta_o: delta,
            seed: 0,
            data: "synthetic".into(),
        };
        let (t4, _) = execute_run::<f32>(&mk(ScheduleKind::FcAlg4, None))?;
        let (t5, _) = execute_run::<f32>(&mk(ScheduleKind::FcAlg5, Some(hdesk.do_)))?;
        suite.row(
            "alg5 delta_o=DO degenerates to alg4",
            format!("{t4:?}"),
            format!("{t5:?}"),
        );
    }

    Ok(())
}

// ---------------------------------------------------------------------------
// Argument parsing and dispatch

#[derive(Debug, Parser)]
#[command(name = "chiplet-cnn-sim", version, about = "Traffic-accounting CNN schedule simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Path to the TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report format.
    #[arg(long, value_enum, default_value = "json")]
    pub format: OutFormat,
    /// Override the configured stack depth (an integer or "auto").
    #[arg(long = "delta-o")]
    pub delta_o: Option<String>,
    /// Override the configured precision.
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// Override the configured synthetic data seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Default for OutFormat {
    fn default() -> Self {
        OutFormat::Json
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    Single,
    Double,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Execute a schedule, verify against the oracle and the formulas.
    Run(CommonArgs),
    /// Evaluate the formulas only; no simulation.
    Analyze(CommonArgs),
    /// Evaluate the formulas over a parameter range.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Parameter to sweep: delta_o, b, do, f or wi.
        #[arg(long)]
        param: String,
        /// Comma list ("1,2,3") or inclusive range ("1..24").
        #[arg(long)]
        values: String,
    },
    /// Check every published golden number at desk scale.
    PaperSuite {
        /// Optional config supplying machine overrides.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// CLI overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub delta_o: Option<DeltaO>,
    pub precision: Option<Precision>,
    pub seed: Option<u64>,
}

impl Overrides {
    fn from_args(a: &CommonArgs) -> Result<Self, CliError> {
        Ok(Self {
            delta_o: a.delta_o.as_deref().map(DeltaO::parse).transpose()?,
            precision: a.precision.map(|p| match p {
                PrecisionArg::Single => Precision::Single,
                PrecisionArg::Double => Precision::Double,
            }),
            seed: a.seed,
        })
    }
}

fn resolved_from(a: &CommonArgs) -> Result<Resolved, CliError> {
    let cfg = load_config(&a.config)?;
    resolve(&cfg, &Overrides::from_args(a)?)
}

/// Run the parsed command; returns the process exit code.
pub fn dispatch(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Run(a) => resolved_from(a).and_then(|r| cmd_run(&r, a.format, a.out.as_deref())),
        Command::Analyze(a) => {
            resolved_from(a).and_then(|r| cmd_analyze(&r, a.format, a.out.as_deref()))
        }
        Command::Sweep {
            common: a,
            param,
            values,
        } => resolved_from(a).and_then(|r| {
            let vals = parse_values(values)?;
            cmd_sweep(&r, param, &vals, a.format, a.out.as_deref())
        }),
        Command::PaperSuite { config, out } => {
            let machine = match config {
                Some(path) => match load_config_machine(path) {
                    Ok(m) => m,
                    Err(e) => {
                        eprintln!("{e}");
                        return e.exit_code();
                    }
                },
                None => MachineConfig::default(),
            };
            cmd_paper_suite(&machine, out.as_deref())
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

/// A paper-suite config only needs the `[machine]` table.
fn load_config_machine(path: &Path) -> Result<MachineConfig, CliError> {
    #[derive(Deserialize)]
    struct MachineOnly {
        #[serde(default)]
        machine: MachineConfig,
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let parsed: MachineOnly = toml::from_str(&text).map_err(config_err)?;
    parsed.machine.validate().map_err(config_err)?;
    Ok(parsed.machine)
}

pub fn main_entry() -> i32 {
    dispatch(Cli::parse())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_o_parsing() {
        assert_eq!(DeltaO::parse("auto").unwrap(), DeltaO::Keyword("auto".into()));
        assert_eq!(DeltaO::parse("24").unwrap(), DeltaO::Value(24));
        assert!(DeltaO::parse("many").is_err());
    }

    #[test]
    fn value_list_parsing() {
        assert_eq!(parse_values("1,2,3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_values("1..4").unwrap(), vec![1, 2, 3, 4]);
        assert!(parse_values("").is_err());
        assert!(parse_values("5..2").is_err());
    }

    #[test]
    fn config_round_trip() {
        let text = r#"
            precision = "single"
            schedule = "conv_alg2"
            delta_o = "auto"
            seed = 7

            [layer]
            wi = 32
            di = 128
            do = 128
            f = 3
            p = 1
        "#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        let res = resolve(&cfg, &Overrides::default()).unwrap();
        assert_eq!(res.delta_o, Some(24));
        assert_eq!(res.h.wo, 32);
        assert_eq!(res.seed, 7);
        let over = Overrides {
            delta_o: Some(DeltaO::Value(5)),
            precision: Some(Precision::Double),
            seed: Some(9),
        };
        let res = resolve(&cfg, &over).unwrap();
        assert_eq!(res.delta_o, Some(5));
        assert_eq!(res.h.precision, Precision::Double);
        assert_eq!(res.seed, 9);
    }

    #[test]
    fn unstacked_ignores_delta() {
        let text = r#"
            precision = "double"
            schedule = "conv_alg1"

            [layer]
            wi = 8
            di = 2
            do = 2
            f = 3
            p = 1
        "#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        let res = resolve(&cfg, &Overrides::default()).unwrap();
        assert_eq!(res.delta_o, None);
    }

    #[test]
    fn synthetic_is_deterministic_and_bounded() {
        let h = LayerHyperparams::new(6, 3, 2, 3, 1, 1, 1, Precision::Single).unwrap();
        let (a_in, a_f) = synthetic_data::<f32>(&h, 42);
        let (b_in, b_f) = synthetic_data::<f32>(&h, 42);
        assert_eq!(a_in, b_in);
        assert_eq!(a_f, b_f);
        let (c_in, _) = synthetic_data::<f32>(&h, 43);
        assert_ne!(a_in, c_in);
        assert!(a_in.data().iter().chain(a_f.data()).all(|v| (-1.0..1.0).contains(v)));
    }

    #[test]
    fn tensor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let h = LayerHyperparams::new(5, 2, 3, 3, 1, 1, 2, Precision::Double).unwrap();
        let (input, filters) = synthetic_data::<f64>(&h, 1);
        let vp = dir.path().join("input.tensor");
        let fp = dir.path().join("filters.tensor");
        write_volume(&vp, &input).unwrap();
        write_filters(&fp, &filters).unwrap();
        assert_eq!(read_volume::<f64>(&vp).unwrap(), input);
        assert_eq!(read_filters::<f64>(&fp).unwrap(), filters);
        // wrong precision rejected
        assert!(read_volume::<f32>(&vp).is_err());
        // swapped files rejected by tag
        assert!(read_volume::<f64>(&fp).is_err());
    }

    #[test]
    fn csv_flatten_is_stable() {
        #[derive(Serialize)]
        struct S {
            b: u32,
            a: Nested,
        }
        #[derive(Serialize)]
        struct Nested {
            x: &'static str,
        }
        let s = S {
            b: 2,
            a: Nested { x: "hi" },
        };
        let text = render_report(&s, OutFormat::Csv).unwrap();
        assert_eq!(text, "key,value\na.x,hi\nb,2\n");
    }
}
