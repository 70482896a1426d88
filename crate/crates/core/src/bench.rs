//! Latency microbenchmarks for single layers, blocks and whole graphs.
//!
//! Every measurement discards `warmup_iters` runs, times `measure_iters`
//! runs with a monotonic clock around whole forward calls, and reports the
//! median as the headline number. Reports carry the thread count, CPU model
//! and iteration counts.

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{self, FlopsConvention};
use crate::error::{Error, Result};
use crate::graph::{build_inverted_residual_block, build_residual_block, Executor, GraphBuilder, Group, ModelGraph, INPUT};
use crate::kernels::{ConvSpec, ExecOptions, KernelPath};
use crate::tensor::{Shape, Tensor};
use crate::weights::WeightStore;

/// Expansion ratio used for inverted residual blocks.
pub const INVERTED_EXPANSION: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub warmup_iters: usize,
    pub measure_iters: usize,
    /// 1 selects the deterministic single-threaded mode.
    pub threads: usize,
    pub input_shape: Shape,
    pub seed: u64,
    pub path: KernelPath,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            warmup_iters: 20,
            measure_iters: 100,
            threads: 1,
            input_shape: Shape::new(1, 16, 16, 16),
            seed: 0,
            path: KernelPath::Optimized,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_iters < 1 || self.measure_iters < 3 || self.threads < 1 {
            return Err(Error::invalid(
                "bench",
                "need warmup_iters >= 1, measure_iters >= 3, threads >= 1",
            ));
        }
        Ok(())
    }

    fn exec_options(&self) -> ExecOptions {
        ExecOptions {
            threads: self.threads,
            path: self.path,
        }
    }

    pub fn meta(&self) -> BenchMeta {
        BenchMeta {
            threads: self.threads,
            cpu_model: cpu_model(),
            warmup_iters: self.warmup_iters,
            measure_iters: self.measure_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchMeta {
    pub threads: usize,
    pub cpu_model: String,
    pub warmup_iters: usize,
    pub measure_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub stddev_ms: f64,
    pub iters: usize,
}

impl LatencyStats {
    pub fn from_samples(samples_ms: &[f64]) -> Result<Self> {
        if samples_ms.is_empty() {
            return Err(Error::invalid("latency", "no samples"));
        }
        let mut s = samples_ms.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        };
        // nearest-rank percentile
        let p95 = s[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        let mean = s.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Ok(LatencyStats {
            median_ms: median,
            mean_ms: mean,
            p95_ms: p95,
            stddev_ms: var.sqrt(),
            iters: n,
        })
    }
}

/// CPU model string from `/proc/cpuinfo`, or `"unknown"`.
pub fn cpu_model() -> String {
    std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|info| {
            info.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown".to_string())
}

fn measure(cfg: &BenchConfig, mut run: impl FnMut() -> Result<()>) -> Result<LatencyStats> {
    for _ in 0..cfg.warmup_iters {
        run()?;
    }
    let mut samples = Vec::with_capacity(cfg.measure_iters);
    for _ in 0..cfg.measure_iters {
        let start = Instant::now();
        run()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    LatencyStats::from_samples(&samples)
}

pub fn random_input(shape: Shape, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let data = (0..shape.numel()?).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Tensor::from_vec(shape, data)
}

/// Benchmarkable layer and block variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// 3x3 standard convolution, C → C.
    StdConv,
    /// 3x3 depthwise followed by 1x1 pointwise, C → C.
    DwsConv,
    /// Basic residual block, stride 1.
    ResBlock,
    /// Inverted residual block, expansion 6, stride 1.
    InvResBlock,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::StdConv => "std_conv",
            Variant::DwsConv => "dws_conv",
            Variant::ResBlock => "res_block",
            Variant::InvResBlock => "inv_res_block",
        }
    }

    pub fn graph(self, channels: usize) -> Result<ModelGraph> {
        if channels == 0 {
            return Err(Error::invalid("bench", "channels must be positive"));
        }
        match self {
            Variant::StdConv => {
                let mut b = GraphBuilder::new(Shape::new(1, channels, 16, 16));
                let out = b.conv("conv", INPUT, ConvSpec::same(channels, channels, 3, 1), Group::Other);
                b.output("out", &out);
                b.finish()
            }
            Variant::DwsConv => {
                let mut b = GraphBuilder::new(Shape::new(1, channels, 16, 16));
                let dw = b.conv("dw", INPUT, ConvSpec::depthwise(channels, 3, 1), Group::Other);
                let pw = b.conv("pw", &dw, ConvSpec::new(channels, channels, 1, 1, 0), Group::Other);
                b.output("out", &pw);
                b.finish()
            }
            Variant::ResBlock => build_residual_block(channels, 1),
            Variant::InvResBlock => build_inverted_residual_block(channels, INVERTED_EXPANSION, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pair {
    /// `std_conv` vs `dws_conv`.
    Layer,
    /// `res_block` vs `inv_res_block`.
    Block,
}

impl Pair {
    pub fn variants(self) -> [Variant; 2] {
        match self {
            Pair::Layer => [Variant::StdConv, Variant::DwsConv],
            Pair::Block => [Variant::ResBlock, Variant::InvResBlock],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Channels,
    InputSize,
    WidthMultiplier,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Channels => "channels",
            SweepAxis::InputSize => "input_size",
            SweepAxis::WidthMultiplier => "width_multiplier",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "channels" => Some(SweepAxis::Channels),
            "input_size" => Some(SweepAxis::InputSize),
            "width_multiplier" => Some(SweepAxis::WidthMultiplier),
            _ => None,
        }
    }

    /// Input shape for one sweep point, starting from `base`.
    fn shape(self, base: Shape, value: f64) -> Result<Shape> {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::invalid("bench_sweep", format!("bad axis value {value}")));
        }
        let whole = || {
            if value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::invalid("bench_sweep", format!("{} needs integers, got {value}", self.name())))
            }
        };
        Ok(match self {
            SweepAxis::Channels => base.with_channels(whole()?),
            SweepAxis::InputSize => {
                let s = whole()?;
                Shape { h: s, w: s, ..base }
            }
            SweepAxis::WidthMultiplier => base.with_channels(((16.0 * value).round() as usize).max(1)),
        })
    }
}

/// Times one forward of `graph` on a seeded random input of `cfg.input_shape`.
pub fn bench_model(graph: &ModelGraph, weights: Option<&WeightStore>, cfg: &BenchConfig) -> Result<LatencyStats> {
    cfg.validate()?;
    let random;
    let weights = match weights {
        Some(w) => w,
        None => {
            random = WeightStore::random_for(graph, cfg.seed);
            &random
        }
    };
    let exec = Executor::new(cfg.exec_options())?;
    let prepared = exec.prepare(graph, weights)?;
    let input = random_input(cfg.input_shape, cfg.seed)?;
    measure(cfg, || prepared.forward(&input).map(drop))
}

/// Latency of one layer/block variant at `cfg.input_shape`.
pub fn bench_node(variant: Variant, cfg: &BenchConfig) -> Result<LatencyStats> {
    let graph = variant.graph(cfg.input_shape.c)?;
    bench_model(&graph, None, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: &'static str,
    pub axis_value: f64,
    pub variant: &'static str,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub stddev_ms: f64,
    pub iters: usize,
    pub macs: u64,
    pub threads: usize,
    pub cpu_model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub meta: BenchMeta,
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_CSV_HEADER: [&str; 11] = [
    "axis", "axis_value", "variant", "median_ms", "mean_ms", "p95_ms", "stddev_ms", "iters", "macs", "threads", "cpu_model",
];

impl SweepTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(e.into());
        w.write_record(SWEEP_CSV_HEADER).map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.axis.to_string(),
                r.axis_value.to_string(),
                r.variant.to_string(),
                format!("{:.6}", r.median_ms),
                format!("{:.6}", r.mean_ms),
                format!("{:.6}", r.p95_ms),
                format!("{:.6}", r.stddev_ms),
                r.iters.to_string(),
                r.macs.to_string(),
                r.threads.to_string(),
                r.cpu_model.clone(),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sweep serializes")
    }

    pub fn row(&self, axis_value: f64, variant: Variant) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.axis_value == axis_value && r.variant == variant.name())
    }
}

/// Benchmarks both variants of `pair` at every axis value, in the given
/// order. Each row also carries the variant's MAC count.
pub fn bench_sweep(axis: SweepAxis, values: &[f64], pair: Pair, cfg: &BenchConfig) -> Result<SweepTable> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(Error::invalid("bench_sweep", "no axis values"));
    }
    let meta = cfg.meta();
    let mut rows = Vec::with_capacity(values.len() * 2);
    for &value in values {
        let shape = axis.shape(cfg.input_shape, value)?;
        let point = BenchConfig {
            input_shape: shape,
            ..cfg.clone()
        };
        for variant in pair.variants() {
            let graph = variant.graph(shape.c)?;
            let stats = bench_model(&graph, None, &point)?;
            rows.push(SweepRow {
                axis: axis.name(),
                axis_value: value,
                variant: variant.name(),
                median_ms: stats.median_ms,
                mean_ms: stats.mean_ms,
                p95_ms: stats.p95_ms,
                stddev_ms: stats.stddev_ms,
                iters: stats.iters,
                macs: cost::block_flops(&graph, shape, FlopsConvention::Macs)?,
                threads: meta.threads,
                cpu_model: meta.cpu_model.clone(),
            });
        }
    }
    Ok(SweepTable { meta, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphBench {
    pub meta: BenchMeta,
    pub input: Shape,
    /// Whole forward pass.
    pub total: LatencyStats,
    /// Each node timed in isolation on its recorded inputs, in graph order.
    pub nodes: Vec<(String, LatencyStats)>,
    pub node_sum_ms: f64,
    /// `total.median - node_sum`: executor dispatch and allocation cost.
    pub overhead_ms: f64,
}

impl GraphBench {
    pub fn node_stats(&self) -> HashMap<String, LatencyStats> {
        self.nodes.iter().cloned().collect()
    }
}

/// Times the whole graph, then each node alone on its traced inputs.
pub fn bench_graph(graph: &ModelGraph, weights: Option<&WeightStore>, cfg: &BenchConfig) -> Result<GraphBench> {
    cfg.validate()?;
    let random;
    let weights = match weights {
        Some(w) => w,
        None => {
            random = WeightStore::random_for(graph, cfg.seed);
            &random
        }
    };
    let exec = Executor::new(cfg.exec_options())?;
    let prepared = exec.prepare(graph, weights)?;
    let input = random_input(cfg.input_shape, cfg.seed)?;
    let total = measure(cfg, || prepared.forward(&input).map(drop))?;
    let trace = prepared.forward_trace(&input)?;
    let mut nodes = Vec::with_capacity(graph.nodes.len());
    for (i, node) in graph.nodes.iter().enumerate() {
        let args: Vec<&Tensor> = node.inputs.iter().map(|id| &trace[id.as_str()]).collect();
        let stats = measure(cfg, || prepared.run_node(i, &args).map(drop))?;
        nodes.push((node.id.clone(), stats));
    }
    let node_sum_ms = nodes.iter().map(|(_, s)| s.median_ms).sum();
    Ok(GraphBench {
        meta: cfg.meta(),
        input: cfg.input_shape,
        overhead_ms: total.median_ms - node_sum_ms,
        total,
        nodes,
        node_sum_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> BenchConfig {
        BenchConfig {
            warmup_iters: 1,
            measure_iters: 3,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn stats_estimators() {
        let s = LatencyStats::from_samples(&[3.0, 1.0, 2.0, 10.0]).unwrap();
        assert_eq!(s.median_ms, 2.5);
        assert_eq!(s.p95_ms, 10.0);
        assert_eq!(s.mean_ms, 4.0);
        assert_eq!(s.iters, 4);
        assert!(s.stddev_ms > 0.0);
        let one = LatencyStats::from_samples(&[1.5]).unwrap();
        assert_eq!((one.median_ms, one.p95_ms, one.stddev_ms), (1.5, 1.5, 0.0));
        assert!(LatencyStats::from_samples(&[]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = quick();
        cfg.measure_iters = 2;
        assert!(cfg.validate().is_err());
        assert!(bench_node(Variant::StdConv, &cfg).is_err());
    }

    #[test]
    fn node_stats_populated() {
        for v in [Variant::StdConv, Variant::DwsConv, Variant::ResBlock, Variant::InvResBlock] {
            let s = bench_node(v, &quick()).unwrap();
            assert_eq!(s.iters, 3);
            assert!(s.p95_ms >= s.median_ms && s.median_ms >= 0.0 && s.stddev_ms >= 0.0);
        }
    }

    #[test]
    fn sweep_rows_and_macs() {
        let t = bench_sweep(SweepAxis::Channels, &[4.0, 8.0, 16.0, 32.0, 64.0, 128.0], Pair::Layer, &quick()).unwrap();
        assert_eq!(t.rows.len(), 12);
        let values: Vec<f64> = t.rows.iter().map(|r| r.axis_value).collect();
        assert_eq!(values, [4.0, 4.0, 8.0, 8.0, 16.0, 16.0, 32.0, 32.0, 64.0, 64.0, 128.0, 128.0]);
        for c in [4usize, 8, 16, 32, 64, 128] {
            let shape = Shape::new(1, c, 16, 16);
            let std = cost::conv_macs(&ConvSpec::same(c, c, 3, 1), shape).unwrap();
            assert_eq!(t.row(c as f64, Variant::StdConv).unwrap().macs, std);
            let dws = cost::conv_macs(&ConvSpec::depthwise(c, 3, 1), shape).unwrap()
                + cost::conv_macs(&ConvSpec::new(c, c, 1, 1, 0), shape).unwrap();
            assert_eq!(t.row(c as f64, Variant::DwsConv).unwrap().macs, dws);
        }
        assert!(bench_sweep(SweepAxis::Channels, &[], Pair::Layer, &quick()).is_err());
        assert!(bench_sweep(SweepAxis::Channels, &[2.5], Pair::Layer, &quick()).is_err());
    }

    #[test]
    fn block_sweep_macs_match_block_flops() {
        let t = bench_sweep(SweepAxis::WidthMultiplier, &[0.5, 2.0], Pair::Block, &quick()).unwrap();
        let r = t.row(2.0, Variant::InvResBlock).unwrap();
        let g = build_inverted_residual_block(32, 6, 1).unwrap();
        assert_eq!(r.macs, cost::block_flops(&g, Shape::new(1, 32, 16, 16), FlopsConvention::Macs).unwrap());
        assert_eq!(r.macs, 3_588_096);

        let t = bench_sweep(SweepAxis::InputSize, &[8.0, 32.0], Pair::Block, &BenchConfig { input_shape: Shape::new(1, 8, 16, 16), ..quick() }).unwrap();
        assert_eq!(t.rows.len(), 4);
    }

    #[test]
    fn sweep_csv_and_json() {
        let t = bench_sweep(SweepAxis::Channels, &[4.0, 8.0], Pair::Layer, &quick()).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("axis,axis_value,variant,median_ms"));
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().nth(1).unwrap().starts_with("channels,4,std_conv,"));
        let json: serde_json::Value = serde_json::from_str(&t.to_json()).unwrap();
        assert_eq!(json["rows"].as_array().unwrap().len(), 4);
        assert_eq!(json["meta"]["threads"], 1);
    }

    #[test]
    fn graph_bench_two_nodes() {
        let mut b = GraphBuilder::new(Shape::new(1, 16, 32, 32));
        let c = b.conv("conv", INPUT, ConvSpec::same(16, 16, 3, 1), Group::Other);
        let r = b.relu("relu", &c, Group::Other);
        b.output("out", &r);
        let g = b.finish().unwrap();
        let cfg = BenchConfig {
            input_shape: Shape::new(1, 16, 32, 32),
            warmup_iters: 2,
            measure_iters: 15,
            ..BenchConfig::default()
        };
        let res = bench_graph(&g, None, &cfg).unwrap();
        assert_eq!(res.nodes.len(), 2);
        assert_eq!(res.nodes[0].0, "conv");
        assert!(res.nodes.iter().all(|(_, s)| s.median_ms > 0.0 && s.iters == 15));
        assert!(res.total.median_ms > 0.0);
        assert!((res.overhead_ms - (res.total.median_ms - res.node_sum_ms)).abs() < 1e-12);
    }
}
