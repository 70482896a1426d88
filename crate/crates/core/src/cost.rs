//! Static cost analysis: MACs/FLOPs, parameters, output shapes and receptive
//! fields for any [`ModelGraph`], plus per-group latency attribution.
//!
//! MAC counts cover convolutions only (`kh·kw·(cin/groups)·cout·h_out·w_out`
//! per image). Bias, normalization and activation work is excluded.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bench::LatencyStats;
use crate::error::{Error, Result};
use crate::graph::{Group, LayerNode, ModelGraph, Op, INPUT};
use crate::kernels::{self, ConvSpec};
use crate::tensor::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FlopsConvention {
    /// One FLOP per multiply-accumulate.
    #[default]
    #[serde(rename = "macs")]
    Macs,
    /// Two FLOPs per multiply-accumulate.
    #[serde(rename = "2xmacs")]
    TwoPerMac,
}

impl FlopsConvention {
    pub fn flops(self, macs: u64) -> u64 {
        match self {
            FlopsConvention::Macs => macs,
            FlopsConvention::TwoPerMac => 2 * macs,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FlopsConvention::Macs => "1 FLOP/MAC",
            FlopsConvention::TwoPerMac => "2 FLOPs/MAC",
        }
    }
}

pub fn conv_macs(spec: &ConvSpec, input: Shape) -> Result<u64> {
    let out = spec.output_shape(input)?;
    let (kh, kw) = spec.kernel;
    Ok((kh * kw * (spec.in_channels / spec.groups)) as u64
        * spec.out_channels as u64
        * (out.n * out.h * out.w) as u64)
}

/// Output shape of every node (and `input`) for a given input shape.
pub fn infer_shapes(graph: &ModelGraph, input: Shape) -> Result<HashMap<String, Shape>> {
    let mut shapes = HashMap::from([(INPUT.to_string(), input)]);
    for node in &graph.nodes {
        let args = node
            .inputs
            .iter()
            .map(|id| shapes.get(id).copied().ok_or_else(|| Error::UnknownNode(id.clone())))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::at_node(&node.id, e))?;
        let out = node_shape(node, &args).map_err(|e| Error::at_node(&node.id, e))?;
        shapes.insert(node.id.clone(), out);
    }
    Ok(shapes)
}

fn node_shape(node: &LayerNode, args: &[Shape]) -> Result<Shape> {
    let first = *args
        .first()
        .ok_or_else(|| Error::invalid("shape", "node has no inputs"))?;
    let same = |op: &'static str| -> Result<Shape> {
        match args.iter().find(|s| **s != first) {
            Some(&other) => Err(Error::ShapeMismatch {
                op,
                left: first,
                right: other,
            }),
            None => Ok(first),
        }
    };
    match &node.op {
        Op::Conv(spec) => spec.output_shape(first),
        Op::MaxPool { kernel, stride, padding } => kernels::maxpool_shape(first, *kernel, *stride, *padding),
        Op::Relu | Op::Softmax { .. } => Ok(first),
        Op::Upsample => Ok(match args.get(1) {
            Some(like) => Shape { h: like.h, w: like.w, ..first },
            None => Shape { h: 2 * first.h, w: 2 * first.w, ..first },
        }),
        Op::Add => same("add"),
        Op::WeightedFusion { .. } => same("weighted_fusion"),
        Op::Concat => {
            if let Some(&bad) = args.iter().find(|s| (s.n, s.h, s.w) != (first.n, first.h, first.w)) {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: first,
                    right: bad,
                });
            }
            Ok(first.with_channels(args.iter().map(|s| s.c).sum()))
        }
        Op::MaxOut { .. } => Ok(first.with_channels(2)),
    }
}

fn node_params(node: &LayerNode) -> u64 {
    match &node.op {
        Op::Conv(spec) => {
            let k = spec.weight_shape();
            (k.n * k.c * k.h * k.w) as u64 + if spec.has_bias { spec.out_channels as u64 } else { 0 }
        }
        Op::WeightedFusion { .. } => node.weight_names.len() as u64,
        _ => 0,
    }
}

/// Kernel weights, biases and fusion scalars.
pub fn param_count(graph: &ModelGraph) -> u64 {
    graph.nodes.iter().map(node_params).sum()
}

/// Sum of convolution MACs over the whole (block) graph at `input`, under
/// the given convention.
pub fn block_flops(graph: &ModelGraph, input: Shape, convention: FlopsConvention) -> Result<u64> {
    let shapes = infer_shapes(graph, input)?;
    let mut macs = 0;
    for node in &graph.nodes {
        if let Op::Conv(spec) = &node.op {
            macs += conv_macs(spec, shapes[node.inputs[0].as_str()])?;
        }
    }
    Ok(convention.flops(macs))
}

/// Receptive field and jump (cumulative stride) of every node, in input
/// pixels. Convs and pools apply `rf += (k - 1)·jump`, `jump *= s`; merges
/// take the maximum over their inputs; upsampling halves the jump (floored
/// at 1) and ignores its size-reference input.
pub fn receptive_fields(graph: &ModelGraph) -> Result<HashMap<String, (u64, u64)>> {
    let mut rf: HashMap<String, (u64, u64)> = HashMap::from([(INPUT.to_string(), (1, 1))]);
    for node in &graph.nodes {
        let lookup = |id: &String| rf.get(id).copied().ok_or_else(|| Error::UnknownNode(id.clone()));
        let (r, j) = match &node.op {
            Op::Conv(ConvSpec { kernel, stride, .. }) => {
                let (r, j) = lookup(&node.inputs[0])?;
                let k = kernel.0.max(kernel.1) as u64;
                (r + (k - 1) * j, j * stride.0.max(stride.1) as u64)
            }
            Op::MaxPool { kernel, stride, .. } => {
                let (r, j) = lookup(&node.inputs[0])?;
                (r + (*kernel as u64 - 1) * j, j * *stride as u64)
            }
            Op::Upsample => {
                let (r, j) = lookup(&node.inputs[0])?;
                (r, (j / 2).max(1))
            }
            _ => {
                let mut acc = (0, 0);
                for id in &node.inputs {
                    let (r, j) = lookup(id)?;
                    acc = (acc.0.max(r), acc.1.max(j));
                }
                acc
            }
        };
        if node.inputs.is_empty() {
            return Err(Error::invalid("receptive_field", format!("node `{}` is not reachable from the input", node.id)));
        }
        rf.insert(node.id.clone(), (r, j));
    }
    Ok(rf)
}

pub fn receptive_field(graph: &ModelGraph, node_id: &str) -> Result<(u64, u64)> {
    graph.inputs_of(node_id)?;
    receptive_fields(graph)?
        .remove(node_id)
        .ok_or_else(|| Error::UnknownNode(node_id.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeCost {
    pub id: String,
    pub kind: &'static str,
    pub group: Group,
    pub macs: u64,
    pub flops: u64,
    pub params: u64,
    pub output_shape: Shape,
    pub receptive_field: u64,
    pub jump: u64,
    pub latency_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupTotal {
    pub group: Group,
    pub macs: u64,
    pub flops: u64,
    pub params: u64,
    pub latency_ms: Option<f64>,
    /// Percentage of the summed node latency.
    pub latency_share: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub convention: FlopsConvention,
    pub input: Shape,
    pub nodes: Vec<NodeCost>,
    pub groups: Vec<GroupTotal>,
    pub total_macs: u64,
    pub total_flops: u64,
    pub total_params: u64,
    pub weighted_backbone_layers: usize,
    pub residual_blocks: usize,
}

pub fn analyze(graph: &ModelGraph, input: Shape, convention: FlopsConvention) -> Result<CostReport> {
    let shapes = infer_shapes(graph, input)?;
    let rfs = receptive_fields(graph)?;
    let mut nodes = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let macs = match &node.op {
            Op::Conv(spec) => conv_macs(spec, shapes[node.inputs[0].as_str()]).map_err(|e| Error::at_node(&node.id, e))?,
            _ => 0,
        };
        let (rf, jump) = rfs[node.id.as_str()];
        nodes.push(NodeCost {
            id: node.id.clone(),
            kind: node.op.kind(),
            group: node.group,
            macs,
            flops: convention.flops(macs),
            params: node_params(node),
            output_shape: shapes[node.id.as_str()],
            receptive_field: rf,
            jump,
            latency_ms: None,
        });
    }
    let mut report = CostReport {
        convention,
        input,
        groups: Vec::new(),
        total_macs: nodes.iter().map(|n| n.macs).sum(),
        total_flops: nodes.iter().map(|n| n.flops).sum(),
        total_params: nodes.iter().map(|n| n.params).sum(),
        nodes,
        weighted_backbone_layers: graph.weighted_backbone_layers(),
        residual_blocks: graph.residual_block_count(),
    };
    report.regroup();
    Ok(report)
}

/// [`analyze`] plus per-node latency medians rolled up into group shares.
/// Every weighted node needs stats; other nodes count as zero when absent.
pub fn latency_breakdown(
    graph: &ModelGraph,
    input: Shape,
    convention: FlopsConvention,
    stats: &HashMap<String, LatencyStats>,
) -> Result<CostReport> {
    let mut report = analyze(graph, input, convention)?;
    for (node, cost) in graph.nodes.iter().zip(&mut report.nodes) {
        match stats.get(&node.id) {
            Some(s) => cost.latency_ms = Some(s.median_ms),
            None if node.is_weighted() => {
                return Err(Error::invalid("latency_breakdown", format!("no latency stats for node `{}`", node.id)))
            }
            None => cost.latency_ms = Some(0.0),
        }
    }
    report.regroup();
    Ok(report)
}

impl CostReport {
    fn regroup(&mut self) {
        let mut groups: BTreeMap<Group, GroupTotal> = BTreeMap::new();
        for n in &self.nodes {
            let g = groups.entry(n.group).or_insert(GroupTotal {
                group: n.group,
                macs: 0,
                flops: 0,
                params: 0,
                latency_ms: None,
                latency_share: None,
            });
            g.macs += n.macs;
            g.flops += n.flops;
            g.params += n.params;
            if let Some(ms) = n.latency_ms {
                *g.latency_ms.get_or_insert(0.0) += ms;
            }
        }
        let total: f64 = groups.values().filter_map(|g| g.latency_ms).sum();
        if total > 0.0 {
            for g in groups.values_mut() {
                g.latency_share = g.latency_ms.map(|ms| 100.0 * ms / total);
            }
        }
        self.groups = groups.into_values().collect();
    }

    pub fn group(&self, group: Group) -> Option<&GroupTotal> {
        self.groups.iter().find(|g| g.group == group)
    }

    /// CSV with header `node_id,kind,macs,flops,params,h,w,rf,group`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(e.into());
        w.write_record(["node_id", "kind", "macs", "flops", "params", "h", "w", "rf", "group"])
            .map_err(io)?;
        for n in &self.nodes {
            w.write_record([
                n.id.clone(),
                n.kind.to_string(),
                n.macs.to_string(),
                n.flops.to_string(),
                n.params.to_string(),
                n.output_shape.h.to_string(),
                n.output_shape.w.to_string(),
                n.receptive_field.to_string(),
                n.group.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input {}  convention {}", self.input, self.convention.label());
        let _ = writeln!(s, "weighted backbone layers: {}", self.weighted_backbone_layers);
        let _ = writeln!(s, "residual blocks: {}", self.residual_blocks);
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<28} {:<15} {:>14} {:>10} {:>16} {:>5} {:>7}",
            "node", "kind", "flops", "params", "output", "rf", "group"
        );
        for n in self.nodes.iter().filter(|n| n.macs > 0 || n.params > 0) {
            let o = n.output_shape;
            let _ = writeln!(
                s,
                "{:<28} {:<15} {:>14} {:>10} {:>16} {:>5} {:>7}",
                n.id,
                n.kind,
                n.flops,
                n.params,
                format!("{}x{}x{}", o.c, o.h, o.w),
                n.receptive_field,
                n.group.to_string()
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<10} {:>12} {:>10} {:>22}", "group", "flops", "params", "latency");
        for g in &self.groups {
            let latency = match (g.latency_ms, g.latency_share) {
                (Some(ms), Some(share)) => format!("{ms:.2}ms ({share:.1}%)"),
                (Some(ms), None) => format!("{ms:.2}ms"),
                _ => "-".to_string(),
            };
            let _ = writeln!(
                s,
                "{:<10} {:>12} {:>10} {:>22}",
                g.group.to_string(),
                format_millions(g.flops),
                g.params,
                latency
            );
        }
        let _ = writeln!(
            s,
            "{:<10} {:>12} {:>10}",
            "total",
            format_millions(self.total_flops),
            self.total_params
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "note: convolution multiply-accumulates only; bias, normalization and activation costs are excluded");
        s
    }
}

/// `180633600` → `"180.6 M"`.
pub fn format_millions(v: u64) -> String {
    format!("{:.1} M", v as f64 / 1e6)
}
