//! Layer graphs: node types, block/stem/backbone/neck/head builders and the
//! forward executor.

mod builder;
mod config;
mod exec;

use std::collections::HashSet;
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::tensor::Shape;

pub use builder::{
    build_backbone, build_eresnet_stem, build_inverted_residual_block, build_model,
    build_residual_block, build_resnet_stem, GraphBuilder,
};
pub use config::{BackboneConfig, HeadConfig, ModelConfig, NeckConfig, NeckKind, SeparationPosition, StemKind};
pub use exec::{forward, Executor, Prepared};

/// Id of the implicit graph input.
pub const INPUT: &str = "input";

/// Number of pyramid levels the detector uses.
pub const LEVELS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Op {
    Conv(ConvSpec),
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Nearest 2x upsampling. With a second input, the result is cropped to
    /// that input's spatial size.
    Upsample,
    Add,
    WeightedFusion {
        epsilon: f32,
    },
    Concat,
    Softmax {
        group: usize,
    },
    MaxOut {
        background: usize,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Conv(spec) if spec.is_depthwise() => "depthwise-conv",
            Op::Conv(_) => "conv",
            Op::Relu => "relu",
            Op::MaxPool { .. } => "maxpool",
            Op::Upsample => "upsample",
            Op::Add => "add",
            Op::WeightedFusion { .. } => "weighted-fusion",
            Op::Concat => "concat",
            Op::Softmax { .. } => "softmax",
            Op::MaxOut { .. } => "maxout",
        }
    }

    pub fn conv_spec(&self) -> Option<&ConvSpec> {
        match self {
            Op::Conv(spec) => Some(spec),
            _ => None,
        }
    }
}

/// Cost/latency bucket a node belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Group {
    Stem,
    Stage(usize),
    Neck,
    Ccpm,
    Heads,
    Other,
}

impl Group {
    pub fn is_backbone(&self) -> bool {
        matches!(self, Group::Stem | Group::Stage(_))
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::Stem => f.write_str("stem"),
            Group::Stage(s) => write!(f, "stage{s}"),
            Group::Neck => f.write_str("neck"),
            Group::Ccpm => f.write_str("ccpm"),
            Group::Heads => f.write_str("heads"),
            Group::Other => f.write_str("other"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerNode {
    pub id: String,
    pub op: Op,
    pub inputs: Vec<String>,
    pub weight_names: Vec<String>,
    pub group: Group,
}

impl LayerNode {
    pub fn is_weighted(&self) -> bool {
        matches!(self.op, Op::Conv(_))
    }
}

/// Bookkeeping for one residual (or inverted residual) block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockInfo {
    pub name: String,
    pub group: Group,
    /// Main-path convolutions, in order.
    pub convs: Vec<String>,
    /// 1x1 shortcut projection, when present.
    pub projection: Option<String>,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelGraph {
    pub nodes: Vec<LayerNode>,
    /// `(name, node id)` pairs, e.g. `("C1", "stage1.block1.relu")`.
    pub outputs: Vec<(String, String)>,
    /// Expected input; `h` and `w` are nominal, execution accepts any size.
    pub input_spec: Shape,
    pub blocks: Vec<BlockInfo>,
}

impl ModelGraph {
    pub fn node(&self, id: &str) -> Option<&LayerNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn output(&self, name: &str) -> Option<&str> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| id.as_str())
    }

    /// Checks id uniqueness, topological order and output references.
    pub fn validate(&self) -> Result<()> {
        let mut seen: HashSet<&str> = HashSet::from([INPUT]);
        for node in &self.nodes {
            for input in &node.inputs {
                if !seen.contains(input.as_str()) {
                    return Err(Error::at_node(
                        &node.id,
                        Error::invalid("graph", format!("input `{input}` is not an earlier node")),
                    ));
                }
            }
            if !seen.insert(&node.id) {
                return Err(Error::at_node(&node.id, Error::invalid("graph", "duplicate id")));
            }
        }
        for (name, id) in &self.outputs {
            if !seen.contains(id.as_str()) {
                return Err(Error::invalid("graph", format!("output {name} -> unknown node `{id}`")));
            }
        }
        Ok(())
    }

    /// Every weight tensor the graph reads, with its expected dims.
    pub fn weight_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Conv(spec) => {
                    specs.push((node.weight_names[0].clone(), spec.weight_shape().dims().to_vec()));
                    if spec.has_bias {
                        specs.push((node.weight_names[1].clone(), vec![spec.out_channels]));
                    }
                }
                Op::WeightedFusion { .. } => {
                    specs.extend(node.weight_names.iter().map(|n| (n.clone(), vec![1])));
                }
                _ => {}
            }
        }
        specs
    }

    pub fn residual_block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Convolutions on the backbone's main path: stem convs plus block
    /// convs, excluding shortcut projections.
    pub fn weighted_backbone_layers(&self) -> usize {
        let projections: HashSet<&str> = self
            .blocks
            .iter()
            .filter_map(|b| b.projection.as_deref())
            .collect();
        self.nodes
            .iter()
            .filter(|n| n.is_weighted() && n.group.is_backbone() && !projections.contains(n.id.as_str()))
            .count()
    }

    /// Returns the input ids of `id` (empty for the graph input).
    pub(crate) fn inputs_of(&self, id: &str) -> Result<&[String]> {
        if id == INPUT {
            return Ok(&[]);
        }
        self.node(id)
            .map(|n| n.inputs.as_slice())
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }
}
