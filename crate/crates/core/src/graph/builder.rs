use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::tensor::Shape;

use super::config::{BackboneConfig, ModelConfig, NeckConfig, NeckKind, StemKind};
use super::{BlockInfo, Group, LayerNode, ModelGraph, Op, INPUT, LEVELS};

/// Incremental graph construction. Node ids double as weight-name prefixes:
/// a conv node `stem.conv0` reads `stem.conv0` and `stem.conv0.bias`.
pub struct GraphBuilder {
    nodes: Vec<LayerNode>,
    blocks: Vec<BlockInfo>,
    outputs: Vec<(String, String)>,
    channels: HashMap<String, usize>,
    input_spec: Shape,
}

impl GraphBuilder {
    pub fn new(input_spec: Shape) -> Self {
        GraphBuilder {
            nodes: Vec::new(),
            blocks: Vec::new(),
            outputs: Vec::new(),
            channels: HashMap::from([(INPUT.to_string(), input_spec.c)]),
            input_spec,
        }
    }

    pub fn channels(&self, id: &str) -> usize {
        self.channels[id]
    }

    fn push(
        &mut self,
        id: String,
        op: Op,
        inputs: Vec<String>,
        weight_names: Vec<String>,
        group: Group,
        channels: usize,
    ) -> String {
        self.channels.insert(id.clone(), channels);
        self.nodes.push(LayerNode {
            id: id.clone(),
            op,
            inputs,
            weight_names,
            group,
        });
        id
    }

    pub fn conv(&mut self, id: impl Into<String>, input: &str, spec: ConvSpec, group: Group) -> String {
        let id = id.into();
        let mut weights = vec![id.clone()];
        if spec.has_bias {
            weights.push(format!("{id}.bias"));
        }
        self.push(id, Op::Conv(spec), vec![input.into()], weights, group, spec.out_channels)
    }

    pub fn relu(&mut self, id: impl Into<String>, input: &str, group: Group) -> String {
        let c = self.channels(input);
        self.push(id.into(), Op::Relu, vec![input.into()], vec![], group, c)
    }

    pub fn maxpool(&mut self, id: impl Into<String>, input: &str, kernel: usize, stride: usize, padding: usize, group: Group) -> String {
        let c = self.channels(input);
        let op = Op::MaxPool {
            kernel,
            stride,
            padding,
        };
        self.push(id.into(), op, vec![input.into()], vec![], group, c)
    }

    pub fn add(&mut self, id: impl Into<String>, a: &str, b: &str, group: Group) -> String {
        let c = self.channels(a);
        self.push(id.into(), Op::Add, vec![a.into(), b.into()], vec![], group, c)
    }

    /// Upsamples `input` 2x, cropped to the spatial size of `like`.
    pub fn upsample(&mut self, id: impl Into<String>, input: &str, like: &str, group: Group) -> String {
        let c = self.channels(input);
        self.push(id.into(), Op::Upsample, vec![input.into(), like.into()], vec![], group, c)
    }

    pub fn fusion(&mut self, id: impl Into<String>, inputs: &[&str], epsilon: f32, group: Group) -> String {
        let id = id.into();
        let c = self.channels(inputs[0]);
        let weights = (0..inputs.len()).map(|i| format!("{id}.w{i}")).collect();
        let inputs = inputs.iter().map(|s| s.to_string()).collect();
        self.push(id, Op::WeightedFusion { epsilon }, inputs, weights, group, c)
    }

    pub fn concat(&mut self, id: impl Into<String>, inputs: &[&str], group: Group) -> String {
        let c = inputs.iter().map(|i| self.channels(i)).sum();
        let inputs = inputs.iter().map(|s| s.to_string()).collect();
        self.push(id.into(), Op::Concat, inputs, vec![], group, c)
    }

    pub fn softmax(&mut self, id: impl Into<String>, input: &str, group_size: usize, group: Group) -> String {
        let c = self.channels(input);
        self.push(id.into(), Op::Softmax { group: group_size }, vec![input.into()], vec![], group, c)
    }

    pub fn maxout(&mut self, id: impl Into<String>, input: &str, background: usize, group: Group) -> String {
        self.push(id.into(), Op::MaxOut { background }, vec![input.into()], vec![], group, 2)
    }

    pub fn output(&mut self, name: impl Into<String>, id: &str) {
        self.outputs.push((name.into(), id.into()));
    }

    /// Basic residual block: two 3x3 convs (the first strided), a shortcut
    /// (1x1 strided projection when stride or width changes, identity
    /// otherwise) and ReLU after the add.
    pub fn residual_block(&mut self, prefix: &str, input: &str, out_channels: usize, stride: usize, group: Group) -> String {
        let in_channels = self.channels(input);
        let conv0 = self.conv(
            format!("{prefix}.conv0"),
            input,
            ConvSpec::same(in_channels, out_channels, 3, stride),
            group,
        );
        let act = self.relu(format!("{prefix}.conv0.relu"), &conv0, group);
        let conv1 = self.conv(
            format!("{prefix}.conv1"),
            &act,
            ConvSpec::same(out_channels, out_channels, 3, 1),
            group,
        );
        let projection = (stride != 1 || in_channels != out_channels).then(|| {
            self.conv(
                format!("{prefix}.proj"),
                input,
                ConvSpec::new(in_channels, out_channels, 1, stride, 0),
                group,
            )
        });
        let skip = projection.clone().unwrap_or_else(|| input.to_string());
        let sum = self.add(format!("{prefix}.add"), &conv1, &skip, group);
        let out = self.relu(format!("{prefix}.relu"), &sum, group);
        self.blocks.push(BlockInfo {
            name: prefix.to_string(),
            group,
            convs: vec![conv0, conv1],
            projection,
            output: out.clone(),
        });
        out
    }

    /// Inverted bottleneck: 1x1 expand, 3x3 depthwise (strided), linear 1x1
    /// project; identity skip only for stride 1.
    pub fn inverted_residual_block(&mut self, prefix: &str, input: &str, expansion: usize, stride: usize, group: Group) -> String {
        let c = self.channels(input);
        let hidden = c * expansion;
        let expand = self.conv(format!("{prefix}.expand"), input, ConvSpec::new(c, hidden, 1, 1, 0), group);
        let a0 = self.relu(format!("{prefix}.expand.relu"), &expand, group);
        let dw = self.conv(format!("{prefix}.dw"), &a0, ConvSpec::depthwise(hidden, 3, stride), group);
        let a1 = self.relu(format!("{prefix}.dw.relu"), &dw, group);
        let project = self.conv(format!("{prefix}.project"), &a1, ConvSpec::new(hidden, c, 1, 1, 0), group);
        let out = if stride == 1 {
            self.add(format!("{prefix}.add"), &project, input, group)
        } else {
            project.clone()
        };
        self.blocks.push(BlockInfo {
            name: prefix.to_string(),
            group,
            convs: vec![expand, dw, project],
            projection: None,
            output: out.clone(),
        });
        out
    }

    /// 5x5 stride-4 conv then two 3x3 stride-1 convs, ReLU after each.
    pub fn eresnet_stem(&mut self, input: &str, base: usize) -> String {
        let in_c = self.channels(input);
        let mut x = input.to_string();
        let specs = [
            ConvSpec::same(in_c, base, 5, 4),
            ConvSpec::same(base, base, 3, 1),
            ConvSpec::same(base, base, 3, 1),
        ];
        for (i, spec) in specs.into_iter().enumerate() {
            let conv = self.conv(format!("stem.conv{i}"), &x, spec, Group::Stem);
            x = self.relu(format!("stem.conv{i}.relu"), &conv, Group::Stem);
        }
        x
    }

    /// 7x7 stride-2 conv, ReLU, 3x3 stride-2 max pooling.
    pub fn resnet_stem(&mut self, input: &str, base: usize) -> String {
        let in_c = self.channels(input);
        let conv = self.conv("stem.conv0", input, ConvSpec::same(in_c, base, 7, 2), Group::Stem);
        let act = self.relu("stem.conv0.relu", &conv, Group::Stem);
        self.maxpool("stem.pool", &act, 3, 2, 1, Group::Stem)
    }

    /// Stem plus residual stages; returns the stage taps `C1..Cn`.
    pub fn backbone(&mut self, input: &str, cfg: &BackboneConfig) -> Result<Vec<String>> {
        cfg.validate()?;
        let base = cfg.base_channels();
        let mut x = match cfg.stem {
            StemKind::Eresnet => self.eresnet_stem(input, base),
            StemKind::Resnet => self.resnet_stem(input, base),
        };
        let mut taps = Vec::with_capacity(cfg.stage_blocks.len());
        for (s, (&blocks, &stride)) in cfg.stage_blocks.iter().zip(&cfg.stage_strides).enumerate() {
            let channels = cfg.stage_channels(s);
            for b in 0..blocks {
                let block_stride = if b == 0 { stride } else { 1 };
                let prefix = format!("stage{}.block{}", s + 1, b + 1);
                x = self.residual_block(&prefix, &x, channels, block_stride, Group::Stage(s + 1));
            }
            self.output(format!("C{}", s + 1), &x);
            taps.push(x.clone());
        }
        Ok(taps)
    }

    /// Top-down pyramid over the taps. SepFPN runs two disjoint top-down
    /// paths, `{S..P6}` and `{P1..P(S-1)}`; plain FPN runs one over all
    /// levels; `None` passes the taps through. Returns `P1..P6`.
    pub fn neck(&mut self, taps: &[String], cfg: &NeckConfig) -> Result<Vec<String>> {
        if taps.len() != LEVELS {
            return Err(Error::invalid("neck", format!("needs {LEVELS} taps, got {}", taps.len())));
        }
        let c = self.channels(&taps[0]);
        if let Some(t) = taps.iter().find(|t| self.channels(t) != c) {
            return Err(Error::invalid(
                "neck",
                format!("tap `{t}` has {} channels, expected {c}", self.channels(t)),
            ));
        }
        let ranges: Vec<(usize, usize)> = match cfg.kind {
            NeckKind::None => vec![],
            NeckKind::Fpn => vec![(1, LEVELS)],
            NeckKind::Sepfpn => {
                let s = cfg.separation_position.level();
                vec![(s, LEVELS), (1, s - 1)]
            }
        };
        let mut levels: Vec<String> = taps.to_vec();
        for (lo, hi) in ranges {
            for k in (lo..hi).rev() {
                let lateral = taps[k - 1].clone();
                let up = self.upsample(format!("neck.up{k}"), &levels[k], &lateral, Group::Neck);
                levels[k - 1] = self.fusion(format!("neck.fuse{k}"), &[&lateral, &up], cfg.fusion_epsilon, Group::Neck);
            }
        }
        for (k, id) in levels.iter().enumerate() {
            self.output(format!("P{}", k + 1), id);
        }
        Ok(levels)
    }

    /// Cascade context module for one level: conv0 C→C/2, conv1 C/2→C/4,
    /// conv2 C/4→C/4, each 3x3 + ReLU and fed by the previous one; the three
    /// outputs are concatenated back to C channels.
    pub fn ccpm(&mut self, level: usize, input: &str) -> Result<String> {
        let c = self.channels(input);
        if c % 4 != 0 {
            return Err(Error::invalid("ccpm", format!("{c} channels not divisible by 4")));
        }
        let widths = [(c, c / 2), (c / 2, c / 4), (c / 4, c / 4)];
        let mut x = input.to_string();
        let mut branches = Vec::with_capacity(3);
        for (i, (cin, cout)) in widths.into_iter().enumerate() {
            let id = format!("ccpm.{level}.conv{i}");
            let conv = self.conv(&id, &x, ConvSpec::same(cin, cout, 3, 1), Group::Ccpm);
            x = self.relu(format!("{id}.relu"), &conv, Group::Ccpm);
            branches.push(x.clone());
        }
        let refs: Vec<&str> = branches.iter().map(String::as_str).collect();
        Ok(self.concat(format!("ccpm.{level}.concat"), &refs, Group::Ccpm))
    }

    /// 1x1 regression and classification convs for one level. With
    /// `maxout = Some(n)` the class conv predicts `n` background logits plus
    /// one face logit and reduces them by max-out before the softmax.
    /// Returns `(class scores, box deltas)`.
    pub fn head(&mut self, level: usize, input: &str, maxout: Option<usize>) -> (String, String) {
        let c = self.channels(input);
        let reg = self.conv(format!("head.{level}.reg"), input, ConvSpec::new(c, 4, 1, 1, 0), Group::Heads);
        let cls_channels = maxout.map_or(2, |n| n + 1);
        let mut cls = self.conv(format!("head.{level}.cls"), input, ConvSpec::new(c, cls_channels, 1, 1, 0), Group::Heads);
        if let Some(n) = maxout {
            cls = self.maxout(format!("head.{level}.maxout"), &cls, n, Group::Heads);
        }
        let scores = self.softmax(format!("head.{level}.softmax"), &cls, 2, Group::Heads);
        self.output(format!("D{level}.cls"), &scores);
        self.output(format!("D{level}.reg"), &reg);
        (scores, reg)
    }

    pub fn finish(self) -> Result<ModelGraph> {
        let graph = ModelGraph {
            nodes: self.nodes,
            outputs: self.outputs,
            input_spec: self.input_spec,
            blocks: self.blocks,
        };
        graph.validate()?;
        Ok(graph)
    }
}

/// Standalone residual block on a nominal `(1, channels, 16, 16)` input.
pub fn build_residual_block(channels: usize, stride: usize) -> Result<ModelGraph> {
    check_block_args(channels, 1, stride)?;
    let mut b = GraphBuilder::new(Shape::new(1, channels, 16, 16));
    let out = b.residual_block("block", INPUT, channels, stride, Group::Other);
    b.output("out", &out);
    b.finish()
}

pub fn build_inverted_residual_block(channels: usize, expansion: usize, stride: usize) -> Result<ModelGraph> {
    check_block_args(channels, expansion, stride)?;
    let mut b = GraphBuilder::new(Shape::new(1, channels, 16, 16));
    let out = b.inverted_residual_block("block", INPUT, expansion, stride, Group::Other);
    b.output("out", &out);
    b.finish()
}

fn check_block_args(channels: usize, expansion: usize, stride: usize) -> Result<()> {
    if channels == 0 || expansion == 0 || !matches!(stride, 1 | 2) {
        return Err(Error::invalid(
            "block",
            format!("channels {channels}, expansion {expansion}, stride {stride}"),
        ));
    }
    Ok(())
}

pub fn build_eresnet_stem(in_channels: usize, base_channels: usize) -> Result<ModelGraph> {
    build_stem(in_channels, base_channels, GraphBuilder::eresnet_stem)
}

pub fn build_resnet_stem(in_channels: usize, base_channels: usize) -> Result<ModelGraph> {
    build_stem(in_channels, base_channels, GraphBuilder::resnet_stem)
}

fn build_stem(in_channels: usize, base: usize, f: fn(&mut GraphBuilder, &str, usize) -> String) -> Result<ModelGraph> {
    if in_channels == 0 || base == 0 {
        return Err(Error::invalid("stem", "channels must be positive"));
    }
    let mut b = GraphBuilder::new(Shape::new(1, in_channels, 480, 640));
    let out = f(&mut b, INPUT, base);
    b.output("out", &out);
    b.finish()
}

/// Stem plus stages, with taps `C1..Cn` as outputs.
pub fn build_backbone(cfg: &BackboneConfig) -> Result<ModelGraph> {
    let mut b = GraphBuilder::new(Shape::new(1, 3, 640, 640));
    b.backbone(INPUT, cfg)?;
    b.finish()
}

/// The full detector (or backbone-only graph, depending on `cfg`).
pub fn build_model(cfg: &ModelConfig) -> Result<ModelGraph> {
    cfg.validate()?;
    let [h, w] = cfg.input_size;
    let mut b = GraphBuilder::new(Shape::new(1, 3, h, w));
    let taps = b.backbone(INPUT, &cfg.backbone)?;
    if cfg.backbone.stage_blocks.len() == LEVELS && (cfg.neck.kind != NeckKind::None || cfg.ccpm || cfg.heads.enabled) {
        let pyramid = b.neck(&taps, &cfg.neck)?;
        for (i, p) in pyramid.iter().enumerate() {
            let level = i + 1;
            let feat = if cfg.ccpm { b.ccpm(level, p)? } else { p.clone() };
            if cfg.heads.enabled {
                let maxout = (level == 1).then_some(cfg.heads.maxout_background);
                b.head(level, &feat, maxout);
            }
        }
    }
    b.finish()
}
