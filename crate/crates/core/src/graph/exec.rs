use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvWeights, ExecOptions};
use crate::tensor::{self, Tensor};
use crate::weights::WeightStore;

use super::{LayerNode, ModelGraph, Op, INPUT};

/// Runs graphs with a fixed kernel configuration. Owns the worker pool when
/// more than one thread is requested.
pub struct Executor {
    opts: ExecOptions,
    pool: Option<rayon::ThreadPool>,
}

impl Executor {
    pub fn new(opts: ExecOptions) -> Result<Self> {
        if opts.threads == 0 {
            return Err(Error::invalid("executor", "threads must be at least 1"));
        }
        let pool = if opts.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(opts.threads)
                    .build()
                    .map_err(|e| Error::invalid("executor", e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Executor { opts, pool })
    }

    pub fn options(&self) -> ExecOptions {
        self.opts
    }

    /// Resolves every weight the graph reads. Fails on the first node whose
    /// weights are missing or mis-shaped.
    pub fn prepare<'a>(&'a self, graph: &'a ModelGraph, weights: &WeightStore) -> Result<Prepared<'a>> {
        let params = graph
            .nodes
            .iter()
            .map(|node| resolve(node, weights).map_err(|e| Error::at_node(&node.id, e)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared {
            exec: self,
            graph,
            params,
        })
    }

    fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        match &self.pool {
            Some(pool) => pool.install(f),
            None => f(),
        }
    }
}

enum NodeParams {
    None,
    Conv(ConvWeights),
    Fusion(Vec<f32>),
}

fn resolve(node: &LayerNode, store: &WeightStore) -> Result<NodeParams> {
    Ok(match &node.op {
        Op::Conv(spec) => {
            let shape = spec.weight_shape();
            let k = store.expect(&node.weight_names[0], &shape.dims())?;
            let bias = if spec.has_bias {
                Some(store.expect(&node.weight_names[1], &[spec.out_channels])?.data.clone())
            } else {
                None
            };
            NodeParams::Conv(ConvWeights {
                kernel: Tensor::from_vec(shape, k.data.clone())?,
                bias,
            })
        }
        Op::WeightedFusion { .. } => NodeParams::Fusion(
            node.weight_names
                .iter()
                .map(|n| store.expect(n, &[1]).map(|t| t.data[0]))
                .collect::<Result<_>>()?,
        ),
        _ => NodeParams::None,
    })
}

/// A graph bound to resolved weights.
pub struct Prepared<'a> {
    exec: &'a Executor,
    graph: &'a ModelGraph,
    params: Vec<NodeParams>,
}

impl Prepared<'_> {
    /// Topological execution; returns the graph's named outputs.
    pub fn forward(&self, input: &Tensor) -> Result<BTreeMap<String, Tensor>> {
        let values = self.run(input, false)?;
        Ok(self
            .graph
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), values[id.as_str()].clone()))
            .collect())
    }

    /// Like [`forward`](Self::forward) but keeps every intermediate, keyed by
    /// node id (plus `input`).
    pub fn forward_trace(&self, input: &Tensor) -> Result<HashMap<String, Tensor>> {
        self.run(input, true)
    }

    /// Executes node `index` alone on the given inputs.
    pub fn run_node(&self, index: usize, inputs: &[&Tensor]) -> Result<Tensor> {
        let node = &self.graph.nodes[index];
        self.exec
            .install(|| eval(node, &self.params[index], inputs, &self.exec.opts))
            .map_err(|e| Error::at_node(&node.id, e))
    }

    fn run(&self, input: &Tensor, keep_all: bool) -> Result<HashMap<String, Tensor>> {
        let expect = self.graph.input_spec;
        if input.shape().c != expect.c {
            return Err(Error::invalid(
                "forward",
                format!("input {} does not match expected channels {}", input.shape(), expect.c),
            ));
        }
        let last_use = self.last_use();
        let mut values: HashMap<String, Tensor> = HashMap::new();
        values.insert(INPUT.to_string(), input.clone());
        self.exec.install(|| {
            for (i, node) in self.graph.nodes.iter().enumerate() {
                let args: Vec<&Tensor> = node
                    .inputs
                    .iter()
                    .map(|id| &values[id.as_str()])
                    .collect();
                let out = eval(node, &self.params[i], &args, &self.exec.opts)
                    .map_err(|e| Error::at_node(&node.id, e))?;
                values.insert(node.id.clone(), out);
                if !keep_all {
                    for id in &node.inputs {
                        if last_use.get(id.as_str()) == Some(&i) {
                            values.remove(id.as_str());
                        }
                    }
                }
            }
            Ok(values)
        })
    }

    /// Index of the last node reading each id; outputs are never released.
    fn last_use(&self) -> HashMap<&str, usize> {
        let mut last = HashMap::new();
        for (i, node) in self.graph.nodes.iter().enumerate() {
            for id in &node.inputs {
                last.insert(id.as_str(), i);
            }
        }
        for (_, id) in &self.graph.outputs {
            last.insert(id.as_str(), usize::MAX);
        }
        last
    }
}

fn eval(node: &LayerNode, params: &NodeParams, args: &[&Tensor], opts: &ExecOptions) -> Result<Tensor> {
    let arity = |n: usize| {
        if args.len() == n {
            Ok(())
        } else {
            Err(Error::invalid("forward", format!("{} expects {n} inputs, got {}", node.op.kind(), args.len())))
        }
    };
    match (&node.op, params) {
        (Op::Conv(spec), NodeParams::Conv(w)) => {
            arity(1)?;
            kernels::conv2d_with(args[0], spec, w, opts)
        }
        (Op::Relu, _) => {
            arity(1)?;
            Ok(tensor::relu(args[0]))
        }
        (Op::MaxPool { kernel, stride, padding }, _) => {
            arity(1)?;
            kernels::maxpool2d_with(args[0], *kernel, *stride, *padding, opts)
        }
        (Op::Upsample, _) => match args {
            [x] => Ok(kernels::upsample_nearest2x(x)),
            [x, like] => kernels::upsample_nearest_to(x, like.shape().h, like.shape().w),
            _ => arity(2).map(|_| unreachable!()),
        },
        (Op::Add, _) => {
            arity(2)?;
            tensor::elementwise_add(args[0], args[1])
        }
        (Op::WeightedFusion { epsilon }, NodeParams::Fusion(w)) => kernels::weighted_fusion(args, w, *epsilon),
        (Op::Concat, _) => tensor::concat_channels(args),
        (Op::Softmax { group }, _) => {
            arity(1)?;
            tensor::softmax_channels(args[0], *group)
        }
        (Op::MaxOut { background }, _) => {
            arity(1)?;
            kernels::maxout_background(args[0], *background)
        }
        _ => Err(Error::invalid("forward", "node parameters were not resolved")),
    }
}

/// Deterministic single-threaded forward pass.
pub fn forward(graph: &ModelGraph, weights: &WeightStore, input: &Tensor) -> Result<BTreeMap<String, Tensor>> {
    let exec = Executor::new(ExecOptions::default())?;
    exec.prepare(graph, weights)?.forward(input)
}
