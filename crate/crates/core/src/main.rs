use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use eresfd::bench::{self, BenchConfig, LatencyStats, Pair, SweepAxis, SweepRow, SweepTable};
use eresfd::cost::{self, FlopsConvention};
use eresfd::detect::{self, DetectConfig};
use eresfd::graph::{build_model, ModelConfig};
use eresfd::kernels::{ExecOptions, KernelPath};
use eresfd::weights::{self, WeightStore};
use eresfd::{image, Error, Shape};

#[derive(Parser)]
#[command(name = "eresfd", version, about = "EResFD inference engine and architecture analysis toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer MACs/FLOPs, parameters and receptive fields.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "macs")]
        convention: Convention,
        /// Also write the per-node report as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Override the configured input size, as HxW.
        #[arg(long, value_parser = parse_hw)]
        input: Option<(usize, usize)>,
    },
    /// Latency microbenchmarks.
    Bench {
        #[arg(value_enum)]
        target: BenchTarget,
        /// `<axis>=<v1,v2,...>`; axes: channels, input_size, width_multiplier.
        #[arg(long, value_parser = parse_sweep)]
        sweep: Option<(SweepAxis, Vec<f64>)>,
        /// Model config, required for `graph`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = 20)]
        warmup: usize,
        /// Base input size for layer/block sweeps, as HxW.
        #[arg(long, value_parser = parse_hw, default_value = "16x16")]
        input: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the naive reference kernels.
        #[arg(long)]
        naive: bool,
        /// Write the CSV to this file instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Print JSON instead of CSV on stdout.
        #[arg(long)]
        json: bool,
        /// `graph` only: print a per-group latency breakdown.
        #[arg(long)]
        breakdown: bool,
    },
    /// Run face detection on one image.
    Detect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        threshold: f32,
        #[arg(long)]
        flip: bool,
        #[arg(long, value_delimiter = ',', default_value = "1.0")]
        scales: Vec<f32>,
        #[arg(long)]
        json: bool,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Write a container of seeded random weights for a config.
    InitWeights {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Append the CRC-32 section.
        #[arg(long)]
        checksums: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Convention {
    Macs,
    #[value(name = "2xmacs")]
    TwoXMacs,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum BenchTarget {
    Layer,
    Block,
    Graph,
}

fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW")?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height `{h}`"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width `{w}`"))?;
    if h == 0 || w == 0 {
        return Err("sizes must be positive".into());
    }
    Ok((h, w))
}

fn parse_sweep(s: &str) -> Result<(SweepAxis, Vec<f64>), String> {
    let (axis, values) = s.split_once('=').ok_or("expected <axis>=<v1,v2,...>")?;
    let axis = SweepAxis::parse(axis.trim()).ok_or_else(|| format!("unknown sweep axis `{axis}`"))?;
    let values = values
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| format!("bad sweep value `{v}`")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((axis, values))
}

/// Exit 2 for problems with user-provided inputs, 1 for everything else.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::File { .. }
        | Error::Config(_)
        | Error::Container(_)
        | Error::UnsupportedImage { .. }
        | Error::MalformedImage(_) => 2,
        Error::Node { source, .. } => exit_code(source),
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        // downstream closed early, e.g. `| head`
        Err(Error::Io(e)) if e.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> eresfd::Result<()> {
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    match command {
        Command::Analyze {
            config,
            convention,
            csv,
            input,
        } => {
            let cfg = ModelConfig::load(&config)?;
            let graph = build_model(&cfg)?;
            let [h, w] = cfg.input_size;
            let (h, w) = input.unwrap_or((h, w));
            let convention = match convention {
                Convention::Macs => FlopsConvention::Macs,
                Convention::TwoXMacs => FlopsConvention::TwoPerMac,
            };
            let report = cost::analyze(&graph, Shape::new(1, 3, h, w), convention)?;
            write!(out, "{}", report.render_table())?;
            if let Some(path) = csv {
                report.write_csv(create(&path)?)?;
            }
        }
        Command::Bench {
            target,
            sweep,
            config,
            threads,
            iters,
            warmup,
            input,
            seed,
            naive,
            csv,
            json,
            breakdown,
        } => {
            let base = BenchConfig {
                warmup_iters: warmup,
                measure_iters: iters,
                threads,
                input_shape: Shape::new(1, 16, input.0, input.1),
                seed,
                path: if naive { KernelPath::Naive } else { KernelPath::Optimized },
            };
            let table = match target {
                BenchTarget::Layer | BenchTarget::Block => {
                    let pair = if target == BenchTarget::Layer { Pair::Layer } else { Pair::Block };
                    let (axis, values) = sweep.unwrap_or((SweepAxis::Channels, vec![16.0]));
                    bench::bench_sweep(axis, &values, pair, &base)?
                }
                BenchTarget::Graph => {
                    let config = config.ok_or_else(|| Error::Config("bench graph needs --config".into()))?;
                    let cfg = ModelConfig::load(&config)?;
                    if breakdown {
                        let graph = build_model(&cfg)?;
                        let [h, w] = cfg.input_size;
                        let shape = Shape::new(1, 3, h, w);
                        let gb = bench::bench_graph(&graph, None, &BenchConfig { input_shape: shape, ..base })?;
                        let report = cost::latency_breakdown(&graph, shape, FlopsConvention::Macs, &gb.node_stats())?;
                        write!(out, "{}", report.render_table())?;
                        writeln!(
                            out,
                            "forward median {:.3} ms, node sum {:.3} ms, overhead {:.3} ms",
                            gb.total.median_ms, gb.node_sum_ms, gb.overhead_ms
                        )?;
                        out.flush()?;
                        return Ok(());
                    }
                    bench_model_sweep(&cfg, sweep, &base)?
                }
            };
            if let Some(path) = &csv {
                table.write_csv(create(path)?)?;
            }
            if json {
                writeln!(out, "{}", table.to_json())?;
            } else if csv.is_none() {
                table.write_csv(&mut out)?;
            }
        }
        Command::Detect {
            config,
            weights,
            image,
            threshold,
            flip,
            scales,
            json,
            threads,
        } => {
            let cfg = ModelConfig::load(&config)?;
            if !cfg.is_detector() {
                return Err(Error::Config("config has no detection heads".into()));
            }
            let graph = build_model(&cfg)?;
            let store = weights::load_weights(&weights)?;
            let img = image::load_image(&image)?;
            let det_cfg = DetectConfig {
                score_threshold: threshold,
                flip,
                scales,
                exec: ExecOptions {
                    threads,
                    path: KernelPath::Optimized,
                },
                ..DetectConfig::default()
            };
            let boxes = detect::detect(&img, &graph, &store, &det_cfg)?;
            if json {
                writeln!(out, "{}", detect::format_json(&boxes))?;
            } else {
                write!(out, "{}", detect::format_lines(&boxes))?;
            }
        }
        Command::InitWeights {
            config,
            out: path,
            seed,
            checksums,
        } => {
            let cfg = ModelConfig::load(&config)?;
            let graph = build_model(&cfg)?;
            let store = WeightStore::random_for(&graph, seed);
            if checksums {
                weights::save_weights_with_checksums(&store, &path)?;
            } else {
                weights::save_weights(&store, &path)?;
            }
            writeln!(out, "wrote {} tensors to {}", store.len(), path.display())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn create(path: &Path) -> eresfd::Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::file(path, e))
}

/// Whole-model latency across input sizes or width multipliers.
fn bench_model_sweep(cfg: &ModelConfig, sweep: Option<(SweepAxis, Vec<f64>)>, base: &BenchConfig) -> eresfd::Result<SweepTable> {
    let (axis, values) = sweep.unwrap_or((SweepAxis::InputSize, vec![cfg.input_size[0] as f64]));
    let meta = base.meta();
    let mut rows = Vec::new();
    for &v in &values {
        let mut cfg = cfg.clone();
        match axis {
            SweepAxis::InputSize if v.fract() == 0.0 && v >= 1.0 => cfg.input_size = [v as usize; 2],
            SweepAxis::WidthMultiplier if v > 0.0 => cfg.backbone.width_multiplier = v,
            _ => return Err(Error::Config(format!("bench graph cannot sweep {}={v}", axis.name()))),
        }
        cfg.validate()?;
        let graph = build_model(&cfg)?;
        let [h, w] = cfg.input_size;
        let shape = Shape::new(1, 3, h, w);
        let stats: LatencyStats = bench::bench_model(&graph, None, &BenchConfig { input_shape: shape, ..base.clone() })?;
        rows.push(SweepRow {
            axis: axis.name(),
            axis_value: v,
            variant: "model",
            median_ms: stats.median_ms,
            mean_ms: stats.mean_ms,
            p95_ms: stats.p95_ms,
            stddev_ms: stats.stddev_ms,
            iters: stats.iters,
            macs: cost::analyze(&graph, shape, FlopsConvention::Macs)?.total_macs,
            threads: meta.threads,
            cpu_model: meta.cpu_model.clone(),
        });
    }
    Ok(SweepTable { meta, rows })
}
