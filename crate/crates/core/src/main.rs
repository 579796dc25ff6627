use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use convbn::error::{Error, Result};
use convbn::graph::{self, Graph};
use convbn::harness::bench::{self, BenchOptions};
use convbn::harness::coeffs::{self, CoeffsOptions};
use convbn::harness::gradcheck::{self, GradcheckOptions};
use convbn::harness::stability::{self, CoeffSpec, StabilityOptions};
use convbn::harness::train::{self, DatasetSpec, TrainConfig};
use convbn::harness::verify::{self, VerifyOptions};
use convbn::harness::ExperimentReport;
use convbn::{fixtures, io, memory, DType, Mode, Shape};

#[derive(Parser)]
#[command(name = "convbn", version, about = "Conv+BN mode verification, experiments and graph rewriting")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Element type: f32 or f64.
    #[arg(long, global = true)]
    dtype: Option<DType>,
    /// Graph JSON.
    #[arg(long, global = true)]
    graph: Option<PathBuf>,
    /// CBNT parameter (or stats) file.
    #[arg(long, global = true)]
    params: Option<PathBuf>,
    /// train, eval, tune or deploy.
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Eval/Tune/Deploy equivalence, associativity and broadcast-adjoint suite.
    Verify {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        /// Self-test: perturb the fused weight of this instance.
        #[arg(long)]
        fault_instance: Option<usize>,
    },
    /// Central-difference gradient checks (f64 only).
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Comma-separated subset of ops.
        #[arg(long, value_delimiter = ',')]
        ops: Vec<String>,
        #[arg(long, default_value_t = gradcheck::STEP)]
        step: f64,
    },
    /// One-step and multi-step Eval vs Deploy updates under scaling coefficients.
    Stability {
        /// Explicit coefficients, e.g. 0.1,1,10.
        #[arg(long, value_delimiter = ',', conflicts_with = "log_uniform")]
        coeffs: Vec<f64>,
        /// Log-uniform sampling range LO,HI.
        #[arg(long, value_delimiter = ',', num_args = 2)]
        log_uniform: Vec<f64>,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 0.02)]
        lr: f64,
    },
    /// Histograms of BN scaling coefficients from a CBNT stats file.
    Coeffs {
        /// Stats file; defaults to --params.
        stats: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        bins: usize,
        /// Histogram range LO,HI.
        #[arg(long, value_delimiter = ',', num_args = 2)]
        range: Vec<f64>,
    },
    /// Forward+backward timing and saved bytes per mode over a grid.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
        batches: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "32,48,64")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 7)]
        rounds: usize,
        #[arg(long, default_value_t = 3)]
        inner: usize,
        /// Also write the grid as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// SGD training of the toy conv-bn network.
    Train {
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 5e-4)]
        weight_decay: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Modes visited in order, e.g. train,tune. Overrides --mode.
        #[arg(long, value_delimiter = ',')]
        schedule: Vec<Mode>,
        /// Cycle the schedule every N steps.
        #[arg(long)]
        switch_every: Option<usize>,
        /// CBNT dataset with `images` and `labels`; synthetic blobs otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        samples: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        image_size: usize,
        /// Also run the paired Eval/Tune comparison.
        #[arg(long)]
        compare: bool,
    },
    /// Apply turn_on (or revert) to a graph and write the result.
    Rewrite {
        /// Output graph JSON; parameters go next to it as <stem>.cbnt.
        #[arg(long)]
        out_graph: Option<PathBuf>,
        /// Undo an earlier rewrite instead.
        #[arg(long)]
        revert: bool,
    },
    /// Saved-for-backward footprint per mode.
    Memory {
        /// Input shape N,C,H,W.
        #[arg(long, value_delimiter = ',', required = true)]
        input: Vec<usize>,
        /// Use the built-in ResNet-50-shaped stack instead of --graph.
        #[arg(long)]
        resnet50: bool,
        /// Print the text table instead of JSON.
        #[arg(long)]
        table: bool,
    },
}

fn load_graph(common: &Common) -> Result<Graph> {
    let path = common.graph.as_ref().ok_or_else(|| Error::Input("--graph is required".into()))?;
    let mut g = Graph::load(path)?;
    if let Some(p) = &common.params {
        g.attach_params(io::read(p)?)?;
    }
    g.check_params()?;
    Ok(g)
}

fn emit(common: &Common, text: &str) -> Result<()> {
    match &common.out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn emit_report(common: &Common, report: &ExperimentReport) -> Result<bool> {
    emit(common, &report.to_json_string())?;
    for c in &report.criteria {
        eprintln!("{}", c.summary_line());
    }
    Ok(report.passed())
}

fn pair(v: &[f64], flag: &str) -> Result<Option<(f64, f64)>> {
    match v {
        [] => Ok(None),
        [a, b] => Ok(Some((*a, *b))),
        _ => Err(Error::Input(format!("--{flag} takes two values"))),
    }
}

fn run(cli: Cli) -> Result<bool> {
    let common = &cli.common;
    match cli.command {
        Command::Verify { instances, fault_instance } => {
            let opts = VerifyOptions { seed: common.seed, instances, fault: fault_instance, ..Default::default() };
            emit_report(common, &verify::run(&opts)?)
        }
        Command::Gradcheck { instances, ops, step } => {
            if common.dtype == Some(DType::F32) {
                return Err(Error::Input("gradcheck runs in f64 only".into()));
            }
            let opts = GradcheckOptions { seed: common.seed, instances, step, ops };
            emit_report(common, &gradcheck::run(&opts)?)
        }
        Command::Stability { coeffs, log_uniform, channels, steps, lr } => {
            let spec = match (coeffs.is_empty(), pair(&log_uniform, "log-uniform")?) {
                (false, _) => CoeffSpec::List { values: coeffs },
                (true, Some((lo, hi))) => CoeffSpec::LogUniform { lo, hi, channels },
                (true, None) => CoeffSpec::LogUniform { lo: 0.1, hi: 10.0, channels },
            };
            let opts = StabilityOptions { seed: common.seed, coeffs: spec, lr, steps, ..Default::default() };
            emit_report(common, &stability::run(&opts)?)
        }
        Command::Coeffs { stats, bins, range } => {
            let opts = CoeffsOptions { bins, range: pair(&range, "range")? };
            let report = match (stats.or(common.params.clone()), &common.graph) {
                (Some(p), _) => coeffs::run(p, &opts)?,
                (None, Some(_)) => coeffs::report_for(&load_graph(common)?.params, &opts)?,
                (None, None) => return Err(Error::Input("a stats file (or --params / --graph) is required".into())),
            };
            emit_report(common, &report)
        }
        Command::Bench { batches, sizes, warmup, rounds, inner, csv } => {
            let opts = BenchOptions {
                seed: common.seed,
                dtype: common.dtype.unwrap_or(DType::F32),
                batches,
                sizes,
                warmup,
                rounds,
                inner,
            };
            let result = match &common.graph {
                Some(_) => bench::run_on(&load_graph(common)?, &opts)?,
                None => bench::run(&opts)?,
            };
            eprint!("{}", bench::to_table(&result.cells, &result.timings));
            if let Some(p) = csv {
                std::fs::write(p, bench::to_csv(&result.cells, &result.timings))?;
            }
            emit_report(common, &result.report)
        }
        Command::Train {
            steps,
            lr,
            momentum,
            weight_decay,
            batch_size,
            schedule,
            switch_every,
            data,
            samples,
            classes,
            image_size,
            compare,
        } => {
            let schedule = if schedule.is_empty() { vec![common.mode.unwrap_or(Mode::Eval)] } else { schedule };
            let dataset = match data {
                Some(path) => DatasetSpec::File { path },
                None => DatasetSpec::Synthetic { samples, classes, image_size, spread: 1.0 },
            };
            let cfg = TrainConfig {
                lr,
                momentum,
                weight_decay,
                batch_size,
                steps,
                seed: common.seed,
                dtype: common.dtype.unwrap_or(DType::F32),
                schedule,
                switch_every,
                dataset,
                freeze: Vec::new(),
            };
            emit_report(common, &train::run(&cfg, compare)?)
        }
        Command::Rewrite { out_graph, revert } => {
            let mut g = load_graph(common)?;
            let report = if revert {
                graph::revert(&mut g)?
            } else {
                graph::turn_on(&mut g, common.mode.unwrap_or(Mode::Tune))?
            };
            if let Some(path) = out_graph {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)?;
                }
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("graph").to_string();
                g.save(&path, Some(&format!("{stem}.cbnt")))?;
            }
            emit(common, &report.to_json_string())?;
            Ok(true)
        }
        Command::Memory { input, resnet50, table } => {
            let shape = Shape::new(input)?;
            let dtype = common.dtype.unwrap_or(DType::F32);
            let report = if resnet50 {
                let (g, shapes) = fixtures::resnet50()?;
                memory::footprint_report_with(&g, &shapes, &shape, dtype)?
            } else {
                memory::footprint_report(&load_graph(common)?, &shape, dtype)?
            };
            emit(common, &if table { report.to_table() } else { report.to_json_string() })?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
