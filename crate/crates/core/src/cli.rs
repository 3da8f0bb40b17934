//! Command-line front end for the `btnn` binary.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bconv::ActLayout;
use crate::bench::{pow2_range, run_bench, BenchConfig, Suite};
use crate::bmm::Variant;
use crate::error::{invalid, Error, Result};
use crate::nn::{convert_weights, preset, Batch, Engine, FloatWeights, ModelSpec, RunOptions, WeightStore, PRESETS};
use crate::oracle::emit_fixtures;

/// Environment variable that overrides the default worker count.
pub const THREADS_ENV: &str = "BTNN_THREADS";

#[derive(Parser, Debug)]
#[command(name = "btnn", version, about = "Bit-packed binarized neural network inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Binarize float weights and write a packed weight file.
    Convert {
        /// Model spec JSON file, or a preset name.
        model: String,
        /// Float weight file (BTFW).
        weights: PathBuf,
        /// Output packed weight file (BTNN).
        out: PathBuf,
        #[arg(long, default_value = "plain")]
        layout: ActLayout,
    },
    /// Run a batch through a model and write predictions as CSV.
    Infer {
        model: String,
        /// Packed weight file (BTNN).
        weights: PathBuf,
        /// Input batch (BTIN).
        input: PathBuf,
        /// Predictions CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "plain")]
        layout: ActLayout,
        #[command(flatten)]
        threads: Threads,
        /// Also emit per-layer latency.
        #[arg(long)]
        breakdown: bool,
        /// Breakdown CSV; stderr when absent.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Time kernels or whole models and emit a CSV report.
    Bench(BenchArgs),
    /// Write random float weights for a model (BTFW).
    InitWeights {
        model: String,
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Write a random input batch for a model (BTIN).
    RandomBatch {
        model: String,
        out: PathBuf,
        #[arg(long, short = 'n', default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Write reference test cases computed by the oracle.
    Fixtures {
        dir: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// List the built-in model presets.
    Presets,
}

#[derive(Args, Debug, Clone, Copy)]
pub struct Threads {
    /// Worker threads; defaults to all cores.
    #[arg(long, env = THREADS_ENV)]
    pub threads: Option<usize>,
}

impl Threads {
    pub fn count(self) -> usize {
        self.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1)
    }
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// bmm, bmm-bin, bconv, bconv-bin or model.
    pub suite: Suite,
    /// Explicit sizes (bmm n, bconv C = O); overrides --min/--max.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Vec<usize>,
    #[arg(long)]
    pub min: Option<usize>,
    #[arg(long)]
    pub max: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<Variant>,
    #[arg(long, value_delimiter = ',')]
    pub layouts: Vec<ActLayout>,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub threads: Threads,
    /// bconv batch.
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// bconv input height and width.
    #[arg(long, default_value_t = 64)]
    pub input: usize,
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Preset for the model suite.
    #[arg(long, default_value = "resnet14")]
    pub model: String,
    /// Input height and width override for the model suite.
    #[arg(long)]
    pub model_input: Option<usize>,
    /// Largest batch of the doubling sweep, starting at 8.
    #[arg(long, default_value_t = 64)]
    pub max_batch: usize,
    #[arg(long)]
    pub breakdown: bool,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

impl BenchArgs {
    pub fn config(&self) -> BenchConfig {
        let mut c = BenchConfig::new(self.suite);
        if !self.sizes.is_empty() {
            c.sizes = self.sizes.clone();
        } else if self.min.is_some() || self.max.is_some() {
            let lo = self.min.unwrap_or(128);
            c.sizes = pow2_range(lo, self.max.unwrap_or(lo));
        }
        if !self.variants.is_empty() {
            c.variants = self.variants.clone();
        }
        if !self.layouts.is_empty() {
            c.layouts = self.layouts.clone();
        }
        c.reps = self.reps;
        c.warmup = self.warmup;
        c.seed = self.seed;
        c.threads = self.threads.count();
        c.batch = self.batch;
        c.input = self.input;
        c.kernel = self.kernel;
        c.stride = self.stride;
        c.model = self.model.clone();
        c.model_input = self.model_input;
        c.batches = pow2_range(8, self.max_batch);
        c.breakdown = self.breakdown;
        c
    }
}

/// Loads a model spec from a JSON file, falling back to a preset name.
pub fn load_model(arg: &str) -> Result<ModelSpec> {
    let path = Path::new(arg);
    if path.exists() {
        ModelSpec::from_file(path)
    } else if PRESETS.contains(&arg) {
        preset(arg)
    } else {
        Err(invalid(format!("'{arg}' is neither a model file nor a preset")))
    }
}

fn write_out(path: Option<&Path>, text: &str, stderr: bool) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None if stderr => std::io::stderr().write_all(text.as_bytes())?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| invalid(e.to_string()))
}

/// Pads `batch` with zero images to a multiple of 8.
fn pad_batch(batch: &Batch) -> Result<Batch> {
    let n = batch.n.div_ceil(8) * 8;
    let mut data = batch.data.clone();
    data.resize(n * batch.h * batch.w * batch.c, 0.0);
    Batch::new(n, batch.h, batch.w, batch.c, data)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| invalid(e.to_string()))?;
    execute(cli.command)
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Convert { model, weights, out, layout } => {
            let plan = load_model(&model)?.plan()?;
            let mut fw = FloatWeights::load(&weights)?;
            fw.validate(&plan)?;
            convert_weights(&plan, &fw, layout)?.save(out)
        }
        Command::Infer { model, weights, input, out, layout, threads, breakdown, csv } => {
            let plan = load_model(&model)?.plan()?;
            let store = WeightStore::load(&weights)?;
            let batch = Batch::load(&input)?;
            let want = batch.n;
            let engine = Engine::new(plan, &store, layout)?;
            let padded = pad_batch(&batch)?;
            let opts = RunOptions { timings: breakdown, capture: false };
            let res = pool(threads.count())?.install(|| engine.run(&padded.to_tensor()?, opts))?;
            let k = res.classes;
            let mut s = String::from("index,label");
            for j in 0..k {
                let _ = write!(s, ",score_{j}");
            }
            s.push('\n');
            for i in 0..want {
                let _ = write!(s, "{i},{}", res.labels[i]);
                for v in &res.scores[i * k..(i + 1) * k] {
                    let _ = write!(s, ",{v}");
                }
                s.push('\n');
            }
            write_out(out.as_deref(), &s, false)?;
            if breakdown {
                let total = res.timings.iter().map(|t| t.nanos).sum::<u128>().max(1) as f64;
                let mut b = String::from("layer,latency_ns,percent\n");
                for t in &res.timings {
                    let _ = writeln!(b, "{},{},{:.3}", t.name, t.nanos, t.nanos as f64 * 100.0 / total);
                }
                write_out(csv.as_deref(), &b, true)?;
            }
            Ok(())
        }
        Command::Bench(args) => {
            let report = run_bench(&args.config())?;
            write_out(args.csv.as_deref(), &report.to_csv(), false)
        }
        Command::InitWeights { model, out, seed } => {
            let plan = load_model(&model)?.plan()?;
            FloatWeights::random(&plan, seed).save(out)
        }
        Command::RandomBatch { model, out, count, seed } => {
            let plan = load_model(&model)?.plan()?;
            Batch::random(count, plan.input.h, plan.input.w, plan.input.c, seed).save(out)
        }
        Command::Fixtures { dir, seed } => {
            let path = emit_fixtures(dir, seed)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Presets => {
            for name in PRESETS {
                let plan = preset(name)?.plan()?;
                println!("{name}\t{}\t{} layers", plan.input, plan.layers.len());
            }
            Ok(())
        }
    }
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidInput(_) | Error::Parse(_) => 2,
        Error::Io(_) => 3,
        Error::CorruptFile(_) | Error::Load(_) => 4,
        Error::Validation { .. } | Error::UnsupportedShape(_) => 5,
        Error::Check(_) => 6,
    }
}
