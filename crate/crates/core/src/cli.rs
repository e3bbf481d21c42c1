//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::PipelineConfig;
use crate::data::load_mnist_dir;
use crate::error::{Error, Result};
use crate::persistence::{
    load_compressed, load_dense_checkpoint, save_compressed, save_dense_checkpoint, COMPRESSED_MAGIC, DENSE_MAGIC,
};
use crate::pipeline::{self, Model};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "gbnn",
    version,
    about = "Stochastic weight sharing for Bayesian neural networks"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Global {
    /// JSON configuration file; keys not given keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Named preset used as the base configuration.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory with the MNIST IDX files.
    #[arg(long, global = true, default_value = "data/mnist")]
    pub data_dir: PathBuf,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; 1 gives a fully sequential run.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the dense mean-field network.
    Pretrain,
    /// Turn a dense checkpoint into a compressed model.
    Compress {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train the shared parameters of a compressed model.
    Train {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Evaluate a dense or compressed model on the test set.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = OodSource::Noise)]
        ood: OodSource,
    },
    /// Export the (μ, σ) scatter and the component ellipses as CSV.
    Viz {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Dense checkpoint whose per-weight (μ, σ) to plot instead of the
        /// shared values.
        #[arg(long)]
        dense: Option<PathBuf>,
    },
    /// Summarize logs and the evaluation report as markdown.
    Report,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OodSource {
    None,
    Noise,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Config(_) | Error::Json(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn resolve_config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match (&g.config, &g.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let base = match &g.preset {
                Some(p) => PipelineConfig::preset(p)?,
                None => PipelineConfig::default(),
            };
            overlay(base, &text)?
        }
        (None, Some(p)) => PipelineConfig::preset(p)?,
        (None, None) => PipelineConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Applies the keys of a JSON document on top of `base`.
fn overlay(base: PipelineConfig, text: &str) -> Result<PipelineConfig> {
    fn merge(dst: &mut serde_json::Value, src: serde_json::Value) {
        match (dst, src) {
            (serde_json::Value::Object(d), serde_json::Value::Object(s)) => {
                for (k, v) in s {
                    match d.get_mut(&k) {
                        Some(slot) => merge(slot, v),
                        None => {
                            d.insert(k, v);
                        }
                    }
                }
            }
            (d, s) => *d = s,
        }
    }
    let mut v = serde_json::to_value(&base)?;
    let patch: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    merge(&mut v, patch);
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_model(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(DENSE_MAGIC) {
        Ok(Model::Dense(crate::persistence::decode_dense(&bytes, None)?))
    } else if bytes.starts_with(COMPRESSED_MAGIC) {
        Ok(Model::Compressed(crate::persistence::decode_compressed(&bytes)?))
    } else {
        Err(Error::BadMagic {
            expected: COMPRESSED_MAGIC.to_vec(),
            found: bytes[..bytes.len().min(4)].to_vec(),
        })
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let cfg = resolve_config(g)?;
    std::fs::create_dir_all(&g.out).map_err(|e| Error::io(&g.out, e))?;
    let out = |name: &str| g.out.join(name);
    match &cli.command {
        Command::Pretrain => {
            let s = pipeline::load_splits(&g.data_dir, &cfg)?;
            let (net, log) = pipeline::pretrain(&cfg, &s.train, s.val.as_ref())?;
            save_dense_checkpoint(&net, &out("dense.2gbd"))?;
            log.save(&out("pretrain_log.csv"))?;
            write(&out("config.json"), &cfg.to_json())?;
            if let Some(r) = log.rows.last() {
                eprintln!("pretrain: epoch {} train_acc {:.4}", r.epoch, r.train_acc);
            }
        }
        Command::Compress { model } => {
            let path = model.clone().unwrap_or_else(|| out("dense.2gbd"));
            let net = load_dense_checkpoint(&path, Some(&cfg.architecture))?;
            let s = pipeline::load_splits(&g.data_dir, &cfg)?;
            let (cp, rep) = pipeline::compress(&net, &s.train, &cfg)?;
            let bytes = save_compressed(&cp, &out("compressed.2gbn"))?;
            write(&out("compress_report.json"), &serde_json::to_string_pretty(&rep)?)?;
            eprintln!(
                "compress: {} outliers, {} ellipses, {} gaussians, {} bytes",
                rep.counts.n_outliers, rep.counts.n_ellipses, rep.counts.n_gaussians, bytes
            );
        }
        Command::Train { model } => {
            let path = model.clone().unwrap_or_else(|| out("compressed.2gbn"));
            let mut cp = load_compressed(&path)?;
            let s = pipeline::load_splits(&g.data_dir, &cfg)?;
            let log = pipeline::retrain(&mut cp, &cfg, &s.train, s.val.as_ref())?;
            save_compressed(&cp, &out("retrained.2gbn"))?;
            log.save(&out("retrain_log.csv"))?;
        }
        Command::Eval { model, ood } => {
            let path = match model {
                Some(p) => p.clone(),
                None => [out("retrained.2gbn"), out("compressed.2gbn"), out("dense.2gbd")]
                    .into_iter()
                    .find(|p| p.exists())
                    .ok_or_else(|| Error::Config("no model given and none found in the output directory".into()))?,
            };
            let model = load_model(&path)?;
            let test = load_mnist_dir(&g.data_dir, false)?;
            let noise = (*ood == OodSource::Noise).then(|| pipeline::noise_ood(&test, &cfg));
            let ev = pipeline::evaluate(&model, &cfg, &test, noise.as_ref())?;
            let json = ev.report.to_json();
            write(&out("eval.json"), &json)?;
            let mut bins = String::from("lower,upper,count,accuracy,confidence\n");
            for b in &ev.reliability {
                bins.push_str(&format!(
                    "{},{},{},{},{}\n",
                    b.lower, b.upper, b.count, b.accuracy, b.confidence
                ));
            }
            write(&out("reliability.csv"), &bins)?;
            use std::io::Write as _;
            let _ = writeln!(std::io::stdout(), "{json}");
        }
        Command::Viz { model, dense } => {
            let path = model.clone().unwrap_or_else(|| out("compressed.2gbn"));
            let cp = load_compressed(&path)?;
            let points = match dense {
                Some(d) => {
                    let net = load_dense_checkpoint(d, Some(cp.layout.dims()))?;
                    Some(net.points())
                }
                None => None,
            };
            write(&out("scatter.csv"), &pipeline::viz_csv(&cp, points.as_deref()))?;
        }
        Command::Report => {
            let mut logs = Vec::new();
            for (name, file) in [("Stage 1", "pretrain_log.csv"), ("Stage 3", "retrain_log.csv")] {
                let p = out(file);
                if p.exists() {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    logs.push((name.to_string(), pipeline::parse_log_csv(&text)?));
                }
            }
            let ep = out("eval.json");
            let eval = if ep.exists() {
                let text = std::fs::read_to_string(&ep).map_err(|e| Error::io(&ep, e))?;
                Some(serde_json::from_str(&text)?)
            } else {
                None
            };
            write(&out("report.md"), &pipeline::report_markdown(&logs, eval.as_ref()))?;
        }
    }
    Ok(())
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    }
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
