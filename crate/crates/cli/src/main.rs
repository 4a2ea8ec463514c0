//! `camlab` command line.
//!
//! Every command reads its behavior from `key = value` config files plus a
//! few flags, writes outputs atomically, and on failure prints a single
//! `error[<category>]: <message>` line to stderr with exit code 2.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use camlab::experiment::{self, FIDELITY_COLUMNS, WSOL_COLUMNS};
use camlab::io::{write_atomic, write_pgm, write_raw};
use camlab::train::{self, Phase};
use camlab::{
    cam, distortion, Branch, CamConfig, Checkpoint, Dataset, DatasetSpec, DistortionGrid, DistortionLab,
    EvalRow, ExperimentConfig, KvConfig, PosWeightMode, RunManifest, Split, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "camlab",
    version,
    about = "Dual-branch sigmoid CAM experiments on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into a directory.
    GenData {
        /// Dataset config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain backbone and softmax head with cross-entropy.
    TrainSoftmax {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replicate the head and fine-tune the sigmoid branch with everything else frozen.
    TrainSigmoid {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Pretrained checkpoint.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one heatmap per image (PGM and raw f32) plus an index CSV.
    Cam {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        out: PathBuf,
        /// Only the first N images of the split.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run the softmax distortion grid against a checkpoint.
    Distort {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Distortion grid config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = Split::parse)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Localization metrics for one CAM configuration.
    EvalWsol {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average Drop and Increase in Confidence for one CAM configuration.
    EvalFidelity {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Join metric CSVs on their configuration columns into one table.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline: data, pretraining, fine-tuning, metrics matrix, distortions.
    RunAll {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// CAM config; the flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    branch: Option<String>,
    #[arg(long)]
    nwc: Option<bool>,
    #[arg(long, default_value = "test", value_parser = Split::parse)]
    split: Split,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", category(&e), one_line(&e));
            ExitCode::from(2)
        }
    }
}

fn category(e: &anyhow::Error) -> &'static str {
    if let Some(e) = e.downcast_ref::<camlab::Error>() {
        e.category()
    } else if e.downcast_ref::<std::io::Error>().is_some() {
        "io"
    } else {
        "usage"
    }
}

/// The error chain joined with `: `, skipping links already quoted by their parent.
fn one_line(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for link in e.chain() {
        let text = link.to_string();
        if !parts.last().is_some_and(|p| p.ends_with(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ").replace('\n', " ")
}

fn load_config<C: KvConfig>(base: C, path: Option<&Path>) -> Result<C> {
    let Some(path) = path else {
        return Ok(base);
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    base.apply_text(&text)
        .with_context(|| format!("in {}", path.display()))
}

fn open_pair(ckpt: &Path, data: &Path) -> Result<(Checkpoint, Dataset)> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let dataset = Dataset::load(data)?;
    checkpoint.check_dataset(&dataset.fingerprint())?;
    Ok((checkpoint, dataset))
}

fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.txt");
    PathBuf::from(name)
}

fn cam_config(args: &EvalArgs) -> Result<CamConfig> {
    let cfg = load_config(CamConfig::default(), args.config.as_deref())?;
    let mut overrides = String::new();
    if let Some(m) = &args.method {
        let _ = writeln!(overrides, "method = {m}");
    }
    if let Some(b) = &args.branch {
        let _ = writeln!(overrides, "branch = {b}");
    }
    if let Some(n) = args.nwc {
        let _ = writeln!(overrides, "nwc = {n}");
    }
    Ok(cfg.apply_text(&overrides)?)
}

fn pos_weight_mode(checkpoint: &Checkpoint, branch: Branch) -> Result<Option<PosWeightMode>> {
    if branch == Branch::Softmax {
        return Ok(None);
    }
    checkpoint
        .metadata
        .get("finetune.pos_weight_mode")
        .map(|v| PosWeightMode::parse(v).map_err(|e| anyhow!(e)))
        .transpose()
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => {
            let spec = load_config(DatasetSpec::default(), config.as_deref())?;
            let mut manifest = RunManifest::new("gen-data");
            manifest.config_path = config;
            let dataset = manifest.time("generate", || Dataset::generate(&spec))?;
            dataset.save(&out)?;
            manifest.dataset_fingerprint = dataset.fingerprint();
            manifest.outputs.push(out.clone());
            manifest.write(&out.join(experiment::MANIFEST))?;
            println!("{}", manifest.dataset_fingerprint);
        }
        Command::TrainSoftmax { config, data, out } => {
            let cfg = load_config(TrainConfig::pretrain(), config.as_deref())?;
            if cfg.phase != Phase::SoftmaxPretrain {
                bail!(camlab::Error::Invalid(
                    "train-softmax needs phase = softmax_pretrain".into()
                ));
            }
            let dataset = Dataset::load(&data)?;
            let fingerprint = dataset.fingerprint();
            let mut manifest = RunManifest::new("train-softmax");
            manifest.config_path = config;
            manifest.dataset_fingerprint = fingerprint.clone();
            let (model, report) = manifest.time("pretrain", || {
                experiment::pretrain_model(&dataset, cfg.seed, &cfg)
            })?;
            experiment::checkpoint_for(&model, cfg.seed, &fingerprint, &[("pretrain", cfg.to_text())])
                .save(&out)?;
            manifest.add_checkpoint(&out)?;
            manifest.write(&sibling_manifest(&out))?;
            print_losses(&report);
        }
        Command::TrainSigmoid {
            config,
            data,
            input,
            out,
        } => {
            let cfg = load_config(TrainConfig::finetune(PosWeightMode::Balanced), config.as_deref())?;
            let (base, dataset) = open_pair(&input, &data)?;
            let fingerprint = dataset.fingerprint();
            let mut manifest = RunManifest::new("train-sigmoid");
            manifest.config_path = config;
            manifest.dataset_fingerprint = fingerprint.clone();
            manifest.add_checkpoint(&input)?;
            let before = train::softmax_predictions(&base.model, &dataset.test)?;
            let (model, report) = manifest.time("finetune", || {
                experiment::finetune_model(&base.model, &dataset, cfg.seed.wrapping_add(1), &cfg)
            })?;
            if train::softmax_predictions(&model, &dataset.test)? != before {
                bail!(camlab::Error::FrozenDrift("softmax predictions changed".into()));
            }
            let mut checkpoint =
                experiment::checkpoint_for(&model, cfg.seed, &fingerprint, &[("finetune", cfg.to_text())]);
            for (k, v) in base.metadata.iter().filter(|(k, _)| k.starts_with("pretrain.")) {
                checkpoint = checkpoint.with(k, v);
            }
            checkpoint.save(&out)?;
            manifest.add_checkpoint(&out)?;
            manifest.write(&sibling_manifest(&out))?;
            print_losses(&report);
        }
        Command::Cam { eval, out, limit } => {
            let cfg = cam_config(&eval)?;
            let (checkpoint, dataset) = open_pair(&eval.ckpt, &eval.data)?;
            let samples = dataset.split(eval.split);
            let samples = &samples[..limit.unwrap_or(samples.len()).min(samples.len())];
            let mut manifest = RunManifest::new("cam");
            manifest.config_path = eval.config.clone();
            manifest.dataset_fingerprint = dataset.fingerprint();
            manifest.add_checkpoint(&eval.ckpt)?;
            let mut index = csv::Writer::from_writer(Vec::new());
            index.write_record([
                "index",
                "label",
                "predicted",
                "x0",
                "y0",
                "x1",
                "y1",
                "pgm",
                "raw",
            ])?;
            manifest.time("explain", || {
                for s in samples {
                    let e = cam::explain(&checkpoint.model, &s.image, &cfg)?;
                    let stem = format!("{}_{:05}", eval.split, s.index);
                    let (pgm, raw) = (format!("{stem}.pgm"), format!("{stem}.raw"));
                    write_pgm(&e.heatmap.map, &out.join(&pgm))?;
                    write_raw(&e.heatmap.map, &out.join(&raw))?;
                    let b = s.gt_box;
                    index
                        .write_record([
                            s.index.to_string(),
                            s.label.to_string(),
                            e.inference.predicted.to_string(),
                            b.x0.to_string(),
                            b.y0.to_string(),
                            b.x1.to_string(),
                            b.y1.to_string(),
                            pgm,
                            raw,
                        ])
                        .map_err(|e| camlab::Error::Contract(e.to_string()))?;
                }
                Ok(())
            })?;
            let index_path = out.join("index.csv");
            write_atomic(&index_path, &index.into_inner()?)?;
            manifest.outputs.push(index_path);
            manifest.write(&out.join(experiment::MANIFEST))?;
            println!("wrote {} heatmaps to {}", samples.len(), out.display());
        }
        Command::Distort {
            ckpt,
            data,
            config,
            split,
            out,
        } => {
            let grid = load_config(DistortionGrid::default(), config.as_deref())?;
            let (checkpoint, dataset) = open_pair(&ckpt, &data)?;
            let mut manifest = RunManifest::new("distort");
            manifest.config_path = config;
            manifest.dataset_fingerprint = dataset.fingerprint();
            manifest.add_checkpoint(&ckpt)?;
            let reports = manifest.time("distortion", || {
                let lab = DistortionLab::new(&checkpoint.model, dataset.split(split))?;
                lab.specs(&grid)?
                    .into_iter()
                    .map(|s| lab.run(s))
                    .collect::<camlab::Result<Vec<_>>>()
            })?;
            distortion::write_reports_csv(&reports, &out)?;
            manifest.outputs.push(out.clone());
            manifest.write(&sibling_manifest(&out))?;
            print!("{}", distortion::summary(&reports));
        }
        Command::EvalWsol { eval, out } => evaluate("eval-wsol", &eval, &out, &WSOL_COLUMNS)?,
        Command::EvalFidelity { eval, out } => evaluate("eval-fidelity", &eval, &out, &FIDELITY_COLUMNS)?,
        Command::Report { inputs, out } => {
            let tables = inputs
                .iter()
                .map(|p| Ok((p.display().to_string(), camlab::io::read_bytes(p)?)))
                .collect::<Result<Vec<_>>>()?;
            let table = experiment::render_report(&tables)?;
            if let Some(out) = out {
                write_atomic(&out, table.as_bytes())?;
            }
            print!("{table}");
        }
        Command::RunAll { config, out } => {
            let cfg = load_config(ExperimentConfig::default(), config.as_deref())?;
            let outcome = experiment::run_experiment(&cfg, &out)?;
            let metrics = camlab::io::read_bytes(&outcome.metrics_csv)?;
            print!("{}", experiment::render_report(&[("metrics".into(), metrics)])?);
            let d = &outcome.directional;
            println!(
                "directional check: sigmoid GT-known {:.2} vs collapsed softmax {:.2}: {}",
                d.sigmoid_gt_loc,
                d.softmax_gt_loc,
                if d.holds() { "holds" } else { "fails" }
            );
        }
    }
    Ok(())
}

fn evaluate(command: &str, eval: &EvalArgs, out: &Path, columns: &[&str]) -> Result<()> {
    let cfg = cam_config(eval)?;
    let (checkpoint, dataset) = open_pair(&eval.ckpt, &eval.data)?;
    let mut manifest = RunManifest::new(command);
    manifest.config_path = eval.config.clone();
    manifest.dataset_fingerprint = dataset.fingerprint();
    manifest.add_checkpoint(&eval.ckpt)?;
    let metrics = manifest.time("evaluate", || {
        experiment::evaluate(&checkpoint.model, dataset.split(eval.split), &cfg)
    })?;
    let row = EvalRow {
        method: cfg.method,
        branch: cfg.branch,
        nwc: cfg.effective_nwc(),
        pos_weight_mode: pos_weight_mode(&checkpoint, cfg.branch)?,
        metrics,
    };
    let bytes = experiment::rows_to_csv_with(std::slice::from_ref(&row), columns)?;
    write_atomic(out, &bytes)?;
    manifest.outputs.push(out.to_path_buf());
    manifest.write(&sibling_manifest(out))?;
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}

fn print_losses(report: &train::TrainReport) {
    for (epoch, loss) in report.epoch_losses.iter().enumerate() {
        println!("epoch {:>3}  loss {loss:.6}", epoch + 1);
    }
    if let Some(acc) = report.train_accuracy {
        println!("train accuracy {:.2}%", 100.0 * acc);
    }
}
