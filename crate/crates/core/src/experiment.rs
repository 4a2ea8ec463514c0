//! Evaluation matrix and the end-to-end pipeline.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::cam::{self, CamConfig, CamMethod};
use crate::checkpoint::{Checkpoint, KEY_DATASET, KEY_SEED};
use crate::config::{self, KvConfig};
use crate::data::{Dataset, DatasetSpec, SynthSample};
use crate::distortion::{self, DistortionKind, DistortionLab, DistortionReport, DistortionSpec};
use crate::error::{Error, Result};
use crate::io::{file_sha256, write_atomic};
use crate::metrics::{self, FidelityRecord, WsolRecord};
use crate::model::{Arch, Branch, DualBranchModel, Part};
use crate::ops;
use crate::tensor::Tensor;
use crate::train::{self, PosWeightMode, TrainConfig, TrainReport};

/// Localization and fidelity metrics of one configuration, all in percent.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub top1_cls: f64,
    pub top1_loc: f64,
    pub gt_loc: f64,
    pub mbav2: f64,
    pub pxap: f64,
    pub avg_drop: f64,
    /// Images left out of Average Drop because their full score was ~0.
    pub avg_drop_excluded: usize,
    pub inc_conf: f64,
}

/// Localization uses the ground-truth class heatmap; fidelity uses the
/// heatmap of the softmax prediction `k*` and scores it on
/// `config.fidelity_score`.
pub fn evaluate(model: &DualBranchModel, samples: &[SynthSample], config: &CamConfig) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::Precondition("cannot evaluate an empty split".into()));
    }
    let score_head = model.head(config.fidelity_score)?;
    let score = |image: &Tensor<f32>, class: usize| -> Result<f64> {
        let f = model.features(&image.clone().reshape(prepend_one(image.shape()))?)?;
        let logits = score_head.logits(&f)?;
        let s = match config.fidelity_score {
            Branch::Softmax => ops::softmax_rows(&logits)?,
            Branch::Sigmoid => ops::sigmoid(&logits),
        };
        Ok(s.data()[class] as f64)
    };

    let mut wsol = Vec::with_capacity(samples.len());
    let mut fidelity = Vec::with_capacity(samples.len());
    let mut maps = Vec::with_capacity(samples.len());
    for s in samples {
        let inference = model.infer(&s.image)?;
        let k = inference.predicted;
        let label_map = cam::explain_class(model, &s.image, s.label, config)?.map;
        let predicted_map = if k == s.label {
            label_map.clone()
        } else {
            cam::explain_class(model, &s.image, k, config)?.map
        };
        wsol.push(WsolRecord::new(&label_map, &s.gt_box, k == s.label)?);
        let full_score = match config.fidelity_score {
            Branch::Softmax => inference.probs[k] as f64,
            Branch::Sigmoid => score(&s.image, k)?,
        };
        let explanation = metrics::explanation_image(&predicted_map, &s.image)?;
        fidelity.push(FidelityRecord {
            full_score,
            explanation_score: score(&explanation, k)?,
        });
        maps.push(label_map);
    }
    let masks: Vec<Vec<bool>> = samples.iter().map(|s| s.mask_bits()).collect();
    let drop = metrics::average_drop(&fidelity);
    Ok(EvalMetrics {
        top1_cls: metrics::top1_cls_from_records(&wsol),
        top1_loc: metrics::top1_loc_from_records(&wsol),
        gt_loc: metrics::gt_known_from_records(&wsol),
        mbav2: metrics::max_box_acc_v2_from_records(&wsol),
        pxap: metrics::pxap(&masks, &maps)?,
        avg_drop: drop.percent,
        avg_drop_excluded: drop.excluded,
        inc_conf: metrics::increase_in_confidence(&fidelity),
    })
}

fn prepend_one(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1];
    s.extend_from_slice(shape);
    s
}

/// One row of the metrics table.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub method: CamMethod,
    pub branch: Branch,
    pub nwc: bool,
    /// `None` for the softmax branch, which has no BCE weighting.
    pub pos_weight_mode: Option<PosWeightMode>,
    pub metrics: EvalMetrics,
}

pub const METRICS_HEADER: [&str; 11] = [
    "method",
    "branch",
    "nwc",
    "pos_weight_mode",
    "top1_cls",
    "top1_loc",
    "gt_loc",
    "mbav2",
    "pxap",
    "avg_drop",
    "inc_conf",
];

fn csv_error(e: impl std::fmt::Display) -> Error {
    Error::Contract(format!("csv encoding failed: {e}"))
}

/// Value columns written by `eval-wsol`.
pub const WSOL_COLUMNS: [&str; 5] = ["top1_cls", "top1_loc", "gt_loc", "mbav2", "pxap"];
/// Value columns written by `eval-fidelity`.
pub const FIDELITY_COLUMNS: [&str; 2] = ["avg_drop", "inc_conf"];

fn cell(row: &EvalRow, column: &str) -> Option<String> {
    let m = &row.metrics;
    let v = match column {
        "method" => return Some(row.method.name().to_string()),
        "branch" => return Some(row.branch.name().to_string()),
        "nwc" => return Some(if row.nwc { "on" } else { "off" }.to_string()),
        "pos_weight_mode" => return Some(row.pos_weight_mode.map_or("-", |p| p.name()).to_string()),
        "top1_cls" => m.top1_cls,
        "top1_loc" => m.top1_loc,
        "gt_loc" => m.gt_loc,
        "mbav2" => m.mbav2,
        "pxap" => m.pxap,
        "avg_drop" => m.avg_drop,
        "inc_conf" => m.inc_conf,
        _ => return None,
    };
    Some(format!("{v:.4}"))
}

/// The key columns followed by `values`, numbers with four decimals.
pub fn rows_to_csv_with(rows: &[EvalRow], values: &[&str]) -> Result<Vec<u8>> {
    let columns: Vec<&str> = KEY_COLUMNS.iter().chain(values).copied().collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&columns).map_err(csv_error)?;
    for r in rows {
        let record = columns
            .iter()
            .map(|c| cell(r, c).ok_or_else(|| Error::Contract(format!("unknown metrics column `{c}`"))))
            .collect::<Result<Vec<_>>>()?;
        w.write_record(record).map_err(csv_error)?;
    }
    w.into_inner().map_err(csv_error)
}

pub fn rows_to_csv(rows: &[EvalRow]) -> Result<Vec<u8>> {
    rows_to_csv_with(rows, &METRICS_HEADER[KEY_COLUMNS.len()..])
}

/// Columns identifying one configuration in metric tables.
pub const KEY_COLUMNS: [&str; 4] = ["method", "branch", "nwc", "pos_weight_mode"];

struct CsvTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn parse_table(name: &str, bytes: &[u8]) -> Result<CsvTable> {
    let mut r = csv::ReaderBuilder::new().from_reader(bytes);
    let header = r
        .headers()
        .map_err(|e| Error::format(name, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = r
        .records()
        .map(|rec| {
            rec.map(|rec| rec.iter().map(str::to_string).collect())
                .map_err(|e| Error::format(name, e.to_string()))
        })
        .collect::<Result<_>>()?;
    Ok(CsvTable { header, rows })
}

/// Combine CSV tables. When every table carries [`KEY_COLUMNS`] the rows are
/// outer-joined on them, value columns appear in first-seen order and missing
/// cells stay empty; a key/column pair with two different values is an error.
/// Otherwise all headers must match and the rows are concatenated.
pub fn join_tables(tables: &[(String, Vec<u8>)]) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let parsed: Vec<(&str, CsvTable)> = tables
        .iter()
        .map(|(name, bytes)| Ok((name.as_str(), parse_table(name, bytes)?)))
        .collect::<Result<_>>()?;
    let Some((_, first)) = parsed.first() else {
        return Err(Error::Precondition("no tables to report".into()));
    };
    let keyed = parsed
        .iter()
        .all(|(_, t)| KEY_COLUMNS.iter().all(|k| t.header.iter().any(|h| h == k)));
    if !keyed {
        let header = first.header.clone();
        let mut rows = Vec::new();
        for (name, t) in &parsed {
            if t.header != header {
                return Err(Error::format(
                    *name,
                    "header differs from the first table and has no key columns",
                ));
            }
            rows.extend(t.rows.iter().cloned());
        }
        return Ok((header, rows));
    }

    let mut header: Vec<String> = KEY_COLUMNS.iter().map(|k| k.to_string()).collect();
    let mut joined: Vec<(Vec<String>, Vec<Option<String>>)> = Vec::new();
    for (name, t) in &parsed {
        let key_idx: Vec<usize> = KEY_COLUMNS
            .iter()
            .map(|k| t.header.iter().position(|h| h == k).expect("checked"))
            .collect();
        let mut col_idx = Vec::new();
        for (i, h) in t.header.iter().enumerate() {
            if key_idx.contains(&i) {
                continue;
            }
            let j = match header.iter().position(|x| x == h) {
                Some(j) => j,
                None => {
                    header.push(h.clone());
                    header.len() - 1
                }
            };
            col_idx.push((i, j));
        }
        for row in &t.rows {
            let key: Vec<String> = key_idx.iter().map(|&i| row[i].clone()).collect();
            let pos = match joined.iter().position(|(k, _)| *k == key) {
                Some(p) => p,
                None => {
                    joined.push((key.clone(), Vec::new()));
                    joined.len() - 1
                }
            };
            let cells = &mut joined[pos].1;
            for &(i, j) in &col_idx {
                let slot = j - KEY_COLUMNS.len();
                if cells.len() <= slot {
                    cells.resize(slot + 1, None);
                }
                match &cells[slot] {
                    Some(v) if *v != row[i] => {
                        return Err(Error::format(
                            *name,
                            format!(
                                "conflicting `{}` for {}: {v} vs {}",
                                header[j],
                                key.join("/"),
                                row[i]
                            ),
                        ));
                    }
                    _ => cells[slot] = Some(row[i].clone()),
                }
            }
        }
    }
    let width = header.len() - KEY_COLUMNS.len();
    let rows = joined
        .into_iter()
        .map(|(mut key, mut cells)| {
            cells.resize(width, None);
            key.extend(cells.into_iter().map(Option::unwrap_or_default));
            key
        })
        .collect();
    Ok((header, rows))
}

/// [`join_tables`] rendered as a right-aligned text table.
pub fn render_report(tables: &[(String, Vec<u8>)]) -> Result<String> {
    let (header, rows) = join_tables(tables)?;
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(&mut out, &header);
    line(
        &mut out,
        &widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>(),
    );
    for row in &rows {
        line(&mut out, row);
    }
    Ok(out)
}

/// Everything the end-to-end run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DatasetSpec,
    pub model_seed: u64,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub methods: Vec<CamMethod>,
    pub pos_weight_modes: Vec<PosWeightMode>,
    /// Sigmoid model used by the distortion experiment.
    pub distortion_mode: PosWeightMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DatasetSpec::default(),
            model_seed: 17,
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::finetune(PosWeightMode::Balanced),
            methods: vec![CamMethod::Cam, CamMethod::GradCam],
            pos_weight_modes: PosWeightMode::ALL.to_vec(),
            distortion_mode: PosWeightMode::Balanced,
        }
    }
}

fn prefixed(prefix: &str, text: &str) -> String {
    text.lines().map(|l| format!("{prefix}.{l}\n")).collect()
}

impl KvConfig for ExperimentConfig {
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        if let Some(k) = key.strip_prefix("data.") {
            return self.data.set(k, value);
        }
        if let Some(k) = key.strip_prefix("pretrain.") {
            return self.pretrain.set(k, value);
        }
        if let Some(k) = key.strip_prefix("finetune.") {
            return self.finetune.set(k, value);
        }
        match key {
            "model_seed" => self.model_seed = config::parse_u64(value)?,
            "methods" => {
                self.methods = value
                    .split(',')
                    .map(|m| CamMethod::parse(m.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "pos_weight_modes" => {
                self.pos_weight_modes = value
                    .split(',')
                    .map(|m| PosWeightMode::parse(m.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "distortion_mode" => self.distortion_mode = PosWeightMode::parse(value)?,
            _ => return Err(config::unknown_key(key)),
        }
        Ok(())
    }

    fn to_text(&self) -> String {
        let join = |v: Vec<&str>| v.join(",");
        format!(
            "model_seed = {}\nmethods = {}\npos_weight_modes = {}\ndistortion_mode = {}\n{}{}{}",
            self.model_seed,
            join(self.methods.iter().map(|m| m.name()).collect()),
            join(self.pos_weight_modes.iter().map(|m| m.name()).collect()),
            self.distortion_mode,
            prefixed("data", &self.data.to_text()),
            prefixed("pretrain", &self.pretrain.to_text()),
            prefixed("finetune", &self.finetune.to_text()),
        )
    }

    fn validate(&self) -> std::result::Result<(), String> {
        self.data.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.pretrain.phase != train::Phase::SoftmaxPretrain
            || self.finetune.phase != train::Phase::SigmoidFinetune
        {
            return Err("pretrain/finetune sections must keep their own phase".into());
        }
        if self.methods.is_empty() || self.pos_weight_modes.is_empty() {
            return Err("methods and pos_weight_modes must be non-empty".into());
        }
        if !self.pos_weight_modes.contains(&self.distortion_mode) {
            return Err("distortion_mode must be one of pos_weight_modes".into());
        }
        Ok(())
    }
}

/// Directional comparison on the sign-collapsed softmax head.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionalCheck {
    pub delta: f64,
    pub softmax_gt_loc: f64,
    pub sigmoid_gt_loc: f64,
}

impl DirectionalCheck {
    pub fn holds(&self) -> bool {
        self.sigmoid_gt_loc > self.softmax_gt_loc
    }
}

/// Record of one invocation: inputs, outputs and wall-clock timings.
#[derive(Clone, Debug, Default)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub dataset_fingerprint: String,
    pub checkpoints: Vec<(PathBuf, String)>,
    pub outputs: Vec<PathBuf>,
    pub timings: Vec<(String, f64)>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            ..Self::default()
        }
    }

    pub fn time<R>(&mut self, label: &str, f: impl FnOnce() -> Result<R>) -> Result<R> {
        let t = Instant::now();
        let r = f()?;
        self.timings.push((label.to_string(), t.elapsed().as_secs_f64()));
        Ok(r)
    }

    pub fn add_checkpoint(&mut self, path: &Path) -> Result<()> {
        let digest = file_sha256(path)?;
        self.checkpoints.push((path.to_path_buf(), digest));
        Ok(())
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        let _ = writeln!(out, "command = {}", self.command);
        if let Some(p) = &self.config_path {
            let _ = writeln!(out, "config = {}", p.display());
        }
        let _ = writeln!(out, "dataset_fingerprint = {}", self.dataset_fingerprint);
        for (p, digest) in &self.checkpoints {
            let _ = writeln!(out, "checkpoint = {} sha256:{digest}", p.display());
        }
        for p in &self.outputs {
            if !p.exists() {
                return Err(Error::Contract(format!(
                    "manifest references missing {}",
                    p.display()
                )));
            }
            let _ = writeln!(out, "output = {}", p.display());
        }
        for (label, secs) in &self.timings {
            let _ = writeln!(out, "time.{label} = {secs:.3}s");
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text()?.as_bytes())
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub pretrain: TrainReport,
    pub finetune: Vec<(PosWeightMode, TrainReport)>,
    /// Softmax test predictions were bit-identical before and after every fine-tune.
    pub predictions_unchanged: bool,
    pub rows: Vec<EvalRow>,
    pub distortion: Vec<DistortionReport>,
    pub directional: DirectionalCheck,
    pub metrics_csv: PathBuf,
    pub distortion_csv: PathBuf,
    pub manifest: RunManifest,
}

pub const SOFTMAX_CHECKPOINT: &str = "softmax.ckpt";
pub const METRICS_CSV: &str = "metrics.csv";
pub const DISTORTION_CSV: &str = "distortion.csv";
pub const DISTORTION_SUMMARY: &str = "distortion.txt";
pub const MANIFEST: &str = "manifest.txt";

pub fn sigmoid_checkpoint_name(mode: PosWeightMode) -> String {
    format!("sigmoid_{}.ckpt", mode.name())
}

/// Attach the seed, dataset fingerprint and a config echo.
pub fn checkpoint_for(
    model: &DualBranchModel,
    seed: u64,
    fingerprint: &str,
    configs: &[(&str, String)],
) -> Checkpoint {
    let mut c = Checkpoint::new(model.clone())
        .with(KEY_SEED, seed)
        .with(KEY_DATASET, fingerprint);
    for (prefix, text) in configs {
        for e in config::parse_entries(text).expect("rendered config parses") {
            c = c.with(&format!("{prefix}.{}", e.key), e.value);
        }
    }
    c
}

/// Pretrain the softmax model from scratch.
pub fn pretrain_model(
    dataset: &Dataset,
    seed: u64,
    config: &TrainConfig,
) -> Result<(DualBranchModel, TrainReport)> {
    let arch = Arch {
        image_size: dataset.spec.image_size,
        ..Arch::default()
    };
    let mut model = DualBranchModel::new(arch, dataset.spec.num_classes, seed)?;
    let report = train::softmax_pretrain(&mut model, &dataset.train, config)?;
    Ok((model, report))
}

/// Replicate, freeze and fine-tune the sigmoid head of a copy of `base`.
pub fn finetune_model(
    base: &DualBranchModel,
    dataset: &Dataset,
    seed: u64,
    config: &TrainConfig,
) -> Result<(DualBranchModel, TrainReport)> {
    let mut model = base.clone();
    model.replicate_head(seed, true)?;
    model.freeze(Part::Backbone)?;
    model.freeze(Part::SoftmaxHead)?;
    let report = train::sigmoid_finetune(&mut model, &dataset.train, config)?;
    Ok((model, report))
}

/// Evaluation matrix: for each method, softmax with nwc off/on, then each
/// sigmoid model with nwc off/on.
pub fn evaluation_matrix(
    softmax: &DualBranchModel,
    sigmoid: &[(PosWeightMode, DualBranchModel)],
    samples: &[SynthSample],
    methods: &[CamMethod],
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for &method in methods {
        for nwc in [false, true] {
            let cfg = CamConfig::new(method, Branch::Softmax, nwc);
            rows.push(EvalRow {
                method,
                branch: Branch::Softmax,
                nwc,
                pos_weight_mode: None,
                metrics: evaluate(softmax, samples, &cfg)?,
            });
        }
        for (mode, model) in sigmoid {
            for nwc in [false, true] {
                let cfg = CamConfig::new(method, Branch::Sigmoid, nwc);
                rows.push(EvalRow {
                    method,
                    branch: Branch::Sigmoid,
                    nwc,
                    pos_weight_mode: Some(*mode),
                    metrics: evaluate(model, samples, &cfg)?,
                });
            }
        }
    }
    Ok(rows)
}

/// Generate data, pretrain, fine-tune every pos-weight mode, evaluate the
/// matrix on the test split, run the distortion grid and write everything to
/// `out_dir`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutcome> {
    config.validate().map_err(Error::Invalid)?;
    let mut manifest = RunManifest::new("run-all");
    let dataset = manifest.time("generate", || Dataset::generate(&config.data))?;
    let fingerprint = dataset.fingerprint();
    manifest.dataset_fingerprint = fingerprint.clone();

    let (softmax, pretrain) = manifest.time("pretrain", || {
        pretrain_model(&dataset, config.model_seed, &config.pretrain)
    })?;
    let softmax_path = out_dir.join(SOFTMAX_CHECKPOINT);
    checkpoint_for(
        &softmax,
        config.model_seed,
        &fingerprint,
        &[("pretrain", config.pretrain.to_text())],
    )
    .save(&softmax_path)?;
    manifest.add_checkpoint(&softmax_path)?;
    let baseline = train::softmax_predictions(&softmax, &dataset.test)?;

    let mut finetune = Vec::new();
    let mut sigmoid_models = Vec::new();
    let mut predictions_unchanged = true;
    for &mode in &config.pos_weight_modes {
        let cfg = TrainConfig {
            pos_weight_mode: mode,
            ..config.finetune.clone()
        };
        let (model, report) = manifest.time(&format!("finetune.{mode}"), || {
            finetune_model(&softmax, &dataset, config.model_seed.wrapping_add(1), &cfg)
        })?;
        let after = train::softmax_predictions(&model, &dataset.test)?;
        predictions_unchanged &= after
            .iter()
            .flatten()
            .map(|v| v.to_bits())
            .eq(baseline.iter().flatten().map(|v| v.to_bits()));
        let path = out_dir.join(sigmoid_checkpoint_name(mode));
        checkpoint_for(
            &model,
            config.model_seed,
            &fingerprint,
            &[
                ("pretrain", config.pretrain.to_text()),
                ("finetune", cfg.to_text()),
            ],
        )
        .save(&path)?;
        manifest.add_checkpoint(&path)?;
        finetune.push((mode, report));
        sigmoid_models.push((mode, model));
    }

    let rows = manifest.time("evaluate", || {
        evaluation_matrix(&softmax, &sigmoid_models, &dataset.test, &config.methods)
    })?;
    let metrics_csv = out_dir.join(METRICS_CSV);
    write_atomic(&metrics_csv, &rows_to_csv(&rows)?)?;
    manifest.outputs.push(metrics_csv.clone());

    let distortion_model = &sigmoid_models
        .iter()
        .find(|(m, _)| *m == config.distortion_mode)
        .expect("validated")
        .1;
    let (reports, directional) = manifest.time("distortion", || {
        let lab = DistortionLab::new(distortion_model, &dataset.test)?;
        let reports = lab
            .default_specs()
            .into_iter()
            .map(|s| lab.run(s))
            .collect::<Result<Vec<_>>>()?;
        let delta = 2.0 * lab.weight_max_abs();
        let collapse = match reports
            .iter()
            .find(|r| r.spec.kind == DistortionKind::SignCollapse && r.spec.delta == delta)
        {
            Some(r) => r.clone(),
            None => lab.run(DistortionSpec {
                kind: DistortionKind::SignCollapse,
                delta,
            })?,
        };
        let directional = DirectionalCheck {
            delta,
            softmax_gt_loc: collapse.softmax_gt_loc_after,
            sigmoid_gt_loc: collapse.sigmoid_gt_loc_after.expect("sigmoid head present"),
        };
        Ok((reports, directional))
    })?;
    let distortion_csv = out_dir.join(DISTORTION_CSV);
    distortion::write_reports_csv(&reports, &distortion_csv)?;
    let summary_path = out_dir.join(DISTORTION_SUMMARY);
    let mut summary = distortion::summary(&reports);
    let _ = writeln!(
        summary,
        "directional check (collapse delta {:.6e}): sigmoid GT-known {:.2} vs softmax {:.2}: {}",
        directional.delta,
        directional.sigmoid_gt_loc,
        directional.softmax_gt_loc,
        if directional.holds() { "holds" } else { "FAILS" }
    );
    write_atomic(&summary_path, summary.as_bytes())?;
    manifest.outputs.extend([distortion_csv.clone(), summary_path]);
    manifest.write(&out_dir.join(MANIFEST))?;

    Ok(ExperimentOutcome {
        pretrain,
        finetune,
        predictions_unchanged,
        rows,
        distortion: reports,
        directional,
        metrics_csv,
        distortion_csv,
        manifest,
    })
}
