//! End-to-end pipeline stages (gen-data → embed → train → predict → eval)
//! and the ablation runner that drives them over an axis × seed grid.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::load_checkpoint;
use crate::dataio::{
    atomic_write, generate_synthetic_dataset, image_file_name, load_manifest, read_volume, split_dataset, write_dataset, write_prob_volume,
    write_volume, AnyVolume,
};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, evaluate, EvalReport, MetricConfig, VolumeMetrics};
use crate::textknow::{
    embed_descriptions, parse_descriptions, pool_embeddings, read_embeddings, write_embeddings, DescriptionSet,
    EmbeddingProvider, FileProvider, HashProvider,
};
use crate::trainer::{predict_volume, train, TextSource, TrainConfig};
use crate::types::{Sample, Shape3};

/// Built-in task descriptions used when no description file is given.
pub const DEFAULT_DESCRIPTIONS: &str = include_str!("../assets/descriptions.txt");

/// Seed offset separating the validation volumes from the training pool.
pub const VALIDATION_SEED_OFFSET: u64 = 1_000_003;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub volumes: usize,
    pub shape: Shape3,
    pub difficulty: f64,
    pub validation_volumes: usize,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            volumes: 24,
            shape: [32, 32, 32],
            difficulty: 0.7,
            validation_volumes: 8,
        }
    }
}

/// Generates the training pool and a disjoint validation set, splits the
/// pool and writes everything under `dir`. Returns the manifest path.
pub fn gen_data(dir: &Path, params: &DatasetParams, labeled_ratio: f64, seed: u64) -> Result<PathBuf> {
    let pool = generate_synthetic_dataset(seed, params.volumes, params.shape, params.difficulty)?;
    let split = split_dataset(&pool, labeled_ratio, seed)?;
    let mut validation = if params.validation_volumes > 0 {
        generate_synthetic_dataset(
            seed.wrapping_add(VALIDATION_SEED_OFFSET),
            params.validation_volumes.max(2),
            params.shape,
            params.difficulty,
        )?
    } else {
        Vec::new()
    };
    validation.truncate(params.validation_volumes);
    for (i, s) in validation.iter_mut().enumerate() {
        s.id = format!("v{i:03}");
    }
    write_dataset(dir, &split, &validation)
}

/// `hash:<dim>` or `file:<path to EMB1>`.
pub fn provider_from_spec(spec: &str) -> Result<Box<dyn EmbeddingProvider>> {
    match spec.split_once(':') {
        Some(("hash", dim)) => Ok(Box::new(HashProvider::new(
            dim.parse().map_err(|_| Error::invalid(format!("bad embedding width in {spec:?}")))?,
        )?)),
        Some(("file", path)) => Ok(Box::new(FileProvider::new(path))),
        _ => Err(Error::invalid(format!("unknown provider {spec:?}; expected hash:<dim> or file:<path>"))),
    }
}

pub fn load_description_set(path: Option<&Path>) -> Result<DescriptionSet> {
    match path {
        Some(p) => crate::textknow::load_descriptions(p),
        None => parse_descriptions(DEFAULT_DESCRIPTIONS),
    }
}

/// Embeds every description and writes the matrix as EMB1.
pub fn embed(descriptions: &DescriptionSet, provider: &dyn EmbeddingProvider, out: &Path) -> Result<()> {
    write_embeddings(&embed_descriptions(provider, descriptions)?, out)
}

/// Mean-pooled embedding file as a training text source.
pub fn text_source(embeddings: &Path) -> Result<TextSource> {
    let m = read_embeddings(embeddings)?;
    let name = embeddings.file_name().and_then(|n| n.to_str()).unwrap_or("embeddings");
    Ok(TextSource {
        provider_id: format!("emb:{name}"),
        pooled: pool_embeddings(&m),
    })
}

/// Trains from a manifest; returns the final checkpoint path.
pub fn train_stage(manifest: &Path, cfg: &TrainConfig, embeddings: Option<&Path>, out: &Path) -> Result<PathBuf> {
    let data = load_manifest(manifest)?;
    let text = embeddings.map(text_source).transpose()?;
    let outcome = train(cfg, &data.split, &data.validation, text.as_ref(), Some(out), None)?;
    outcome
        .checkpoints
        .last()
        .cloned()
        .ok_or_else(|| Error::invalid("training produced no checkpoint"))
}

/// Predicts every validation volume of `manifest` with the checkpoint and
/// writes `<id>_pred.vol1` (labels) and `<id>_prob.vol1` (class
/// probabilities stacked along depth) into `out`.
pub fn predict_stage(checkpoint: &Path, manifest: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let data = load_manifest(manifest)?;
    if data.validation.is_empty() {
        return Err(Error::invalid(format!("{} lists no validation volumes", manifest.display())));
    }
    predict_samples(checkpoint, &data.validation, out)
}

/// Every `<id>_img.vol1` in `dir`, sorted by id, without labels.
pub fn load_image_dir(dir: &Path) -> Result<Vec<Sample>> {
    let mut ids: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix("_img.vol1")).map(String::from))
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::invalid(format!("no *_img.vol1 files in {}", dir.display())));
    }
    ids.into_iter()
        .map(|id| {
            let img = read_volume(dir.join(image_file_name(&id)))?.into_image()?;
            Sample::new(id, img, None)
        })
        .collect()
}

/// Same as [`predict_stage`] for an explicit list of volumes.
pub fn predict_samples(checkpoint: &Path, samples: &[Sample], out: &Path) -> Result<Vec<PathBuf>> {
    let (state, cfg) = load_checkpoint(checkpoint)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for s in samples {
        let probs = predict_volume(&state, &cfg, &s.image)?;
        let p = out.join(format!("{}_pred.vol1", s.id));
        write_volume(&AnyVolume::Label(probs.argmax()), &p)?;
        write_prob_volume(&probs, out.join(format!("{}_prob.vol1", s.id)))?;
        written.push(p);
    }
    Ok(written)
}

/// Scores every `<id>_pred.vol1` in `pred_dir` against `<id>_lbl.vol1` in
/// `gt_dir` (sorted by id) and writes the report CSV.
pub fn eval_stage(pred_dir: &Path, gt_dir: &Path, out: &Path, cfg: &MetricConfig) -> Result<EvalReport> {
    let mut ids: Vec<String> = fs::read_dir(pred_dir)
        .map_err(|e| Error::io(pred_dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix("_pred.vol1")).map(String::from))
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::invalid(format!("no *_pred.vol1 files in {}", pred_dir.display())));
    }
    let mut vols = Vec::with_capacity(ids.len());
    for id in &ids {
        let pred = read_volume(pred_dir.join(format!("{id}_pred.vol1")))?.into_label()?;
        let gt = read_volume(gt_dir.join(format!("{id}_lbl.vol1")))?.into_label()?;
        vols.push(evaluate(id, &pred, &gt, cfg)?);
    }
    let report = aggregate(vols)?;
    atomic_write(out, report.to_csv().as_bytes())?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// experiment grid

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisKind {
    None,
    BetaText,
    UnsupMode,
    SupMode,
    UslThresholds,
    /// Named bundles of config overrides taken from `ExperimentSpec::variants`.
    Variants,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub kind: AxisKind,
    /// Axis values as strings: `0.1`, `usl`, `ce+dice`, `0.9/0.1`, or
    /// variant names.
    #[serde(default)]
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextSpec {
    /// `hash:<dim>` or `file:<path>`.
    pub provider: String,
    /// Description file; the built-in set when absent.
    #[serde(default)]
    pub descriptions: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default)]
    pub dataset: DatasetParams,
    pub labeled_ratio: f64,
    /// Config keys applied to the defaults before the axis value.
    #[serde(default)]
    pub overrides: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    /// When set, every seed trains on the one dataset generated from this
    /// seed, so seeds vary only initialisation, batches and noise. Otherwise
    /// each seed generates its own dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    pub axis: AxisSpec,
    #[serde(default)]
    pub variants: BTreeMap<String, BTreeMap<String, String>>,
    /// No text conditioning when absent.
    #[serde(default)]
    pub text: Option<TextSpec>,
    #[serde(default)]
    pub metrics: MetricConfig,
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: ExperimentSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// `(label, overrides)` for every axis value, in spec order.
    pub fn cells(&self) -> Result<Vec<(String, Vec<(String, String)>)>> {
        let kv = |k: &str, v: &str| vec![(k.to_string(), v.to_string())];
        if self.axis.kind == AxisKind::None {
            if !self.axis.values.is_empty() {
                return Err(Error::invalid("axis none takes no values"));
            }
            return Ok(vec![("base".into(), Vec::new())]);
        }
        if self.axis.values.is_empty() {
            return Err(Error::invalid("axis has no values"));
        }
        self.axis
            .values
            .iter()
            .map(|v| {
                let o = match self.axis.kind {
                    AxisKind::BetaText => kv("beta_text", v),
                    AxisKind::UnsupMode => kv("loss.unsup_mode", v),
                    AxisKind::SupMode => kv("loss.sup_mode", v),
                    AxisKind::UslThresholds => {
                        let (t1, t2) = v
                            .split_once('/')
                            .ok_or_else(|| Error::invalid(format!("thresholds {v:?} must look like t1/t2")))?;
                        [kv("usl.t1", t1), kv("usl.t2", t2)].concat()
                    }
                    AxisKind::Variants => self
                        .variants
                        .get(v)
                        .ok_or_else(|| Error::invalid(format!("variant {v:?} is not defined")))?
                        .iter()
                        .map(|(k, x)| (k.clone(), x.clone()))
                        .collect(),
                    AxisKind::None => unreachable!(),
                };
                Ok((v.clone(), o))
            })
            .collect()
    }

    /// Config for one cell.
    pub fn config_for(&self, overrides: &[(String, String)], seed: u64) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (k, v) in self.overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())) {
            cfg.set(k, v)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::invalid(format!("experiment name {:?} is not a plain file name", self.name)));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(Error::invalid("seeds must be distinct"));
        }
        let cells = self.cells()?;
        let mut labels: Vec<&str> = cells.iter().map(|c| c.0.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != cells.len() {
            return Err(Error::invalid("axis values must be distinct"));
        }
        for (_, o) in &cells {
            self.config_for(o, self.seeds[0])?;
        }
        if self.dataset.validation_volumes == 0 {
            return Err(Error::invalid("experiments evaluate on validation volumes; need at least one"));
        }
        if let Some(t) = &self.text {
            provider_from_spec(&t.provider)?;
        }
        Ok(())
    }
}

/// Pipeline stage names, used in failure messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    GenData,
    Embed,
    Train,
    Predict,
    Eval,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::GenData => "gen-data",
            Stage::Embed => "embed",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Eval => "eval",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub label: String,
    pub seed: u64,
    /// `Ok` or the failing stage and its message.
    pub outcome: std::result::Result<VolumeMetrics, (Stage, String)>,
    /// Relative to the experiment directory.
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub eval_report: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub dir: PathBuf,
    pub cells: Vec<CellResult>,
    pub cells_csv: PathBuf,
    pub summary_csv: PathBuf,
    pub plots: Vec<PathBuf>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn rel(base: &Path, p: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

fn csv_safe(s: &str) -> String {
    s.replace([',', '\n', '\r'], ";")
}

pub const METRICS: [&str; 4] = ["dice", "jaccard", "hd95", "asd"];

fn metric(m: &VolumeMetrics, name: &str) -> f64 {
    match name {
        "dice" => m.dice,
        "jaccard" => m.jaccard,
        "hd95" => m.hd95,
        _ => m.asd,
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub const CELLS_HEADER: &str = "label,seed,status,dice,jaccard,hd95,asd,checkpoint,checkpoint_sha256,eval_report";

pub fn cells_csv(cells: &[CellResult]) -> String {
    let mut s = String::from(CELLS_HEADER);
    s.push('\n');
    for c in cells {
        let (status, vals) = match &c.outcome {
            Ok(m) => ("ok".to_string(), METRICS.map(|k| format!("{:.6}", metric(m, k))).join(",")),
            Err((stage, msg)) => (format!("failed:{stage}:{}", csv_safe(msg)), ",,,".to_string()),
        };
        s.push_str(&format!(
            "{},{},{status},{vals},{},{},{}\n",
            csv_safe(&c.label),
            c.seed,
            c.checkpoint,
            c.checkpoint_sha256,
            c.eval_report
        ));
    }
    s
}

/// One row per axis value: seed count and median/mean of each metric over
/// the successful seeds.
pub fn summary_csv(labels: &[String], cells: &[CellResult]) -> String {
    let mut s = String::from("label,n_ok,n_failed");
    for m in METRICS {
        s.push_str(&format!(",{m}_median,{m}_mean"));
    }
    s.push('\n');
    for l in labels {
        let mine: Vec<&CellResult> = cells.iter().filter(|c| &c.label == l).collect();
        let ok: Vec<&VolumeMetrics> = mine.iter().filter_map(|c| c.outcome.as_ref().ok()).collect();
        s.push_str(&format!("{},{},{}", csv_safe(l), ok.len(), mine.len() - ok.len()));
        for m in METRICS {
            let v: Vec<f64> = ok.iter().map(|x| metric(x, m)).collect();
            if v.is_empty() {
                s.push_str(",,");
            } else {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                s.push_str(&format!(",{:.6},{:.6}", median(&v), mean));
            }
        }
        s.push('\n');
    }
    s
}

fn run_cell(
    root: &Path,
    manifest: &Path,
    embeddings: Option<&Path>,
    cfg: &TrainConfig,
    metrics: &MetricConfig,
    cell_dir: &Path,
) -> std::result::Result<(VolumeMetrics, PathBuf, PathBuf), (Stage, String)> {
    let ckpt = train_stage(manifest, cfg, embeddings, &cell_dir.join("train")).map_err(|e| (Stage::Train, e.to_string()))?;
    let pred_dir = cell_dir.join("pred");
    predict_stage(&ckpt, manifest, &pred_dir).map_err(|e| (Stage::Predict, e.to_string()))?;
    let gt_dir = manifest.parent().unwrap_or(root);
    let report_path = cell_dir.join("eval.csv");
    let report = eval_stage(&pred_dir, gt_dir, &report_path, metrics).map_err(|e| (Stage::Eval, e.to_string()))?;
    Ok((report.mean, ckpt, report_path))
}

/// Runs every (axis value × seed) cell under `out/<name>/`, then writes
/// `cells.csv`, `summary.csv` and one SVG bar chart per metric. A failing
/// cell is recorded with its stage and the run moves on.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path) -> Result<ExperimentResult> {
    spec.validate()?;
    let dir = out.join(&spec.name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    atomic_write(&dir.join("spec.json"), serde_json::to_string_pretty(spec)?.as_bytes())?;
    let cells = spec.cells()?;
    let labels: Vec<String> = cells.iter().map(|c| c.0.clone()).collect();
    let mut results = Vec::new();
    let prepare = |data_dir: &Path, data_seed: u64| {
        gen_data(data_dir, &spec.dataset, spec.labeled_ratio, data_seed)
            .map_err(|e| (Stage::GenData, e.to_string()))
            .and_then(|manifest| {
                let emb = match &spec.text {
                    Some(t) => {
                        let path = data_dir.join("embeddings.emb1");
                        load_description_set(t.descriptions.as_deref())
                            .and_then(|ds| embed(&ds, provider_from_spec(&t.provider)?.as_ref(), &path))
                            .map_err(|e| (Stage::Embed, e.to_string()))?;
                        Some(path)
                    }
                    None => None,
                };
                Ok((manifest, emb))
            })
    };
    let shared = spec.data_seed.map(|ds| prepare(&dir.join(format!("data_d{ds}")), ds));
    for &seed in &spec.seeds {
        let prep = match &shared {
            Some(p) => p.clone(),
            None => prepare(&dir.join(format!("data_s{seed}")), seed),
        };
        for (label, overrides) in &cells {
            let cell_dir = dir.join(format!("{label}_s{seed}").replace(['/', '\\', '+'], "_"));
            let outcome = prep.clone().and_then(|(manifest, emb)| {
                let cfg = spec
                    .config_for(overrides, seed)
                    .map_err(|e| (Stage::Train, e.to_string()))?;
                run_cell(&dir, &manifest, emb.as_deref(), &cfg, &spec.metrics, &cell_dir)
            });
            let (outcome, ckpt, ckpt_hash, report) = match outcome {
                Ok((m, ckpt, report)) => {
                    let h = sha256_file(&ckpt).unwrap_or_default();
                    (Ok(m), rel(&dir, &ckpt), h, rel(&dir, &report))
                }
                Err(e) => (Err(e), String::new(), String::new(), String::new()),
            };
            results.push(CellResult {
                label: label.clone(),
                seed,
                outcome,
                checkpoint: ckpt,
                checkpoint_sha256: ckpt_hash,
                eval_report: report,
            });
        }
    }
    let cells_path = dir.join("cells.csv");
    atomic_write(&cells_path, cells_csv(&results).as_bytes())?;
    let summary_path = dir.join("summary.csv");
    atomic_write(&summary_path, summary_csv(&labels, &results).as_bytes())?;
    let mut plots = Vec::new();
    for m in METRICS {
        let series: Vec<(String, Vec<f64>)> = labels
            .iter()
            .map(|l| {
                let v = results
                    .iter()
                    .filter(|c| &c.label == l)
                    .filter_map(|c| c.outcome.as_ref().ok().map(|x| metric(x, m)))
                    .collect();
                (l.clone(), v)
            })
            .collect();
        let p = dir.join(format!("plot_{m}.svg"));
        atomic_write(&p, crate::report::bar_chart_svg(&format!("{} — {m}", spec.name), m, &series).as_bytes())?;
        plots.push(p);
    }
    Ok(ExperimentResult {
        dir,
        cells: results,
        cells_csv: cells_path,
        summary_csv: summary_path,
        plots,
    })
}
