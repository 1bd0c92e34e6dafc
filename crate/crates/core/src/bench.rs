//! Configuration-driven orchestration: preprocess, infer, evaluate, rank.
//!
//! Output tree under `output_dir`:
//!
//! ```text
//! config.resolved.json
//! split.json
//! preprocessed/<subject>/{source,target,foreground}.nii.gz
//! preprocessed/<subject>/{source,target}.transform.json
//! predictions/<model>/<subject>.nii.gz
//! metrics/<model>/{subjects.csv,aggregate.json,summary.json[,lesions.csv]}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{split_subjects, DatasetManifest, Split, SplitSpec, SubjectEntry, Task};
use crate::metrics::{assign_size_groups, build_report, evaluate_pair, lesion_analysis, write_lesion_csv, LesionRecord};
use crate::models::{
    oracle_latent_model, reference_provider, run_model, ExternalModel, ModelRegistry, PatchModel, SamplerKind,
    SubjectContext,
};
use crate::patching::{build_patch_grid, gaussian_importance, OVERLAP, PATCH_SIZE, SIGMA_SCALE};
use crate::preprocess::{invert_to_original, run_pipeline, PipelineConfig, TransformRecord};
use crate::stats::{pairwise_table, rank_models, write_pairwise_csv, write_pairwise_detail_csv, write_rank_csv, MetricTable};
use crate::volume::{read_nifti_as, write_nifti, Mask, Modality, Volume};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const SUMMARY_SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV: &str = "BENCH_SEED";

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchingConfig {
    #[serde(default = "default_patch")]
    pub patch_size: [usize; 3],
    #[serde(default = "default_overlap")]
    pub overlap: f64,
    #[serde(default = "default_sigma")]
    pub sigma_scale: f64,
}

fn default_patch() -> [usize; 3] {
    PATCH_SIZE
}

fn default_overlap() -> f64 {
    OVERLAP
}

fn default_sigma() -> f64 {
    SIGMA_SCALE
}

impl Default for PatchingConfig {
    fn default() -> Self {
        PatchingConfig {
            patch_size: PATCH_SIZE,
            overlap: OVERLAP,
            sigma_scale: SIGMA_SCALE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// Sampler step count for the oracle models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    /// Program and arguments of an external patch model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "one")]
    pub schema_version: u32,
    /// Dataset manifest; relative paths resolve against the config file.
    pub manifest: PathBuf,
    /// Must match the manifest's task when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    /// The split seed is always taken from `seed`.
    #[serde(default)]
    pub split: SplitSpec,
    pub pipeline: PipelineConfig,
    pub model: ModelSpec,
    #[serde(default)]
    pub patching: PatchingConfig,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.split.seed = cfg.seed;
        Ok(cfg)
    }

    /// Reads, resolves relative paths and applies the seed override.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.manifest, &mut cfg.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Configuration(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
            cfg.split.seed = cfg.seed;
        }
        Ok(cfg)
    }

    /// Field-level checks that do not touch the file system.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Configuration(format!(
                "schema_version: expected {CONFIG_SCHEMA_VERSION}, got {}",
                self.schema_version
            )));
        }
        self.pipeline.validate()?;
        if self.pipeline.patch_size != self.patching.patch_size {
            return Err(Error::Configuration(format!(
                "pipeline.patch_size {:?} differs from patching.patch_size {:?}",
                self.pipeline.patch_size, self.patching.patch_size
            )));
        }
        if self.patching.patch_size.contains(&0) {
            return Err(Error::Configuration("patching.patch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.patching.overlap) {
            return Err(Error::Configuration(format!("patching.overlap {} not in [0, 1)", self.patching.overlap)));
        }
        if !(self.patching.sigma_scale > 0.0) {
            return Err(Error::Configuration("patching.sigma_scale must be positive".into()));
        }
        if self.model.name.is_empty() || self.model.name.contains(['/', '\\']) {
            return Err(Error::Configuration(format!("model.name {:?} is not a valid name", self.model.name)));
        }
        if let Some(cmd) = &self.model.command {
            if cmd.is_empty() {
                return Err(Error::Configuration("model.command is empty".into()));
            }
        }
        if self.model.steps == Some(0) {
            return Err(Error::Configuration("model.steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.split.test_fraction) {
            return Err(Error::Configuration(format!("split.test_fraction {} not in [0, 1)", self.split.test_fraction)));
        }
        Ok(())
    }

    /// Loads the manifest and checks it against the config.
    pub fn manifest(&self) -> Result<DatasetManifest> {
        if !self.manifest.exists() {
            return Err(Error::Configuration(format!("manifest: {} does not exist", self.manifest.display())));
        }
        let m = DatasetManifest::load(&self.manifest)?;
        if let Some(task) = self.task {
            if task != m.task {
                return Err(Error::Configuration(format!("task: config says {task}, manifest says {}", m.task)));
            }
        }
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Runtime knobs that do not affect outputs.
#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub jobs: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            jobs: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

#[derive(Debug, Default)]
pub struct RunReport {
    pub succeeded: Vec<String>,
    pub failed: Vec<(String, Error)>,
}

impl RunReport {
    pub fn is_success(&self) -> bool {
        self.failed.is_empty()
    }

    fn collect(results: Vec<(String, Result<()>)>) -> Self {
        let mut r = RunReport::default();
        for (id, res) in results {
            match res {
                Ok(()) => r.succeeded.push(id),
                Err(e) => r.failed.push((id, e)),
            }
        }
        r
    }
}

pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn subject_dir(&self, id: &str) -> PathBuf {
        self.root.join("preprocessed").join(id)
    }

    pub fn prediction(&self, model: &str, id: &str) -> PathBuf {
        self.root.join("predictions").join(model).join(format!("{id}.nii.gz"))
    }

    pub fn metrics_dir(&self, model: &str) -> PathBuf {
        self.root.join("metrics").join(model)
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io_at(p, e))
}

fn write_file(p: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(p, bytes).map_err(|e| Error::io_at(p, e))
}

/// Seed for one subject, independent of scheduling.
pub fn subject_seed(seed: u64, subject_id: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in subject_id.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn pool(opts: RunOptions) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::Configuration(format!("cannot start {} workers: {e}", opts.jobs)))
}

fn for_subjects<F>(ids: &[String], opts: RunOptions, f: F) -> Result<RunReport>
where
    F: Fn(&str) -> Result<()> + Sync,
{
    let results = pool(opts)?.install(|| {
        ids.par_iter()
            .map(|id| {
                let r = f(id);
                if let Err(e) = &r {
                    log::error!("subject {id}: {e}");
                }
                (id.clone(), r)
            })
            .collect::<Vec<_>>()
    });
    Ok(RunReport::collect(results))
}

fn read_mask(path: &Path) -> Result<Mask> {
    Ok(Mask::from_volume(&read_nifti_as(path, Modality::Ct)?))
}

fn prepare_output(cfg: &ExperimentConfig, manifest: &DatasetManifest) -> Result<Split> {
    create_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join("config.resolved.json"), cfg.to_json()?)?;
    let split = split_subjects(manifest, &cfg.split)?;
    let layout = Layout::new(&cfg.output_dir);
    write_file(&layout.split(), serde_json::to_string_pretty(&split)? + "\n")?;
    Ok(split)
}

fn preprocess_subject(cfg: &ExperimentConfig, task: Task, s: &SubjectEntry) -> Result<()> {
    let source = read_nifti_as(&s.source_path, task.source)?;
    let target = read_nifti_as(&s.target_path, task.target)?;
    let body = s.body_mask_path.as_deref().map(read_mask).transpose()?;
    let out = run_pipeline(&source, &target, body.as_ref(), &cfg.pipeline)?;
    let dir = Layout::new(&cfg.output_dir).subject_dir(&s.subject_id);
    create_dir(&dir)?;
    write_nifti(&out.source, dir.join("source.nii.gz"))?;
    write_nifti(&out.target, dir.join("target.nii.gz"))?;
    write_nifti(
        &out.foreground.to_volume(*out.source.geometry(), task.source)?,
        dir.join("foreground.nii.gz"),
    )?;
    out.source_record.write(dir.join("source.transform.json"))?;
    out.target_record.write(dir.join("target.transform.json"))?;
    Ok(())
}

/// Preprocesses every subject in the manifest.
pub fn cmd_preprocess(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunReport> {
    cfg.validate()?;
    let manifest = cfg.manifest()?;
    prepare_output(cfg, &manifest)?;
    let ids: Vec<String> = manifest.subjects.iter().map(|s| s.subject_id.clone()).collect();
    for_subjects(&ids, opts, |id| preprocess_subject(cfg, manifest.task, manifest.subject(id)?))
}

/// Builds the configured model.
pub fn build_model(spec: &ModelSpec) -> Result<Arc<dyn PatchModel>> {
    if let Some(cmd) = &spec.command {
        return Ok(Arc::new(ExternalModel::spawn(spec.name.clone(), &cmd[0], &cmd[1..])?));
    }
    let oracle = match spec.name.as_str() {
        "oracle-ddim" => Some(SamplerKind::Ddim),
        "oracle-bridge" => Some(SamplerKind::Bridge),
        "oracle-flow" => Some(SamplerKind::Flow),
        _ => None,
    };
    match (oracle, spec.steps) {
        (Some(kind), Some(steps)) => Ok(Arc::new(oracle_latent_model(kind, reference_provider()).with_steps(steps))),
        _ => ModelRegistry::with_builtins().get(&spec.name),
    }
}

fn read_record(path: &Path) -> Result<TransformRecord> {
    TransformRecord::read(path)
}

fn infer_subject(cfg: &ExperimentConfig, model: &dyn PatchModel, task: Task, id: &str) -> Result<()> {
    let layout = Layout::new(&cfg.output_dir);
    let dir = layout.subject_dir(id);
    let source_path = dir.join("source.nii.gz");
    if !source_path.exists() {
        return Err(Error::Completeness(format!("no preprocessed source for {id}; run preprocess first")));
    }
    let source = read_nifti_as(&source_path, task.source)?;
    let target_record = read_record(&dir.join("target.transform.json"))?;
    let mut ctx = SubjectContext::new(id, task.target);
    ctx.target_clip = target_record.clip_bounds();
    ctx.target_normalization = target_record.normalization();
    ctx.seed = subject_seed(cfg.seed, id);
    if model.descriptor().name.starts_with("oracle-") {
        ctx.reference = Some(Arc::new(read_nifti_as(dir.join("target.nii.gz"), task.target)?));
    }
    let p = &cfg.patching;
    let grid = build_patch_grid(source.dims(), p.patch_size, p.overlap)?;
    let imap = gaussian_importance(p.patch_size, p.sigma_scale)?;
    let pred = run_model(model, &source, &ctx, &grid, &imap)?;
    let restored = invert_to_original(&pred, &target_record)?;
    let out = layout.prediction(&model.descriptor().name, id);
    create_dir(out.parent().expect("prediction path has a parent"))?;
    write_nifti(&restored, out)
}

/// Runs the model on every test subject and writes predictions in original space.
pub fn cmd_infer(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunReport> {
    cfg.validate()?;
    let manifest = cfg.manifest()?;
    let split = split_subjects(&manifest, &cfg.split)?;
    let model = build_model(&cfg.model)?;
    for_subjects(&split.test, opts, |id| infer_subject(cfg, model.as_ref(), manifest.task, id))
}

/// Per-model summary used by `rank`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSummary {
    pub schema_version: u32,
    pub dataset_id: String,
    pub task: Task,
    pub model: String,
    pub subjects: usize,
    pub psnr_db_mean: f64,
    pub ssim_mean: f64,
    pub nmse_mean: f64,
}

impl ResultSummary {
    pub fn task_label(&self) -> String {
        format!("{} {}", self.dataset_id, self.task)
    }
}

struct Evaluated {
    metrics: crate::metrics::SubjectMetrics,
    lesions: Vec<LesionRecord>,
}

fn evaluate_subject(cfg: &ExperimentConfig, task: Task, s: &SubjectEntry) -> Result<Evaluated> {
    let path = Layout::new(&cfg.output_dir).prediction(&cfg.model.name, &s.subject_id);
    if !path.exists() {
        return Err(Error::Completeness(format!("missing prediction {}", path.display())));
    }
    let pred = read_nifti_as(&path, task.target)?;
    let reference = read_nifti_as(&s.target_path, task.target)?;
    let metrics = evaluate_pair(&s.subject_id, &pred, &reference, None)?;
    let lesions = match &s.lesion_mask_path {
        Some(p) => lesion_analysis(&s.subject_id, &pred, &reference, &read_mask(p)?)?,
        None => Vec::new(),
    };
    Ok(Evaluated { metrics, lesions })
}

/// Scores predictions against the original targets.
pub fn cmd_evaluate(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunReport> {
    cfg.validate()?;
    let manifest = cfg.manifest()?;
    let split = split_subjects(&manifest, &cfg.split)?;
    let results: Vec<(String, Result<Evaluated>)> = pool(opts)?.install(|| {
        split
            .test
            .par_iter()
            .map(|id| {
                let r = manifest.subject(id).and_then(|s| evaluate_subject(cfg, manifest.task, s));
                if let Err(e) = &r {
                    log::error!("subject {id}: {e}");
                }
                (id.clone(), r)
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut lesions = Vec::new();
    let mut status = Vec::new();
    let mut any_lesion_masks = false;
    for (id, r) in results {
        any_lesion_masks |= manifest.subject(&id)?.lesion_mask_path.is_some();
        match r {
            Ok(e) => {
                rows.push(e.metrics);
                lesions.extend(e.lesions);
                status.push((id, Ok(())));
            }
            Err(e) => status.push((id, Err(e))),
        }
    }
    let report = RunReport::collect(status);
    if rows.is_empty() {
        return Ok(report);
    }
    let dir = Layout::new(&cfg.output_dir).metrics_dir(&cfg.model.name);
    create_dir(&dir)?;
    let metric_report = build_report(rows)?;
    let mut csv_bytes = Vec::new();
    metric_report.write_csv(&mut csv_bytes)?;
    write_file(&dir.join("subjects.csv"), csv_bytes)?;
    write_file(&dir.join("aggregate.json"), metric_report.aggregate_json()? + "\n")?;
    let summary = ResultSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        dataset_id: manifest.dataset_id.clone(),
        task: manifest.task,
        model: cfg.model.name.clone(),
        subjects: metric_report.rows.len(),
        psnr_db_mean: metric_report.psnr_db.mean,
        ssim_mean: metric_report.ssim.mean,
        nmse_mean: metric_report.nmse.mean,
    };
    write_file(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    if any_lesion_masks {
        lesions.sort_by(|a, b| (&a.subject_id, a.lesion_id).cmp(&(&b.subject_id, b.lesion_id)));
        assign_size_groups(&mut lesions);
        let mut bytes = Vec::new();
        write_lesion_csv(&lesions, &mut bytes)?;
        write_file(&dir.join("lesions.csv"), bytes)?;
    }
    Ok(report)
}

/// Finds `summary.json` files in result directories.
pub fn collect_summaries(dirs: &[PathBuf]) -> Result<Vec<ResultSummary>> {
    let mut out = Vec::new();
    for d in dirs {
        let direct = d.join("summary.json");
        let mut files = Vec::new();
        if direct.exists() {
            files.push(direct);
        } else {
            let metrics = d.join("metrics");
            let entries = fs::read_dir(&metrics).map_err(|e| Error::io_at(&metrics, e))?;
            for e in entries {
                let p = e.map_err(|e| Error::io_at(&metrics, e))?.path().join("summary.json");
                if p.exists() {
                    files.push(p);
                }
            }
            files.sort();
        }
        if files.is_empty() {
            return Err(Error::Completeness(format!("no summary.json under {}", d.display())));
        }
        for f in files {
            let text = fs::read_to_string(&f).map_err(|e| Error::io_at(&f, e))?;
            let s: ResultSummary = serde_json::from_str(&text)?;
            if s.schema_version != SUMMARY_SCHEMA_VERSION {
                return Err(Error::Validation(format!("{}: schema_version {}", f.display(), s.schema_version)));
            }
            out.push(s);
        }
    }
    Ok(out)
}

/// One row of a long-format means table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanRow {
    pub task: String,
    pub model: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

pub fn read_means_csv(reader: impl std::io::Read) -> Result<Vec<MeanRow>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    r.deserialize().map(|row| Ok(row?)).collect()
}

pub fn means_from_summaries(summaries: &[ResultSummary]) -> Vec<MeanRow> {
    summaries
        .iter()
        .map(|s| MeanRow {
            task: s.task_label(),
            model: s.model.clone(),
            psnr_db: s.psnr_db_mean,
            ssim: s.ssim_mean,
        })
        .collect()
}

/// Tables in first-appearance order; every model must cover every task.
pub fn metric_tables(rows: &[MeanRow]) -> Result<(MetricTable, MetricTable)> {
    let mut tasks: Vec<String> = Vec::new();
    let mut models: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(String, String), (f64, f64)> = BTreeMap::new();
    for r in rows {
        if !tasks.contains(&r.task) {
            tasks.push(r.task.clone());
        }
        if !models.contains(&r.model) {
            models.push(r.model.clone());
        }
        if cells.insert((r.task.clone(), r.model.clone()), (r.psnr_db, r.ssim)).is_some() {
            return Err(Error::Conflict(format!("{} on {} appears twice", r.model, r.task)));
        }
    }
    if models.len() < 2 {
        return Err(Error::Alignment(format!("ranking needs at least two models, got {}", models.len())));
    }
    for m in &models {
        let have: BTreeSet<&String> = cells.keys().filter(|(_, mm)| mm == m).map(|(t, _)| t).collect();
        if let Some(t) = tasks.iter().find(|t| !have.contains(t)) {
            return Err(Error::Alignment(format!("model {m} has no result for task {t}")));
        }
    }
    let table = |pick: fn(&(f64, f64)) -> f64| MetricTable {
        tasks: tasks.clone(),
        models: models.clone(),
        values: tasks
            .iter()
            .map(|t| models.iter().map(|m| pick(&cells[&(t.clone(), m.clone())])).collect())
            .collect(),
    };
    Ok((table(|c| c.0), table(|c| c.1)))
}

/// Writes rank and pairwise tables for PSNR and SSIM into `out_dir`.
pub fn cmd_rank(rows: &[MeanRow], out_dir: &Path) -> Result<()> {
    let (psnr, ssim) = metric_tables(rows)?;
    create_dir(out_dir)?;
    for (name, table) in [("psnr", psnr), ("ssim", ssim)] {
        let ranks = rank_models(&table, true)?;
        let pairs = pairwise_table(&ranks)?;
        let mut buf = Vec::new();
        write_rank_csv(&ranks, &mut buf)?;
        write_file(&out_dir.join(format!("{name}_ranks.csv")), &buf)?;
        buf.clear();
        write_pairwise_csv(&ranks.models, &pairs, &mut buf)?;
        write_file(&out_dir.join(format!("{name}_pairwise.csv")), &buf)?;
        buf.clear();
        write_pairwise_detail_csv(&pairs, &mut buf)?;
        write_file(&out_dir.join(format!("{name}_pairwise_detail.csv")), &buf)?;
    }
    Ok(())
}

/// Writes `count` phantom subjects and a manifest into `dir`.
pub fn cmd_phantom(
    dir: &Path,
    task: Task,
    count: usize,
    dims: [usize; 3],
    spacing: [f64; 3],
    seed: u64,
) -> Result<DatasetManifest> {
    use crate::ingest::{generate_phantom_pair, District};
    if count == 0 {
        return Err(Error::Parameter("phantom count must be positive".into()));
    }
    create_dir(dir)?;
    let mut subjects = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("phantom-{i:03}");
        let pair = generate_phantom_pair(seed.wrapping_add(i as u64), dims, spacing, task)?;
        let g = *pair.source.geometry();
        let name = |kind: &str| PathBuf::from(format!("{id}_{kind}.nii.gz"));
        write_nifti(&pair.source, dir.join(name("source")))?;
        write_nifti(&pair.target, dir.join(name("target")))?;
        write_nifti(&pair.body.to_volume(g, task.source)?, dir.join(name("body")))?;
        let lesion_path = (!pair.lesions.is_empty_mask()).then(|| name("lesions"));
        if let Some(p) = &lesion_path {
            write_nifti(&pair.lesions.to_volume(g, task.source)?, dir.join(p))?;
        }
        subjects.push(SubjectEntry {
            subject_id: id.clone(),
            source_path: name("source"),
            target_path: name("target"),
            body_mask_path: Some(name("body")),
            lesion_mask_path: lesion_path,
            weight_kg: None,
            injected_dose_mbq: None,
        });
    }
    let manifest = DatasetManifest {
        dataset_id: "phantom".into(),
        task,
        district: District::Pelvis,
        subjects,
    };
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Reads a prediction back; convenience for callers and tests.
pub fn read_prediction(cfg: &ExperimentConfig, task: Task, id: &str) -> Result<Volume> {
    read_nifti_as(Layout::new(&cfg.output_dir).prediction(&cfg.model.name, id), task.target)
}
