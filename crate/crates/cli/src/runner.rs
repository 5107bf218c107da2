//! Command execution: data loading, training, evaluation and artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use afford_core::checkpoint::{hex, Checkpoint, CheckpointError, MAGIC, VERSION as CHECKPOINT_VERSION};
use afford_core::dataforge::{
    augment, gen_microworld, load_detection_db, read_png, AffordanceDataset, AugmentConfig, ComposeConfig, MicroWorld,
    MicroWorldSpec, Scene, Split, FORMAT as DATASET_FORMAT, FORMAT_VERSION as DATASET_VERSION,
};
use afford_core::detector::{Detector, ModelConfig, Prediction};
use afford_core::distill::{
    distill, predict_student, train_plain, Adam, DistillError, DistillState, EpochRecord, MemoryBank, PromptContext,
    PromptMode, Sample,
};
use afford_core::evalkit::{
    elimination_run, evaluate, format_comparison, means, threshold_sweep, write_overlay, EliminationTranscript,
    EvalReport, ImageEval, IouKind, PredictionScorer, SweepRow,
};
use afford_core::lang_vision::Image;
use afford_core::llm_pipeline::{
    build_dataset, build_microworld, quarantine_tsv, run_pipeline, CompletionClient, MockClient, PipelineConfig,
    PipelineReport, RemoteClient, TaskObjectTable,
};
use afford_core::nn::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::gradcheck::run_gradcheck;

pub const REPORT_FORMAT: &str = "afford-eval-report v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    BuildData,
    TrainTeacher,
    TrainStudent,
    Distill,
    Eval,
    SweepThreshold,
    SweepK,
    Eliminate,
    Gradcheck,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::BuildData,
        Command::TrainTeacher,
        Command::TrainStudent,
        Command::Distill,
        Command::Eval,
        Command::SweepThreshold,
        Command::SweepK,
        Command::Eliminate,
        Command::Gradcheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::BuildData => "build-data",
            Command::TrainTeacher => "train-teacher",
            Command::TrainStudent => "train-student",
            Command::Distill => "distill",
            Command::Eval => "eval",
            Command::SweepThreshold => "sweep-threshold",
            Command::SweepK => "sweep-k",
            Command::Eliminate => "eliminate",
            Command::Gradcheck => "gradcheck",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::EmptyDataset(_) => 2,
            RunError::Stage { .. } => 1,
        }
    }
}

fn stage<E: std::fmt::Display>(stage: &'static str) -> impl FnOnce(E) -> RunError {
    move |e| RunError::Stage {
        stage,
        message: e.to_string(),
    }
}

fn config_err(key: &str, message: impl Into<String>) -> RunError {
    RunError::Config(ConfigError {
        key: key.into(),
        message: message.into(),
    })
}

/// Result of a finished command.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub dir: PathBuf,
    /// Human-readable summary lines, also written to `summary.txt`.
    pub summary: Vec<String>,
}

/// Output directory of one command. Files are registered as they are
/// written so the manifest can list their hashes.
struct RunDir {
    path: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    fn create(cfg: &RunConfig) -> Result<Self, RunError> {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let base = format!("{stamp}-{}", &cfg.hash()[..12]);
        fs::create_dir_all(&cfg.out).map_err(stage("setup"))?;
        let mut path = cfg.out.join(&base);
        let mut n = 1;
        while path.exists() {
            n += 1;
            path = cfg.out.join(format!("{base}-{n}"));
        }
        fs::create_dir_all(&path).map_err(stage("setup"))?;
        Ok(Self { path, files: Vec::new() })
    }

    fn file(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.path.join(name)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), RunError> {
        let p = self.file(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(stage("write"))?;
        }
        fs::write(&p, contents).map_err(stage("write"))
    }

    fn finish(mut self, cmd: Command, cfg: &RunConfig, summary: Vec<String>) -> Result<Outcome, RunError> {
        self.write("config.txt", cfg.echo())?;
        let mut s = summary.join("\n");
        s.push('\n');
        self.write("summary.txt", s)?;
        let mut files = self.files.clone();
        files.sort();
        files.dedup();
        let mut m = String::new();
        let _ = writeln!(m, "command={}", cmd.name());
        let _ = writeln!(m, "config_hash={}", cfg.hash());
        let _ = writeln!(m, "dataset_format={DATASET_FORMAT} v{DATASET_VERSION}");
        let _ = writeln!(m, "checkpoint_format={} v{CHECKPOINT_VERSION}", String::from_utf8_lossy(&MAGIC[..7]));
        let _ = writeln!(m, "report_format={REPORT_FORMAT}");
        for f in &files {
            let bytes = fs::read(self.path.join(f)).map_err(stage("manifest"))?;
            let _ = writeln!(m, "file {f} sha256={}", hex(&Sha256::digest(&bytes)));
        }
        fs::write(self.path.join("manifest.txt"), m).map_err(stage("manifest"))?;
        Ok(Outcome { dir: self.path, summary })
    }
}

/// Dataset with decoded images and, for the micro-world, its scenes.
pub struct Data {
    pub dataset: AffordanceDataset,
    pub images: BTreeMap<u64, Image>,
    pub scenes: Vec<Scene>,
    pub spec: MicroWorldSpec,
}

impl Data {
    pub fn samples(&self, split: Split) -> Result<Vec<Sample>, RunError> {
        self.dataset
            .samples(split, &mut |r| Ok(self.images[&r.id].clone()))
            .map_err(stage("load-data"))
    }

    pub fn context(&self, cfg: &RunConfig) -> PromptContext {
        PromptContext {
            vocab: self.dataset.vocabulary(),
            categories: self.dataset.category_names(),
            n_max: cfg.model.n_max,
        }
    }

    pub fn model_config(&self, cfg: &RunConfig) -> ModelConfig {
        ModelConfig {
            vocab_size: self.dataset.vocabulary().len(),
            ..cfg.model.clone()
        }
    }
}

fn rank_table(cfg: &RunConfig, spec: &MicroWorldSpec) -> Result<Option<(TaskObjectTable, PipelineReport)>, RunError> {
    let client: Box<dyn CompletionClient> = match cfg.table.as_str() {
        "" => return Ok(None),
        "mock" => Box::new(MockClient::new(cfg.seed)),
        s if s.starts_with("remote:") => Box::new(RemoteClient::new(&s["remote:".len()..])),
        path => {
            let text = fs::read_to_string(path).map_err(|e| config_err("data.table", format!("{path}: {e}")))?;
            let table = TaskObjectTable::parse_tsv(&text).map_err(|e| config_err("data.table", e.to_string()))?;
            return Ok(Some((table, PipelineReport::default())));
        }
    };
    let categories: Vec<String> = if cfg.coco.is_empty() {
        spec.shapes.iter().map(|s| s.category.clone()).collect()
    } else {
        let db = load_detection_db(Path::new(&cfg.coco)).map_err(stage("build-data"))?;
        db.categories.iter().map(|c| c.name.clone()).collect()
    };
    Ok(Some(run_pipeline(client.as_ref(), &categories, &PipelineConfig::default())))
}

/// Builds the configured dataset in memory.
pub fn build_data(cfg: &RunConfig) -> Result<(Data, Option<(TaskObjectTable, PipelineReport)>), RunError> {
    let spec = cfg.world_spec();
    let table = rank_table(cfg, &spec)?;
    if !cfg.coco.is_empty() {
        let Some((t, _)) = &table else {
            return Err(config_err("data.table", "a rank table is required with data.coco"));
        };
        let coco = Path::new(&cfg.coco);
        let db = load_detection_db(coco).map_err(stage("build-data"))?;
        let compose = ComposeConfig {
            train_per_task: cfg.train_per_task,
            test_per_task: cfg.test_per_task,
            fractions: cfg.fractions,
            seed: cfg.seed,
        };
        let mut ds = build_dataset(t, &db, &compose, &format!("detection db {}", cfg.coco)).map_err(stage("build-data"))?;
        let root = if cfg.images.is_empty() {
            coco.parent().map(Path::to_path_buf).unwrap_or_default()
        } else {
            PathBuf::from(&cfg.images)
        };
        let root = fs::canonicalize(&root).map_err(|e| config_err("data.images", format!("{}: {e}", root.display())))?;
        let mut images = BTreeMap::new();
        for rec in &mut ds.images {
            let path = root.join(&rec.file);
            rec.file = path.display().to_string();
            images.insert(rec.id, read_png(&path).map_err(stage("build-data"))?);
        }
        return Ok((
            Data {
                dataset: ds,
                images,
                scenes: Vec::new(),
                spec,
            },
            table,
        ));
    }
    let world = match &table {
        Some((t, _)) => build_microworld(t, &spec, "micro-world from rank table").map_err(stage("build-data"))?,
        None => gen_microworld(&spec).map_err(stage("build-data"))?,
    };
    Ok((
        Data {
            dataset: world.dataset,
            images: world.images,
            scenes: world.scenes,
            spec,
        },
        table,
    ))
}

/// Loads `paths.data` when set, otherwise builds the dataset in memory.
pub fn load_data(cfg: &RunConfig) -> Result<Data, RunError> {
    if cfg.data.is_empty() {
        return Ok(build_data(cfg)?.0);
    }
    let dir = Path::new(&cfg.data);
    let ds = AffordanceDataset::load(&dir.join("dataset.json")).map_err(stage("load-data"))?;
    let mut images = BTreeMap::new();
    for rec in &ds.images {
        images.insert(rec.id, read_png(&dir.join(&rec.file)).map_err(stage("load-data"))?);
    }
    let scenes = if dir.join("scenes.json").exists() {
        MicroWorld::read_scenes(dir).map_err(stage("load-data"))?
    } else {
        Vec::new()
    };
    Ok(Data {
        dataset: ds,
        images,
        scenes,
        spec: cfg.world_spec(),
    })
}

fn require_samples(samples: &[Sample], what: &str) -> Result<(), RunError> {
    if samples.is_empty() {
        return Err(RunError::EmptyDataset(format!("no {what} samples")));
    }
    Ok(())
}

fn save_model(path: &Path, mc: &ModelConfig, ps: &ParamStore, bank: Option<&MemoryBank>) -> Result<(), RunError> {
    let mut ck = Checkpoint::new(mc.hash());
    ck.push_store("model.", ps);
    if let Some(b) = bank {
        b.write_to(&mut ck).map_err(stage("checkpoint"))?;
    }
    ck.save(path).map_err(stage("checkpoint"))
}

/// Loads parameters and, when present, the memory bank.
pub fn load_model(
    path: &str,
    key: &str,
    mc: &ModelConfig,
    force: bool,
) -> Result<(ParamStore, Option<MemoryBank>), RunError> {
    if path.is_empty() {
        return Err(config_err(key, "a checkpoint path is required"));
    }
    let ck = Checkpoint::load(Path::new(path), Some(&mc.hash()), force).map_err(|e| match e {
        CheckpointError::HashMismatch { .. } => config_err(key, e.to_string()),
        other => RunError::Stage {
            stage: "checkpoint",
            message: other.to_string(),
        },
    })?;
    let bank = if ck.get("bank.meta").is_some() {
        Some(MemoryBank::read_from(&ck).map_err(stage("checkpoint"))?)
    } else {
        None
    };
    Ok((ck.store("model."), bank))
}

/// Which network answers the prompts during evaluation.
pub enum Model<'a> {
    Teacher(&'a ParamStore),
    Student(&'a ParamStore, Option<&'a MemoryBank>),
}

impl Model<'_> {
    pub fn mode(&self, cfg: &RunConfig) -> PromptMode {
        match self {
            Model::Teacher(_) => PromptMode::Noun,
            Model::Student(..) => PromptMode::Pronoun(cfg.pronoun.clone()),
        }
    }

    pub fn predict(
        &self,
        det: &Detector,
        ctx: &PromptContext,
        cfg: &RunConfig,
        s: &Sample,
    ) -> Result<Prediction, DistillError> {
        let prompt = ctx.prompt(s, &self.mode(cfg))?;
        match self {
            Model::Teacher(ps) => Ok(det.predict(ps, &s.image, &prompt)?),
            Model::Student(ps, bank) => predict_student(det, ps, *bank, s.task, &s.image, &prompt),
        }
    }
}

fn sweep_thresholds(steps: usize) -> Vec<f64> {
    let n = steps.max(1);
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

/// Evaluates on the test split; the second value holds the per-task image
/// evaluations in task order.
pub fn eval_model(
    det: &Detector,
    model: &Model,
    name: &str,
    data: &Data,
    cfg: &RunConfig,
) -> Result<(EvalReport, Vec<Vec<ImageEval>>), RunError> {
    let test = data.samples(Split::Test)?;
    require_samples(&test, "test")?;
    let ctx = data.context(cfg);
    let (tasks, per_task) = evaluate(&test, &mut |s| model.predict(det, &ctx, cfg, s)).map_err(stage("eval"))?;
    let (map_box, map_mask) = means(&tasks);
    let all: Vec<ImageEval> = per_task.iter().flatten().cloned().collect();
    Ok((
        EvalReport {
            model: name.into(),
            config: cfg.echo(),
            dataset_hash: data.dataset.hash(),
            tasks,
            map_box,
            map_mask,
            sweep: threshold_sweep(&all, &sweep_thresholds(cfg.sweep_steps), IouKind::Box),
            elimination: Vec::new(),
        },
        per_task,
    ))
}

fn augmented(samples: &[Sample], seed: u64, epoch: usize, patch: usize) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xa076_1d64_78bd_642f));
    let ac = AugmentConfig {
        patch,
        ..AugmentConfig::default()
    };
    samples
        .iter()
        .map(|s| {
            let (image, targets) = augment(&s.image, &s.targets, &ac, &mut rng);
            Sample {
                image,
                targets,
                ..s.clone()
            }
        })
        .collect()
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_add((epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn diverged(dir: &mut RunDir, mc: &ModelConfig, stage_name: &'static str, e: DistillError) -> RunError {
    if let DistillError::Diverged { last_good, .. } = &e {
        let _ = save_model(&dir.file("diverged.ckpt"), mc, last_good, None);
    }
    RunError::Stage {
        stage: stage_name,
        message: e.to_string(),
    }
}

/// Plain training, one epoch per call so augmentation can be redrawn.
fn train_loop(
    det: &Detector,
    ps: &mut ParamStore,
    train: &[Sample],
    ctx: &PromptContext,
    cfg: &RunConfig,
    epochs: usize,
    mode: PromptMode,
    dir: &mut RunDir,
    stage_name: &'static str,
) -> Result<Vec<EpochRecord>, RunError> {
    let steps = train.len().div_ceil(cfg.batch) as u64;
    let mut opt = Adam::new(cfg.adam(steps));
    let mut trace = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let data = if cfg.augment {
            augmented(train, cfg.seed, epoch, cfg.model.patch)
        } else {
            train.to_vec()
        };
        let tc = cfg.train_config(1, mode.clone(), epoch_seed(cfg.seed, epoch), steps);
        let mut rec = train_plain(det, ps, &mut opt, &data, ctx, &tc, &mut |_| None)
            .map_err(|e| diverged(dir, &det.cfg, stage_name, e))?
            .remove(0);
        rec.epoch = epoch;
        trace.push(rec);
    }
    Ok(trace)
}

fn trace_log(trace: &[EpochRecord]) -> String {
    trace.iter().map(|r| format!("{}\n", r.line())).collect()
}

fn distill_loop(
    det: &Detector,
    state: &mut DistillState,
    train: &[Sample],
    ctx: &PromptContext,
    cfg: &RunConfig,
    k: usize,
    dir: &mut RunDir,
) -> Result<Vec<EpochRecord>, RunError> {
    let steps = train.len().div_ceil(cfg.batch) as u64;
    let mut trace = Vec::with_capacity(cfg.distill_epochs);
    for epoch in 1..=cfg.distill_epochs {
        let data = if cfg.augment {
            augmented(train, cfg.seed ^ 0xd157, epoch, cfg.model.patch)
        } else {
            train.to_vec()
        };
        let mut dc = cfg.distill_config(epoch_seed(cfg.seed, epoch), 1, steps);
        dc.k = k;
        let mut rec = distill(det, state, &data, ctx, &dc, &mut |_, _| None)
            .map_err(|e| diverged(dir, &det.cfg, "distill", e))?
            .remove(0);
        rec.epoch = epoch;
        trace.push(rec);
    }
    Ok(trace)
}

fn summary_line(name: &str, r: &EvalReport) -> String {
    format!("{name} map_box={:.6} map_mask={:.6}", r.map_box, r.map_mask)
}

fn write_overlays(dir: &mut RunDir, data: &Data, per_task: &[Vec<ImageEval>], cfg: &RunConfig) -> Result<(), RunError> {
    if cfg.overlays == 0 {
        return Ok(());
    }
    let test = data.samples(Split::Test)?;
    let mut by_task: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
    for s in &test {
        by_task.entry(s.task).or_default().push(s);
    }
    let mut n = 0;
    'outer: for (t, evals) in per_task.iter().enumerate() {
        let Some(samples) = by_task.get(&t) else { continue };
        for (s, e) in samples.iter().zip(evals) {
            if n == cfg.overlays {
                break 'outer;
            }
            let p = dir.file(&format!("overlays/{n:04}.png"));
            fs::create_dir_all(p.parent().expect("nested")).map_err(stage("eval"))?;
            write_overlay(&p, &s.image, e, cfg.eval_threshold).map_err(stage("eval"))?;
            n += 1;
        }
    }
    Ok(())
}

fn cmd_build_data(cfg: &RunConfig, dir: &mut RunDir) -> Result<Vec<String>, RunError> {
    let (data, table) = build_data(cfg)?;
    let out = dir.path.join("data");
    fs::create_dir_all(out.join("images")).map_err(stage("build-data"))?;
    let mut summary = vec![format!(
        "tasks={} images={} annotations={}",
        data.dataset.tasks.len(),
        data.dataset.images.len(),
        data.dataset.annotations.len()
    )];
    if cfg.coco.is_empty() {
        let world = MicroWorld {
            dataset: data.dataset.clone(),
            scenes: data.scenes.clone(),
            images: data.images.clone(),
            skipped: 0,
        };
        world.write(&out).map_err(stage("build-data"))?;
        for rec in &data.dataset.images {
            dir.files.push(format!("data/{}", rec.file));
        }
        dir.files.push("data/scenes.json".into());
    } else {
        data.dataset.save(&out.join("dataset.json")).map_err(stage("build-data"))?;
    }
    dir.files.push("data/dataset.json".into());
    if let Some((t, report)) = table {
        dir.write("table.tsv", t.to_tsv())?;
        let mut entries = report.quarantine.clone();
        entries.extend(report.inspection.manual.iter().map(|(task, raw)| afford_core::llm_pipeline::QuarantineEntry {
            stage: "inspector".into(),
            subject: task.clone(),
            reason: "unreadable verdict, pairs kept".into(),
            raw: raw.clone(),
        }));
        dir.write("quarantine.tsv", quarantine_tsv(&entries))?;
        summary.push(format!("table_rows={} quarantined={}", t.rows.len(), entries.len()));
    }
    for r in &data.dataset.composition.reports {
        summary.push(format!("composition {}", serde_json::to_string(r).expect("serializable")));
    }
    summary.push(format!("dataset_hash={}", data.dataset.hash()));
    Ok(summary)
}

fn cmd_train(cfg: &RunConfig, dir: &mut RunDir, force: bool, teacher: bool) -> Result<Vec<String>, RunError> {
    let data = load_data(cfg)?;
    let train = data.samples(Split::Train)?;
    require_samples(&train, "training")?;
    let mc = data.model_config(cfg);
    let det = Detector::new(mc.clone()).map_err(|e| config_err("model", e.to_string()))?;
    let ctx = data.context(cfg);
    let (name, init_key, init_path, epochs, mode) = if teacher {
        ("teacher", "paths.teacher", &cfg.teacher, cfg.teacher_epochs, PromptMode::Noun)
    } else {
        (
            "student",
            "paths.student",
            &cfg.student,
            cfg.student_epochs,
            PromptMode::Pronoun(cfg.pronoun.clone()),
        )
    };
    let mut ps = if init_path.is_empty() {
        det.init(if teacher { cfg.seed } else { cfg.seed ^ 0x5eed })
    } else {
        load_model(init_path, init_key, &mc, force)?.0
    };
    let stage_name = if teacher { "train-teacher" } else { "train-student" };
    let trace = train_loop(&det, &mut ps, &train, &ctx, cfg, epochs, mode, dir, stage_name)?;
    dir.write("trace.log", trace_log(&trace))?;
    save_model(&dir.file(&format!("{name}.ckpt")), &mc, &ps, None)?;
    let model = if teacher { Model::Teacher(&ps) } else { Model::Student(&ps, None) };
    let (report, per_task) = eval_model(&det, &model, name, &data, cfg)?;
    dir.write("eval.json", report.to_json())?;
    write_overlays(dir, &data, &per_task, cfg)?;
    Ok(vec![summary_line(name, &report)])
}

fn distill_once(
    cfg: &RunConfig,
    data: &Data,
    dir: &mut RunDir,
    force: bool,
    k: usize,
) -> Result<(ParamStore, MemoryBank, Vec<EpochRecord>), RunError> {
    let train = data.samples(Split::Train)?;
    require_samples(&train, "training")?;
    let mc = data.model_config(cfg);
    let det = Detector::new(mc.clone()).map_err(|e| config_err("model", e.to_string()))?;
    let ctx = data.context(cfg);
    let (teacher, _) = load_model(&cfg.teacher, "paths.teacher", &mc, force)?;
    let student = if cfg.student.is_empty() {
        det.init(cfg.seed ^ 0x5eed)
    } else {
        load_model(&cfg.student, "paths.student", &mc, force)?.0
    };
    let steps = train.len().div_ceil(cfg.batch) as u64;
    let mut dc = cfg.distill_config(cfg.seed, 1, steps);
    dc.k = k;
    let mut state = DistillState::new(&det, teacher, student, &dc).map_err(|e| match e {
        DistillError::Config(m) | DistillError::BadBank(m) => config_err("distill", m),
        other => RunError::Stage {
            stage: "distill",
            message: other.to_string(),
        },
    })?;
    let trace = distill_loop(&det, &mut state, &train, &ctx, cfg, k, dir)?;
    Ok((state.student, state.bank, trace))
}

fn cmd_distill(cfg: &RunConfig, dir: &mut RunDir, force: bool) -> Result<Vec<String>, RunError> {
    let data = load_data(cfg)?;
    let (student, bank, trace) = distill_once(cfg, &data, dir, force, cfg.k)?;
    dir.write("trace.log", trace_log(&trace))?;
    let mc = data.model_config(cfg);
    save_model(&dir.file("student.ckpt"), &mc, &student, Some(&bank))?;
    let det = Detector::new(mc).map_err(|e| config_err("model", e.to_string()))?;
    let (report, per_task) = eval_model(&det, &Model::Student(&student, Some(&bank)), "distilled", &data, cfg)?;
    dir.write("eval.json", report.to_json())?;
    write_overlays(dir, &data, &per_task, cfg)?;
    Ok(vec![summary_line("distilled", &report)])
}

fn cmd_eval(cfg: &RunConfig, dir: &mut RunDir, force: bool) -> Result<Vec<String>, RunError> {
    let data = load_data(cfg)?;
    if data.dataset.tasks.is_empty() || data.samples(Split::Test)?.is_empty() {
        return Err(RunError::EmptyDataset("no test samples to evaluate".into()));
    }
    if cfg.teacher.is_empty() && cfg.student.is_empty() {
        return Err(config_err("paths.teacher", "eval needs paths.teacher or paths.student"));
    }
    let mc = data.model_config(cfg);
    let det = Detector::new(mc.clone()).map_err(|e| config_err("model", e.to_string()))?;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut overlays_done = false;
    for (key, path, teacher) in [("paths.teacher", &cfg.teacher, true), ("paths.student", &cfg.student, false)] {
        if path.is_empty() {
            continue;
        }
        let (ps, bank) = load_model(path, key, &mc, force)?;
        let (name, model) = if teacher {
            ("teacher", Model::Teacher(&ps))
        } else if bank.is_some() {
            ("distilled", Model::Student(&ps, bank.as_ref()))
        } else {
            ("student", Model::Student(&ps, None))
        };
        let (report, per_task) = eval_model(&det, &model, name, &data, cfg)?;
        dir.write(&format!("eval_{name}.json"), report.to_json())?;
        dir.write(&format!("tasks_{name}.md"), report.task_table())?;
        if !overlays_done {
            write_overlays(dir, &data, &per_task, cfg)?;
            overlays_done = true;
        }
        summary.push(summary_line(name, &report));
        rows.push((name.to_string(), report.map_box, report.map_mask));
    }
    let table = format_comparison(&rows);
    dir.write("comparison.md", &table)?;
    summary.extend(table.lines().map(String::from));
    Ok(summary)
}

fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut s = String::from("threshold\tretained\tprecision\trecall\tf1\n");
    for r in rows {
        let _ = writeln!(s, "{:.4}\t{}\t{:.6}\t{:.6}\t{:.6}", r.threshold, r.retained, r.precision, r.recall, r.f1);
    }
    s
}

fn cmd_sweep_threshold(cfg: &RunConfig, dir: &mut RunDir, force: bool) -> Result<Vec<String>, RunError> {
    let data = load_data(cfg)?;
    let mc = data.model_config(cfg);
    let det = Detector::new(mc.clone()).map_err(|e| config_err("model", e.to_string()))?;
    let (key, path, teacher) = if cfg.student.is_empty() {
        ("paths.teacher", &cfg.teacher, true)
    } else {
        ("paths.student", &cfg.student, false)
    };
    let (ps, bank) = load_model(path, key, &mc, force)?;
    let model = if teacher { Model::Teacher(&ps) } else { Model::Student(&ps, bank.as_ref()) };
    let (_, per_task) = eval_model(&det, &model, "sweep", &data, cfg)?;
    let all: Vec<ImageEval> = per_task.into_iter().flatten().collect();
    let mut thresholds = sweep_thresholds(cfg.sweep_steps);
    if !thresholds.iter().any(|t| (t - cfg.eval_threshold).abs() < 1e-12) {
        thresholds.push(cfg.eval_threshold);
        thresholds.sort_by(f64::total_cmp);
    }
    let mut summary = Vec::new();
    for (kind, name) in [(IouKind::Box, "box"), (IouKind::Mask, "mask")] {
        let rows = threshold_sweep(&all, &thresholds, kind);
        dir.write(&format!("sweep_{name}.tsv"), sweep_tsv(&rows))?;
        if let Some(r) = rows.iter().find(|r| (r.threshold - cfg.eval_threshold).abs() < 1e-12) {
            summary.push(format!(
                "{name} threshold={} precision={:.6} recall={:.6} f1={:.6}",
                r.threshold, r.precision, r.recall, r.f1
            ));
        }
    }
    Ok(summary)
}

fn cmd_sweep_k(cfg: &RunConfig, dir: &mut RunDir, force: bool) -> Result<Vec<String>, RunError> {
    let data = load_data(cfg)?;
    let mc = data.model_config(cfg);
    let det = Detector::new(mc).map_err(|e| config_err("model", e.to_string()))?;
    if cfg.sweep_k_max == 0 {
        return Err(config_err("eval.sweep_k_max", "must be positive"));
    }
    let mut tsv = String::from("k\tmap_box\tmap_mask\n");
    let mut rows = Vec::new();
    for k in 1..=cfg.sweep_k_max {
        let (student, bank, trace) = distill_once(cfg, &data, dir, force, k)?;
        dir.write(&format!("trace_k{k}.log"), trace_log(&trace))?;
        let (report, _) = eval_model(&det, &Model::Student(&student, Some(&bank)), &format!("k={k}"), &data, cfg)?;
        let _ = writeln!(tsv, "{k}\t{:.6}\t{:.6}", report.map_box, report.map_mask);
        rows.push((format!("K={k}"), report.map_box, report.map_mask));
    }
    dir.write("sweep_k.tsv", &tsv)?;
    let table = format_comparison(&rows);
    dir.write("comparison.md", &table)?;
    Ok(table.lines().map(String::from).collect())
}

fn cmd_eliminate(cfg: &RunConfig, dir: &mut RunDir, force: bool) -> Result<Vec<String>, RunError> {
    let data = load_data(cfg)?;
    if data.scenes.is_empty() {
        return Err(RunError::EmptyDataset("elimination needs micro-world scenes".into()));
    }
    let mc = data.model_config(cfg);
    let det = Detector::new(mc.clone()).map_err(|e| config_err("model", e.to_string()))?;
    let (ps, bank) = load_model(&cfg.student, "paths.student", &mc, force)?;
    let ctx = data.context(cfg);
    let scenes: BTreeMap<u64, &Scene> = data.scenes.iter().map(|s| (s.id, s)).collect();
    let mut picks: Vec<(usize, &str, &Scene)> = Vec::new();
    let per_task: Vec<Vec<&Scene>> = data
        .dataset
        .tasks
        .iter()
        .map(|t| {
            data.dataset
                .split(t.id, Split::Test)
                .iter()
                .filter(|e| !e.targets.is_empty())
                .filter_map(|e| scenes.get(&e.image_id).copied())
                .collect()
        })
        .collect();
    let mut round = 0;
    while picks.len() < cfg.elim_scenes && per_task.iter().any(|v| v.len() > round) {
        for (t, v) in per_task.iter().enumerate() {
            if picks.len() < cfg.elim_scenes {
                if let Some(s) = v.get(round) {
                    picks.push((t, data.dataset.tasks[t].verb.as_str(), s));
                }
            }
        }
        round += 1;
    }
    if picks.is_empty() {
        return Err(RunError::EmptyDataset("no test scenes with targets".into()));
    }
    let mut transcripts = Vec::new();
    let mut summary = Vec::new();
    for (task, verb, scene) in picks {
        let mut failure = None;
        let mut scorer = PredictionScorer {
            spec: &data.spec,
            predict: |img: &Image| {
                let s = Sample {
                    image: img.clone(),
                    task,
                    verb: verb.to_string(),
                    targets: Vec::new(),
                };
                match Model::Student(&ps, bank.as_ref()).predict(&det, &ctx, cfg, &s) {
                    Ok(p) => p,
                    Err(e) => {
                        failure.get_or_insert(e);
                        empty_prediction(&mc)
                    }
                }
            },
        };
        let rounds = elimination_run(&mut scorer, scene, cfg.elim_rounds, cfg.elim_accept);
        if let Some(e) = failure {
            return Err(stage("eliminate")(e));
        }
        let picked: Vec<String> = rounds
            .iter()
            .map(|r| r.selected.map_or("-".into(), |i| data.spec.shapes[scene.objects[i].shape].category.clone()))
            .collect();
        summary.push(format!("scene={} task=\"{verb}\" picks={}", scene.id, picked.join(",")));
        transcripts.push(EliminationTranscript {
            scene: scene.id,
            verb: verb.to_string(),
            rounds,
        });
    }
    let report = EvalReport {
        model: "student".into(),
        config: cfg.echo(),
        dataset_hash: data.dataset.hash(),
        elimination: transcripts,
        ..EvalReport::default()
    };
    dir.write("elimination.json", report.to_json())?;
    Ok(summary)
}

fn empty_prediction(mc: &ModelConfig) -> Prediction {
    use afford_core::numerics::DiffArray;
    Prediction {
        boxes: Vec::new(),
        mask_logits: DiffArray::zeros(vec![0, 0]),
        mask_grid: (0, 0),
        logits: DiffArray::zeros(vec![0, mc.n_max]),
        scores: Vec::new(),
        layer_logits: Vec::new(),
    }
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<Vec<String>, RunError> {
    let results = run_gradcheck(cfg.gradcheck_points, cfg.seed).map_err(stage("gradcheck"))?;
    let lines: Vec<String> = results.iter().map(|r| r.line()).collect();
    if let Some(bad) = results.iter().find(|r| !r.passed()) {
        return Err(RunError::Stage {
            stage: "gradcheck",
            message: format!("{}\n{}", lines.join("\n"), bad.line()),
        });
    }
    Ok(lines)
}

/// Runs one command and writes its run directory under `paths.out`.
pub fn run(cmd: Command, cfg: &RunConfig, force: bool) -> Result<Outcome, RunError> {
    cfg.validate()?;
    let mut dir = RunDir::create(cfg)?;
    let summary = match cmd {
        Command::BuildData => cmd_build_data(cfg, &mut dir),
        Command::TrainTeacher => cmd_train(cfg, &mut dir, force, true),
        Command::TrainStudent => cmd_train(cfg, &mut dir, force, false),
        Command::Distill => cmd_distill(cfg, &mut dir, force),
        Command::Eval => cmd_eval(cfg, &mut dir, force),
        Command::SweepThreshold => cmd_sweep_threshold(cfg, &mut dir, force),
        Command::SweepK => cmd_sweep_k(cfg, &mut dir, force),
        Command::Eliminate => cmd_eliminate(cfg, &mut dir, force),
        Command::Gradcheck => cmd_gradcheck(cfg),
    };
    match summary {
        Ok(s) => dir.finish(cmd, cfg, s),
        Err(e) => {
            let _ = fs::write(dir.path.join("error.txt"), format!("{e}\n"));
            let _ = fs::write(dir.path.join("config.txt"), cfg.echo());
            Err(e)
        }
    }
}
