//! Flat `key=value` run configuration with dotted namespaces.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use afford_core::dataforge::{MicroWorldSpec, DEFAULT_FRACTIONS};
use afford_core::detector::ModelConfig;
use afford_core::distill::{AdamConfig, DistillConfig, PromptMode, TrainConfig};
use afford_core::lang_vision::Pronoun;
use afford_core::losses::LossWeights;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config key `{}`: {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub lr: f64,
    pub text_lr: Option<f64>,
    pub batch: usize,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    /// Epoch after which the learning rates are multiplied by `decay_factor`.
    pub decay_epoch: Option<usize>,
    pub decay_factor: f64,
    pub teacher_epochs: usize,
    /// Plain student epochs before distillation starts.
    pub student_epochs: usize,
    pub distill_epochs: usize,
    pub n_mem: usize,
    pub k: usize,
    pub frozen_teacher: bool,
    pub replace_pronoun: bool,
    pub pronoun: Pronoun,
    pub canvas: usize,
    pub train_per_task: usize,
    pub test_per_task: usize,
    pub fractions: [f64; 4],
    pub augment: bool,
    /// COCO-style annotation file; empty means the synthetic world.
    pub coco: String,
    /// Rank table: a TSV path, `mock`, `remote:<endpoint>`, or empty for
    /// the built-in micro-world ranks.
    pub table: String,
    /// Image root for COCO input; empty means the annotation file's directory.
    pub images: String,
    pub eval_threshold: f64,
    pub sweep_steps: usize,
    pub sweep_k_max: usize,
    pub elim_scenes: usize,
    pub elim_rounds: usize,
    pub elim_accept: f64,
    pub overlays: usize,
    pub gradcheck_points: usize,
    pub out: PathBuf,
    pub data: String,
    pub teacher: String,
    pub student: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig {
                d: 32,
                heads: 4,
                d_ff: 64,
                text_layers: 1,
                vision_layers: 1,
                enc_layers: 1,
                dec_layers: 2,
                n_pred: 8,
                n_max: 8,
                patch: 8,
                align_dim: 16,
                mask_dim: 16,
                ..ModelConfig::default()
            },
            loss: LossWeights::default(),
            lr: 2e-3,
            text_lr: None,
            batch: 8,
            weight_decay: 1e-4,
            clip_norm: Some(1.0),
            decay_epoch: Some(14),
            decay_factor: 0.1,
            teacher_epochs: 20,
            student_epochs: 14,
            distill_epochs: 6,
            n_mem: 64,
            k: 3,
            frozen_teacher: true,
            replace_pronoun: true,
            pronoun: Pronoun::Something,
            canvas: 64,
            train_per_task: 60,
            test_per_task: 15,
            fractions: DEFAULT_FRACTIONS,
            augment: false,
            coco: String::new(),
            table: String::new(),
            images: String::new(),
            eval_threshold: 0.9,
            sweep_steps: 20,
            sweep_k_max: 10,
            elim_scenes: 10,
            elim_rounds: 3,
            elim_accept: 0.3,
            overlays: 0,
            gradcheck_points: 50,
            out: PathBuf::from("runs"),
            data: String::new(),
            teacher: String::new(),
            student: String::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str, ty: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError {
        key: key.into(),
        message: format!("expected {ty}, got `{v}`"),
    })
}

fn opt_f64(key: &str, v: &str) -> Result<Option<f64>, ConfigError> {
    if v == "none" {
        Ok(None)
    } else {
        parse(key, v, "a number or `none`").map(Some)
    }
}

fn show_opt(v: Option<f64>) -> String {
    v.map_or("none".into(), |x| x.to_string())
}

impl RunConfig {
    /// Applies one assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let f = |ty| move |k: &str, v: &str| -> Result<f64, ConfigError> { parse(k, v, ty) };
        let num = f("a number");
        let int = |k: &str, v: &str| -> Result<usize, ConfigError> { parse(k, v, "a non-negative integer") };
        let flag = |k: &str, v: &str| -> Result<bool, ConfigError> { parse(k, v, "true or false") };
        let m = &mut self.model;
        let l = &mut self.loss;
        match key {
            "seed" => self.seed = parse(key, v, "a non-negative integer")?,
            "model.d" => m.d = int(key, v)?,
            "model.heads" => m.heads = int(key, v)?,
            "model.d_ff" => m.d_ff = int(key, v)?,
            "model.text_layers" => m.text_layers = int(key, v)?,
            "model.vision_layers" => m.vision_layers = int(key, v)?,
            "model.enc_layers" => m.enc_layers = int(key, v)?,
            "model.dec_layers" => m.dec_layers = int(key, v)?,
            "model.n_pred" => m.n_pred = int(key, v)?,
            "model.n_max" => m.n_max = int(key, v)?,
            "model.patch" => m.patch = int(key, v)?,
            "model.align_dim" => m.align_dim = int(key, v)?,
            "model.mask_dim" => m.mask_dim = int(key, v)?,
            "model.use_va" => m.use_va = flag(key, v)?,
            "model.use_bf" => m.use_bf = flag(key, v)?,
            "model.decoder_self_attn" => m.decoder_self_attn = flag(key, v)?,
            "loss.l1" => l.l1 = num(key, v)?,
            "loss.giou" => l.giou = num(key, v)?,
            "loss.dice" => l.dice = num(key, v)?,
            "loss.focal" => l.focal = num(key, v)?,
            "loss.token" => l.token = num(key, v)?,
            "loss.align" => l.align = num(key, v)?,
            "loss.cluster" => l.cluster = num(key, v)?,
            "loss.binary" => l.binary = num(key, v)?,
            "loss.focal_alpha" => l.focal_alpha = num(key, v)?,
            "loss.focal_gamma" => l.focal_gamma = num(key, v)?,
            "loss.tau" => l.tau = num(key, v)?,
            "loss.match_kl" => l.match_kl = num(key, v)?,
            "loss.token_m_log" => l.token_m_log = flag(key, v)?,
            "optim.kind" => {
                if v != "adam" {
                    return Err(ConfigError {
                        key: key.into(),
                        message: format!("only `adam` is supported, got `{v}`"),
                    });
                }
            }
            "optim.lr" => self.lr = num(key, v)?,
            "optim.text_lr" => self.text_lr = opt_f64(key, v)?,
            "optim.batch" => self.batch = int(key, v)?,
            "optim.weight_decay" => self.weight_decay = num(key, v)?,
            "optim.clip_norm" => self.clip_norm = opt_f64(key, v)?,
            "optim.decay_epoch" => {
                self.decay_epoch = if v == "none" {
                    None
                } else {
                    Some(parse(key, v, "a non-negative integer or `none`")?)
                }
            }
            "optim.decay_factor" => self.decay_factor = num(key, v)?,
            "train.teacher_epochs" => self.teacher_epochs = int(key, v)?,
            "train.student_epochs" => self.student_epochs = int(key, v)?,
            "distill.epochs" => self.distill_epochs = int(key, v)?,
            "distill.n_mem" => self.n_mem = int(key, v)?,
            "distill.k" => self.k = int(key, v)?,
            "distill.frozen_teacher" => self.frozen_teacher = flag(key, v)?,
            "distill.replace_pronoun" => self.replace_pronoun = flag(key, v)?,
            "distill.pronoun" => self.pronoun = Pronoun::parse(v),
            "data.canvas" => self.canvas = int(key, v)?,
            "data.train_per_task" => self.train_per_task = int(key, v)?,
            "data.test_per_task" => self.test_per_task = int(key, v)?,
            "data.fractions" => {
                let parts: Vec<f64> = v.split(',').map(|p| parse(key, p.trim(), "four comma-separated numbers")).collect::<Result<_, _>>()?;
                self.fractions = parts.try_into().map_err(|_| ConfigError {
                    key: key.into(),
                    message: "expected four comma-separated numbers".into(),
                })?;
            }
            "data.augment" => self.augment = flag(key, v)?,
            "data.coco" => self.coco = v.into(),
            "data.table" => self.table = v.into(),
            "data.images" => self.images = v.into(),
            "eval.threshold" => self.eval_threshold = num(key, v)?,
            "eval.sweep_steps" => self.sweep_steps = int(key, v)?,
            "eval.sweep_k_max" => self.sweep_k_max = int(key, v)?,
            "eval.elim_scenes" => self.elim_scenes = int(key, v)?,
            "eval.elim_rounds" => self.elim_rounds = int(key, v)?,
            "eval.elim_accept" => self.elim_accept = num(key, v)?,
            "eval.overlays" => self.overlays = int(key, v)?,
            "gradcheck.points" => self.gradcheck_points = int(key, v)?,
            "paths.out" => self.out = v.into(),
            "paths.data" => self.data = v.into(),
            "paths.teacher" => self.teacher = v.into(),
            "paths.student" => self.student = v.into(),
            _ => {
                return Err(ConfigError {
                    key: key.into(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Range and consistency checks that do not need the dataset.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |k: &str, m: &str| {
            Err(ConfigError {
                key: k.into(),
                message: m.into(),
            })
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("optim.lr", "must be positive");
        }
        if self.batch == 0 {
            return bad("optim.batch", "must be positive");
        }
        if self.k == 0 {
            return bad("distill.k", "must be positive");
        }
        if self.n_mem == 0 {
            return bad("distill.n_mem", "must be positive");
        }
        if self.canvas % self.model.patch != 0 {
            return bad("data.canvas", "must be a multiple of model.patch");
        }
        if self.fractions.iter().any(|f| *f < 0.0) || self.fractions.iter().sum::<f64>() <= 0.0 {
            return bad("data.fractions", "must be non-negative with a positive sum");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return bad("optim.decay_factor", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.eval_threshold) {
            return bad("eval.threshold", "must lie in [0, 1]");
        }
        if let Err(e) = self.loss.validate() {
            return bad("loss", &e.to_string());
        }
        let mut probe = self.model.clone();
        probe.vocab_size = 64;
        if let Err(e) = probe.validate() {
            return bad("model", &e.to_string());
        }
        Ok(())
    }

    /// Effective configuration, one sorted `key=value` per line.
    pub fn echo(&self) -> String {
        let m = &self.model;
        let l = &self.loss;
        let f = &self.fractions;
        let mut lines = vec![
            format!("data.augment={}", self.augment),
            format!("data.canvas={}", self.canvas),
            format!("data.coco={}", self.coco),
            format!("data.images={}", self.images),
            format!("data.fractions={},{},{},{}", f[0], f[1], f[2], f[3]),
            format!("data.table={}", self.table),
            format!("data.test_per_task={}", self.test_per_task),
            format!("data.train_per_task={}", self.train_per_task),
            format!("distill.epochs={}", self.distill_epochs),
            format!("distill.frozen_teacher={}", self.frozen_teacher),
            format!("distill.k={}", self.k),
            format!("distill.n_mem={}", self.n_mem),
            format!("distill.pronoun={}", self.pronoun.word()),
            format!("distill.replace_pronoun={}", self.replace_pronoun),
            format!("eval.elim_accept={}", self.elim_accept),
            format!("eval.elim_rounds={}", self.elim_rounds),
            format!("eval.overlays={}", self.overlays),
            format!("gradcheck.points={}", self.gradcheck_points),
            format!("eval.elim_scenes={}", self.elim_scenes),
            format!("eval.sweep_k_max={}", self.sweep_k_max),
            format!("eval.sweep_steps={}", self.sweep_steps),
            format!("eval.threshold={}", self.eval_threshold),
            format!("loss.align={}", l.align),
            format!("loss.binary={}", l.binary),
            format!("loss.cluster={}", l.cluster),
            format!("loss.dice={}", l.dice),
            format!("loss.focal={}", l.focal),
            format!("loss.focal_alpha={}", l.focal_alpha),
            format!("loss.focal_gamma={}", l.focal_gamma),
            format!("loss.giou={}", l.giou),
            format!("loss.l1={}", l.l1),
            format!("loss.match_kl={}", l.match_kl),
            format!("loss.tau={}", l.tau),
            format!("loss.token={}", l.token),
            format!("loss.token_m_log={}", l.token_m_log),
            format!("model.align_dim={}", m.align_dim),
            format!("model.d={}", m.d),
            format!("model.d_ff={}", m.d_ff),
            format!("model.dec_layers={}", m.dec_layers),
            format!("model.decoder_self_attn={}", m.decoder_self_attn),
            format!("model.enc_layers={}", m.enc_layers),
            format!("model.heads={}", m.heads),
            format!("model.mask_dim={}", m.mask_dim),
            format!("model.n_max={}", m.n_max),
            format!("model.n_pred={}", m.n_pred),
            format!("model.patch={}", m.patch),
            format!("model.text_layers={}", m.text_layers),
            format!("model.use_bf={}", m.use_bf),
            format!("model.use_va={}", m.use_va),
            format!("model.vision_layers={}", m.vision_layers),
            "optim.kind=adam".to_string(),
            format!("optim.batch={}", self.batch),
            format!("optim.clip_norm={}", show_opt(self.clip_norm)),
            format!("optim.decay_epoch={}", self.decay_epoch.map_or("none".into(), |e| e.to_string())),
            format!("optim.decay_factor={}", self.decay_factor),
            format!("optim.lr={}", self.lr),
            format!("optim.text_lr={}", show_opt(self.text_lr)),
            format!("optim.weight_decay={}", self.weight_decay),
            format!("paths.data={}", self.data),
            format!("paths.out={}", self.out.display()),
            format!("paths.student={}", self.student),
            format!("paths.teacher={}", self.teacher),
            format!("seed={}", self.seed),
            format!("train.student_epochs={}", self.student_epochs),
            format!("train.teacher_epochs={}", self.teacher_epochs),
        ];
        lines.sort();
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    /// Hash of the echo without the output-location keys.
    pub fn hash(&self) -> String {
        let body: String = self
            .echo()
            .lines()
            .filter(|l| !l.starts_with("paths."))
            .map(|l| format!("{l}\n"))
            .collect();
        afford_core::checkpoint::hex(&Sha256::digest(body.as_bytes()))
    }

    /// Optimizer settings for `steps_per_epoch` updates per epoch.
    pub fn adam(&self, steps_per_epoch: u64) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            text_lr: self.text_lr,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            decay_after: self.decay_epoch.map(|e| e as u64 * steps_per_epoch),
            decay_factor: self.decay_factor,
            ..AdamConfig::default()
        }
    }

    pub fn train_config(&self, epochs: usize, mode: PromptMode, seed: u64, steps_per_epoch: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch: self.batch,
            seed,
            adam: self.adam(steps_per_epoch),
            weights: self.loss.clone(),
            mode,
        }
    }

    pub fn distill_config(&self, seed: u64, epochs: usize, steps_per_epoch: u64) -> DistillConfig {
        DistillConfig {
            epochs,
            batch: self.batch,
            seed,
            adam: self.adam(steps_per_epoch),
            weights: self.loss.clone(),
            pronoun: self.pronoun.clone(),
            n_mem: self.n_mem,
            k: self.k,
            joint: !self.frozen_teacher,
            replace_pronoun: self.replace_pronoun,
        }
    }

    pub fn world_spec(&self) -> MicroWorldSpec {
        MicroWorldSpec {
            canvas: self.canvas,
            train_per_task: self.train_per_task,
            test_per_task: self.test_per_task,
            fractions: self.fractions,
            seed: self.seed,
            ..MicroWorldSpec::default()
        }
    }
}

/// Parses a config document over the defaults. Blank lines and `#`
/// comments are ignored; a repeated key keeps the last value.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError {
            key: line.into(),
            message: format!("line {} is not key=value", i + 1),
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError {
        key: "--config".into(),
        message: format!("{}: {e}", path.display()),
    })?;
    parse_config(&text)
}
