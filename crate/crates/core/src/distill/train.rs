use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detector::{binary_probs, Detector, ForwardNodes, GroundTruthSet, Object, Prediction};
use crate::lang_vision::{build_prompt, pronoun_prompt, Image, Prompt, PromptForm, Pronoun, Vocabulary};
use crate::losses::{graph_binary_kl, graph_cluster, total_distill, total_plain, LossBreakdown, LossWeights};
use crate::matching::{match_teacher_student, match_to_gt};
use crate::nn::{ParamStore, Params};
use crate::numerics::{DiffArray, Graph, NodeId};

use super::{Adam, AdamConfig, DistillError, MemoryBank};

/// One (image, task) training pair with its target instances.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub task: usize,
    pub verb: String,
    pub targets: Vec<Object>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PromptMode {
    Noun,
    Pronoun(Pronoun),
}

/// Vocabulary, category names and padding length shared by all prompts.
#[derive(Clone, Debug)]
pub struct PromptContext {
    pub vocab: Vocabulary,
    pub categories: Vec<String>,
    pub n_max: usize,
}

impl PromptContext {
    pub fn prompt(&self, s: &Sample, mode: &PromptMode) -> Result<Prompt, DistillError> {
        Ok(match mode {
            PromptMode::Pronoun(p) => pronoun_prompt(&self.vocab, &s.verb, p, self.n_max)?,
            PromptMode::Noun => {
                let mut cats: Vec<&str> = Vec::new();
                for o in &s.targets {
                    let name = self.categories[o.category].as_str();
                    if !cats.contains(&name) {
                        cats.push(name);
                    }
                }
                build_prompt(&self.vocab, &s.verb, &PromptForm::VerbNoun, &cats, s.targets.len(), self.n_max)?
            }
        })
    }

    pub fn targets(&self, s: &Sample, prompt: &Prompt) -> Result<GroundTruthSet, DistillError> {
        Ok(GroundTruthSet::for_prompt(
            &s.targets,
            &self.categories,
            prompt,
            (s.image.height, s.image.width),
        )?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub mode: PromptMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 8,
            seed: 0,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            mode: PromptMode::Noun,
        }
    }
}

/// One line of the metric trace.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub map_box: Option<f64>,
}

impl EpochRecord {
    pub fn line(&self) -> String {
        let mut s = self.loss.log_line(&format!("epoch={}", self.epoch));
        if let Some(m) = self.map_box {
            s.push_str(&format!(" map_box={m:.6}"));
        }
        s
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch as u64);
    idx.shuffle(&mut rng);
    idx
}

fn accumulate(into: &mut BTreeMap<String, Vec<f64>>, from: BTreeMap<String, Vec<f64>>) {
    for (k, g) in from {
        match into.get_mut(&k) {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => {
                into.insert(k, g);
            }
        }
    }
}

fn average(grads: &mut BTreeMap<String, Vec<f64>>, n: usize) {
    let s = 1.0 / n as f64;
    grads.values_mut().flatten().for_each(|g| *g *= s);
}

fn plain_grads(
    det: &Detector,
    ps: &ParamStore,
    s: &Sample,
    ctx: &PromptContext,
    mode: &PromptMode,
    w: &LossWeights,
) -> Result<(BTreeMap<String, Vec<f64>>, LossBreakdown), DistillError> {
    let prompt = ctx.prompt(s, mode)?;
    let gt = ctx.targets(s, &prompt)?;
    let mut g = Graph::new();
    let p = Params::new(ps, "", true);
    let nodes = det.forward(&mut g, p, &s.image, &prompt)?;
    let sigma = match_to_gt(&Prediction::from_nodes(&g, &nodes), &gt, w.token_m_log)?;
    let terms = total_plain(&mut g, &nodes, &gt, &sigma, prompt.content_len(), w)?;
    g.backward(terms.total)?;
    Ok((p.collect_grads(&g), terms.breakdown))
}

/// Trains with the plain objective. `eval` is called after every epoch and
/// its value recorded as the epoch's mAP.
pub fn train_plain(
    det: &Detector,
    ps: &mut ParamStore,
    opt: &mut Adam,
    data: &[Sample],
    ctx: &PromptContext,
    cfg: &TrainConfig,
    eval: &mut dyn FnMut(&ParamStore) -> Option<f64>,
) -> Result<Vec<EpochRecord>, DistillError> {
    check_config(cfg.batch, data.len(), &cfg.weights)?;
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let mut sum = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch) {
            let last_good = ps.clone();
            let mut grads = BTreeMap::new();
            for &i in chunk {
                let (g, bd) = plain_grads(det, ps, &data[i], ctx, &cfg.mode, &cfg.weights)?;
                if !bd.total.is_finite() || g.values().flatten().any(|v| !v.is_finite()) {
                    return Err(DistillError::Diverged {
                        epoch,
                        step,
                        last_good: Box::new(last_good),
                    });
                }
                sum.add(&bd);
                accumulate(&mut grads, g);
            }
            average(&mut grads, chunk.len());
            opt.step(ps, &grads);
            step += 1;
        }
        trace.push(EpochRecord {
            epoch,
            loss: sum.scaled(1.0 / data.len() as f64),
            map_box: eval(ps),
        });
    }
    Ok(trace)
}

fn check_config(batch: usize, n: usize, w: &LossWeights) -> Result<(), DistillError> {
    if batch == 0 {
        return Err(DistillError::Config("batch must be positive".into()));
    }
    if n == 0 {
        return Err(DistillError::Config("no training samples".into()));
    }
    w.validate().map_err(|e| DistillError::Config(e.to_string()))
}

/// Mean teacher feature over the noun tokens of each category, then over
/// categories. `None` for prompts without categories.
pub fn extract_noun_feature(features: &DiffArray, prompt: &Prompt) -> Option<Vec<f64>> {
    if !matches!(prompt.form, PromptForm::VerbNoun) || prompt.object_spans.is_empty() {
        return None;
    }
    let d = features.cols();
    let mut acc = vec![0.0; d];
    for span in &prompt.object_spans {
        let w = 1.0 / span.len() as f64;
        let mut noun = vec![0.0; d];
        for r in span.clone() {
            noun.iter_mut().zip(features.row(r)).for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().zip(&noun).for_each(|(a, v)| *a += v * w);
    }
    let n = prompt.object_spans.len() as f64;
    Some(acc.into_iter().map(|v| v / n).collect())
}

/// Overwrites the rows of `span` with `center` (a constant, so no gradient
/// reaches the bank).
pub fn replace_pronoun(
    g: &mut Graph,
    features: NodeId,
    span: &Range<usize>,
    content_len: usize,
    center: &[f64],
) -> Result<NodeId, DistillError> {
    if span.is_empty() || span.end > content_len {
        return Err(DistillError::SpanAtPad {
            start: span.start,
            end: span.end,
            content_len,
        });
    }
    let rows: Vec<usize> = span.clone().collect();
    Ok(g.replace_rows(features, &rows, center)?)
}

pub struct StudentForward {
    pub nodes: ForwardNodes,
    /// Mean student feature over the pronoun span, before replacement.
    pub pron: Option<NodeId>,
    pub center: Option<Vec<f64>>,
}

/// Student forward pass. With a bank holding fresh centers for `task`, the
/// pronoun feature is replaced by its nearest prototype.
pub fn student_forward(
    det: &Detector,
    g: &mut Graph,
    p: Params,
    bank: Option<&MemoryBank>,
    task: usize,
    image: &Image,
    prompt: &Prompt,
) -> Result<StudentForward, DistillError> {
    let ft = det.text_stage(g, p, prompt)?;
    let span = prompt.object_spans.first().cloned();
    let centers = bank.and_then(|b| b.centers(task).ok()).filter(|c| !c.is_empty());
    let (Some(span), Some(centers)) = (span, centers) else {
        return Ok(StudentForward {
            nodes: det.predict_stage(g, p, image, prompt, ft)?,
            pron: None,
            center: None,
        });
    };
    let rows: Vec<usize> = span.clone().collect();
    let pr = g.gather(ft, &rows)?;
    let pr = g.sum_axis(pr, 0)?;
    let pron = g.scale(pr, 1.0 / rows.len() as f64)?;
    let (_, center) = super::select_prototype(g.values(pron), centers)?;
    let center = center.to_vec();
    let ft = replace_pronoun(g, ft, &span, prompt.content_len(), &center)?;
    Ok(StudentForward {
        nodes: det.predict_stage(g, p, image, prompt, ft)?,
        pron: Some(pron),
        center: Some(center),
    })
}

/// Inference with the student and a frozen bank; the teacher is not used.
pub fn predict_student(
    det: &Detector,
    ps: &ParamStore,
    bank: Option<&MemoryBank>,
    task: usize,
    image: &Image,
    prompt: &Prompt,
) -> Result<Prediction, DistillError> {
    let mut g = Graph::new();
    let f = student_forward(det, &mut g, Params::new(ps, "", false), bank, task, image, prompt)?;
    Ok(Prediction::from_nodes(&g, &f.nodes))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub pronoun: Pronoun,
    pub n_mem: usize,
    pub k: usize,
    /// Train the teacher on its own plain loss as well.
    pub joint: bool,
    pub replace_pronoun: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch: 8,
            seed: 0,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            pronoun: Pronoun::Something,
            n_mem: 64,
            k: 3,
            joint: false,
            replace_pronoun: true,
        }
    }
}

pub struct DistillState {
    pub teacher: ParamStore,
    pub student: ParamStore,
    pub bank: MemoryBank,
    pub opt_student: Adam,
    pub opt_teacher: Option<Adam>,
}

impl DistillState {
    pub fn new(det: &Detector, teacher: ParamStore, student: ParamStore, cfg: &DistillConfig) -> Result<Self, DistillError> {
        Ok(Self {
            teacher,
            student,
            bank: MemoryBank::new(cfg.n_mem, det.cfg.d, cfg.k)?,
            opt_student: Adam::new(cfg.adam.clone()),
            opt_teacher: cfg.joint.then(|| Adam::new(cfg.adam.clone())),
        })
    }
}

const TEACHER: &str = "t.";
const STUDENT: &str = "s.";

/// One optimizer step of the distillation objective over `batch`.
pub fn distill_step(
    det: &Detector,
    state: &mut DistillState,
    batch: &[&Sample],
    ctx: &PromptContext,
    cfg: &DistillConfig,
) -> Result<LossBreakdown, DistillError> {
    let w = &cfg.weights;
    let student_mode = PromptMode::Pronoun(cfg.pronoun.clone());
    let mut grads_s = BTreeMap::new();
    let mut grads_t = BTreeMap::new();
    let mut sum = LossBreakdown::default();
    for s in batch {
        let tp = ctx.prompt(s, &PromptMode::Noun)?;
        let sp = ctx.prompt(s, &student_mode)?;
        let mut g = Graph::new();
        let pt = Params::new(&state.teacher, TEACHER, cfg.joint);
        let ft_t = det.text_stage(&mut g, pt, &tp)?;
        if cfg.replace_pronoun {
            if let Some(f) = extract_noun_feature(g.value(ft_t), &tp) {
                state.bank.update(s.task, f)?;
            }
            if state.bank.is_stale(s.task) {
                state.bank.recluster(s.task, cfg.seed ^ s.task as u64)?;
            }
        }
        let t_nodes = det.predict_stage(&mut g, pt, &s.image, &tp, ft_t)?;
        let t_pred = Prediction::from_nodes(&g, &t_nodes);
        let teacher_terms = if cfg.joint {
            let gt = ctx.targets(s, &tp)?;
            let sigma = match_to_gt(&t_pred, &gt, w.token_m_log)?;
            Some(total_plain(&mut g, &t_nodes, &gt, &sigma, tp.content_len(), w)?)
        } else {
            None
        };

        let ps = Params::new(&state.student, STUDENT, true);
        let bank = cfg.replace_pronoun.then_some(&state.bank);
        let sf = student_forward(det, &mut g, ps, bank, s.task, &s.image, &sp)?;
        let s_pred = Prediction::from_nodes(&g, &sf.nodes);
        let gt = ctx.targets(s, &sp)?;
        let sigma = match_to_gt(&s_pred, &gt, w.token_m_log)?;
        let student_terms = total_plain(&mut g, &sf.nodes, &gt, &sigma, sp.content_len(), w)?;

        let cluster = match (&sf.pron, &sf.center) {
            (Some(pron), Some(c)) if w.cluster > 0.0 => Some(graph_cluster(&mut g, *pron, c)?),
            _ => None,
        };
        let binary = if w.binary > 0.0 {
            let sigma_hat = match_teacher_student(&t_pred, &s_pred, w)?;
            Some(graph_binary_kl(&mut g, &binary_probs(&t_pred.logits), sf.nodes.logits, &sigma_hat.perm)?)
        } else {
            None
        };
        let total = total_distill(&mut g, teacher_terms.as_ref(), &student_terms, cluster, binary, w)?;
        g.backward(total.total)?;
        let gs = ps.collect_grads(&g);
        let gt_grads = cfg.joint.then(|| pt.collect_grads(&g));
        if !total.breakdown.total.is_finite() || gs.values().flatten().any(|v| !v.is_finite()) {
            return Err(DistillError::NonFinite("distillation loss"));
        }
        sum.add(&total.breakdown);
        accumulate(&mut grads_s, gs);
        if let Some(gtg) = gt_grads {
            accumulate(&mut grads_t, gtg);
        }
    }
    average(&mut grads_s, batch.len());
    state.opt_student.step(&mut state.student, &grads_s);
    if let Some(opt) = &mut state.opt_teacher {
        average(&mut grads_t, batch.len());
        opt.step(&mut state.teacher, &grads_t);
    }
    Ok(sum.scaled(1.0 / batch.len() as f64))
}

/// Distillation epochs. The bank is re-clustered at the end so inference
/// uses fresh centers. `eval` receives the student and the bank.
pub fn distill(
    det: &Detector,
    state: &mut DistillState,
    data: &[Sample],
    ctx: &PromptContext,
    cfg: &DistillConfig,
    eval: &mut dyn FnMut(&ParamStore, &MemoryBank) -> Option<f64>,
) -> Result<Vec<EpochRecord>, DistillError> {
    check_config(cfg.batch, data.len(), &cfg.weights)?;
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed ^ 0xd157, epoch);
        let mut sum = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let last_good = state.student.clone();
            match distill_step(det, state, &batch, ctx, cfg) {
                Ok(bd) => sum.add(&bd.scaled(batch.len() as f64)),
                Err(DistillError::NonFinite(_)) => {
                    return Err(DistillError::Diverged {
                        epoch,
                        step,
                        last_good: Box::new(last_good),
                    })
                }
                Err(e) => return Err(e),
            }
            step += 1;
        }
        state.bank.recluster_all(cfg.seed)?;
        trace.push(EpochRecord {
            epoch,
            loss: sum.scaled(1.0 / data.len() as f64),
            map_box: eval(&state.student, &state.bank),
        });
    }
    Ok(trace)
}
