//! Transformer encoder-decoder set predictor with box, mask and token heads.

mod target;

pub use target::{GroundTruthSet, Object};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fusion::{fuse_text, fuse_visual, verb_attention, FusionError, FusionParams};
use crate::lang_vision::{Image, LangError, Prompt, TextEncoder, VisionEncoder};
use crate::nn::{
    attention, encoder_layer, init_attention, init_encoder_layer, init_mlp, layer_norm, linear, mlp, AttentionError,
    ParamStore, Params,
};
use crate::numerics::{DiffArray, Graph, NodeId, NumericsError};
use crate::raster::bilinear_matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Lang(#[from] LangError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("prompt is padded to {got} slots but the model expects {expected}")]
    PromptLength { got: usize, expected: usize },
    #[error("invalid model config: {0}")]
    Config(String),
}

impl From<AttentionError> for ModelError {
    fn from(e: AttentionError) -> Self {
        ModelError::Fusion(e.into())
    }
}

/// Architecture hyper-parameters. Every field participates in the config
/// hash stored in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub text_layers: usize,
    pub vision_layers: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub n_pred: usize,
    pub n_max: usize,
    pub patch: usize,
    pub align_dim: usize,
    pub mask_dim: usize,
    pub vocab_size: usize,
    pub use_va: bool,
    pub use_bf: bool,
    pub decoder_self_attn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            d_ff: 128,
            text_layers: 2,
            vision_layers: 2,
            enc_layers: 1,
            dec_layers: 3,
            n_pred: 8,
            n_max: 32,
            patch: 8,
            align_dim: 16,
            mask_dim: 16,
            vocab_size: 0,
            use_va: true,
            use_bf: true,
            decoder_self_attn: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad("d must be a positive multiple of heads");
        }
        if self.d % 4 != 0 {
            return bad("d must be a multiple of 4 for 2-D positions");
        }
        if self.n_pred == 0 {
            return bad("n_pred must be at least 1");
        }
        if self.n_max < 2 {
            return bad("n_max must be at least 2");
        }
        if self.dec_layers == 0 {
            return bad("dec_layers must be at least 1");
        }
        if self.patch < 4 || self.patch % 4 != 0 {
            return bad("patch must be a positive multiple of 4");
        }
        if self.vocab_size < 6 {
            return bad("vocab_size must cover the reserved tokens");
        }
        Ok(())
    }

    /// Canonical `key=value` lines, the input of [`ModelConfig::hash`].
    pub fn canonical(&self) -> String {
        format!(
            "d={}\nheads={}\nd_ff={}\ntext_layers={}\nvision_layers={}\nenc_layers={}\ndec_layers={}\nn_pred={}\nn_max={}\npatch={}\nalign_dim={}\nmask_dim={}\nvocab_size={}\nuse_va={}\nuse_bf={}\ndecoder_self_attn={}\n",
            self.d,
            self.heads,
            self.d_ff,
            self.text_layers,
            self.vision_layers,
            self.enc_layers,
            self.dec_layers,
            self.n_pred,
            self.n_max,
            self.patch,
            self.align_dim,
            self.mask_dim,
            self.vocab_size,
            self.use_va,
            self.use_bf,
            self.decoder_self_attn
        )
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }

    /// Index of the no-object slot in token logits.
    pub fn no_object(&self) -> usize {
        self.n_max - 1
    }

    pub fn text_encoder(&self) -> TextEncoder {
        TextEncoder {
            d: self.d,
            layers: self.text_layers,
            heads: self.heads,
            d_ff: self.d_ff,
        }
    }

    pub fn vision_encoder(&self) -> VisionEncoder {
        VisionEncoder {
            d: self.d,
            layers: self.vision_layers,
            heads: self.heads,
            d_ff: self.d_ff,
            patch: self.patch,
        }
    }

    pub fn fusion(&self) -> FusionParams {
        FusionParams {
            d: self.d,
            heads: self.heads,
        }
    }
}

/// Graph nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    /// `n_pred × 4` `(cx, cy, w, h)` after a sigmoid.
    pub boxes: NodeId,
    /// `n_pred × (H/4·W/4)`.
    pub mask_logits: NodeId,
    /// `n_pred × n_max` token logits of the last decoder layer.
    pub logits: NodeId,
    pub layer_logits: Vec<NodeId>,
    /// Unit-norm object embeddings, `n_pred × align_dim`.
    pub obj_emb: NodeId,
    /// Unit-norm token embeddings, `n_max × align_dim`.
    pub tok_emb: NodeId,
    pub mask_grid: (usize, usize),
}

/// Value-level outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub boxes: Vec<[f64; 4]>,
    pub mask_logits: DiffArray,
    pub mask_grid: (usize, usize),
    pub logits: DiffArray,
    pub scores: Vec<f64>,
    pub layer_logits: Vec<DiffArray>,
}

impl Prediction {
    pub fn from_nodes(g: &Graph, n: &ForwardNodes) -> Self {
        let b = g.value(n.boxes);
        let logits = g.value(n.logits).clone();
        Self {
            boxes: (0..b.rows()).map(|r| b.row(r).try_into().expect("4 columns")).collect(),
            mask_logits: g.value(n.mask_logits).clone(),
            mask_grid: n.mask_grid,
            scores: preference_scores(&logits),
            logits,
            layer_logits: n.layer_logits.iter().map(|&l| g.value(l).clone()).collect(),
        }
    }

    pub fn n_pred(&self) -> usize {
        self.boxes.len()
    }

    /// Preference scores of every decoder layer, outermost index = layer.
    pub fn layer_scores(&self) -> Vec<Vec<f64>> {
        self.layer_logits.iter().map(preference_scores).collect()
    }
}

/// `ŝ_i = 1 − exp(ĝ_last) / Σ_j exp(ĝ_j)` per row, with max subtraction.
pub fn preference_scores(logits: &DiffArray) -> Vec<f64> {
    let c = logits.cols();
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            1.0 - (row[c - 1] - m).exp() / z
        })
        .collect()
}

/// `(p_pos, p_neg)` per row: mass on token slots versus the no-object slot.
pub fn binary_probs(logits: &DiffArray) -> Vec<(f64, f64)> {
    let c = logits.cols();
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let pos: f64 = e[..c - 1].iter().map(|v| v / z).sum();
            (pos, e[c - 1] / z)
        })
        .collect()
}

/// The full model: encoders, VA, BF, encoder-decoder and heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub cfg: ModelConfig,
}

/// Patch centers as `N_v × 2` rows of `(cx, cy)` and their squares.
fn patch_centers(grid: (usize, usize)) -> (DiffArray, DiffArray) {
    let (gh, gw) = grid;
    let mut c = Vec::with_capacity(gh * gw * 2);
    for y in 0..gh {
        for x in 0..gw {
            c.extend([(x as f64 + 0.5) / gw as f64, (y as f64 + 0.5) / gh as f64]);
        }
    }
    let sq = c.iter().map(|v| v * v).collect();
    (
        DiffArray::new(vec![gh * gw, 2], c).expect("sized above"),
        DiffArray::new(vec![gh * gw, 2], sq).expect("sized above"),
    )
}

/// Reference box in logit space from the moments of each query's softmax
/// over patches: the mean patch center and the width of a uniform spread
/// with the same variance.
fn spatial_reference(g: &mut Graph, coarse: NodeId, grid: (usize, usize)) -> Result<NodeId, NumericsError> {
    let n = g.shape(coarse)[0];
    let (pc, pc2) = patch_centers(grid);
    let (pc, pc2) = (g.constant(pc), g.constant(pc2));
    let a = g.softmax(coarse)?;
    let mean = g.matmul(a, pc)?;
    let m2 = g.matmul(a, pc2)?;
    let mean_sq = g.mul(mean, mean)?;
    let var = g.sub(m2, mean_sq)?;
    let cell = 1.0 / (grid.0.max(grid.1) as f64);
    let var = g.scale(var, 12.0)?;
    let var = g.offset(var, cell * cell)?;
    let floor = g.constant(DiffArray::new(vec![n, 2], vec![cell * cell; n * 2]).expect("sized"));
    let var = g.maximum(var, floor)?;
    let wh = g.sqrt(var)?;
    let cap = g.constant(DiffArray::new(vec![n, 2], vec![0.98; n * 2]).expect("sized"));
    let wh = g.minimum(wh, cap)?;
    let r = g.concat(&[mean, wh], 1)?;
    let lr = g.log(r)?;
    let one_minus = g.neg(r)?;
    let one_minus = g.offset(one_minus, 1.0)?;
    let l1m = g.log(one_minus)?;
    g.sub(lr, l1m)
}

impl Detector {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let c = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        c.text_encoder().init(&mut ps, c.vocab_size, &mut rng);
        c.vision_encoder().init(&mut ps, &mut rng);
        c.fusion().init(&mut ps, &mut rng);
        for l in 0..c.enc_layers {
            init_encoder_layer(&mut ps, &format!("enc.layer{l}"), c.d, c.d_ff, &mut rng);
        }
        ps.init_normal("dec.query", vec![c.n_pred, c.d], 1.0, &mut rng);
        for l in 0..c.dec_layers {
            let n = format!("dec.layer{l}");
            ps.init_layer_norm(&format!("{n}.ln_sa"), c.d);
            init_attention(&mut ps, &format!("{n}.sa"), c.d, &mut rng);
            ps.init_layer_norm(&format!("{n}.ln_ca"), c.d);
            init_attention(&mut ps, &format!("{n}.ca"), c.d, &mut rng);
            ps.init_layer_norm(&format!("{n}.ln_ff"), c.d);
            init_mlp(&mut ps, &format!("{n}.mlp"), c.d, c.d_ff, c.d, &mut rng);
        }
        ps.init_layer_norm("dec.ln_out", c.d);
        init_mlp(&mut ps, "head.box", c.d, c.d, 4, &mut rng);
        ps.init_linear("head.token", c.d, c.n_max, &mut rng);
        init_mlp(&mut ps, "head.mask_query", c.d, c.d, c.mask_dim, &mut rng);
        init_mlp(&mut ps, "head.mask_pixel", c.d, c.d, c.mask_dim, &mut rng);
        init_mlp(&mut ps, "head.ref_query", c.d, c.d, c.mask_dim, &mut rng);
        init_mlp(&mut ps, "head.ref_pixel", c.d, c.d, c.mask_dim, &mut rng);
        ps.init_linear("head.align_obj", c.d, c.align_dim, &mut rng);
        ps.init_linear("head.align_tok", c.d, c.align_dim, &mut rng);
        ps
    }

    /// Text encoder followed by VA; the output is where noun features are
    /// read and pronoun features replaced.
    pub fn text_stage(&self, g: &mut Graph, p: Params, prompt: &Prompt) -> Result<NodeId, ModelError> {
        if prompt.n_max() != self.cfg.n_max {
            return Err(ModelError::PromptLength {
                got: prompt.n_max(),
                expected: self.cfg.n_max,
            });
        }
        let ft = self.cfg.text_encoder().forward(g, p, prompt)?;
        match prompt.verb_index() {
            Some(v) if self.cfg.use_va => Ok(verb_attention(g, p, &self.cfg.fusion(), ft, prompt.content_len(), v)?),
            _ => Ok(ft),
        }
    }

    /// Vision encoder, BF, the joint encoder, decoder and heads.
    pub fn predict_stage(
        &self,
        g: &mut Graph,
        p: Params,
        image: &Image,
        prompt: &Prompt,
        ft: NodeId,
    ) -> Result<ForwardNodes, ModelError> {
        let (fv, grid) = self.cfg.vision_encoder().forward(g, p, image)?;
        let mask = prompt.content_mask();
        let has_text = prompt.content_len() > 0;
        let (fv, ft) = if self.cfg.use_bf {
            let fp = self.cfg.fusion();
            // an empty prompt has nothing for the visual side to attend to
            let fv2 = if has_text {
                fuse_visual(g, p, &fp, fv, ft, Some(&mask))?
            } else {
                fv
            };
            (fv2, fuse_text(g, p, &fp, fv, ft)?)
        } else {
            (fv, ft)
        };
        self.decode(g, p, fv, ft, &mask, grid)
    }

    /// Joint encoder over `[visual ; text]` and the query decoder.
    pub fn decode(
        &self,
        g: &mut Graph,
        p: Params,
        fv: NodeId,
        ft: NodeId,
        text_mask: &[bool],
        grid: (usize, usize),
    ) -> Result<ForwardNodes, ModelError> {
        let c = &self.cfg;
        let n_v = g.shape(fv)[0];
        let mut mem = g.concat(&[fv, ft], 0)?;
        let mem_mask: Vec<bool> = std::iter::repeat_n(true, n_v).chain(text_mask.iter().copied()).collect();
        for l in 0..c.enc_layers {
            mem = encoder_layer(g, p, &format!("enc.layer{l}"), mem, Some(&mem_mask), c.heads)?;
        }
        let vis_rows: Vec<usize> = (0..n_v).collect();
        let txt_rows: Vec<usize> = (n_v..n_v + text_mask.len()).collect();
        let vis_mem = g.gather(mem, &vis_rows)?;
        let txt_mem = g.gather(mem, &txt_rows)?;

        let mut x = p.get(g, "dec.query")?;
        let mut layer_logits = Vec::with_capacity(c.dec_layers);
        let mut out = x;
        for l in 0..c.dec_layers {
            let n = format!("dec.layer{l}");
            if c.decoder_self_attn {
                let h = layer_norm(g, p, &format!("{n}.ln_sa"), x)?;
                let a = attention(g, p, &format!("{n}.sa"), h, h, None, c.heads)?;
                x = g.add(x, a)?;
            }
            let h = layer_norm(g, p, &format!("{n}.ln_ca"), x)?;
            let a = attention(g, p, &format!("{n}.ca"), h, mem, Some(&mem_mask), c.heads)?;
            x = g.add(x, a)?;
            let h = layer_norm(g, p, &format!("{n}.ln_ff"), x)?;
            let m = mlp(g, p, &format!("{n}.mlp"), h)?;
            x = g.add(x, m)?;
            out = layer_norm(g, p, "dec.ln_out", x)?;
            layer_logits.push(linear(g, p, "head.token", out)?);
        }
        let logits = *layer_logits.last().expect("dec_layers ≥ 1");

        let mq = mlp(g, p, "head.mask_query", out)?;
        let mp = mlp(g, p, "head.mask_pixel", vis_mem)?;
        let coarse = g.matmul_nt(mq, mp)?;

        let b = mlp(g, p, "head.box", out)?;
        let rq = mlp(g, p, "head.ref_query", out)?;
        let rp = mlp(g, p, "head.ref_pixel", vis_mem)?;
        let spread = g.matmul_nt(rq, rp)?;
        let r = spatial_reference(g, spread, grid)?;
        let b = g.add(b, r)?;
        let boxes = g.sigmoid(b)?;
        let s = c.patch / 4;
        let mask_grid = (grid.0 * s, grid.1 * s);
        let up = g.constant(bilinear_matrix(grid.0, grid.1, mask_grid.0, mask_grid.1));
        let mask_logits = g.matmul(coarse, up)?;

        let o = linear(g, p, "head.align_obj", out)?;
        let obj_emb = g.normalize_rows(o, 1e-12)?;
        let t = linear(g, p, "head.align_tok", txt_mem)?;
        let tok_emb = g.normalize_rows(t, 1e-12)?;

        Ok(ForwardNodes {
            boxes,
            mask_logits,
            logits,
            layer_logits,
            obj_emb,
            tok_emb,
            mask_grid,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: Params, image: &Image, prompt: &Prompt) -> Result<ForwardNodes, ModelError> {
        let ft = self.text_stage(g, p, prompt)?;
        self.predict_stage(g, p, image, prompt, ft)
    }

    pub fn predict(&self, ps: &ParamStore, image: &Image, prompt: &Prompt) -> Result<Prediction, ModelError> {
        let mut g = Graph::new();
        let n = self.forward(&mut g, Params::new(ps, "", false), image, prompt)?;
        Ok(Prediction::from_nodes(&g, &n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang_vision::{build_prompt, pronoun_prompt, PromptForm, Pronoun, Vocabulary};
    use rand::Rng;

    fn small(vocab: &Vocabulary) -> ModelConfig {
        ModelConfig {
            d: 16,
            heads: 2,
            d_ff: 32,
            n_max: 12,
            vocab_size: vocab.len(),
            ..ModelConfig::default()
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::from_phrases(["sit comfortably on", "chair", "bed"])
    }

    fn image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::new(32, 32);
        img.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
        img
    }

    #[test]
    fn uniform_and_saturated_scores() {
        let u = DiffArray::matrix(1, 4, vec![0.3; 4]).unwrap();
        assert!((preference_scores(&u)[0] - 0.75).abs() < 1e-15);
        assert_eq!(binary_probs(&u)[0], (0.75, 0.25));
        let s = DiffArray::matrix(1, 4, vec![0.0, 0.0, 0.0, 30.0]).unwrap();
        assert!(preference_scores(&s)[0] < 1e-9);
    }

    #[test]
    fn score_formulas_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = DiffArray::matrix(1000, 7, (0..7000).map(|_| rng.random_range(-40.0..40.0)).collect()).unwrap();
        let s = preference_scores(&g);
        for (i, (pos, neg)) in binary_probs(&g).into_iter().enumerate() {
            assert!((pos + neg - 1.0).abs() < 1e-12);
            assert!((pos - s[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let v = vocab();
        let det = Detector::new(small(&v)).unwrap();
        let ps = det.init(4);
        let prompt = pronoun_prompt(&v, "sit comfortably on", &Pronoun::Something, 12).unwrap();
        let a = det.predict(&ps, &image(1), &prompt).unwrap();
        let b = det.predict(&det.init(4), &image(1), &prompt).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.boxes.len(), 8);
        assert_eq!(a.mask_grid, (8, 8));
        assert_eq!(a.mask_logits.shape(), &[8, 64]);
        assert_eq!(a.logits.shape(), &[8, 12]);
        assert_eq!(a.layer_logits.len(), 3);
        let s2 = preference_scores(&a.logits);
        for (x, y) in a.scores.iter().zip(&s2) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn boxes_stay_in_unit_square() {
        let v = vocab();
        let det = Detector::new(small(&v)).unwrap();
        let ps = det.init(2);
        let prompt = build_prompt(&v, "sit comfortably on", &PromptForm::VerbNoun, &["bed"], 1, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 0..40 {
            let mut img = Image::new(16, 16);
            let amp = 10f64.powi(k % 5);
            img.data.iter_mut().for_each(|x| *x = rng.random_range(-amp..amp));
            let pr = det.predict(&ps, &img, &prompt).unwrap();
            assert!(pr.boxes.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
            assert!(pr.scores.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn empty_prompt_runs() {
        let v = vocab();
        let det = Detector::new(small(&v)).unwrap();
        let ps = det.init(2);
        let prompt = build_prompt(&v, "sit comfortably on", &PromptForm::VerbNoun, &[], 0, 12).unwrap();
        let pr = det.predict(&ps, &image(2), &prompt).unwrap();
        assert!(pr.logits.all_finite());
    }

    #[test]
    fn self_attention_toggle_changes_trajectories() {
        let v = vocab();
        let cfg = small(&v);
        let on = Detector::new(cfg.clone()).unwrap();
        let off = Detector::new(ModelConfig {
            decoder_self_attn: false,
            ..cfg
        })
        .unwrap();
        let ps = on.init(5);
        let prompt = pronoun_prompt(&v, "sit comfortably on", &Pronoun::It, 12).unwrap();
        let a = on.predict(&ps, &image(3), &prompt).unwrap();
        let b = off.predict(&ps, &image(3), &prompt).unwrap();
        assert_eq!(a.layer_scores().len(), b.layer_scores().len());
        assert_ne!(a.layer_scores(), b.layer_scores());
    }

    #[test]
    fn pad_embedding_never_reaches_predictions() {
        let v = vocab();
        let det = Detector::new(small(&v)).unwrap();
        let mut ps = det.init(6);
        let prompt = build_prompt(&v, "sit comfortably on", &PromptForm::VerbNoun, &["chair"], 1, 12).unwrap();
        let img = image(4);
        let a = det.predict(&ps, &img, &prompt).unwrap();
        let table = ps.get_mut(TextEncoder::TABLE).unwrap();
        for x in &mut table.values_mut()[..16] {
            *x -= 2.5;
        }
        let b = det.predict(&ps, &img, &prompt).unwrap();
        for (x, y) in a.logits.values().iter().zip(b.logits.values()) {
            assert!((x - y).abs() < 1e-9);
        }
        for (x, y) in a.mask_logits.values().iter().zip(b.mask_logits.values()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn config_hash_tracks_fields() {
        let v = vocab();
        let a = small(&v);
        let b = ModelConfig { use_va: false, ..a.clone() };
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), small(&v).hash());
    }
}
