//! Bi-directional cross-modal fusion (BF) and verb attention (VA).

use rand::Rng;
use thiserror::Error;

use crate::nn::{attention, init_attention, layer_norm, AttentionError, ParamStore, Params};
use crate::numerics::{DiffArray, Graph, NodeId, NumericsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("text mask covers every token; nothing to attend to")]
    EmptyText,
    #[error("verb index {index} is not a content position (content length {content_len})")]
    VerbAtPad { index: usize, content_len: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl From<AttentionError> for FusionError {
    fn from(e: AttentionError) -> Self {
        match e {
            AttentionError::EmptyKeys => FusionError::EmptyText,
            AttentionError::Numerics(n) => FusionError::Numerics(n),
        }
    }
}

/// Parameter layout of both modules inside a [`ParamStore`].
///
/// BF: `fusion.gamma_v`, `fusion.gamma_t`, `fusion.bf.{ln_v,ln_t}`,
/// `fusion.bf.{v2t,t2v}.{q,k,v,o}`. VA: `fusion.va.{ln_q,ln_kv}`,
/// `fusion.va.attn.{q,k,v,o}`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub d: usize,
    pub heads: usize,
}

impl FusionParams {
    pub const GAMMA_V: &'static str = "fusion.gamma_v";
    pub const GAMMA_T: &'static str = "fusion.gamma_t";

    pub fn init(&self, ps: &mut ParamStore, rng: &mut impl Rng) {
        // gates start closed: training begins from the unfused model
        ps.insert(Self::GAMMA_V, DiffArray::zeros(vec![1]));
        ps.insert(Self::GAMMA_T, DiffArray::zeros(vec![1]));
        ps.init_layer_norm("fusion.bf.ln_v", self.d);
        ps.init_layer_norm("fusion.bf.ln_t", self.d);
        init_attention(ps, "fusion.bf.v2t", self.d, rng);
        init_attention(ps, "fusion.bf.t2v", self.d, rng);
        ps.init_layer_norm("fusion.va.ln_q", self.d);
        ps.init_layer_norm("fusion.va.ln_kv", self.d);
        init_attention(ps, "fusion.va.attn", self.d, rng);
    }
}

/// `F_v' = F_v + γ_v·Attn(LN(F_v), LN(F_t))` and the symmetric text update.
///
/// `text_mask[j]` marks content tokens. If it is `None` every token is a key.
pub fn bi_fusion(
    g: &mut Graph,
    p: Params,
    fp: &FusionParams,
    fv: NodeId,
    ft: NodeId,
    text_mask: Option<&[bool]>,
) -> Result<(NodeId, NodeId), FusionError> {
    let (fv_new, ft_new) = (
        fuse_visual(g, p, fp, fv, ft, text_mask)?,
        fuse_text(g, p, fp, fv, ft)?,
    );
    Ok((fv_new, ft_new))
}

/// Visual half of BF: visual queries attend over text keys.
pub fn fuse_visual(
    g: &mut Graph,
    p: Params,
    fp: &FusionParams,
    fv: NodeId,
    ft: NodeId,
    text_mask: Option<&[bool]>,
) -> Result<NodeId, FusionError> {
    if text_mask.is_some_and(|m| !m.iter().any(|&b| b)) {
        return Err(FusionError::EmptyText);
    }
    let lv = layer_norm(g, p, "fusion.bf.ln_v", fv)?;
    let lt = layer_norm(g, p, "fusion.bf.ln_t", ft)?;
    let a = attention(g, p, "fusion.bf.v2t", lv, lt, text_mask, fp.heads)?;
    let gamma = p.get(g, FusionParams::GAMMA_V)?;
    let a = g.mul(a, gamma)?;
    Ok(g.add(fv, a)?)
}

/// Text half of BF: text queries attend over every visual token.
pub fn fuse_text(g: &mut Graph, p: Params, fp: &FusionParams, fv: NodeId, ft: NodeId) -> Result<NodeId, FusionError> {
    let lv = layer_norm(g, p, "fusion.bf.ln_v", fv)?;
    let lt = layer_norm(g, p, "fusion.bf.ln_t", ft)?;
    let a = attention(g, p, "fusion.bf.t2v", lt, lv, None, fp.heads)?;
    let gamma = p.get(g, FusionParams::GAMMA_T)?;
    let a = g.mul(a, gamma)?;
    Ok(g.add(ft, a)?)
}

/// `F_t'' = F_t + CrossAttn(LN(F_t), LN(F_vb))` with the single verb token
/// as key and value.
pub fn verb_attention(
    g: &mut Graph,
    p: Params,
    fp: &FusionParams,
    ft: NodeId,
    content_len: usize,
    verb_index: usize,
) -> Result<NodeId, FusionError> {
    if verb_index >= content_len {
        return Err(FusionError::VerbAtPad {
            index: verb_index,
            content_len,
        });
    }
    let vb = g.gather(ft, &[verb_index])?;
    let q = layer_norm(g, p, "fusion.va.ln_q", ft)?;
    let kv = layer_norm(g, p, "fusion.va.ln_kv", vb)?;
    let a = attention(g, p, "fusion.va.attn", q, kv, None, fp.heads)?;
    Ok(g.add(ft, a)?)
}
