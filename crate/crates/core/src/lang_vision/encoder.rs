use rand::Rng;

use super::prompt::Prompt;
use super::LangError;
use crate::nn::{encoder_layer, init_encoder_layer, linear, sinusoid_1d, sinusoid_2d, ParamStore, Params};
use crate::numerics::{DiffArray, Graph, NodeId};

/// Row-major `H × W × 3` image with channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

fn nearest_multiple(v: usize, m: usize) -> usize {
    let down = v / m * m;
    if down == 0 || v - down > m / 2 {
        down + m
    } else {
        down
    }
}

/// Cuts the image into non-overlapping `patch × patch` tiles, one row per
/// tile in raster order, each flattened as (y, x, channel).
pub fn patchify(image: &Image, patch: usize) -> Result<DiffArray, LangError> {
    let (h, w) = (image.height, image.width);
    if patch == 0 || h % patch != 0 || w % patch != 0 || h == 0 || w == 0 {
        let p = patch.max(1);
        return Err(LangError::BadImageSize {
            height: h,
            width: w,
            patch,
            nearest: (nearest_multiple(h, p), nearest_multiple(w, p)),
        });
    }
    let (rows, cols) = (h / patch, w / patch);
    let dim = patch * patch * 3;
    let mut out = vec![0.0; rows * cols * dim];
    for r in 0..rows {
        for c in 0..cols {
            let base = (r * cols + c) * dim;
            for y in 0..patch {
                let src = ((r * patch + y) * w + c * patch) * 3;
                let dst = base + y * patch * 3;
                out[dst..dst + patch * 3].copy_from_slice(&image.data[src..src + patch * 3]);
            }
        }
    }
    Ok(DiffArray::matrix(rows * cols, dim, out)?)
}

/// Subtracts each channel's mean and divides by the pooled standard
/// deviation, floored at 0.05 so flat images are not blown up.
pub fn standardize(image: &Image) -> Image {
    let n = (image.height * image.width).max(1) as f64;
    let mut mean = [0.0; 3];
    for px in image.data.chunks(3) {
        for c in 0..3 {
            mean[c] += px[c] / n;
        }
    }
    let var = image
        .data
        .chunks(3)
        .map(|px| (0..3).map(|c| (px[c] - mean[c]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / (3.0 * n);
    let inv = 1.0 / var.sqrt().max(0.05);
    let data = image.data.chunks(3).flat_map(|px| (0..3).map(move |c| (px[c] - mean[c]) * inv)).collect();
    Image { data, ..image.clone() }
}

/// Encoded task description: `L × C` features plus the content mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures {
    pub features: DiffArray,
    pub mask: Vec<bool>,
}

/// Encoded image: `N_v × C` features on a `rows × cols` patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures {
    pub features: DiffArray,
    pub grid: (usize, usize),
}

/// Embedding table, 1-D sinusoidal positions and pre-norm self-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
}

impl TextEncoder {
    pub const TABLE: &'static str = "text.embed";

    pub fn init(&self, ps: &mut ParamStore, vocab_size: usize, rng: &mut impl Rng) {
        ps.init_normal(Self::TABLE, vec![vocab_size, self.d], 0.5, rng);
        for l in 0..self.layers {
            init_encoder_layer(ps, &format!("text.layer{l}"), self.d, self.d_ff, rng);
        }
    }

    /// Graph-level forward pass; returns the `n_max × d` feature node.
    pub fn forward(&self, g: &mut Graph, p: Params, prompt: &Prompt) -> Result<NodeId, LangError> {
        let table = p.get(g, Self::TABLE)?;
        self.forward_with_table(g, p, table, prompt)
    }

    /// As [`TextEncoder::forward`] with an explicit embedding-table node.
    pub fn forward_with_table(
        &self,
        g: &mut Graph,
        p: Params,
        table: NodeId,
        prompt: &Prompt,
    ) -> Result<NodeId, LangError> {
        let x = g.gather(table, prompt.ids())?;
        let pos = g.constant(sinusoid_1d(prompt.n_max(), self.d));
        let mut x = g.add(x, pos)?;
        // a prompt without content has no keys to mask against
        let mask = prompt.content_mask();
        let mask = (prompt.content_len() > 0).then_some(mask.as_slice());
        for l in 0..self.layers {
            x = encoder_layer(g, p, &format!("text.layer{l}"), x, mask, self.heads)?;
        }
        Ok(x)
    }

    pub fn encode(&self, ps: &ParamStore, prompt: &Prompt) -> Result<TextFeatures, LangError> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, Params::new(ps, "", false), prompt)?;
        Ok(TextFeatures {
            features: g.value(out).clone(),
            mask: prompt.content_mask(),
        })
    }
}

/// Linear patch projection, 2-D sinusoidal positions and self-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionEncoder {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub patch: usize,
}

impl VisionEncoder {
    pub fn init(&self, ps: &mut ParamStore, rng: &mut impl Rng) {
        ps.init_linear("vision.patch", self.patch * self.patch * 3, self.d, rng);
        for l in 0..self.layers {
            init_encoder_layer(ps, &format!("vision.layer{l}"), self.d, self.d_ff, rng);
        }
    }

    /// Patch projection of the standardized image without positions, `N_v × d`.
    pub fn embed_patches(&self, g: &mut Graph, p: Params, image: &Image) -> Result<(NodeId, (usize, usize)), LangError> {
        let patches = patchify(&standardize(image), self.patch)?;
        let grid = (image.height / self.patch, image.width / self.patch);
        let x = g.constant(patches);
        Ok((linear(g, p, "vision.patch", x)?, grid))
    }

    pub fn forward(&self, g: &mut Graph, p: Params, image: &Image) -> Result<(NodeId, (usize, usize)), LangError> {
        let (x, grid) = self.embed_patches(g, p, image)?;
        let pos = g.constant(sinusoid_2d(grid.0, grid.1, self.d));
        let mut x = g.add(x, pos)?;
        for l in 0..self.layers {
            x = encoder_layer(g, p, &format!("vision.layer{l}"), x, None, self.heads)?;
        }
        Ok((x, grid))
    }

    pub fn encode(&self, ps: &ParamStore, image: &Image) -> Result<VisualFeatures, LangError> {
        let mut g = Graph::new();
        let (out, grid) = self.forward(&mut g, Params::new(ps, "", false), image)?;
        Ok(VisualFeatures {
            features: g.value(out).clone(),
            grid,
        })
    }
}
