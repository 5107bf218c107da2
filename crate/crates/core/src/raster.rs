//! Small raster helpers shared by the mask head, the renderer and the
//! evaluator.

use crate::numerics::DiffArray;

/// Bilinear resize of a single-channel `h × w` grid with half-pixel centers
/// and edge clamping.
pub fn bilinear_resize(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    debug_assert_eq!(src.len(), h * w);
    let mut out = vec![0.0; out_h * out_w];
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bottom = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out[oy * out_w + ox] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

/// The linear map of [`bilinear_resize`] as a `(h·w) × (out_h·out_w)`
/// matrix, so a row vector times it is the resized grid.
pub fn bilinear_matrix(h: usize, w: usize, out_h: usize, out_w: usize) -> DiffArray {
    let n_in = h * w;
    let n_out = out_h * out_w;
    let mut m = vec![0.0; n_in * n_out];
    let mut basis = vec![0.0; n_in];
    for i in 0..n_in {
        basis[i] = 1.0;
        let col = bilinear_resize(&basis, h, w, out_h, out_w);
        m[i * n_out..(i + 1) * n_out].copy_from_slice(&col);
        basis[i] = 0.0;
    }
    DiffArray::matrix(n_in, n_out, m).expect("sized above")
}

/// Block downsample of a binary mask by `factor`: a cell is set when at
/// least half of its pixels are.
pub fn downsample_mask(mask: &[bool], h: usize, w: usize, factor: usize) -> Vec<bool> {
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![false; oh * ow];
    let half = factor * factor;
    for oy in 0..oh {
        for ox in 0..ow {
            let mut n = 0;
            for y in oy * factor..(oy + 1) * factor {
                for x in ox * factor..(ox + 1) * factor {
                    n += mask[y * w + x] as usize;
                }
            }
            out[oy * ow + ox] = 2 * n >= half;
        }
    }
    out
}
