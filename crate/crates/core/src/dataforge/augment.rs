use rand::Rng;

use crate::detector::Object;
use crate::lang_vision::Image;
use crate::raster::bilinear_resize;

use super::dataset::mask_bbox;

/// Scaled training-time augmentation: horizontal flip, random crop and a
/// shortest-side resize rounded to the patch size.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub crop_prob: f64,
    /// Smallest crop side as a fraction of the image side.
    pub min_crop: f64,
    pub short_side: (usize, usize),
    pub patch: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            crop_prob: 0.5,
            min_crop: 0.6,
            short_side: (48, 80),
            patch: 8,
        }
    }
}

fn round_to(v: f64, m: usize) -> usize {
    ((v / m as f64).round() as usize).max(1) * m
}

/// Returns the augmented image and the surviving objects with boxes
/// recomputed from their transformed masks.
pub fn augment(image: &Image, objects: &[Object], cfg: &AugmentConfig, rng: &mut impl Rng) -> (Image, Vec<Object>) {
    let (mut h, mut w) = (image.height, image.width);
    let mut channels: Vec<Vec<f64>> = (0..3).map(|c| image.data.iter().skip(c).step_by(3).copied().collect()).collect();
    let mut masks: Vec<Vec<bool>> = objects.iter().map(|o| o.mask.clone()).collect();

    if rng.random_bool(cfg.flip_prob) {
        let flip = |v: &mut Vec<f64>| {
            for row in v.chunks_mut(w) {
                row.reverse();
            }
        };
        channels.iter_mut().for_each(flip);
        for m in &mut masks {
            for row in m.chunks_mut(w) {
                row.reverse();
            }
        }
    }

    if rng.random_bool(cfg.crop_prob) {
        let ch = rng.random_range(((h as f64 * cfg.min_crop).ceil() as usize).max(1)..=h);
        let cw = rng.random_range(((w as f64 * cfg.min_crop).ceil() as usize).max(1)..=w);
        let y0 = rng.random_range(0..=h - ch);
        let x0 = rng.random_range(0..=w - cw);
        let crop = |src: &[f64]| -> Vec<f64> {
            (y0..y0 + ch).flat_map(|y| src[y * w + x0..y * w + x0 + cw].to_vec()).collect()
        };
        channels = channels.iter().map(|c| crop(c)).collect();
        masks = masks
            .iter()
            .map(|m| (y0..y0 + ch).flat_map(|y| m[y * w + x0..y * w + x0 + cw].to_vec()).collect())
            .collect();
        h = ch;
        w = cw;
    }

    let target = rng.random_range(cfg.short_side.0..=cfg.short_side.1) as f64;
    let scale = target / h.min(w) as f64;
    let (oh, ow) = (round_to(h as f64 * scale, cfg.patch), round_to(w as f64 * scale, cfg.patch));
    let mut out = Image::new(oh, ow);
    let resized: Vec<Vec<f64>> = channels.iter().map(|c| bilinear_resize(c, h, w, oh, ow)).collect();
    for i in 0..oh * ow {
        for c in 0..3 {
            out.data[i * 3 + c] = resized[c][i].clamp(0.0, 1.0);
        }
    }
    let mut kept = Vec::new();
    for (o, m) in objects.iter().zip(masks) {
        // nearest-neighbor keeps masks binary
        let mut nm = vec![false; oh * ow];
        for y in 0..oh {
            let sy = ((y as f64 + 0.5) * h as f64 / oh as f64) as usize;
            for x in 0..ow {
                let sx = ((x as f64 + 0.5) * w as f64 / ow as f64) as usize;
                nm[y * ow + x] = m[sy.min(h - 1) * w + sx.min(w - 1)];
            }
        }
        if let Some(bbox) = mask_bbox(&nm, oh, ow) {
            kept.push(Object {
                bbox,
                mask: nm,
                category: o.category,
            });
        }
    }
    (out, kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene() -> (Image, Vec<Object>) {
        let mut img = Image::new(64, 64);
        let mut mask = vec![false; 64 * 64];
        for y in 10..20 {
            for x in 4..12 {
                mask[y * 64 + x] = true;
                img.set_pixel(y, x, [1.0, 0.0, 0.0]);
            }
        }
        let bbox = mask_bbox(&mask, 64, 64).unwrap();
        (img, vec![Object { bbox, mask, category: 2 }])
    }

    #[test]
    fn flip_only_mirrors_the_box() {
        let (img, objs) = scene();
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            crop_prob: 0.0,
            short_side: (64, 64),
            ..AugmentConfig::default()
        };
        let (out, o) = augment(&img, &objs, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!((out.height, out.width), (64, 64));
        assert!((o[0].bbox[0] - (1.0 - objs[0].bbox[0])).abs() < 1e-12);
        assert_eq!(o[0].bbox[1..], objs[0].bbox[1..]);
        assert_eq!(out.pixel(15, 55), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn outputs_are_patch_multiples_with_consistent_boxes() {
        let (img, objs) = scene();
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..40 {
            let (out, o) = augment(&img, &objs, &cfg, &mut rng);
            assert_eq!(out.height % 8, 0);
            assert_eq!(out.width % 8, 0);
            assert!(out.height.min(out.width) >= 48 && out.height.min(out.width) <= 80);
            for ob in &o {
                assert_eq!(mask_bbox(&ob.mask, out.height, out.width).unwrap(), ob.bbox);
            }
        }
    }
}
