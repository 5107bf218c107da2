use serde::{Deserialize, Serialize};

/// Uncompressed run-length mask in the COCO convention: pixels are read in
/// column-major order and the first run counts background pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: Vec<usize>,
}

impl Rle {
    /// Encodes a row-major mask.
    pub fn encode(mask: &[bool], height: usize, width: usize) -> Self {
        debug_assert_eq!(mask.len(), height * width);
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0usize;
        for x in 0..width {
            for y in 0..height {
                let v = mask[y * width + x];
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        Self {
            size: [height, width],
            counts,
        }
    }

    /// Row-major mask; `None` when the runs do not cover the image exactly.
    pub fn decode(&self) -> Option<Vec<bool>> {
        let [h, w] = self.size;
        if self.counts.iter().sum::<usize>() != h * w {
            return None;
        }
        let mut out = vec![false; h * w];
        let mut k = 0usize;
        let mut value = false;
        for &c in &self.counts {
            for _ in 0..c {
                let (x, y) = (k / h, k % h);
                out[y * w + x] = value;
                k += 1;
            }
            value = !value;
        }
        Some(out)
    }

    pub fn area(&self) -> usize {
        self.counts.iter().skip(1).step_by(2).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn column_major_fixture() {
        // 2x3, set pixels (0,1) and (1,1): column 1 is foreground
        let m = [false, true, false, false, true, false];
        let r = Rle::encode(&m, 2, 3);
        assert_eq!(r.counts, vec![2, 2, 2]);
        assert_eq!(r.area(), 2);
        assert_eq!(r.decode().unwrap(), m);
        assert_eq!(Rle::encode(&[true; 4], 2, 2).counts, vec![0, 4]);
        assert_eq!(Rle { size: [2, 2], counts: vec![1, 1] }.decode(), None);
    }

    proptest! {
        #[test]
        fn round_trip(h in 1usize..9, w in 1usize..9, bits in proptest::collection::vec(any::<bool>(), 64)) {
            let m = &bits[..h * w];
            let r = Rle::encode(m, h, w);
            prop_assert_eq!(r.decode().unwrap(), m.to_vec());
            prop_assert_eq!(r.area(), m.iter().filter(|b| **b).count());
        }
    }
}
