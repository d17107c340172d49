//! Built-in toy corpora. Generated deterministically from a seed; no
//! external downloads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// A labeled toy dataset in model space [-1, 1].
pub struct Dataset {
    pub items: Vec<(Tensor, usize)>,
    pub shape: Vec<usize>,
    pub num_classes: usize,
}

/// 8x8 single-channel procedural shapes, two class labels:
/// class 0 = bars (horizontal or vertical), class 1 = crosses and disks.
pub fn shapes_corpus(n_items: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n_items);
    for i in 0..n_items {
        let mut px = vec![-1.0f64; 64];
        let label;
        match i % 3 {
            0 => {
                // bar
                label = 0;
                let pos = rng.gen_range(1..7);
                let horizontal = rng.gen_bool(0.5);
                for j in 0..8 {
                    let idx = if horizontal { pos * 8 + j } else { j * 8 + pos };
                    px[idx] = 1.0;
                }
            }
            1 => {
                // cross
                label = 1;
                let r = rng.gen_range(2..6);
                let c = rng.gen_range(2..6);
                for j in 0..8 {
                    px[r * 8 + j] = 1.0;
                    px[j * 8 + c] = 1.0;
                }
            }
            _ => {
                // disk
                label = 1;
                let cy = rng.gen_range(2..6) as f64;
                let cx = rng.gen_range(2..6) as f64;
                let rad = rng.gen_range(15..26) as f64 / 10.0;
                for y in 0..8 {
                    for x in 0..8 {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        if d2 <= rad * rad {
                            px[y * 8 + x] = 1.0;
                        }
                    }
                }
            }
        }
        items.push((Tensor::from_vec(vec![1, 8, 8], px), label));
    }
    Dataset { items, shape: vec![1, 8, 8], num_classes: 2 }
}

/// 2-D Gaussian mixture, one component per class, stored as `[1, 1, 2]`
/// tensors. The fastest corpus for end-to-end tests.
pub fn gaussian_mixture_corpus(n_items: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = [(-1.0, -1.0), (1.0, 1.0)];
    let std = 0.25;
    let mut items = Vec::with_capacity(n_items);
    for i in 0..n_items {
        let label = i % 2;
        let (mx, my) = means[label];
        let x = mx + std * normal(&mut rng);
        let y = my + std * normal(&mut rng);
        items.push((Tensor::from_vec(vec![1, 1, 2], vec![x, y]), label));
    }
    Dataset { items, shape: vec![1, 1, 2], num_classes: 2 }
}

/// Standard normal via Box-Muller, driven by the given RNG.
pub fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Tensor of iid standard normals.
pub fn normal_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal(rng)).collect();
    Tensor::from_vec(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpora_are_deterministic() {
        let a = shapes_corpus(12, 7);
        let b = shapes_corpus(12, 7);
        for ((ta, la), (tb, lb)) in a.items.iter().zip(&b.items) {
            assert!(ta.bit_eq(tb));
            assert_eq!(la, lb);
        }
        let g1 = gaussian_mixture_corpus(10, 3);
        let g2 = gaussian_mixture_corpus(10, 3);
        for ((ta, _), (tb, _)) in g1.items.iter().zip(&g2.items) {
            assert!(ta.bit_eq(tb));
        }
    }

    #[test]
    fn shapes_have_both_classes_and_range() {
        let d = shapes_corpus(30, 1);
        assert!(d.items.iter().any(|(_, l)| *l == 0));
        assert!(d.items.iter().any(|(_, l)| *l == 1));
        for (t, _) in &d.items {
            assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
