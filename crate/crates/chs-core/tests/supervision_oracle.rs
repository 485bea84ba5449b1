//! Brute-force oracle for the cross-head supervision math.
//!
//! The oracle re-derives the loss from the definitions with independent
//! code: it sorts deviations itself, applies the literal blended-target
//! formula `alpha*M.other + (1 - alpha*M).gt`, and reduces with plain loops.
//! The library path must agree to 1e-9 on integer-valued grids.

use chs_core::supervision::{chs_loss, select_mask, Reduction};
use ndarray::{Array2, Array3};

/// Independent evaluation of the supervised loss for a single image.
pub fn oracle_loss(
    conv: &Array2<f64>,
    tran: &Array2<f64>,
    gt: &Array2<f64>,
    delta: f64,
    alpha: f64,
) -> f64 {
    let (h, w) = gt.dim();
    let n = h * w;
    let k = (delta * n as f64).floor() as usize;

    let head_loss = |pred: &Array2<f64>, other: &Array2<f64>| -> f64 {
        // Deviation of this head's own prediction.
        let mut dev: Vec<(f64, usize)> = (0..n)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                ((pred[[r, c]] - gt[[r, c]]).abs(), i)
            })
            .collect();
        dev.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut mask = vec![0.0f64; n];
        for &(_, idx) in dev.iter().take(k) {
            mask[idx] = 1.0;
        }
        let mut sq = 0.0;
        for i in 0..n {
            let (r, c) = (i / w, i % w);
            let target = alpha * mask[i] * other[[r, c]] + (1.0 - alpha * mask[i]) * gt[[r, c]];
            sq += (pred[[r, c]] - target).powi(2);
        }
        sq / n as f64
    };

    head_loss(conv, tran) + head_loss(tran, conv)
}

fn to_batch(m: &Array2<f64>) -> Array3<f64> {
    let (h, w) = m.dim();
    m.clone().into_shape_with_order((1, h, w)).unwrap()
}

fn assert_matches_oracle(conv: &Array2<f64>, tran: &Array2<f64>, gt: &Array2<f64>, delta: f64, alpha: f64) {
    let expected = oracle_loss(conv, tran, gt, delta, alpha);
    let got = chs_loss(&to_batch(conv), &to_batch(tran), &to_batch(gt), delta, alpha, Reduction::Mean)
        .unwrap()
        .loss;
    assert!(
        (expected - got).abs() <= 1e-9,
        "oracle {expected} vs chs_loss {got} (delta {delta}, alpha {alpha})\nconv {conv:?}\ntran {tran:?}\ngt {gt:?}"
    );
}

/// Deterministic integer grids from a tiny linear congruential stream, so
/// instances (including ties) are reproducible without pulling rand in.
struct Lcg(u64);

impl Lcg {
    fn next_int(&mut self, bound: u64) -> u64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 33) % bound
    }

    fn grid(&mut self, h: usize, w: usize, values: u64) -> Array2<f64> {
        Array2::from_shape_simple_fn((h, w), || self.next_int(values) as f64)
    }
}

#[test]
fn oracle_agreement_on_random_2x2_and_3x3_integer_grids() {
    let mut lcg = Lcg(0x5eed);
    for &(h, w) in &[(2usize, 2usize), (3, 3)] {
        let n = h * w;
        for case in 0..400 {
            let conv = lcg.grid(h, w, 3);
            let tran = lcg.grid(h, w, 3);
            let gt = lcg.grid(h, w, 3);
            for j in 0..=n {
                let delta = j as f64 / n as f64;
                for alpha in [0.0, 0.5, 1.0] {
                    assert_matches_oracle(&conv, &tran, &gt, delta, alpha);
                }
            }
            let _ = case;
        }
    }
}

#[test]
fn oracle_agreement_on_all_equal_tie_grids() {
    for &(h, w) in &[(2usize, 2usize), (3, 3)] {
        let n = h * w;
        let conv = Array2::from_elem((h, w), 1.0);
        let tran = Array2::from_elem((h, w), 2.0);
        let gt = Array2::from_elem((h, w), 0.0);
        for j in 0..=n {
            for alpha in [0.0, 0.5, 1.0] {
                assert_matches_oracle(&conv, &tran, &gt, j as f64 / n as f64, alpha);
            }
        }
    }
}

#[test]
fn mask_cardinality_randomized_with_ties() {
    let mut lcg = Lcg(77);
    for case in 0..1000 {
        let h = 1 + (lcg.next_int(6) as usize);
        let w = 1 + (lcg.next_int(6) as usize);
        // Coarse integer values force plenty of ties.
        let dev = lcg.grid(h, w, 3);
        let delta = (lcg.next_int(101) as f64) / 100.0;
        let mask = select_mask(&dev, delta).unwrap();
        let expect = (delta * (h * w) as f64).floor() as usize;
        assert_eq!(mask.ones(), expect, "case {case}: {h}x{w} delta {delta}");
        assert_eq!(mask.grid().iter().filter(|&&v| v == 1).count(), expect);
    }
}
