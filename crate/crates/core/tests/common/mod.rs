//! Brute-force reference implementations shared by the oracle and
//! acceptance suites. Each is written from the definition, without
//! reusing library internals.
#![allow(dead_code)]

use edmae::masking::BinaryMask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ratio(n: u64, d: u64) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

/// `(accuracy, precision, recall, specificity, f1)` of class `c` treated
/// one-vs-rest, counted sample by sample.
pub fn class_oracle(pred: &[usize], truth: &[usize], c: usize) -> [f64; 5] {
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == c, t == c) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    [
        ratio(tp + tn, tp + tn + fp + fn_),
        ratio(tp, tp + fp),
        ratio(tp, tp + fn_),
        ratio(tn, tn + fp),
        ratio(2 * tp, 2 * tp + fp + fn_),
    ]
}

pub fn overall_accuracy_oracle(pred: &[usize], truth: &[usize]) -> f64 {
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64
}

pub fn dice_oracle(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for i in 0..a.data.len() {
        na += a.data[i] as usize;
        nb += b.data[i] as usize;
        inter += (a.data[i] && b.data[i]) as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

fn inside(m: &BinaryMask, y: isize, x: isize) -> bool {
    y >= 0 && x >= 0 && (y as usize) < m.height && (x as usize) < m.width && m.get(y as usize, x as usize)
}

/// Foreground pixels touching background or the border through a
/// 4-neighbour.
pub fn boundary_oracle(m: &BinaryMask) -> Vec<(isize, isize)> {
    let mut out = Vec::new();
    for y in 0..m.height as isize {
        for x in 0..m.width as isize {
            if inside(m, y, x)
                && [(-1, 0), (1, 0), (0, -1), (0, 1)]
                    .iter()
                    .any(|(dy, dx)| !inside(m, y + dy, x + dx))
            {
                out.push((y, x));
            }
        }
    }
    out
}

/// All-pairs Hausdorff distance between boundaries, in pixels.
pub fn hausdorff_oracle(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (ba, bb) = (boundary_oracle(a), boundary_oracle(b));
    let directed = |from: &[(isize, isize)], to: &[(isize, isize)]| {
        from.iter()
            .map(|(y, x)| {
                to.iter()
                    .map(|(v, u)| ((y - v) * (y - v) + (x - u) * (x - u)) as u64)
                    .min()
                    .unwrap()
            })
            .max()
            .unwrap()
    };
    (directed(&ba, &bb).max(directed(&bb, &ba)) as f64).sqrt()
}

/// Trapezoidal area under the ROC curve traced by lowering the threshold
/// through each distinct score.
pub fn auc_trapezoid(scores: &[f64], truth: &[bool]) -> f64 {
    let p = truth.iter().filter(|t| **t).count() as f64;
    let n = truth.len() as f64 - p;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut prev_fpr, mut prev_tpr, mut area) = (0.0, 0.0, 0.0);
    for th in thresholds {
        let tp = scores.iter().zip(truth).filter(|(s, t)| **s >= th && **t).count() as f64;
        let fp = scores.iter().zip(truth).filter(|(s, t)| **s >= th && !**t).count() as f64;
        let (fpr, tpr) = (fp / n, tp / p);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_fpr = fpr;
        prev_tpr = tpr;
    }
    area
}

/// A 16×16 mask built from up to three random rectangles; empty about one
/// time in ten.
pub fn random_mask(r: &mut ChaCha8Rng) -> BinaryMask {
    let mut data = vec![false; 256];
    if r.gen_bool(0.9) {
        for _ in 0..r.gen_range(1..=3) {
            let (y0, x0) = (r.gen_range(0..16), r.gen_range(0..16));
            let (y1, x1) = (r.gen_range(y0..16), r.gen_range(x0..16));
            for y in y0..=y1 {
                for x in x0..=x1 {
                    data[y * 16 + x] = true;
                }
            }
        }
    }
    BinaryMask::new(16, 16, data).unwrap()
}

pub fn random_labels(r: &mut ChaCha8Rng, n: usize, classes: usize) -> (Vec<usize>, Vec<usize>) {
    let truth: Vec<usize> = (0..n).map(|_| r.gen_range(0..classes)).collect();
    // Mostly-correct predictions so every confusion cell is exercised.
    let pred = truth
        .iter()
        .map(|&t| if r.gen_bool(0.6) { t } else { r.gen_range(0..classes) })
        .collect();
    (pred, truth)
}

/// Scores on a coarse grid so ties are common.
pub fn random_scores(r: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
    loop {
        let truth: Vec<bool> = (0..n).map(|_| r.gen_bool(0.4)).collect();
        if truth.contains(&true) && truth.contains(&false) {
            let scores = truth
                .iter()
                .map(|&t| (r.gen_range(0..20) as f64 + if t { 4.0 } else { 0.0 }) / 24.0)
                .collect();
            return (scores, truth);
        }
    }
}
