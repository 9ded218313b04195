//! Classification and segmentation scores.
//!
//! Per-class rates are one-vs-rest. "Mean" values are unweighted macro
//! averages over classes. A rate whose denominator is zero is reported as 0.

use std::fmt;

use crate::error::{EdmaeError, Result};
use crate::masking::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.fp + self.tn)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2TP / (2TP + FP + FN)`.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

/// `matrix[truth][pred]` counts.
pub fn confusion_matrix(pred: &[usize], truth: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if pred.is_empty() {
        return Err(EdmaeError::Data("no samples to score".into()));
    }
    if pred.len() != truth.len() {
        return Err(EdmaeError::Data(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (p, t) in pred.iter().zip(truth) {
        if *p >= classes || *t >= classes {
            return Err(EdmaeError::Label(format!("class id out of range for {classes} classes")));
        }
        m[*t][*p] += 1;
    }
    Ok(m)
}

pub fn one_vs_rest(matrix: &[Vec<u64>]) -> Vec<ConfusionCounts> {
    let total: u64 = matrix.iter().flatten().sum();
    (0..matrix.len())
        .map(|c| {
            let tp = matrix[c][c];
            let fn_ = matrix[c].iter().sum::<u64>() - tp;
            let fp = matrix.iter().map(|row| row[c]).sum::<u64>() - tp;
            ConfusionCounts {
                tp,
                fp,
                fn_,
                tn: total - tp - fp - fn_,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub counts: ConfusionCounts,
    /// One-vs-rest accuracy.
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentationScores {
    pub dice: f64,
    /// Mean over images where both masks are non-empty.
    pub hausdorff: Option<f64>,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    /// Fraction of samples whose predicted class equals the label.
    pub overall_accuracy: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_specificity: f64,
    pub mean_f1: f64,
    pub segmentation: Option<SegmentationScores>,
    pub warnings: Vec<String>,
}

pub fn classification_metrics(pred: &[usize], truth: &[usize], classes: usize) -> Result<MetricsReport> {
    let matrix = confusion_matrix(pred, truth, classes)?;
    let per_class: Vec<ClassMetrics> = one_vs_rest(&matrix)
        .into_iter()
        .enumerate()
        .map(|(class, c)| ClassMetrics {
            class,
            counts: c,
            accuracy: c.accuracy(),
            precision: c.precision(),
            recall: c.recall(),
            specificity: c.specificity(),
            f1: c.f1(),
            support: c.tp + c.fn_,
        })
        .collect();
    let k = classes as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k;
    let correct: u64 = (0..classes).map(|c| matrix[c][c]).sum();
    Ok(MetricsReport {
        overall_accuracy: correct as f64 / pred.len() as f64,
        mean_precision: mean(|c| c.precision),
        mean_recall: mean(|c| c.recall),
        mean_specificity: mean(|c| c.specificity),
        mean_f1: mean(|c| c.f1),
        per_class,
        segmentation: None,
        warnings: Vec::new(),
    })
}

fn check_same_shape(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(EdmaeError::Data(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    check_same_shape(pred, truth)?;
    let inter = pred.data.iter().zip(&truth.data).filter(|(a, b)| **a && **b).count();
    let denom = pred.count() + truth.count();
    Ok(if denom == 0 {
        1.0
    } else {
        2.0 * inter as f64 / denom as f64
    })
}

/// Foreground pixels with at least one 4-neighbour outside the mask
/// (pixels beyond the image border count as outside).
pub fn boundary(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height, mask.width);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !mask.get(y - 1, x)
                || !mask.get(y + 1, x)
                || !mask.get(y, x - 1)
                || !mask.get(y, x + 1);
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// Exact squared Euclidean distance transform to the `true` sites of a
/// `h × w` grid, separable lower-envelope method.
fn squared_distance_field(h: usize, w: usize, sites: &[bool]) -> Vec<f64> {
    const INF: f64 = 1e20;
    let mut f: Vec<f64> = sites.iter().map(|s| if *s { 0.0 } else { INF }).collect();
    let mut buf = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            buf[y] = f[y * w + x];
        }
        let d = envelope_1d(&buf[..h]);
        for y in 0..h {
            f[y * w + x] = d[y];
        }
    }
    for y in 0..h {
        let d = envelope_1d(&f[y * w..(y + 1) * w]);
        f[y * w..(y + 1) * w].copy_from_slice(&d);
    }
    f
}

fn envelope_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let sq = |q: usize| (q * q) as f64;
    let cross = |q: usize, p: usize| ((f[q] + sq(q)) - (f[p] + sq(p))) / (2.0 * (q as f64 - p as f64));
    for q in 1..n {
        let mut s = cross(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = cross(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    (0..n)
        .map(|q| {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            let dq = q as f64 - v[k] as f64;
            dq * dq + f[v[k]]
        })
        .collect()
}

fn directed(from: &[(usize, usize)], field: &[f64], w: usize) -> f64 {
    from.iter().map(|(y, x)| field[y * w + x]).fold(0.0, f64::max)
}

/// Symmetric Hausdorff distance between mask boundaries, in `spacing` units
/// per pixel.
pub fn hausdorff(pred: &BinaryMask, truth: &BinaryMask, spacing: f64) -> Result<f64> {
    check_same_shape(pred, truth)?;
    if pred.count() == 0 || truth.count() == 0 {
        return Err(EdmaeError::Metric("Hausdorff distance undefined for an empty mask".into()));
    }
    let (h, w) = (pred.height, pred.width);
    let (bp, bt) = (boundary(pred), boundary(truth));
    let sites = |pts: &[(usize, usize)]| {
        let mut s = vec![false; h * w];
        for (y, x) in pts {
            s[y * w + x] = true;
        }
        s
    };
    let field_p = squared_distance_field(h, w, &sites(&bp));
    let field_t = squared_distance_field(h, w, &sites(&bt));
    let d2 = directed(&bp, &field_t, w).max(directed(&bt, &field_p, w));
    Ok(d2.sqrt() * spacing)
}

/// Rank (Mann–Whitney) area under the ROC curve; tied scores count one half.
pub fn auc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(EdmaeError::Data(format!("{} scores for {} labels", scores.len(), truth.len())));
    }
    let pos = truth.iter().filter(|t| **t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EdmaeError::Metric("AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|k| truth[**k]).count();
        rank_sum += mid * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Pixel-level report over a set of predicted masks.
///
/// Per-class rows are the two-class pixel confusion counts pooled over all
/// images. Dice is the per-image mean; if no ground-truth mask has any
/// foreground it is reported as 0 with a warning. Hausdorff averages images
/// where both masks are non-empty. AUC pools every pixel's foreground score.
pub fn segmentation_report(
    preds: &[BinaryMask],
    truths: &[BinaryMask],
    scores: &[f64],
    spacing: f64,
) -> Result<MetricsReport> {
    if preds.len() != truths.len() {
        return Err(EdmaeError::Data(format!("{} predictions for {} masks", preds.len(), truths.len())));
    }
    if preds.is_empty() {
        return Err(EdmaeError::Data("no masks to evaluate".into()));
    }
    let mut pred_px = Vec::new();
    let mut truth_px = Vec::new();
    let mut dices = Vec::with_capacity(preds.len());
    let mut hds = Vec::new();
    for (p, t) in preds.iter().zip(truths) {
        dices.push(dice(p, t)?);
        if p.count() > 0 && t.count() > 0 {
            hds.push(hausdorff(p, t, spacing)?);
        }
        pred_px.extend(p.data.iter().map(|&b| b as usize));
        truth_px.extend(t.data.iter().map(|&b| b as usize));
    }
    let mut report = classification_metrics(&pred_px, &truth_px, 2)?;
    let truth_fg: Vec<bool> = truth_px.iter().map(|&c| c == 1).collect();
    let mut dice_mean = dices.iter().sum::<f64>() / dices.len() as f64;
    if !truth_fg.contains(&true) {
        dice_mean = 0.0;
        report
            .warnings
            .push("no foreground in any ground-truth mask; Dice is undefined and reported as 0".into());
    }
    let skipped = preds.len() - hds.len();
    if skipped > 0 {
        report.warnings.push(format!(
            "Hausdorff excluded for {skipped} of {} images with an empty mask",
            preds.len()
        ));
    }
    let hausdorff = (!hds.is_empty()).then(|| hds.iter().sum::<f64>() / hds.len() as f64);
    let auc = if scores.len() == truth_fg.len() {
        match auc(scores, &truth_fg) {
            Ok(a) => Some(a),
            Err(EdmaeError::Metric(m)) => {
                report.warnings.push(format!("AUC not reported: {m}"));
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        return Err(EdmaeError::Data(format!(
            "{} scores for {} pixels",
            scores.len(),
            truth_fg.len()
        )));
    };
    report.segmentation = Some(SegmentationScores {
        dice: dice_mean,
        hausdorff,
        auc,
    });
    Ok(report)
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "class,accuracy,precision,recall,specificity,f1,support,dice,hausdorff,auc";

    /// One row per class, then a `mean` row holding the macro means, with
    /// the overall accuracy in its accuracy column and any segmentation
    /// scores in the trailing columns.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for c in &self.per_class {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{},,,\n",
                c.class, c.accuracy, c.precision, c.recall, c.specificity, c.f1, c.support
            ));
        }
        let support: u64 = self.per_class.iter().map(|c| c.support).sum();
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let (dice, hd, auc) = match &self.segmentation {
            Some(sg) => (format!("{:.6}", sg.dice), opt(sg.hausdorff), opt(sg.auc)),
            None => Default::default(),
        };
        s.push_str(&format!(
            "mean,{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{}\n",
            self.overall_accuracy,
            self.mean_precision,
            self.mean_recall,
            self.mean_specificity,
            self.mean_f1,
            support,
            dice,
            hd,
            auc
        ));
        s
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>6} {:>9} {:>9} {:>9} {:>11} {:>9} {:>8}",
            "class", "accuracy", "precision", "recall", "specificity", "f1", "support"
        )?;
        for c in &self.per_class {
            writeln!(
                f,
                "{:>6} {:>9.4} {:>9.4} {:>9.4} {:>11.4} {:>9.4} {:>8}",
                c.class, c.accuracy, c.precision, c.recall, c.specificity, c.f1, c.support
            )?;
        }
        writeln!(
            f,
            "{:>6} {:>9.4} {:>9.4} {:>9.4} {:>11.4} {:>9.4}",
            "mean", self.overall_accuracy, self.mean_precision, self.mean_recall, self.mean_specificity, self.mean_f1
        )?;
        if let Some(sg) = &self.segmentation {
            write!(f, "dice {:.4}", sg.dice)?;
            match sg.hausdorff {
                Some(hd) => write!(f, "  hausdorff {hd:.4}")?,
                None => write!(f, "  hausdorff n/a")?,
            }
            match sg.auc {
                Some(a) => writeln!(f, "  auc {a:.4}")?,
                None => writeln!(f, "  auc n/a")?,
            }
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::empty(h, w);
        for (y, x) in on {
            m.data[y * w + x] = true;
        }
        m
    }

    #[test]
    fn segmentation_report_conventions() {
        let fg = mask(4, 4, &[(1, 1), (1, 2)]);
        let empty = BinaryMask::empty(4, 4);
        let scores: Vec<f64> = (0..32).map(|i| i as f64).collect();
        let r = segmentation_report(&[fg.clone(), empty.clone()], &[fg.clone(), empty.clone()], &scores, 1.0).unwrap();
        let sg = r.segmentation.unwrap();
        assert_eq!(sg.dice, 1.0);
        assert_eq!(sg.hausdorff, Some(0.0));
        assert_eq!(r.warnings.len(), 1);

        let r = segmentation_report(&[empty.clone()], &[empty], &[0.5; 16], 1.0).unwrap();
        let sg = r.segmentation.unwrap();
        assert_eq!((sg.dice, sg.hausdorff, sg.auc), (0.0, None, None));
        assert_eq!(r.warnings.len(), 3);
    }

    #[test]
    fn perfect_predictions() {
        let labels = [0, 1, 2, 2, 1, 0];
        let r = classification_metrics(&labels, &labels, 3).unwrap();
        assert_eq!(r.overall_accuracy, 1.0);
        assert!(r.per_class.iter().all(|c| c.f1 == 1.0));
    }

    #[test]
    fn single_class_arithmetic() {
        let c = ConfusionCounts { tp: 1, fp: 1, fn_: 0, tn: 5 };
        assert_eq!(c.precision(), 0.5);
        assert_eq!(c.recall(), 1.0);
        assert!((c.f1() - 2.0 / 3.0).abs() < 1e-15);
        assert!((c.specificity() - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(classification_metrics(&[], &[], 2), Err(EdmaeError::Data(_))));
    }

    #[test]
    fn dice_cases() {
        let a: Vec<_> = (2..5).flat_map(|y| (2..5).map(move |x| (y, x))).collect();
        let b: Vec<_> = a.iter().map(|(y, x)| (*y, x + 1)).collect();
        let (ma, mb) = (mask(8, 8, &a), mask(8, 8, &b));
        assert!((dice(&ma, &mb).unwrap() - 12.0 / 18.0).abs() < 1e-15);
        assert_eq!(dice(&ma, &ma).unwrap(), 1.0);
        assert_eq!(dice(&ma, &mask(8, 8, &[(7, 7)])).unwrap(), 0.0);
        assert_eq!(dice(&BinaryMask::empty(4, 4), &BinaryMask::empty(4, 4)).unwrap(), 1.0);
        assert_eq!(dice(&BinaryMask::empty(4, 4), &mask(4, 4, &[(0, 0)])).unwrap(), 0.0);
        assert!(dice(&ma, &BinaryMask::empty(4, 4)).is_err());
    }

    #[test]
    fn hausdorff_cases() {
        let a = mask(8, 8, &[(0, 0)]);
        let b = mask(8, 8, &[(3, 4)]);
        assert_eq!(hausdorff(&a, &b, 1.0).unwrap(), 5.0);
        assert_eq!(hausdorff(&a, &b, 0.5).unwrap(), 2.5);
        assert_eq!(hausdorff(&b, &b, 1.0).unwrap(), 0.0);
        assert!(matches!(hausdorff(&a, &BinaryMask::empty(8, 8), 1.0), Err(EdmaeError::Metric(_))));
    }

    #[test]
    fn auc_cases() {
        let truth = [false, false, true, true];
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &truth).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &truth).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &truth).unwrap(), 0.0);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(EdmaeError::Metric(_))));
    }

    #[test]
    fn csv_shape() {
        let r = classification_metrics(&[0, 1, 1], &[0, 1, 0], 2).unwrap();
        let csv = r.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("mean,"));
        assert_eq!(lines[0].split(',').count(), lines[3].split(',').count());
    }
}
