//! Paired-seed ablations over pretraining settings, scored by downstream
//! classification.

use std::fmt;

use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::Result;
use crate::metrics::MetricsReport;
use crate::train::{finetune_classify, pretrain, Control};

pub const SWEEP_RATIOS: [f64; 5] = [0.25, 0.50, 0.60, 0.75, 0.90];

pub struct AblationData<'a> {
    pub pretrain: &'a Dataset,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
}

/// Pretrains with `pre` (unless `pre` is `None`, meaning random init), then
/// fine-tunes with `fine`. Both configs must carry the same seed for runs to
/// be paired.
pub fn run_arm(pre: Option<&TrainConfig>, fine: &TrainConfig, data: &AblationData<'_>) -> Result<MetricsReport> {
    let encoder = match pre {
        Some(cfg) => Some(pretrain(cfg, &data.pretrain.images, Control::default())?.model.teacher),
        None => None,
    };
    Ok(finetune_classify(fine, encoder.as_ref(), data.train, data.test, Control::default())?.report)
}

fn with_seed(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..cfg.clone() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub ratio: f64,
    /// Mean F1 per seed, in seed order.
    pub f1: Vec<f64>,
}

impl SweepRow {
    pub fn mean_f1(&self) -> f64 {
        self.f1.iter().sum::<f64>() / self.f1.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn row(&self, ratio: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.ratio == ratio)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("mask_ratio,mean_f1");
        for seed in &self.seeds {
            s.push_str(&format!(",f1_seed{seed}"));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{:.2},{:.6}", r.ratio, r.mean_f1()));
            for f in &r.f1 {
                s.push_str(&format!(",{f:.6}"));
            }
            s.push('\n');
        }
        s
    }
}

impl fmt::Display for SweepTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>10} {:>9}", "mask_ratio", "mean_f1")?;
        for r in &self.rows {
            writeln!(f, "{:>10.2} {:>9.4}", r.ratio, r.mean_f1())?;
        }
        Ok(())
    }
}

pub fn mask_sweep(
    pre: &TrainConfig,
    fine: &TrainConfig,
    data: &AblationData<'_>,
    ratios: &[f64],
    seeds: &[u64],
) -> Result<SweepTable> {
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let mut f1 = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let p = TrainConfig {
                mask_ratio: ratio,
                ..with_seed(pre, seed)
            };
            f1.push(run_arm(Some(&p), &with_seed(fine, seed), data)?.mean_f1);
        }
        rows.push(SweepRow { ratio, f1 });
    }
    Ok(SweepTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

/// Seed-averaged classification metrics of one arm.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricRow {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
}

impl MetricRow {
    pub const COLUMNS: [&'static str; 5] = ["accuracy", "precision", "recall", "specificity", "f1"];

    pub fn mean_of(reports: &[MetricsReport]) -> Self {
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self {
            accuracy: avg(|r| r.overall_accuracy),
            precision: avg(|r| r.mean_precision),
            recall: avg(|r| r.mean_recall),
            specificity: avg(|r| r.mean_specificity),
            f1: avg(|r| r.mean_f1),
        }
    }

    pub fn values(&self) -> [f64; 5] {
        [self.accuracy, self.precision, self.recall, self.specificity, self.f1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTable {
    /// `(align_weight, seed-mean metrics, per-seed reports)` for λ=0 then λ=1.
    pub rows: Vec<(f64, MetricRow, Vec<MetricsReport>)>,
}

impl AlignmentTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("align_weight,{}\n", MetricRow::COLUMNS.join(","));
        for (w, m, _) in &self.rows {
            let vals: Vec<String> = m.values().iter().map(|v| format!("{v:.6}")).collect();
            s.push_str(&format!("{w},{}\n", vals.join(",")));
        }
        s
    }
}

impl fmt::Display for AlignmentTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>12}", "align_weight")?;
        for c in MetricRow::COLUMNS {
            write!(f, " {c:>11}")?;
        }
        writeln!(f)?;
        for (w, m, _) in &self.rows {
            write!(f, "{w:>12}")?;
            for v in m.values() {
                write!(f, " {v:>11.4}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub fn alignment(pre: &TrainConfig, fine: &TrainConfig, data: &AblationData<'_>, seeds: &[u64]) -> Result<AlignmentTable> {
    let mut rows = Vec::with_capacity(2);
    for weight in [0.0, 1.0] {
        let mut reports = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut p = with_seed(pre, seed);
            p.model.align_weight = weight;
            reports.push(run_arm(Some(&p), &with_seed(fine, seed), data)?);
        }
        rows.push((weight, MetricRow::mean_of(&reports), reports));
    }
    Ok(AlignmentTable { rows })
}
