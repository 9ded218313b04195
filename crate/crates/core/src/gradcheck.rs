//! Central-difference gradient checks for every differentiable op.
//!
//! Checks run in f64 on small random instances. Non-scalar op outputs are
//! reduced by an MSE against a random target, so the upstream gradient
//! reaching the op under test is non-uniform. Coordinates whose perturbation
//! flips any ReLU sign are skipped.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{EdmaeError, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub seeds: u64,
    pub eps: f64,
    pub tolerance: f64,
    /// Op whose backward rule is deliberately corrupted.
    pub fault: Option<OpKind>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seeds: 20,
            eps: 1e-3,
            tolerance: 1e-4,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpReport {
    pub op: OpKind,
    pub seeds: u64,
    /// Coordinates compared across all seeds.
    pub checked: usize,
    pub skipped: usize,
    pub worst_rel_error: f64,
}

impl OpReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.worst_rel_error < tolerance && self.checked > 0
    }
}

/// Ops with a backward rule, in report order.
pub fn registered() -> Vec<OpKind> {
    OpKind::ALL.into_iter().filter(|k| *k != OpKind::Leaf).collect()
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

fn randn(r: &mut rng::Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.sample::<f64, _>(StandardNormal))
}

/// `mse(out, target)` with a fixed random target of `out`'s shape.
fn reduce(g: &mut Graph<f64>, out: Var, target: &Tensor<f64>) -> Result<Var> {
    let t = g.constant(target.clone())?;
    g.mse_loss(out, t)
}

fn case(op: OpKind, seed: u64) -> Result<Case> {
    let mut r = rng::stream(rng::derive_indexed(0x6772_6164, op.name(), seed), "gradcheck");
    let odd = seed % 2 == 1;
    let case = match op {
        OpKind::Conv2d => {
            let (stride, pad, k) = if odd { (2, 1, 3) } else { (1, 1, 3) };
            let x = randn(&mut r, &[2, 3, 6, 6]);
            let w = randn(&mut r, &[4, 3, k, k]);
            let b = randn(&mut r, &[4]);
            let oh = (6 + 2 * pad - k) / stride + 1;
            let target = randn(&mut r, &[2, 4, oh, oh]);
            Case {
                inputs: vec![x, w, b],
                build: Box::new(move |g, v| {
                    let y = g.conv2d(v[0], v[1], v[2], stride, pad)?;
                    reduce(g, y, &target)
                }),
            }
        }
        OpKind::Upsample => {
            let f = if odd { 3 } else { 2 };
            let target = randn(&mut r, &[2, 2, 3 * f, 2 * f]);
            Case {
                inputs: vec![randn(&mut r, &[2, 2, 3, 2])],
                build: Box::new(move |g, v| {
                    let y = g.upsample(v[0], f)?;
                    reduce(g, y, &target)
                }),
            }
        }
        OpKind::AvgPool2 => {
            let target = randn(&mut r, &[2, 2, 2, 3]);
            Case {
                inputs: vec![randn(&mut r, &[2, 2, 4, 6])],
                build: Box::new(move |g, v| {
                    let y = g.avg_pool2(v[0])?;
                    reduce(g, y, &target)
                }),
            }
        }
        OpKind::Concat => {
            let target = randn(&mut r, &[2, 5, 3, 3]);
            Case {
                inputs: vec![randn(&mut r, &[2, 2, 3, 3]), randn(&mut r, &[2, 3, 3, 3])],
                build: Box::new(move |g, v| {
                    let y = g.concat_channels(v[0], v[1])?;
                    reduce(g, y, &target)
                }),
            }
        }
        OpKind::Relu => {
            let target = randn(&mut r, &[2, 3, 4, 4]);
            Case {
                inputs: vec![randn(&mut r, &[2, 3, 4, 4])],
                build: Box::new(move |g, v| {
                    let y = g.relu(v[0])?;
                    reduce(g, y, &target)
                }),
            }
        }
        OpKind::Sigmoid => {
            let target = randn(&mut r, &[3, 5]);
            Case {
                inputs: vec![randn(&mut r, &[3, 5])],
                build: Box::new(move |g, v| {
                    let y = g.sigmoid(v[0])?;
                    reduce(g, y, &target)
                }),
            }
        }
        OpKind::Linear => {
            let target = randn(&mut r, &[3, 5]);
            Case {
                inputs: vec![randn(&mut r, &[3, 4]), randn(&mut r, &[5, 4]), randn(&mut r, &[5])],
                build: Box::new(move |g, v| {
                    let y = g.linear(v[0], v[1], v[2])?;
                    reduce(g, y, &target)
                }),
            }
        }
        OpKind::GlobalAvgPool => {
            let target = randn(&mut r, &[2, 3]);
            Case {
                inputs: vec![randn(&mut r, &[2, 3, 4, 4])],
                build: Box::new(move |g, v| {
                    let y = g.global_avg_pool(v[0])?;
                    reduce(g, y, &target)
                }),
            }
        }
        OpKind::Add => {
            let target = randn(&mut r, &[2, 3]);
            Case {
                inputs: vec![randn(&mut r, &[2, 3]), randn(&mut r, &[2, 3])],
                build: Box::new(move |g, v| {
                    let y = g.add(v[0], v[1])?;
                    reduce(g, y, &target)
                }),
            }
        }
        OpKind::Scale => {
            let s: f64 = r.sample(StandardNormal);
            let target = randn(&mut r, &[4, 2]);
            Case {
                inputs: vec![randn(&mut r, &[4, 2])],
                build: Box::new(move |g, v| {
                    let y = g.scale(v[0], s)?;
                    reduce(g, y, &target)
                }),
            }
        }
        OpKind::Sum => {
            let w = randn(&mut r, &[3, 4]);
            Case {
                inputs: vec![randn(&mut r, &[3, 4])],
                build: Box::new(move |g, v| {
                    // sum(x)² keeps the upstream gradient away from one
                    let s = g.sum(v[0])?;
                    let c = g.constant(Tensor::scalar(w.data()[0]))?;
                    g.mse_loss(s, c)
                }),
            }
        }
        OpKind::Mse => {
            let shape = [2, 3, 4];
            let mask: Option<Vec<bool>> = odd.then(|| (0..24).map(|_| r.gen_bool(0.5)).collect());
            Case {
                inputs: vec![randn(&mut r, &shape), randn(&mut r, &shape)],
                build: Box::new(move |g, v| match &mask {
                    Some(m) => g.masked_mse_loss(v[0], v[1], m.clone()),
                    None => g.mse_loss(v[0], v[1]),
                }),
            }
        }
        OpKind::SoftmaxFocal => {
            let (gamma, alpha) = if odd { (0.0, 1.0) } else { (2.0, 0.25) };
            let targets: Vec<usize> = (0..8).map(|_| r.gen_range(0..3)).collect();
            Case {
                inputs: vec![randn(&mut r, &[2, 3, 2, 2])],
                build: Box::new(move |g, v| g.softmax_focal(v[0], &targets, gamma, alpha)),
            }
        }
        OpKind::Leaf => return Err(EdmaeError::Usage("leaves have no backward rule".into())),
    };
    Ok(case)
}

fn forward(case: &Case, inputs: &[Tensor<f64>]) -> Result<(f64, Vec<bool>)> {
    let mut g = Graph::<f64>::new();
    let vars = inputs.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
    let loss = (case.build)(&mut g, &vars)?;
    Ok((g.value(loss).item(), g.relu_pattern()))
}

/// Worst relative error over one seed, with counts of compared and skipped
/// coordinates.
pub fn check_seed(op: OpKind, seed: u64, cfg: &GradcheckConfig) -> Result<(f64, usize, usize)> {
    let case = case(op, seed)?;
    let mut g = Graph::<f64>::new();
    g.inject_fault(cfg.fault);
    let vars = case.inputs.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>>>()?;
    let loss = (case.build)(&mut g, &vars)?;
    g.backward(loss)?;
    let base_pattern = g.relu_pattern();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&case.inputs)
        .map(|(v, t)| g.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut inputs = case.inputs.clone();
    let (mut max_diff, mut max_mag) = (0.0f64, 0.0f64);
    let (mut checked, mut skipped) = (0, 0);
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + cfg.eps;
            let (fp, pp) = forward(&case, &inputs)?;
            inputs[i].data_mut()[j] = orig - cfg.eps;
            let (fm, pm) = forward(&case, &inputs)?;
            inputs[i].data_mut()[j] = orig;
            if pp != base_pattern || pm != base_pattern {
                skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.eps);
            let a = analytic[i][j];
            max_diff = max_diff.max((a - numeric).abs());
            max_mag = max_mag.max(a.abs()).max(numeric.abs());
            checked += 1;
        }
    }
    let rel = if max_mag > 0.0 { max_diff / max_mag } else { max_diff };
    Ok((rel, checked, skipped))
}

pub fn check_op(op: OpKind, cfg: &GradcheckConfig) -> Result<OpReport> {
    let mut report = OpReport {
        op,
        seeds: cfg.seeds,
        checked: 0,
        skipped: 0,
        worst_rel_error: 0.0,
    };
    for seed in 0..cfg.seeds {
        let (rel, checked, skipped) = check_seed(op, seed, cfg)?;
        report.worst_rel_error = report.worst_rel_error.max(rel);
        report.checked += checked;
        report.skipped += skipped;
    }
    Ok(report)
}

pub fn run(cfg: &GradcheckConfig) -> Result<Vec<OpReport>> {
    registered().into_iter().map(|op| check_op(op, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_excludes_leaf_and_is_unique() {
        let ops = registered();
        assert_eq!(ops.len(), OpKind::ALL.len() - 1);
        for (i, a) in ops.iter().enumerate() {
            assert!(!ops[i + 1..].contains(a));
        }
    }

    #[test]
    fn single_seed_passes_and_fault_fails() {
        let cfg = GradcheckConfig::default();
        let (rel, checked, _) = check_seed(OpKind::Linear, 3, &cfg).unwrap();
        assert_eq!(checked, 12 + 20 + 5);
        assert!(rel < cfg.tolerance, "{rel}");
        let bad = GradcheckConfig {
            fault: Some(OpKind::Linear),
            ..cfg
        };
        assert!(check_seed(OpKind::Linear, 3, &bad).unwrap().0 > 0.1);
    }
}
