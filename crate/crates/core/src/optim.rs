//! AdamW, reduce-on-plateau scheduling and the scalar focal loss.

use crate::error::{EdmaeError, Result};
use crate::kernels::FOCAL_PROB_FLOOR;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(EdmaeError::Config(format!(
                "betas must be in [0,1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(EdmaeError::Config("eps must be > 0 and weight decay >= 0".into()));
        }
        Ok(())
    }
}

/// Moment buffers are shape-aligned with the parameter list they were
/// created for; the list order must not change between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Decay is applied to the weights directly: `p ← p·(1 − lr·wd)`, then
    /// `p ← p − lr·m̂/(√v̂ + ε)` with bias-corrected moments. Nothing is
    /// modified when any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor<f32>], grads: &[Vec<f32>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(EdmaeError::Dimension(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() {
                return Err(EdmaeError::Dimension(format!(
                    "parameter {i} has {} elements but its gradient has {}",
                    p.numel(),
                    g.len()
                )));
            }
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(EdmaeError::NonFinite(format!(
                    "gradient of parameter {i} is {} at element {j}",
                    g[j]
                )));
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len() || self.m.iter().zip(grads).any(|(m, g)| m.len() != g.len()) {
            return Err(EdmaeError::Dimension("parameter layout changed between optimizer steps".into()));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = (1.0 - lr * c.weight_decay) as f32;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let (nb1, nb2) = ((1.0 - c.beta1) as f32, (1.0 - c.beta2) as f32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + nb1 * g;
                *v = b2 * *v + nb2 * g * g;
                let mhat = *m as f64 / bc1;
                let vhat = *v as f64 / bc2;
                *w *= decay;
                *w -= (lr * mhat / (vhat.sqrt() + c.eps)) as f32;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    /// Relative improvement a loss must beat to count as progress.
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.1,
            patience: 10,
            threshold: 1e-4,
            min_lr: 1e-6,
        }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(EdmaeError::Config(format!("plateau factor must be in (0,1), got {}", self.factor)));
        }
        if self.patience == 0 {
            return Err(EdmaeError::Config("plateau patience must be >= 1".into()));
        }
        if !(self.threshold >= 0.0) || !(self.min_lr >= 0.0) {
            return Err(EdmaeError::Config("plateau threshold and min_lr must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauState {
    pub lr: f64,
    pub best: f64,
    /// Consecutive epochs without improvement.
    pub bad_epochs: usize,
}

impl PlateauState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }
}

/// Folds one epoch's loss into `state` and returns the learning rate for the
/// next epoch. The rate drops once `patience` consecutive epochs fail to beat
/// `best·(1 − threshold)`.
pub fn plateau_step(cfg: &PlateauConfig, state: &mut PlateauState, loss: f64) -> f64 {
    if loss < state.best * (1.0 - cfg.threshold) {
        state.best = loss;
        state.bad_epochs = 0;
    } else {
        state.bad_epochs += 1;
    }
    if state.bad_epochs >= cfg.patience {
        state.lr = (state.lr * cfg.factor).max(cfg.min_lr);
        state.bad_epochs = 0;
    }
    state.lr
}

/// Learning rate after each epoch of `history`, starting from `state`.
pub fn replay(cfg: &PlateauConfig, mut state: PlateauState, history: &[f64]) -> Vec<f64> {
    history.iter().map(|&l| plateau_step(cfg, &mut state, l)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 0.25 }
    }
}

impl FocalParams {
    /// `alpha = 1, gamma = 0` is plain negative log-likelihood.
    pub const NLL: FocalParams = FocalParams { gamma: 0.0, alpha: 1.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(EdmaeError::Config(format!(
                "focal parameters need gamma >= 0 and alpha in (0,1], got gamma={} alpha={}",
                self.gamma, self.alpha
            )));
        }
        Ok(())
    }
}

/// Mean of `−α(1−p)^γ·ln p` over `prob_t`, with `p` clamped below at 1e-7.
pub fn focal_loss(prob_t: &[f64], fp: FocalParams) -> f64 {
    if prob_t.is_empty() {
        return 0.0;
    }
    let total: f64 = prob_t
        .iter()
        .map(|&p| {
            let p = p.max(FOCAL_PROB_FLOOR);
            -fp.alpha * (1.0 - p).powf(fp.gamma) * p.ln()
        })
        .sum();
    total / prob_t.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let mut p = Tensor::from_fn(&[4], |i| i as f32 - 1.5);
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..3 {
            opt.step(&mut [&mut p], &[vec![0.0; 4]], 1e-3).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_descends_on_square() {
        let mut w = Tensor::full(&[1], 1.0f32);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut [&mut w], &[vec![2.0]], 1e-3).unwrap();
        assert!(w.data()[0] < 1.0);
    }

    #[test]
    fn nan_gradient_leaves_state_untouched() {
        let mut p = Tensor::full(&[2], 1.0f32);
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step(&mut [&mut p], &[vec![0.1, f32::NAN]], 1e-3).unwrap_err();
        assert!(matches!(err, EdmaeError::NonFinite(_)));
        assert_eq!(opt.step, 0);
        assert_eq!(p.data(), &[1.0, 1.0]);
    }

    #[test]
    fn decreasing_losses_keep_lr() {
        let lrs = replay(&PlateauConfig::default(), PlateauState::new(1e-3), &[5.0, 4.0, 3.0, 2.0, 1.0]);
        assert!(lrs.iter().all(|&l| l == 1e-3));
    }

    #[test]
    fn lr_is_clamped_at_min() {
        let cfg = PlateauConfig {
            patience: 1,
            ..Default::default()
        };
        let lrs = replay(&cfg, PlateauState::new(1e-3), &[1.0; 50]);
        assert!(lrs.iter().all(|&l| l >= cfg.min_lr));
        assert_eq!(*lrs.last().unwrap(), cfg.min_lr);
    }

    #[test]
    fn focal_scalar_values() {
        assert_eq!(focal_loss(&[1.0, 1.0], FocalParams::default()), 0.0);
        let p: [f64; 3] = [0.2, 0.6, 0.9];
        let nll = -(p.iter().map(|v| v.ln()).sum::<f64>()) / 3.0;
        assert!((focal_loss(&p, FocalParams::NLL) - nll).abs() < 1e-15);
        assert!((focal_loss(&[0.5], FocalParams::default()) - 0.043321).abs() < 1e-6);
        assert!(focal_loss(&[0.0], FocalParams::NLL).is_finite());
    }
}
