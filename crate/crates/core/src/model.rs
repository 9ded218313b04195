//! Teacher/student dense encoders, the reconstruction decoder, and the
//! combined pretraining objective.
//!
//! The teacher sees the visible image and is trained by backpropagation.
//! The student sees the hidden (masked-out) content, is recorded on the tape
//! as constants, and only changes through [`EdmaeModel::ema_update`]. The
//! decoder reconstructs the full image from the teacher's features.

use std::str::FromStr;

use crate::error::{EdmaeError, Result};
use crate::graph::{Graph, Var};
use crate::masking::{apply_masks, masked_pixel_selector, MaskSpec};
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseEncoderConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Dense layers per block.
    pub blocks: Vec<usize>,
    pub growth: usize,
}

impl Default for DenseEncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            stem_channels: 16,
            blocks: vec![2, 2],
            growth: 8,
        }
    }
}

impl DenseEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.blocks.contains(&0) {
            return Err(EdmaeError::Config("encoder needs at least one non-empty dense block".into()));
        }
        if self.growth == 0 || self.stem_channels == 0 || self.in_channels == 0 {
            return Err(EdmaeError::Config("encoder channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.stem_channels + self.blocks.iter().sum::<usize>() * self.growth
    }

    /// Spatial downsampling factor: one pool after the stem plus one
    /// transition between consecutive blocks.
    pub fn scale(&self) -> usize {
        1 << self.blocks.len()
    }

    /// Channel counts of the skip tensors returned by [`encode_graph`].
    pub fn skip_channels(&self) -> Vec<usize> {
        let mut out = vec![self.stem_channels];
        let mut ch = self.stem_channels;
        for layers in &self.blocks[..self.blocks.len() - 1] {
            ch += layers * self.growth;
            out.push(ch);
        }
        out
    }

    pub fn init(&self, rng: &mut rng::Rng) -> ParamStore {
        let mut p = ParamStore::new();
        p.push_layer("stem", &[self.stem_channels, self.in_channels, 3, 3], rng);
        let mut ch = self.stem_channels;
        for (bi, layers) in self.blocks.iter().enumerate() {
            for li in 0..*layers {
                p.push_layer(&format!("block{bi}.layer{li}"), &[self.growth, ch, 3, 3], rng);
                ch += self.growth;
            }
        }
        p
    }
}

pub struct EncoderOutput {
    pub features: Var,
    /// Full-resolution stem activations, then each non-final block's output,
    /// from finest to coarsest.
    pub skips: Vec<Var>,
}

pub fn encode_graph<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &DenseEncoderConfig,
    params: &[Var],
    x: Var,
) -> Result<EncoderOutput> {
    let [_, c, h, w] = g.value(x).dims4()?;
    if c != cfg.in_channels {
        return Err(EdmaeError::Dimension(format!(
            "encoder expects {} input channels, got {c}",
            cfg.in_channels
        )));
    }
    let s = cfg.scale();
    if h % s != 0 || w % s != 0 {
        return Err(EdmaeError::Dimension(format!(
            "image {h}x{w} not divisible by the encoder scale {s}"
        )));
    }
    let mut p = params.iter().copied();
    let mut next = || p.next().ok_or_else(|| EdmaeError::Internal("encoder parameter list too short".into()));

    let (sw, sb) = (next()?, next()?);
    let stem = g.conv2d(x, sw, sb, 1, 1)?;
    let stem = g.relu(stem)?;
    let mut skips = vec![stem];
    let mut cur = g.avg_pool2(stem)?;
    for (bi, layers) in cfg.blocks.iter().enumerate() {
        for _ in 0..*layers {
            let (lw, lb) = (next()?, next()?);
            let y = g.conv2d(cur, lw, lb, 1, 1)?;
            let y = g.relu(y)?;
            cur = g.concat_channels(cur, y)?;
        }
        if bi + 1 < cfg.blocks.len() {
            skips.push(cur);
            cur = g.avg_pool2(cur)?;
        }
    }
    Ok(EncoderOutput { features: cur, skips })
}

/// Forward-only encoding of `image` with the given parameters.
pub fn encode(cfg: &DenseEncoderConfig, params: &ParamStore, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::<f32>::new();
    let vars = params.bind(&mut g, false)?;
    let x = g.constant(image.clone())?;
    let out = encode_graph(&mut g, cfg, &vars, x)?;
    Ok(g.value(out.features).clone())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    pub in_channels: usize,
    pub hidden: usize,
    /// Number of ×2 upsampling stages; `2^stages` must undo the encoder scale.
    pub stages: usize,
}

impl DecoderConfig {
    pub fn for_encoder(enc: &DenseEncoderConfig, hidden: usize) -> Self {
        Self {
            in_channels: enc.out_channels(),
            hidden,
            stages: enc.blocks.len(),
        }
    }

    pub fn init(&self, rng: &mut rng::Rng) -> ParamStore {
        let mut p = ParamStore::new();
        p.push_layer("reduce", &[self.hidden, self.in_channels, 1, 1], rng);
        for s in 0..self.stages {
            p.push_layer(&format!("up{s}"), &[self.hidden, self.hidden, 3, 3], rng);
        }
        p.push_layer("out", &[1, self.hidden, 1, 1], rng);
        p
    }
}

/// 1×1 reduction, `stages` × (nearest ×2, 3×3 conv, relu), 1×1 to one channel.
pub fn decode_graph<T: Scalar>(g: &mut Graph<T>, cfg: &DecoderConfig, params: &[Var], features: Var) -> Result<Var> {
    let expected = 2 * (cfg.stages + 2);
    if params.len() != expected {
        return Err(EdmaeError::Internal(format!(
            "decoder expects {expected} parameters, got {}",
            params.len()
        )));
    }
    let mut cur = g.conv2d(features, params[0], params[1], 1, 0)?;
    cur = g.relu(cur)?;
    for s in 0..cfg.stages {
        let (w, b) = (params[2 + 2 * s], params[3 + 2 * s]);
        cur = g.transposed_upsample(cur, 2, w, b)?;
        cur = g.relu(cur)?;
    }
    g.conv2d(cur, params[expected - 2], params[expected - 1], 1, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReconScope {
    /// Loss over pixels of masked patches only.
    #[default]
    Masked,
    Full,
}

impl FromStr for ReconScope {
    type Err = EdmaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(Self::Masked),
            "full" => Ok(Self::Full),
            other => Err(EdmaeError::Config(format!("recon_scope must be masked|full, got {other:?}"))),
        }
    }
}

impl ReconScope {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Masked => "masked",
            Self::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdmaeConfig {
    pub encoder: DenseEncoderConfig,
    pub decoder_hidden: usize,
    pub momentum: f64,
    pub align_weight: f64,
    pub recon_scope: ReconScope,
}

impl Default for EdmaeConfig {
    fn default() -> Self {
        Self {
            encoder: DenseEncoderConfig::default(),
            decoder_hidden: 8,
            momentum: 0.99,
            align_weight: 1.0,
            recon_scope: ReconScope::Masked,
        }
    }
}

impl EdmaeConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(EdmaeError::Config(format!("momentum {} outside [0, 1]", self.momentum)));
        }
        if !(self.align_weight >= 0.0 && self.align_weight.is_finite()) {
            return Err(EdmaeError::Config(format!("align_weight {} must be >= 0", self.align_weight)));
        }
        if self.decoder_hidden == 0 {
            return Err(EdmaeError::Config("decoder_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig::for_encoder(&self.encoder, self.decoder_hidden)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdmaeModel {
    pub config: EdmaeConfig,
    pub teacher: ParamStore,
    pub student: ParamStore,
    pub decoder: ParamStore,
}

pub struct BoundEdmae {
    pub teacher: Vec<Var>,
    pub student: Vec<Var>,
    pub decoder: Vec<Var>,
}

pub struct PretrainVars {
    pub align_loss: Var,
    pub recon_loss: Var,
    pub total_loss: Var,
    pub reconstruction: Var,
}

#[derive(Debug, Clone)]
pub struct PretrainStepOutput {
    pub align_loss: f32,
    pub recon_loss: f32,
    pub total_loss: f32,
    pub reconstruction: Tensor<f32>,
}

impl EdmaeModel {
    /// Fresh model; the student starts as an exact copy of the teacher.
    pub fn new(config: EdmaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = rng::stream(seed, "init");
        let teacher = config.encoder.init(&mut init);
        let decoder = config.decoder().init(&mut init);
        Ok(Self {
            student: teacher.clone(),
            teacher,
            decoder,
            config,
        })
    }

    pub fn check_aligned(&self) -> Result<()> {
        if !self.teacher.same_layout(&self.student) {
            return Err(EdmaeError::Internal("teacher and student parameter layouts drifted".into()));
        }
        Ok(())
    }

    /// `student ← student·m + teacher·(1−m)`, element-wise.
    pub fn ema_update(&mut self) -> Result<()> {
        self.check_aligned()?;
        let m = self.config.momentum as f32;
        let keep = (1.0 - self.config.momentum) as f32;
        for (s, t) in self.student.tensors_mut().iter_mut().zip(self.teacher.tensors()) {
            for (ps, pt) in s.data_mut().iter_mut().zip(t.data()) {
                *ps = *ps * m + *pt * keep;
            }
        }
        Ok(())
    }

    /// Teacher and decoder are trainable leaves; the student is constant.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>) -> Result<BoundEdmae> {
        self.check_aligned()?;
        Ok(BoundEdmae {
            teacher: self.teacher.bind(g, true)?,
            student: self.student.bind(g, false)?,
            decoder: self.decoder.bind(g, true)?,
        })
    }

    /// Records the alignment loss between teacher(visible) and the
    /// gradient-blocked student(hidden) features. Returns
    /// (loss, teacher features).
    pub fn alignment_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &BoundEdmae,
        visible: Var,
        hidden: Var,
    ) -> Result<(Var, Var)> {
        let t = encode_graph(g, &self.config.encoder, &bound.teacher, visible)?;
        let s = encode_graph(g, &self.config.encoder, &bound.student, hidden)?;
        if g.value(t.features).shape() != g.value(s.features).shape() {
            return Err(EdmaeError::Internal("teacher/student feature shapes differ".into()));
        }
        let target = g.detach(s.features)?;
        Ok((g.mse_loss(t.features, target)?, t.features))
    }

    pub fn pretrain_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &BoundEdmae,
        image: &Tensor<T>,
        specs: &[MaskSpec],
    ) -> Result<PretrainVars> {
        let [n, c, h, w] = image.dims4()?;
        let (visible, hidden) = apply_masks(image, specs)?;
        let xv = g.constant(visible)?;
        let xh = g.constant(hidden)?;
        let (align_loss, features) = self.alignment_graph(g, bound, xv, xh)?;
        let reconstruction = decode_graph(g, &self.config.decoder(), &bound.decoder, features)?;
        if g.value(reconstruction).shape() != [n, c, h, w] {
            return Err(EdmaeError::Dimension(format!(
                "decoder produced {:?} for a {:?} image",
                g.value(reconstruction).shape(),
                image.shape()
            )));
        }
        let target = g.constant(image.clone())?;
        let recon_loss = match self.config.recon_scope {
            ReconScope::Full => g.mse_loss(reconstruction, target)?,
            ReconScope::Masked => {
                let mut flags = Vec::with_capacity(n * c * h * w);
                for spec in specs {
                    let sel = masked_pixel_selector(spec);
                    for _ in 0..c {
                        flags.extend_from_slice(&sel.data);
                    }
                }
                g.masked_mse_loss(reconstruction, target, flags)?
            }
        };
        let weighted = g.scale(align_loss, T::from_f64_lossy(self.config.align_weight))?;
        let total_loss = g.add(recon_loss, weighted)?;
        Ok(PretrainVars {
            align_loss,
            recon_loss,
            total_loss,
            reconstruction,
        })
    }

    pub fn pretrain_step_forward(&self, image: &Tensor<f32>, specs: &[MaskSpec]) -> Result<PretrainStepOutput> {
        let mut g = Graph::<f32>::new();
        let bound = self.bind(&mut g)?;
        let v = self.pretrain_graph(&mut g, &bound, image, specs)?;
        Ok(PretrainStepOutput {
            align_loss: g.value(v.align_loss).item(),
            recon_loss: g.value(v.recon_loss).item(),
            total_loss: g.value(v.total_loss).item(),
            reconstruction: g.value(v.reconstruction).clone(),
        })
    }

    pub fn feature_alignment_loss(&self, visible: &Tensor<f32>, hidden: &Tensor<f32>) -> Result<f32> {
        let mut g = Graph::<f32>::new();
        let bound = self.bind(&mut g)?;
        let xv = g.constant(visible.clone())?;
        let xh = g.constant(hidden.clone())?;
        let (loss, _) = self.alignment_graph(&mut g, &bound, xv, xh)?;
        Ok(g.value(loss).item())
    }

    pub fn decode_reconstruct(&self, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let vars = self.decoder.bind(&mut g, false)?;
        let f = g.constant(features.clone())?;
        let out = decode_graph(&mut g, &self.config.decoder(), &vars, f)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::sample_mask;

    fn zeroed(p: &ParamStore) -> ParamStore {
        let mut z = p.clone();
        for t in z.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    #[test]
    fn default_encoder_geometry() {
        let cfg = DenseEncoderConfig::default();
        assert_eq!(cfg.out_channels(), 48);
        assert_eq!(cfg.scale(), 4);
        assert_eq!(cfg.skip_channels(), vec![16, 32]);
        let model = EdmaeModel::new(EdmaeConfig::default(), 1).unwrap();
        let img = Tensor::from_fn(&[2, 1, 64, 64], |i| (i % 7) as f32 / 7.0);
        let f = encode(&cfg, &model.teacher, &img).unwrap();
        assert_eq!(f.shape(), &[2, 48, 16, 16]);
        assert!(model.decoder.numel() * 4 < model.teacher.numel());
    }

    #[test]
    fn zero_stack_gives_zero_features() {
        let cfg = DenseEncoderConfig::default();
        let model = EdmaeModel::new(EdmaeConfig::default(), 1).unwrap();
        let f = encode(&cfg, &zeroed(&model.teacher), &Tensor::zeros(&[1, 1, 16, 16])).unwrap();
        assert!(f.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let model = EdmaeModel::new(EdmaeConfig::default(), 1).unwrap();
        let err = encode(&model.config.encoder, &model.teacher, &Tensor::zeros(&[1, 1, 18, 16]));
        assert!(matches!(err, Err(EdmaeError::Dimension(_))));
    }

    #[test]
    fn ema_boundaries() {
        let mut model = EdmaeModel::new(EdmaeConfig::default(), 3).unwrap();
        for t in model.student.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        for t in model.teacher.tensors_mut() {
            t.data_mut().fill(1.0);
        }
        model.config.momentum = 0.9;
        model.ema_update().unwrap();
        assert!(model.student.tensors().iter().all(|t| t.data().iter().all(|v| (*v - 0.1).abs() < 1e-7)));
        let before = model.student.clone();
        model.config.momentum = 1.0;
        model.ema_update().unwrap();
        assert_eq!(model.student, before);
        model.config.momentum = 0.0;
        model.ema_update().unwrap();
        assert_eq!(model.student.tensors(), model.teacher.tensors());
    }

    #[test]
    fn ema_detects_drift() {
        let mut model = EdmaeModel::new(EdmaeConfig::default(), 3).unwrap();
        model.student.push("extra", Tensor::zeros(&[1]));
        assert!(matches!(model.ema_update(), Err(EdmaeError::Internal(_))));
    }

    #[test]
    fn decoder_constant_bias() {
        let mut model = EdmaeModel::new(EdmaeConfig::default(), 2).unwrap();
        for (name, t) in model.decoder.names().to_vec().iter().zip(model.decoder.tensors_mut()) {
            let v = if name.ends_with(".b") { 0.3 } else { 0.0 };
            t.data_mut().fill(v);
        }
        let out = model.decode_reconstruct(&Tensor::zeros(&[2, 48, 16, 16])).unwrap();
        assert_eq!(out.shape(), &[2, 1, 64, 64]);
        assert!(out.data().iter().all(|v| (*v - 0.3).abs() < 1e-7));
    }

    #[test]
    fn equal_inputs_align_to_zero() {
        let model = EdmaeModel::new(EdmaeConfig::default(), 5).unwrap();
        let img = Tensor::from_fn(&[1, 1, 32, 32], |i| ((i * 31) % 17) as f32 / 17.0);
        assert_eq!(model.feature_alignment_loss(&img, &img).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_masks() {
        let mut cfg = EdmaeConfig::default();
        cfg.align_weight = 0.0;
        let model = EdmaeModel::new(cfg, 5).unwrap();
        let img = Tensor::from_fn(&[1, 1, 32, 32], |i| ((i * 13) % 11) as f32 / 11.0);
        let none = sample_mask(4, 4, 8, 0.0, 1).unwrap();
        let out = model.pretrain_step_forward(&img, &[none]).unwrap();
        assert_eq!(out.recon_loss, 0.0);
        assert_eq!(out.total_loss, 0.0);

        let all = sample_mask(4, 4, 8, 1.0, 1).unwrap();
        let out = model.pretrain_step_forward(&img, &[all]).unwrap();
        let full: f32 = out
            .reconstruction
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>()
            / img.numel() as f32;
        assert!((out.total_loss - full).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        let mut cfg = EdmaeConfig::default();
        cfg.momentum = 1.2;
        assert!(EdmaeModel::new(cfg.clone(), 0).is_err());
        cfg.momentum = 0.5;
        cfg.align_weight = -1.0;
        assert!(EdmaeModel::new(cfg, 0).is_err());
        assert_eq!("full".parse::<ReconScope>().unwrap(), ReconScope::Full);
        assert!("x".parse::<ReconScope>().is_err());
    }
}
