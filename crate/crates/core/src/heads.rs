//! Downstream models: the pretrained encoder with a task head in place of
//! the reconstruction decoder.

use crate::error::{EdmaeError, Result};
use crate::graph::{Graph, Var};
use crate::model::{encode_graph, DenseEncoderConfig};
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::{Scalar, Tensor};

/// Encoder, global average pool, linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub encoder_config: DenseEncoderConfig,
    pub encoder: ParamStore,
    pub head: ParamStore,
    pub classes: usize,
}

impl Classifier {
    /// Encoder from `encoder` when given, otherwise freshly initialised.
    pub fn new(cfg: DenseEncoderConfig, encoder: Option<&ParamStore>, classes: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if classes < 2 {
            return Err(EdmaeError::Config(format!("need at least 2 classes, got {classes}")));
        }
        let mut init = rng::stream(seed, "init");
        let mut enc = cfg.init(&mut init);
        if let Some(src) = encoder {
            enc.load_from(src)?;
        }
        let mut head = ParamStore::new();
        head.push_layer("fc", &[classes, cfg.out_channels()], &mut rng::stream(seed, "head"));
        Ok(Self {
            encoder_config: cfg,
            encoder: enc,
            head,
            classes,
        })
    }

    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, train_encoder: bool) -> Result<(Vec<Var>, Vec<Var>)> {
        Ok((self.encoder.bind(g, train_encoder)?, self.head.bind(g, true)?))
    }

    /// Logits `[N, classes]`.
    pub fn logits_graph<T: Scalar>(&self, g: &mut Graph<T>, enc: &[Var], head: &[Var], x: Var) -> Result<Var> {
        let out = encode_graph(g, &self.encoder_config, enc, x)?;
        let pooled = g.global_avg_pool(out.features)?;
        g.linear(pooled, head[0], head[1])
    }

    pub fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let (e, h) = self.bind(&mut g, false)?;
        let x = g.constant(images.clone())?;
        let y = self.logits_graph(&mut g, &e, &h, x)?;
        Ok(g.value(y).clone())
    }

    pub fn predict(&self, images: &Tensor<f32>) -> Result<Vec<usize>> {
        let logits = self.logits(images)?;
        Ok(logits.data().chunks(self.classes).map(argmax).collect())
    }
}

/// Encoder plus a U-Net style decoder: at each scale the coarser map is
/// upsampled with a learned ×2 stage, concatenated with the matching
/// encoder skip, and fused by a 3×3 conv. A final 1×1 conv gives two-class
/// logits per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmenter {
    pub encoder_config: DenseEncoderConfig,
    pub encoder: ParamStore,
    pub head: ParamStore,
    pub hidden: usize,
}

pub const SEG_CLASSES: usize = 2;

impl Segmenter {
    pub fn new(cfg: DenseEncoderConfig, encoder: Option<&ParamStore>, hidden: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = rng::stream(seed, "init");
        let mut enc = cfg.init(&mut init);
        if let Some(src) = encoder {
            enc.load_from(src)?;
        }
        let mut hr = rng::stream(seed, "head");
        let mut head = ParamStore::new();
        let mut ch = cfg.out_channels();
        for (i, skip) in cfg.skip_channels().iter().rev().enumerate() {
            head.push_layer(&format!("up{i}"), &[hidden, ch, 3, 3], &mut hr);
            head.push_layer(&format!("fuse{i}"), &[hidden, hidden + skip, 3, 3], &mut hr);
            ch = hidden;
        }
        head.push_layer("out", &[SEG_CLASSES, hidden, 1, 1], &mut hr);
        Ok(Self {
            encoder_config: cfg,
            encoder: enc,
            head,
            hidden,
        })
    }

    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, train_encoder: bool) -> Result<(Vec<Var>, Vec<Var>)> {
        Ok((self.encoder.bind(g, train_encoder)?, self.head.bind(g, true)?))
    }

    /// Logits `[N, 2, H, W]`.
    pub fn logits_graph<T: Scalar>(&self, g: &mut Graph<T>, enc: &[Var], head: &[Var], x: Var) -> Result<Var> {
        let out = encode_graph(g, &self.encoder_config, enc, x)?;
        let mut cur = out.features;
        let mut p = head.iter().copied();
        let mut next = || p.next().ok_or_else(|| EdmaeError::Internal("segmentation head parameters missing".into()));
        for skip in out.skips.iter().rev() {
            let (uw, ub) = (next()?, next()?);
            cur = g.transposed_upsample(cur, 2, uw, ub)?;
            cur = g.relu(cur)?;
            cur = g.concat_channels(cur, *skip)?;
            let (fw, fb) = (next()?, next()?);
            cur = g.conv2d(cur, fw, fb, 1, 1)?;
            cur = g.relu(cur)?;
        }
        let (ow, ob) = (next()?, next()?);
        g.conv2d(cur, ow, ob, 1, 0)
    }

    pub fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let (e, h) = self.bind(&mut g, false)?;
        let x = g.constant(images.clone())?;
        let y = self.logits_graph(&mut g, &e, &h, x)?;
        Ok(g.value(y).clone())
    }

    /// Foreground probability per pixel, `[N, H, W]` flattened.
    pub fn foreground_prob(&self, images: &Tensor<f32>) -> Result<Vec<f32>> {
        let logits = self.logits(images)?;
        let [n, _, h, w] = logits.dims4()?;
        let plane = h * w;
        let d = logits.data();
        let mut out = Vec::with_capacity(n * plane);
        for i in 0..n {
            let (bg, fg) = (&d[(2 * i) * plane..(2 * i + 1) * plane], &d[(2 * i + 1) * plane..(2 * i + 2) * plane]);
            out.extend(bg.iter().zip(fg).map(|(b, f)| 1.0 / (1.0 + (b - f).exp())));
        }
        Ok(out)
    }
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
