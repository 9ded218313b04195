//! Patch-grid masking.
//!
//! An image is tiled into `grid_h × grid_w` square patches. A seeded shuffle
//! picks `round(ratio · cells)` of them (half away from zero). Removed
//! content is zero-filled, so the visible and hidden images always add back
//! up to the original.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::{EdmaeError, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Boolean image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(EdmaeError::Dimension(format!(
                "mask of {}x{} given {} flags",
                height,
                width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    /// Foreground where the value exceeds one half.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        let plane = s.len() >= 2 && t.numel() == s[s.len() - 2] * s[s.len() - 1];
        if !plane {
            return Err(EdmaeError::Dimension(format!("expected a single-plane mask, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Self::new(h, w, t.data().iter().map(|v| *v > 0.5).collect())
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_fn(&[1, self.height, self.width], |i| if self.data[i] { 1.0 } else { 0.0 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
    /// One flag per grid cell, row-major; true means hidden from the
    /// visible branch.
    pub masked: Vec<bool>,
    pub ratio: f64,
    pub seed: u64,
}

/// Number of cells masked at `ratio`.
pub fn masked_count(cells: usize, ratio: f64) -> usize {
    (ratio * cells as f64).round() as usize
}

pub fn sample_mask(grid_h: usize, grid_w: usize, patch: usize, ratio: f64, seed: u64) -> Result<MaskSpec> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(EdmaeError::Config(format!("mask ratio {ratio} outside [0, 1]")));
    }
    if grid_h == 0 || grid_w == 0 || patch == 0 {
        return Err(EdmaeError::Config(format!(
            "mask grid {grid_h}x{grid_w} with patch {patch} is degenerate"
        )));
    }
    let cells = grid_h * grid_w;
    let mut order: Vec<usize> = (0..cells).collect();
    order.shuffle(&mut Rng::seed_from_u64(seed));
    let mut masked = vec![false; cells];
    for &i in &order[..masked_count(cells, ratio)] {
        masked[i] = true;
    }
    Ok(MaskSpec {
        grid_h,
        grid_w,
        patch,
        masked,
        ratio,
        seed,
    })
}

impl MaskSpec {
    pub fn height(&self) -> usize {
        self.grid_h * self.patch
    }

    pub fn width(&self) -> usize {
        self.grid_w * self.patch
    }

    pub fn masked_cells(&self) -> usize {
        self.masked.iter().filter(|m| **m).count()
    }

    pub fn is_masked(&self, gy: usize, gx: usize) -> bool {
        self.masked[gy * self.grid_w + gx]
    }

    fn check_tiles(&self, h: usize, w: usize) -> Result<()> {
        if h != self.height() || w != self.width() {
            return Err(EdmaeError::Dimension(format!(
                "{}x{} grid of {}px patches does not tile a {h}x{w} image",
                self.grid_h, self.grid_w, self.patch
            )));
        }
        Ok(())
    }
}

/// Per-pixel flag, true iff the pixel lies in a masked patch.
pub fn masked_pixel_selector(spec: &MaskSpec) -> BinaryMask {
    let (h, w) = (spec.height(), spec.width());
    let data = (0..h * w)
        .map(|i| spec.is_masked((i / w) / spec.patch, (i % w) / spec.patch))
        .collect();
    BinaryMask {
        height: h,
        width: w,
        data,
    }
}

/// Splits every sample with the same spec.
pub fn apply_mask<T: Scalar>(image: &Tensor<T>, spec: &MaskSpec) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = image.dims4()?[0];
    apply_masks(image, &vec![spec.clone(); n])
}

/// Splits sample `i` with `specs[i]` into (visible, hidden).
pub fn apply_masks<T: Scalar>(image: &Tensor<T>, specs: &[MaskSpec]) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = image.dims4()?;
    if specs.len() != n {
        return Err(EdmaeError::Dimension(format!("{} mask specs for {n} samples", specs.len())));
    }
    let mut visible = image.clone();
    let mut hidden = Tensor::zeros(image.shape());
    let plane = h * w;
    for (i, spec) in specs.iter().enumerate() {
        spec.check_tiles(h, w)?;
        let sel = masked_pixel_selector(spec);
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            let vis = &mut visible.data_mut()[off..off + plane];
            let hid = &mut hidden.data_mut()[off..off + plane];
            for ((v, hd), m) in vis.iter_mut().zip(hid.iter_mut()).zip(&sel.data) {
                if *m {
                    *hd = *v;
                    *v = T::zero();
                }
            }
        }
    }
    Ok((visible, hidden))
}

/// Log line form: `seed ratio grid_h grid_w patch`.
impl fmt::Display for MaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {} {}", self.seed, self.ratio, self.grid_h, self.grid_w, self.patch)
    }
}

impl FromStr for MaskSpec {
    type Err = EdmaeError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let bad = || EdmaeError::Config(format!("malformed mask spec line {s:?}"));
        let [seed, ratio, gh, gw, patch] = parts.as_slice() else {
            return Err(bad());
        };
        sample_mask(
            gh.parse().map_err(|_| bad())?,
            gw.parse().map_err(|_| bad())?,
            patch.parse().map_err(|_| bad())?,
            ratio.parse().map_err(|_| bad())?,
            seed.parse().map_err(|_| bad())?,
        )
    }
}
