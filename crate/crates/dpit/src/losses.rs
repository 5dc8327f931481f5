//! Training losses: pixel, gradient, perceptual and reconstruction terms and
//! their weighted combination.
//!
//! All reductions are mean-per-element so the default weights are stable
//! across resolutions.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::check_same_shape;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.01,
            lambda4: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {v} is negative")));
            }
        }
        Ok(())
    }
}

fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

fn mean_abs(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Mean squared error of both layers: ‖T̂−T‖² + ‖R̂−R‖².
pub fn pixel_loss(t_hat: &Tensor, t: &Tensor, r_hat: &Tensor, r: &Tensor) -> Result<Tensor> {
    check_same_shape(t_hat, t, "pixel_loss T")?;
    check_same_shape(r_hat, r, "pixel_loss R")?;
    Ok((mse(t_hat, t)? + mse(r_hat, r)?)?)
}

/// Forward differences along an axis, last row/column dropped.
fn fwd_diff(x: &Tensor, dim: usize) -> Result<Tensor> {
    let n = x.dims()[dim];
    Ok((x.narrow(dim, 1, n - 1)? - x.narrow(dim, 0, n - 1)?)?)
}

/// ℓ1 distance between the forward-difference gradients of predictions and
/// targets, x and y directions, summed over both layers.
pub fn gradient_loss(t_hat: &Tensor, t: &Tensor, r_hat: &Tensor, r: &Tensor) -> Result<Tensor> {
    check_same_shape(t_hat, t, "gradient_loss T")?;
    check_same_shape(r_hat, r, "gradient_loss R")?;
    let one = |p: &Tensor, g: &Tensor| -> Result<Tensor> {
        let dy = mean_abs(&fwd_diff(p, 2)?, &fwd_diff(g, 2)?)?;
        let dx = mean_abs(&fwd_diff(p, 3)?, &fwd_diff(g, 3)?)?;
        Ok((dy + dx)?)
    };
    Ok((one(t_hat, t)? + one(r_hat, r)?)?)
}

/// ‖I − (T̂+R̂) − Φ̂‖₁ with the learnable residual term.
pub fn reconstruction_loss(
    i: &Tensor,
    t_hat: &Tensor,
    r_hat: &Tensor,
    phi_hat: &Tensor,
) -> Result<Tensor> {
    check_same_shape(i, t_hat, "reconstruction_loss")?;
    let recomposed = ((t_hat + r_hat)? + phi_hat)?;
    Ok((i - recomposed)?.abs()?.mean_all()?)
}

/// Multi-tap feature extractor for the perceptual loss. Implementations are
/// frozen: their tensors are plain constants, never trainable parameters.
pub trait FeatureExtractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
    fn num_taps(&self) -> usize;
}

/// Single tap returning the input unchanged; with weight 1 the perceptual
/// loss collapses to plain ℓ1.
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![x.clone()])
    }
    fn num_taps(&self) -> usize {
        1
    }
}

/// Frozen random-weight convolutional stack exposing one tap per stage: the
/// desk-scale stand-in for a pretrained classification backbone (which would
/// plug in through the same trait). Each stage is a stride-2 3x3 convolution
/// followed by relu.
pub struct RandomConvExtractor {
    stages: Vec<(Tensor, Tensor)>,
}

impl RandomConvExtractor {
    pub const DEFAULT_TAPS: usize = 5;

    pub fn new(seed: u64, taps: usize, width: usize, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        let mut cin = 3usize;
        for _ in 0..taps {
            let fan_in = cin * 9;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = width * cin * 9;
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            let b: Vec<f64> = (0..width).map(|_| rng.gen_range(-bound..bound)).collect();
            let w = Tensor::from_vec(w, (width, cin, 3, 3), device)?.to_dtype(dtype)?;
            let b = Tensor::from_vec(b, (width,), device)?.to_dtype(dtype)?;
            stages.push((w, b));
            cin = width;
        }
        Ok(Self { stages })
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut cur = x.clone();
        for (w, b) in &self.stages {
            let cout = w.dims()[0];
            let y = cur.conv2d(w, 1, 2, 1, 1)?;
            let y = y.broadcast_add(&b.reshape((1, cout, 1, 1))?)?;
            cur = y.relu()?;
            out.push(cur.clone());
        }
        Ok(out)
    }
    fn num_taps(&self) -> usize {
        self.stages.len()
    }
}

/// Tap bookkeeping for the perceptual loss. `layers` are the nominal
/// backbone layer indices the taps correspond to; the desk extractor maps
/// one stage per tap.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PerceptualConfig {
    pub layers: Vec<usize>,
    pub weights: Vec<f64>,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        let layers = vec![2, 7, 12, 21, 30];
        let w = 1.0 / layers.len() as f64;
        Self {
            weights: vec![w; layers.len()],
            layers,
        }
    }
}

impl PerceptualConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != self.weights.len() {
            return Err(Error::Config(format!(
                "perceptual config has {} layers but {} weights",
                self.layers.len(),
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Config("perceptual weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Σᵢ ωᵢ‖φᵢ(T̂)−φᵢ(T)‖₁ over the extractor's taps.
pub fn perceptual_loss(
    t_hat: &Tensor,
    t: &Tensor,
    cfg: &PerceptualConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<Tensor> {
    cfg.validate()?;
    check_same_shape(t_hat, t, "perceptual_loss")?;
    if extractor.num_taps() != cfg.weights.len() {
        return Err(Error::Config(format!(
            "extractor has {} taps but config has {} weights",
            extractor.num_taps(),
            cfg.weights.len()
        )));
    }
    let fa = extractor.features(t_hat)?;
    let fb = extractor.features(t)?;
    let mut total = Tensor::zeros((), t.dtype(), t.device())?;
    for ((a, b), w) in fa.iter().zip(&fb).zip(&cfg.weights) {
        total = (total + (mean_abs(a, b)? * *w)?)?;
    }
    Ok(total)
}

#[derive(Clone)]
pub struct LossComponents {
    pub pix: Tensor,
    pub grad: Tensor,
    pub per: Tensor,
    pub rec: Tensor,
}

impl LossComponents {
    pub fn to_f64(&self) -> Result<(f64, f64, f64, f64)> {
        let s = |t: &Tensor| -> Result<f64> {
            Ok(t.to_dtype(DType::F64)?.reshape(())?.to_vec0::<f64>()?)
        };
        Ok((s(&self.pix)?, s(&self.grad)?, s(&self.per)?, s(&self.rec)?))
    }
}

/// λ1·L_pix + λ2·L_grad + λ3·L_per + λ4·L_rec.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<Tensor> {
    w.validate()?;
    let total = ((&c.pix * w.lambda1)? + (&c.grad * w.lambda2)?)?;
    Ok((total + ((&c.per * w.lambda3)? + (&c.rec * w.lambda4)?)?)?)
}

/// All four components for one prediction/target set.
pub fn compute_losses(
    i: &Tensor,
    out: &crate::types::SeparationOutput,
    t_gt: &Tensor,
    r_gt: &Tensor,
    per_cfg: &PerceptualConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<LossComponents> {
    Ok(LossComponents {
        pix: pixel_loss(&out.t_hat, t_gt, &out.r_hat, r_gt)?,
        grad: gradient_loss(&out.t_hat, t_gt, &out.r_hat, r_gt)?,
        per: perceptual_loss(&out.t_hat, t_gt, per_cfg, extractor)?,
        rec: reconstruction_loss(i, &out.t_hat, &out.r_hat, &out.phi_hat)?,
    })
}
