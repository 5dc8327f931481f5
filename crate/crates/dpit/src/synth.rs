//! Physical blending model and synthetic training-pair generation.
//!
//! The mixed image is `I = g1*T + g2*R - g1*g2*T.*R`; the reflection ground
//! truth is always derived as `R = |I - T|`.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::invalid_arg;
use crate::types::check_same_shape;

/// Transmission / reflection / mixed triple sharing one shape.
#[derive(Clone)]
pub struct ImagePair {
    pub transmission: Tensor,
    pub reflection: Tensor,
    pub mixed: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct BlendCoefficients {
    pub gamma1: f64,
    pub gamma2: f64,
}

impl BlendCoefficients {
    /// Sampling ranges: gamma1 in [0.8, 1.0], gamma2 in [0.4, 1.0], uniform.
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            gamma1: rng.gen_range(0.8..=1.0),
            gamma2: rng.gen_range(0.4..=1.0),
        }
    }
}

/// Source-pool mixing ratios (synthetic, real, nature) and per-epoch count.
#[derive(Debug, Clone)]
pub struct DatasetMix {
    pub ratios: [f64; 3],
    pub samples_per_epoch: usize,
}

impl DatasetMix {
    pub fn new(ratios: [f64; 3], samples_per_epoch: usize) -> Result<Self> {
        if ratios.iter().any(|r| *r < 0.0) {
            return Err(Error::Config("mix ratios must be non-negative".into()));
        }
        let sum: f64 = ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mix ratios sum to {sum}, expected 1")));
        }
        if samples_per_epoch == 0 {
            return Err(Error::Config("samples_per_epoch must be >= 1".into()));
        }
        Ok(Self {
            ratios,
            samples_per_epoch,
        })
    }
}

/// `g1*T + g2*R - g1*g2*T.*R`, elementwise. Stays in [0,1] for inputs in
/// [0,1] and coefficients in [0,1].
pub fn blend(t: &Tensor, r: &Tensor, c: BlendCoefficients) -> Result<Tensor> {
    check_same_shape(t, r, "blend")?;
    let lin = ((t * c.gamma1)? + (r * c.gamma2)?)?;
    Ok((lin - (t.mul(r)? * (c.gamma1 * c.gamma2))?)?)
}

/// Reflection ground truth `R = |I - T|`.
pub fn derive_reflection_gt(i: &Tensor, t: &Tensor) -> Result<Tensor> {
    check_same_shape(i, t, "derive_reflection_gt")?;
    Ok((i - t)?.abs()?)
}

/// Blend a transmission/reflection source pair with coefficients drawn from
/// the standard ranges. Deterministic under a fixed rng state.
pub fn generate_synthetic_pair(
    t_src: &Tensor,
    r_src: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<(ImagePair, BlendCoefficients)> {
    let c = BlendCoefficients::sample(rng);
    let mixed = blend(t_src, r_src, c)?;
    let reflection = derive_reflection_gt(&mixed, t_src)?;
    Ok((
        ImagePair {
            transmission: t_src.clone(),
            reflection,
            mixed,
        },
        c,
    ))
}

/// Draw `mix.samples_per_epoch` pairs with replacement from the three pools,
/// choosing the source pool per draw according to the mix ratios.
pub fn sample_epoch(
    mix: &DatasetMix,
    pools: [&[ImagePair]; 3],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ImagePair>> {
    for (k, pool) in pools.iter().enumerate() {
        if mix.ratios[k] > 0.0 && pool.is_empty() {
            return Err(Error::Config(format!(
                "source pool {k} has ratio {} but is empty",
                mix.ratios[k]
            )));
        }
    }
    let mut out = Vec::with_capacity(mix.samples_per_epoch);
    for _ in 0..mix.samples_per_epoch {
        let u: f64 = rng.gen();
        let k = if u < mix.ratios[0] {
            0
        } else if u < mix.ratios[0] + mix.ratios[1] {
            1
        } else {
            2
        };
        let pool = pools[k];
        let idx = rng.gen_range(0..pool.len());
        out.push(pool[idx].clone());
    }
    Ok(out)
}

/// Procedural source image: a bilinear corner gradient overlaid with random
/// soft-edged ellipses. Values in [0,1], shape [3, H, W].
pub fn procedural_image(h: usize, w: usize, rng: &mut ChaCha8Rng, device: &Device) -> Result<Tensor> {
    if h == 0 || w == 0 {
        invalid_arg!("procedural_image: empty size {h}x{w}");
    }
    let mut buf = vec![0f32; 3 * h * w];
    for c in 0..3 {
        let corners: [f32; 4] = [rng.gen(), rng.gen(), rng.gen(), rng.gen()];
        for y in 0..h {
            let fy = if h > 1 { y as f32 / (h - 1) as f32 } else { 0.0 };
            for x in 0..w {
                let fx = if w > 1 { x as f32 / (w - 1) as f32 } else { 0.0 };
                let top = corners[0] * (1.0 - fx) + corners[1] * fx;
                let bot = corners[2] * (1.0 - fx) + corners[3] * fx;
                buf[c * h * w + y * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    let n_shapes = rng.gen_range(3..7);
    for _ in 0..n_shapes {
        let cx: f32 = rng.gen_range(0.0..w as f32);
        let cy: f32 = rng.gen_range(0.0..h as f32);
        let rx: f32 = rng.gen_range(0.08..0.4) * w as f32;
        let ry: f32 = rng.gen_range(0.08..0.4) * h as f32;
        let color: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let softness: f32 = rng.gen_range(0.05..0.3);
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f32 - cx) / rx;
                let dy = (y as f32 - cy) / ry;
                let d = (dx * dx + dy * dy).sqrt();
                // 1 inside, smooth falloff to 0 at the rim.
                let a = ((1.0 - d) / softness).clamp(0.0, 1.0);
                if a > 0.0 {
                    for c in 0..3 {
                        let p = &mut buf[c * h * w + y * w + x];
                        *p = *p * (1.0 - a) + color[c] * a;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(buf, (3, h, w), device)?.to_dtype(DType::F32)?)
}
