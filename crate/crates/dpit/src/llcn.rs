//! Local linear correction: the transmission prior is `T_prior = s .* I + b`
//! with per-pixel, per-channel fields predicted by a small encoder plus two
//! parallel decoders (sigmoid for `s`, tanh for `b`).
//!
//! Two ablation variants share the encoder: direct regression `T = f(I)` with
//! a single decoder, and a global-linear variant that collapses the fields to
//! per-channel scalars.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::invalid_arg;
use crate::nn::{relu, sigmoid, Conv2d, ConvTranspose2d, Init, VarStore};
use crate::types::check_same_shape;

/// Per-pixel, per-channel scale and bias fields. Post-activation ranges:
/// `s` in [0,1], `b` in [-1,1].
#[derive(Clone)]
pub struct CorrectionField {
    pub s: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default)]
pub struct LlcnConfig {
    /// Channel width after each stride-2 encoder stage.
    pub encoder_channels: Vec<usize>,
    /// Number of 2x decoder stages; must equal the encoder depth so the
    /// output resolution matches the input exactly.
    pub decoder_stages: usize,
    /// Smallest spatial side allowed at the bottleneck.
    pub min_bottleneck: usize,
}

impl Default for LlcnConfig {
    fn default() -> Self {
        Self {
            encoder_channels: vec![16, 32, 64, 96],
            decoder_stages: 4,
            min_bottleneck: 2,
        }
    }
}

impl LlcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() {
            return Err(Error::Config("llcn: empty encoder".into()));
        }
        if self.decoder_stages != self.encoder_channels.len() {
            return Err(Error::Config(format!(
                "llcn: {} decoder stages cannot restore the resolution of a {}-stage encoder",
                self.decoder_stages,
                self.encoder_channels.len()
            )));
        }
        Ok(())
    }

    pub fn stride_product(&self) -> usize {
        1 << self.encoder_channels.len()
    }

    pub fn tiny() -> Self {
        Self {
            encoder_channels: vec![4, 6],
            decoder_stages: 2,
            min_bottleneck: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlcnKind {
    /// T = s.*I + b (the default).
    Llcm,
    /// T = f(I), single decoder, ablation row.
    DirectGeneration,
    /// T = alpha*I + beta with per-channel scalars, ablation row.
    GlobalLinear,
}

struct Decoder {
    stages: Vec<(ConvTranspose2d, Conv2d)>,
    head: Conv2d,
}

impl Decoder {
    fn new(vs: &mut VarStore, name: &str, cfg: &LlcnConfig) -> Result<Self> {
        let ch = &cfg.encoder_channels;
        let depth = ch.len();
        let mut stages = Vec::new();
        let mut cur = ch[depth - 1];
        for stage in 0..depth {
            let next = if stage + 1 < depth { ch[depth - 2 - stage] } else { ch[0] };
            let up = ConvTranspose2d::upsample2x(vs, &format!("{name}.up{stage}"), cur, next)?;
            let conv = Conv2d::new(vs, &format!("{name}.conv{stage}"), next, next, 3, 1)?;
            stages.push((up, conv));
            cur = next;
        }
        // Zero-initialized head: training starts from s = 0.5, b = 0.
        let head = Conv2d::with_init(vs, &format!("{name}.head"), cur, 3, 3, 1, Some(Init::Zeros))?;
        Ok(Self { stages, head })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (up, conv) in &self.stages {
            x = relu(&conv.forward(&up.forward(&x)?)?)?;
        }
        self.head.forward(&x)
    }

    fn param_count(&self) -> u64 {
        self.stages
            .iter()
            .map(|(u, c)| u.param_count() + c.param_count())
            .sum::<u64>()
            + self.head.param_count()
    }

    fn flop_count(&self, mut h: usize, mut w: usize) -> u64 {
        let mut flops = 0;
        for (up, conv) in &self.stages {
            flops += up.flop_count(h, w);
            (h, w) = up.out_hw(h, w);
            flops += conv.flop_count(h, w);
            flops += (h * w * conv.cout) as u64; // relu
        }
        flops + self.head.flop_count(h, w)
    }
}

pub struct Llcn {
    pub cfg: LlcnConfig,
    pub kind: LlcnKind,
    encoder: Vec<Conv2d>,
    decoders: Vec<Decoder>,
}

impl Llcn {
    /// Parameter names live under `<prefix>.`; use prefix "llcn" so stage-2
    /// composition can splice checkpoints by name.
    pub fn new(vs: &mut VarStore, prefix: &str, cfg: &LlcnConfig, kind: LlcnKind) -> Result<Self> {
        cfg.validate()?;
        let mut encoder = Vec::new();
        let mut cin = 3;
        for (i, &cout) in cfg.encoder_channels.iter().enumerate() {
            encoder.push(Conv2d::new(vs, &format!("{prefix}.enc{i}"), cin, cout, 3, 2)?);
            cin = cout;
        }
        let n_dec = match kind {
            LlcnKind::DirectGeneration => 1,
            _ => 2,
        };
        let decoders = (0..n_dec)
            .map(|d| Decoder::new(vs, &format!("{prefix}.dec{d}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            kind,
            encoder,
            decoders,
        })
    }

    fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let (_b, c, h, w) = image.dims4()?;
        if c != 3 {
            invalid_arg!("llcn expects 3-channel input, got {c}");
        }
        let stride = self.cfg.stride_product();
        if h % stride != 0 || w % stride != 0 {
            invalid_arg!("llcn input {h}x{w} not divisible by encoder stride {stride}");
        }
        if h / stride < self.cfg.min_bottleneck || w / stride < self.cfg.min_bottleneck {
            invalid_arg!("llcn bottleneck below {} at input {h}x{w}", self.cfg.min_bottleneck);
        }
        let mut x = image.clone();
        for conv in &self.encoder {
            x = relu(&conv.forward(&x)?)?;
        }
        Ok(x)
    }

    /// s = sigmoid(dec0(F)), b = tanh(dec1(F)).
    pub fn predict_fields(&self, image: &Tensor) -> Result<CorrectionField> {
        if self.kind == LlcnKind::DirectGeneration {
            invalid_arg!("direct-generation variant has no correction fields");
        }
        let f = self.encode(image)?;
        let s = sigmoid(&self.decoders[0].forward(&f)?)?;
        let b = self.decoders[1].forward(&f)?.tanh()?;
        Ok(CorrectionField { s, b })
    }

    /// The predicted prior image for the configured variant.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        match self.kind {
            LlcnKind::Llcm => {
                let f = self.predict_fields(image)?;
                apply_correction(image, &f)
            }
            LlcnKind::DirectGeneration => {
                let f = self.encode(image)?;
                self.decoders[0].forward(&f)
            }
            LlcnKind::GlobalLinear => {
                let f = self.predict_fields(image)?;
                let g = collapse_to_global(&f)?;
                apply_correction(image, &g)
            }
        }
    }

    pub fn param_count(&self) -> u64 {
        self.encoder.iter().map(|c| c.param_count()).sum::<u64>()
            + self.decoders.iter().map(|d| d.param_count()).sum::<u64>()
    }

    pub fn flop_count(&self, h: usize, w: usize) -> u64 {
        let mut flops = 0;
        let (mut eh, mut ew) = (h, w);
        for conv in &self.encoder {
            flops += conv.flop_count(eh, ew);
            (eh, ew) = conv.out_hw(eh, ew);
            flops += (eh * ew * conv.cout) as u64; // relu
        }
        for d in &self.decoders {
            flops += d.flop_count(eh, ew);
            flops += (h * w * 3) as u64; // output activation
        }
        if self.kind != LlcnKind::DirectGeneration {
            flops += 2 * (h * w * 3) as u64; // s.*I + b
        }
        flops
    }
}

/// `s .* I + b`, unclamped (callers clamp only when writing images).
pub fn apply_correction(image: &Tensor, f: &CorrectionField) -> Result<Tensor> {
    check_same_shape(image, &f.s, "apply_correction s")?;
    check_same_shape(image, &f.b, "apply_correction b")?;
    Ok((image.mul(&f.s)? + &f.b)?)
}

/// Spatial mean of the fields, broadcast back: the `T = alpha*I + beta` row.
pub fn collapse_to_global(f: &CorrectionField) -> Result<CorrectionField> {
    let (b, c, h, w) = f.s.dims4()?;
    let mean = |t: &Tensor| -> Result<Tensor> {
        Ok(t.mean_keepdim(3)?
            .mean_keepdim(2)?
            .broadcast_as((b, c, h, w))?
            .contiguous()?)
    };
    Ok(CorrectionField {
        s: mean(&f.s)?,
        b: mean(&f.b)?,
    })
}

/// Mean squared error of the corrected image against the transmission ground
/// truth, averaged over all elements (1/(3HW) per batch item).
pub fn correction_loss(f: &CorrectionField, image: &Tensor, t_gt: &Tensor) -> Result<Tensor> {
    check_same_shape(image, t_gt, "correction_loss")?;
    let pred = apply_correction(image, f)?;
    Ok((pred - t_gt)?.sqr()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_grads_match, GradCheckOpts};
    use candle_core::{DType, Device};

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn apply_correction_identity_and_zero() {
        let i = Tensor::rand(0f64, 1f64, (1, 3, 4, 4), &dev()).unwrap();
        let ones = Tensor::ones_like(&i).unwrap();
        let zeros = Tensor::zeros_like(&i).unwrap();
        let id = apply_correction(
            &i,
            &CorrectionField {
                s: ones.clone(),
                b: zeros.clone(),
            },
        )
        .unwrap();
        let d = (&id - &i).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_vec0::<f64>().unwrap(), 0.0);
        let z = apply_correction(
            &i,
            &CorrectionField {
                s: zeros.clone(),
                b: zeros,
            },
        )
        .unwrap();
        assert_eq!(z.abs().unwrap().max_all().unwrap().to_vec0::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn apply_correction_scalar_case() {
        let v = apply_correction(
            &Tensor::full(0.6f64, (1, 1, 1, 1), &dev()).unwrap(),
            &CorrectionField {
                s: Tensor::full(0.5f64, (1, 1, 1, 1), &dev()).unwrap(),
                b: Tensor::full(0.1f64, (1, 1, 1, 1), &dev()).unwrap(),
            },
        )
        .unwrap();
        let v = v.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((v - 0.4).abs() < 1e-12);
    }

    #[test]
    fn apply_correction_is_affine_in_image() {
        let i1 = Tensor::rand(0f64, 1f64, (1, 3, 4, 4), &dev()).unwrap();
        let i2 = Tensor::rand(0f64, 1f64, (1, 3, 4, 4), &dev()).unwrap();
        let f = CorrectionField {
            s: Tensor::rand(0f64, 1f64, (1, 3, 4, 4), &dev()).unwrap(),
            b: Tensor::rand(-1f64, 1f64, (1, 3, 4, 4), &dev()).unwrap(),
        };
        let a = 0.3;
        let lhs = apply_correction(&((&i1 * a).unwrap() + (&i2 * (1.0 - a)).unwrap()).unwrap(), &f).unwrap();
        let rhs = ((apply_correction(&i1, &f).unwrap() * a).unwrap()
            + (apply_correction(&i2, &f).unwrap() * (1.0 - a)).unwrap())
        .unwrap();
        let d = (lhs - rhs).unwrap().abs().unwrap().max_all().unwrap();
        assert!(d.to_vec0::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn predicted_fields_respect_activation_ranges() {
        let mut vs = VarStore::new(11, DType::F32, dev());
        let net = Llcn::new(&mut vs, "llcn", &LlcnConfig::tiny(), LlcnKind::Llcm).unwrap();
        let i = Tensor::rand(0f32, 1f32, (2, 3, 8, 8), &dev()).unwrap();
        let f = net.predict_fields(&i).unwrap();
        assert_eq!(f.s.dims(), i.dims());
        for v in f.s.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert!((0.0..=1.0).contains(&v));
        }
        for v in f.b.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn zero_init_heads_start_at_half_and_zero() {
        let mut vs = VarStore::new(3, DType::F32, dev());
        let net = Llcn::new(&mut vs, "llcn", &LlcnConfig::tiny(), LlcnKind::Llcm).unwrap();
        let i = Tensor::rand(0f32, 1f32, (1, 3, 8, 8), &dev()).unwrap();
        let f = net.predict_fields(&i).unwrap();
        for v in f.s.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert!((v - 0.5).abs() < 1e-7);
        }
        for v in f.b.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn forward_is_deterministic_and_matches_composition() {
        let mut vs = VarStore::new(5, DType::F32, dev());
        let net = Llcn::new(&mut vs, "llcn", &LlcnConfig::tiny(), LlcnKind::Llcm).unwrap();
        let i = Tensor::rand(0f32, 1f32, (1, 3, 8, 8), &dev()).unwrap();
        let a = net.forward(&i).unwrap();
        let b = net.forward(&i).unwrap();
        let d = (&a - &b).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_vec0::<f32>().unwrap(), 0.0);
        let f = net.predict_fields(&i).unwrap();
        let c = apply_correction(&i, &f).unwrap();
        let d = (&a - &c).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_vec0::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn correction_loss_zero_at_fixed_point_and_scalar_case() {
        let i = Tensor::rand(0f64, 1f64, (1, 3, 4, 4), &dev()).unwrap();
        let f = CorrectionField {
            s: Tensor::ones_like(&i).unwrap(),
            b: Tensor::zeros_like(&i).unwrap(),
        };
        let l = correction_loss(&f, &i, &i).unwrap().to_vec0::<f64>().unwrap();
        assert_eq!(l, 0.0);
        let one = Tensor::full(0.5f64, (1, 1, 1, 1), &dev()).unwrap();
        let f = CorrectionField {
            s: Tensor::ones_like(&one).unwrap(),
            b: Tensor::zeros_like(&one).unwrap(),
        };
        let tgt = Tensor::full(0.7f64, (1, 1, 1, 1), &dev()).unwrap();
        let l = correction_loss(&f, &one, &tgt).unwrap().to_vec0::<f64>().unwrap();
        assert!((l - 0.04).abs() < 1e-12);
    }

    #[test]
    fn correction_loss_matches_loop_reference() {
        let i = Tensor::rand(0f64, 1f64, (1, 3, 4, 4), &dev()).unwrap();
        let t = Tensor::rand(0f64, 1f64, (1, 3, 4, 4), &dev()).unwrap();
        let f = CorrectionField {
            s: Tensor::rand(0f64, 1f64, (1, 3, 4, 4), &dev()).unwrap(),
            b: Tensor::rand(-1f64, 1f64, (1, 3, 4, 4), &dev()).unwrap(),
        };
        let l = correction_loss(&f, &i, &t).unwrap().to_vec0::<f64>().unwrap();
        let iv = i.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let tv = t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let sv = f.s.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let bv = f.b.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mut acc = 0.0;
        for k in 0..iv.len() {
            let d = sv[k] * iv[k] + bv[k] - tv[k];
            acc += d * d;
        }
        acc /= iv.len() as f64;
        assert!((l - acc).abs() < 1e-6, "{l} vs {acc}");
    }

    #[test]
    fn global_linear_is_spatially_constant_and_identity_when_forced() {
        let mut vs = VarStore::new(2, DType::F32, dev());
        let net = Llcn::new(&mut vs, "llcn", &LlcnConfig::tiny(), LlcnKind::GlobalLinear).unwrap();
        let i = Tensor::rand(0f32, 1f32, (1, 3, 8, 8), &dev()).unwrap();
        let g = collapse_to_global(&net.predict_fields(&i).unwrap()).unwrap();
        // constant across spatial positions, per channel
        for t in [&g.s, &g.b] {
            let v = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            for c in 0..3 {
                let base = v[c * 64];
                for k in 0..64 {
                    assert_eq!(v[c * 64 + k], base);
                }
            }
        }
        // alpha=1, beta=0 forced -> identity
        let forced = CorrectionField {
            s: Tensor::ones_like(&i).unwrap(),
            b: Tensor::zeros_like(&i).unwrap(),
        };
        let out = apply_correction(&i, &forced).unwrap();
        let d = (&out - &i).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_vec0::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn direct_generation_has_fewer_params_and_right_shape() {
        let cfg = LlcnConfig::tiny();
        let mut vs1 = VarStore::new(0, DType::F32, dev());
        let llcm = Llcn::new(&mut vs1, "llcn", &cfg, LlcnKind::Llcm).unwrap();
        let mut vs2 = VarStore::new(0, DType::F32, dev());
        let direct = Llcn::new(&mut vs2, "llcn", &cfg, LlcnKind::DirectGeneration).unwrap();
        assert!(direct.param_count() < llcm.param_count());
        assert_eq!(direct.param_count(), vs2.num_params() as u64);
        assert_eq!(llcm.param_count(), vs1.num_params() as u64);
        let i = Tensor::rand(0f32, 1f32, (1, 3, 8, 8), &dev()).unwrap();
        assert_eq!(direct.forward(&i).unwrap().dims(), i.dims());
    }

    #[test]
    fn rejects_incompatible_spatial_size() {
        let mut vs = VarStore::new(0, DType::F32, dev());
        let net = Llcn::new(&mut vs, "llcn", &LlcnConfig::tiny(), LlcnKind::Llcm).unwrap();
        let i = Tensor::rand(0f32, 1f32, (1, 3, 6, 8), &dev()).unwrap();
        assert!(matches!(net.forward(&i), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn llcn_gradients_match_finite_differences() {
        let mut vs = VarStore::new(17, DType::F64, dev());
        let net = Llcn::new(&mut vs, "llcn", &LlcnConfig::tiny(), LlcnKind::Llcm).unwrap();
        // Heads start zero-initialized, which would zero all upstream
        // gradients; randomize them so the whole chain is exercised.
        for d in 0..2 {
            for p in ["weight", "bias"] {
                let var = vs.get(&format!("llcn.dec{d}.head.{p}")).unwrap();
                let r = Tensor::rand(-0.5f64, 0.5f64, var.dims(), &dev()).unwrap();
                var.set(&r).unwrap();
            }
        }
        let i = Tensor::rand(0f64, 1f64, (1, 3, 8, 8), &dev()).unwrap();
        let t = Tensor::rand(0f64, 1f64, (1, 3, 8, 8), &dev()).unwrap();
        let vars = vs.vars();
        let report = assert_grads_match(
            &vars,
            || {
                let f = net.predict_fields(&i)?;
                correction_loss(&f, &i, &t)
            },
            &GradCheckOpts {
                max_per_tensor: 6,
                ..GradCheckOpts::default()
            },
        )
        .unwrap();
        assert!(report.checked > 50);
    }
}
