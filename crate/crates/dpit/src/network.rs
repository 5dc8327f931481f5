//! Network assembly: dual-stream transmission-prior feature extraction
//! (TPFEN), a small stand-in general-prior extractor (GPFEN), hierarchical
//! dual-prior fusion (DPFIN) with same-layer and cross-layer fusion, and the
//! output heads including the learnable residue module (LRM).
//!
//! Levels are indexed 0..=L with level-k features at 1/2^k of the input
//! resolution. General prior features exist for levels 2..=L only. Fusion
//! sites operate at the sub-pixel-upsampled geometry: level-k fusion runs at
//! 1/2^(k-1) resolution with channels[k]/4 channels.

use std::collections::BTreeMap;

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::interaction::{InteractionBlock, InteractionKind, MugiBlock};
use crate::invalid_arg;
use crate::llcn::{Llcn, LlcnConfig, LlcnKind};
use crate::nn::{pixel_shuffle, reflect_pad_to_multiple, sigmoid, Conv2d, VarStore};
use crate::types::{SeparationOutput, StreamPair};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Channel width per pyramid level, index 0..=L; needs at least three
    /// levels so one general-prior fusion site exists.
    pub channels: Vec<usize>,
    /// Internal trunk widths of the toy general-prior encoder, one per level
    /// in 2..=L; each stage projects to the matching `channels` entry.
    pub gpfen_widths: Vec<usize>,
    pub window_size: usize,
    pub heads: usize,
    /// MuGI blocks per downsampling stage of the prior encoder.
    pub mugi_per_level: usize,
    /// Block kind used at the fusion sites (the ablation axis).
    pub interaction: InteractionKind,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 96, 128, 160],
            gpfen_widths: vec![24, 24, 24, 24],
            window_size: 4,
            heads: 2,
            mugi_per_level: 1,
            interaction: InteractionKind::Dscrab,
        }
    }
}

impl NetworkConfig {
    /// Two-level reduced config for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            channels: vec![4, 8, 8],
            gpfen_widths: vec![4],
            window_size: 2,
            heads: 1,
            mugi_per_level: 1,
            interaction: InteractionKind::Dscrab,
        }
    }

    pub fn top_level(&self) -> usize {
        self.channels.len() - 1
    }

    /// Width of the level-k fusion site (after sub-pixel upsampling).
    fn site_channels(&self, k: usize) -> usize {
        self.channels[k] / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 3 {
            return Err(Error::Config(format!(
                "need at least 3 pyramid levels, got {}",
                self.channels.len()
            )));
        }
        let l = self.top_level();
        if self.gpfen_widths.len() != l - 1 {
            return Err(Error::Config(format!(
                "gpfen_widths has {} entries, expected one per level 2..={l}",
                self.gpfen_widths.len()
            )));
        }
        if self.window_size == 0 || self.heads == 0 || self.mugi_per_level == 0 {
            return Err(Error::Config(
                "window_size, heads and mugi_per_level must be positive".into(),
            ));
        }
        for (i, &c) in self.channels.iter().enumerate() {
            if c == 0 {
                return Err(Error::Config(format!("level {i} has zero channels")));
            }
        }
        for k in 2..=l {
            let c = self.channels[k];
            if c % 4 != 0 {
                return Err(Error::Config(format!(
                    "level {k} channels {c} not divisible by 4 (sub-pixel fusion site)"
                )));
            }
            let site = c / 4;
            if site % 2 != 0 {
                return Err(Error::Config(format!(
                    "fusion site at level {k} has odd width {site}"
                )));
            }
            if site % self.heads != 0 {
                return Err(Error::Config(format!(
                    "fusion site width {site} at level {k} not divisible into {} heads",
                    self.heads
                )));
            }
        }
        // Cross-layer bridges sub-pixel-upsample an already-upsampled site.
        for k in 3..=l {
            if self.channels[k] % 16 != 0 {
                return Err(Error::Config(format!(
                    "level {k} channels {} not divisible by 16 (cross-layer bridge)",
                    self.channels[k]
                )));
            }
        }
        if self.channels[1] % 4 != 0 {
            return Err(Error::Config(format!(
                "level 1 channels {} not divisible by 4 (level-0 bridge)",
                self.channels[1]
            )));
        }
        Ok(())
    }

    /// Spatial divisor the input must satisfy: the pyramid needs 2^L and the
    /// coarsest fusion site (at 1/2^(L-1)) needs whole windows.
    pub fn spatial_divisor(&self) -> usize {
        let l = self.top_level();
        (1 << l).max((1 << (l - 1)) * self.window_size)
    }
}

/// Supplies general prior feature maps for levels 2..=L. The default is the
/// toy convolutional encoder below; tests substitute stubs through this
/// interface.
pub trait GeneralPriorExtractor {
    fn extract(&self, image: &Tensor) -> Result<BTreeMap<usize, Tensor>>;
}

/// Small stride-2 convolutional chain standing in for a pretrained
/// transformer backbone (which is out of scope at this scale). Each stage
/// halves the resolution and projects to the configured pyramid width.
pub struct ToyGpfen {
    stem: Conv2d,
    stages: Vec<(Conv2d, Conv2d)>, // (downsample, 1x1 projection)
    widths: Vec<usize>,
}

impl ToyGpfen {
    pub fn new(vs: &mut VarStore, name: &str, cfg: &NetworkConfig) -> Result<Self> {
        let w = &cfg.gpfen_widths;
        let stem = Conv2d::new(vs, &format!("{name}.stem"), 3, w[0], 3, 2)?;
        let mut stages = Vec::new();
        for (i, &width) in w.iter().enumerate() {
            let cin = if i == 0 { w[0] } else { w[i - 1] };
            let down = Conv2d::new(vs, &format!("{name}.down{i}"), cin, width, 3, 2)?;
            let proj = Conv2d::new(
                vs,
                &format!("{name}.proj{i}"),
                width,
                cfg.channels[i + 2],
                1,
                1,
            )?;
            stages.push((down, proj));
        }
        Ok(Self {
            stem,
            stages,
            widths: w.clone(),
        })
    }

    pub fn param_count(&self) -> u64 {
        self.stem.param_count()
            + self
                .stages
                .iter()
                .map(|(d, p)| d.param_count() + p.param_count())
                .sum::<u64>()
    }

    pub fn flop_count(&self, h: usize, w: usize) -> u64 {
        let mut total = self.stem.flop_count(h, w);
        let (mut sh, mut sw) = (h / 2, w / 2);
        for (down, proj) in &self.stages {
            total += down.flop_count(sh, sw);
            sh /= 2;
            sw /= 2;
            total += proj.flop_count(sh, sw);
        }
        total
    }
}

impl GeneralPriorExtractor for ToyGpfen {
    fn extract(&self, image: &Tensor) -> Result<BTreeMap<usize, Tensor>> {
        let mut x = self.stem.forward(image)?; // 1/2 resolution
        let mut out = BTreeMap::new();
        for (i, (down, proj)) in self.stages.iter().enumerate() {
            x = down.forward(&x)?.relu()?;
            out.insert(i + 2, proj.forward(&x)?);
        }
        let _ = &self.widths;
        Ok(out)
    }
}

/// Zero-feature stub used to exercise the extractor plug-in path.
pub struct ZeroExtractor {
    pub channels: Vec<usize>,
}

impl GeneralPriorExtractor for ZeroExtractor {
    fn extract(&self, image: &Tensor) -> Result<BTreeMap<usize, Tensor>> {
        let (b, _c, h, w) = image.dims4()?;
        let mut out = BTreeMap::new();
        for (k, &c) in self.channels.iter().enumerate().skip(2) {
            let s = 1usize << k;
            out.insert(
                k,
                Tensor::zeros((b, c, h / s, w / s), image.dtype(), image.device())?,
            );
        }
        Ok(out)
    }
}

struct TpfenStage {
    mugi: Vec<MugiBlock>,
    down_l: Conv2d,
    down_r: Conv2d,
}

/// Dual-stream prior encoder: two 3x3 stems (convolutional prior from the
/// image, transmission prior from the corrected image), then per level a run
/// of MuGI interactions followed by stride-2 downsampling convolutions.
pub struct Tpfen {
    stem_l: Conv2d,
    stem_r: Conv2d,
    stages: Vec<TpfenStage>,
    channels: Vec<usize>,
}

impl Tpfen {
    pub fn new(vs: &mut VarStore, name: &str, cfg: &NetworkConfig) -> Result<Self> {
        let c = &cfg.channels;
        let stem_l = Conv2d::new(vs, &format!("{name}.stem_l"), 3, c[0], 3, 1)?;
        let stem_r = Conv2d::new(vs, &format!("{name}.stem_r"), 3, c[0], 3, 1)?;
        let mut stages = Vec::new();
        for k in 1..c.len() {
            let mut mugi = Vec::new();
            for m in 0..cfg.mugi_per_level {
                mugi.push(MugiBlock::new(
                    vs,
                    &format!("{name}.stage{k}.mugi{m}"),
                    c[k - 1],
                )?);
            }
            stages.push(TpfenStage {
                mugi,
                down_l: Conv2d::new(vs, &format!("{name}.stage{k}.down_l"), c[k - 1], c[k], 3, 2)?,
                down_r: Conv2d::new(vs, &format!("{name}.stage{k}.down_r"), c[k - 1], c[k], 3, 2)?,
            });
        }
        Ok(Self {
            stem_l,
            stem_r,
            stages,
            channels: c.clone(),
        })
    }

    /// Levels 0..=L; level 0 holds the raw stem outputs.
    pub fn forward(&self, image: &Tensor, t_prior: &Tensor) -> Result<Vec<StreamPair>> {
        crate::types::check_same_shape(image, t_prior, "tpfen inputs")?;
        let mut levels = Vec::with_capacity(self.channels.len());
        let mut cur = StreamPair::new(self.stem_l.forward(image)?, self.stem_r.forward(t_prior)?)?;
        levels.push(cur.clone());
        for stage in &self.stages {
            for m in &stage.mugi {
                cur = m.forward(&cur)?;
            }
            cur = StreamPair::new(
                stage.down_l.forward(&cur.left)?,
                stage.down_r.forward(&cur.right)?,
            )?;
            levels.push(cur.clone());
        }
        Ok(levels)
    }

    pub fn param_count(&self) -> u64 {
        self.stem_l.param_count()
            + self.stem_r.param_count()
            + self
                .stages
                .iter()
                .map(|s| {
                    s.mugi.iter().map(|m| m.param_count()).sum::<u64>()
                        + s.down_l.param_count()
                        + s.down_r.param_count()
                })
                .sum::<u64>()
    }

    pub fn flop_count(&self, h: usize, w: usize) -> u64 {
        let mut total = self.stem_l.flop_count(h, w) + self.stem_r.flop_count(h, w);
        let (mut sh, mut sw) = (h, w);
        for stage in &self.stages {
            for m in &stage.mugi {
                total += m.flop_count(sh, sw);
            }
            total += stage.down_l.flop_count(sh, sw) + stage.down_r.flop_count(sh, sw);
            sh /= 2;
            sw /= 2;
        }
        total
    }
}

/// Cross-layer step from level k+1 down to level k: the upper pair is
/// sub-pixel upsampled, interacted, convolved to the level-k site width,
/// merged into a single guidance map, and fused with the level-k same-layer
/// features.
struct CrossStage {
    mugi: MugiBlock,
    conv_l: Conv2d,
    conv_r: Conv2d,
    guide: Conv2d,
    fuse: InteractionBlock,
}

/// Hierarchical dual-prior fusion.
pub struct Dpfin {
    same: Vec<InteractionBlock>, // level k at index k-2
    cross: Vec<CrossStage>,      // step to level k at index k-2, k in 2..L
    merge1_l: Conv2d,
    merge1_r: Conv2d,
    bridge_mugi: MugiBlock,
    bridge_conv_l: Conv2d,
    bridge_conv_r: Conv2d,
    merge0_l: Conv2d,
    merge0_r: Conv2d,
    cfg: NetworkConfig,
}

impl Dpfin {
    pub fn new(vs: &mut VarStore, name: &str, cfg: &NetworkConfig) -> Result<Self> {
        let l = cfg.top_level();
        let mut same = Vec::new();
        for k in 2..=l {
            same.push(InteractionBlock::new(
                vs,
                &format!("{name}.same{k}"),
                cfg.interaction,
                cfg.site_channels(k),
                cfg.window_size,
                cfg.heads,
            )?);
        }
        let mut cross = Vec::new();
        for k in 2..l {
            let upper = cfg.site_channels(k + 1) / 4;
            let site = cfg.site_channels(k);
            cross.push(CrossStage {
                mugi: MugiBlock::new(vs, &format!("{name}.cross{k}.mugi"), upper)?,
                conv_l: Conv2d::new(vs, &format!("{name}.cross{k}.conv_l"), upper, site, 3, 1)?,
                conv_r: Conv2d::new(vs, &format!("{name}.cross{k}.conv_r"), upper, site, 3, 1)?,
                guide: Conv2d::new(vs, &format!("{name}.cross{k}.guide"), 2 * site, site, 1, 1)?,
                fuse: InteractionBlock::new(
                    vs,
                    &format!("{name}.cross{k}.fuse"),
                    cfg.interaction,
                    site,
                    cfg.window_size,
                    cfg.heads,
                )?,
            });
        }
        let (c0, c1) = (cfg.channels[0], cfg.channels[1]);
        let site2 = cfg.site_channels(2);
        Ok(Self {
            same,
            cross,
            merge1_l: Conv2d::new(vs, &format!("{name}.merge1_l"), site2 + c1, c1, 1, 1)?,
            merge1_r: Conv2d::new(vs, &format!("{name}.merge1_r"), site2 + c1, c1, 1, 1)?,
            bridge_mugi: MugiBlock::new(vs, &format!("{name}.bridge.mugi"), c1 / 4)?,
            bridge_conv_l: Conv2d::new(vs, &format!("{name}.bridge.conv_l"), c1 / 4, c0, 3, 1)?,
            bridge_conv_r: Conv2d::new(vs, &format!("{name}.bridge.conv_r"), c1 / 4, c0, 3, 1)?,
            merge0_l: Conv2d::new(vs, &format!("{name}.merge0_l"), 2 * c0, c0, 1, 1)?,
            merge0_r: Conv2d::new(vs, &format!("{name}.merge0_r"), 2 * c0, c0, 1, 1)?,
            cfg: cfg.clone(),
        })
    }

    /// Fuse general and transmission features of one level: both are
    /// sub-pixel upsampled, then the site block runs once per stream with
    /// the general features leading; the stream-side outputs are kept.
    pub fn same_layer_fuse(
        &self,
        level: usize,
        f_g: &Tensor,
        f_t: &StreamPair,
    ) -> Result<StreamPair> {
        let block = &self.same[level - 2];
        let g_up = pixel_shuffle(f_g, 2)?;
        let t_up = f_t.map(|t| pixel_shuffle(t, 2))?;
        if g_up.dims() != t_up.left.dims() {
            return Err(Error::Config(format!(
                "same-layer fuse at level {level}: general {:?} vs transmission {:?}",
                g_up.dims(),
                t_up.left.dims()
            )));
        }
        let left = block.forward(&StreamPair::new(g_up.clone(), t_up.left)?)?.right;
        let right = block.forward(&StreamPair::new(g_up, t_up.right)?)?.right;
        StreamPair::new(left, right)
    }

    /// Propagate level-(k+1) fused features down to level k and fuse with
    /// that level's same-layer features.
    fn cross_layer_fuse(&self, k: usize, upper: &StreamPair, same_k: &StreamPair) -> Result<StreamPair> {
        let stage = &self.cross[k - 2];
        let up = upper.map(|t| pixel_shuffle(t, 2))?;
        let up = stage.mugi.forward(&up)?;
        let up = StreamPair::new(
            stage.conv_l.forward(&up.left)?,
            stage.conv_r.forward(&up.right)?,
        )?;
        crate::types::check_same_shape(&up.left, &same_k.left, "cross-layer spatial alignment")?;
        let guidance = stage
            .guide
            .forward(&Tensor::cat(&[&up.left, &up.right], 1)?)?;
        let left = stage
            .fuse
            .forward(&StreamPair::new(guidance.clone(), same_k.left.clone())?)?
            .right;
        let right = stage
            .fuse
            .forward(&StreamPair::new(guidance, same_k.right.clone())?)?
            .right;
        StreamPair::new(left, right)
    }

    /// Full fusion pass: pyramid + general features in, level-0 fused pair
    /// out.
    pub fn forward(
        &self,
        pyramid: &[StreamPair],
        general: &BTreeMap<usize, Tensor>,
    ) -> Result<StreamPair> {
        let l = self.cfg.top_level();
        let mut same = Vec::new();
        for k in 2..=l {
            let f_g = general.get(&k).ok_or_else(|| {
                Error::Config(format!("general prior features missing level {k}"))
            })?;
            same.push(self.same_layer_fuse(k, f_g, &pyramid[k])?);
        }
        let mut cur = same.last().unwrap().clone();
        for k in (2..l).rev() {
            cur = self.cross_layer_fuse(k, &cur, &same[k - 2])?;
        }
        // Level 1: no general features; merge with transmission features.
        let m1 = StreamPair::new(
            self.merge1_l
                .forward(&Tensor::cat(&[&cur.left, &pyramid[1].left], 1)?)?,
            self.merge1_r
                .forward(&Tensor::cat(&[&cur.right, &pyramid[1].right], 1)?)?,
        )?;
        // Bridge to full resolution.
        let up = m1.map(|t| pixel_shuffle(t, 2))?;
        let up = self.bridge_mugi.forward(&up)?;
        let up = StreamPair::new(
            self.bridge_conv_l.forward(&up.left)?,
            self.bridge_conv_r.forward(&up.right)?,
        )?;
        // Level 0: merge with stem (convolutional and transmission prior)
        // features.
        StreamPair::new(
            self.merge0_l
                .forward(&Tensor::cat(&[&up.left, &pyramid[0].left], 1)?)?,
            self.merge0_r
                .forward(&Tensor::cat(&[&up.right, &pyramid[0].right], 1)?)?,
        )
    }

    pub fn param_count(&self) -> u64 {
        self.same.iter().map(|b| b.param_count()).sum::<u64>()
            + self
                .cross
                .iter()
                .map(|s| {
                    s.mugi.param_count()
                        + s.conv_l.param_count()
                        + s.conv_r.param_count()
                        + s.guide.param_count()
                        + s.fuse.param_count()
                })
                .sum::<u64>()
            + self.merge1_l.param_count()
            + self.merge1_r.param_count()
            + self.bridge_mugi.param_count()
            + self.bridge_conv_l.param_count()
            + self.bridge_conv_r.param_count()
            + self.merge0_l.param_count()
            + self.merge0_r.param_count()
    }

    pub fn flop_count(&self, h: usize, w: usize) -> u64 {
        let l = self.cfg.top_level();
        let mut total = 0u64;
        // Same-layer sites: level k runs at 1/2^(k-1), block applied twice.
        for k in 2..=l {
            let (sh, sw) = (h >> (k - 1), w >> (k - 1));
            total += 2 * self.same[k - 2].flop_count(sh, sw);
        }
        for k in 2..l {
            let stage = &self.cross[k - 2];
            let (sh, sw) = (h >> (k - 1), w >> (k - 1));
            total += stage.mugi.flop_count(sh, sw)
                + stage.conv_l.flop_count(sh, sw)
                + stage.conv_r.flop_count(sh, sw)
                + stage.guide.flop_count(sh, sw)
                + 2 * stage.fuse.flop_count(sh, sw);
        }
        let (h1, w1) = (h / 2, w / 2);
        total += self.merge1_l.flop_count(h1, w1) + self.merge1_r.flop_count(h1, w1);
        total += self.bridge_mugi.flop_count(h, w)
            + self.bridge_conv_l.flop_count(h, w)
            + self.bridge_conv_r.flop_count(h, w);
        total += self.merge0_l.flop_count(h, w) + self.merge0_r.flop_count(h, w);
        total
    }
}

/// Output heads: one MuGI interaction at full resolution, a convolution
/// emitting T and R (six channels split three/three), and the LRM branch for
/// the nonlinear residual (two 3x3 convolutions around a sigmoid gate; the
/// original module's internals are not public, this is a stand-in).
pub struct Heads {
    mugi: MugiBlock,
    out: Conv2d,
    lrm_conv1: Conv2d,
    lrm_conv2: Conv2d,
    c0: usize,
}

impl Heads {
    pub fn new(vs: &mut VarStore, name: &str, c0: usize) -> Result<Self> {
        Ok(Self {
            mugi: MugiBlock::new(vs, &format!("{name}.mugi"), c0)?,
            out: Conv2d::new(vs, &format!("{name}.out"), 2 * c0, 6, 3, 1)?,
            lrm_conv1: Conv2d::new(vs, &format!("{name}.lrm1"), 2 * c0, c0, 3, 1)?,
            lrm_conv2: Conv2d::new(vs, &format!("{name}.lrm2"), c0, 3, 3, 1)?,
            c0,
        })
    }

    /// The transmission head predicts a correction to the mixed image
    /// (global residual); reflection and residual maps are predicted
    /// directly.
    pub fn forward(&self, f0: &StreamPair, image: &Tensor) -> Result<SeparationOutput> {
        let p = self.mugi.forward(f0)?;
        let joint = Tensor::cat(&[&p.left, &p.right], 1)?;
        let tr = self.out.forward(&joint)?;
        let t_hat = (tr.narrow(1, 0, 3)?.contiguous()? + image)?;
        let r_hat = tr.narrow(1, 3, 3)?.contiguous()?;
        let h = self.lrm_conv1.forward(&joint)?;
        let phi_hat = self.lrm_conv2.forward(&h.mul(&sigmoid(&h)?)?)?;
        Ok(SeparationOutput {
            t_hat,
            r_hat,
            phi_hat,
        })
    }

    pub fn param_count(&self) -> u64 {
        self.mugi.param_count()
            + self.out.param_count()
            + self.lrm_conv1.param_count()
            + self.lrm_conv2.param_count()
    }

    pub fn flop_count(&self, h: usize, w: usize) -> u64 {
        // Gate: sigmoid + multiply over the hidden map.
        self.mugi.flop_count(h, w)
            + self.out.flop_count(h, w)
            + self.lrm_conv1.flop_count(h, w)
            + 2 * (h * w * self.c0) as u64
            + self.lrm_conv2.flop_count(h, w)
            // Global residual add on the transmission output.
            + (3 * h * w) as u64
    }
}

/// The separation network (everything except the correction prior): feature
/// pyramids, fusion, heads.
pub struct Dscrt {
    pub cfg: NetworkConfig,
    pub tpfen: Tpfen,
    pub gpfen: ToyGpfen,
    pub dpfin: Dpfin,
    pub heads: Heads,
}

impl Dscrt {
    pub fn new(vs: &mut VarStore, prefix: &str, cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            tpfen: Tpfen::new(vs, &format!("{prefix}.tpfen"), cfg)?,
            gpfen: ToyGpfen::new(vs, &format!("{prefix}.gpfen"), cfg)?,
            dpfin: Dpfin::new(vs, &format!("{prefix}.dpfin"), cfg)?,
            heads: Heads::new(vs, &format!("{prefix}.heads"), cfg.channels[0])?,
        })
    }

    pub fn forward(&self, image: &Tensor, t_prior: &Tensor) -> Result<SeparationOutput> {
        self.forward_with_extractor(image, t_prior, &self.gpfen)
    }

    pub fn forward_with_extractor(
        &self,
        image: &Tensor,
        t_prior: &Tensor,
        extractor: &dyn GeneralPriorExtractor,
    ) -> Result<SeparationOutput> {
        let (_b, _c, h, w) = image.dims4()?;
        let div = self.cfg.spatial_divisor();
        if h % div != 0 || w % div != 0 {
            invalid_arg!("input {h}x{w} not divisible by {div}; pad first");
        }
        let pyramid = self.tpfen.forward(image, t_prior)?;
        let general = extractor.extract(image)?;
        let f0 = self.dpfin.forward(&pyramid, &general)?;
        self.heads.forward(&f0, image)
    }

    pub fn param_count(&self) -> u64 {
        self.tpfen.param_count()
            + self.gpfen.param_count()
            + self.dpfin.param_count()
            + self.heads.param_count()
    }

    pub fn flop_count(&self, h: usize, w: usize) -> u64 {
        self.tpfen.flop_count(h, w)
            + self.gpfen.flop_count(h, w)
            + self.dpfin.flop_count(h, w)
            + self.heads.flop_count(h, w)
    }
}

/// Full model: optional correction prior plus the separation network. With
/// no prior network the mixed image itself is used as the prior (the
/// separation-only variant).
pub struct Dpit {
    pub llcn: Option<Llcn>,
    pub dscrt: Dscrt,
}

impl Dpit {
    pub fn new(
        vs: &mut VarStore,
        llcn: Option<(&LlcnConfig, LlcnKind)>,
        net: &NetworkConfig,
    ) -> Result<Self> {
        let llcn = match llcn {
            Some((cfg, kind)) => Some(Llcn::new(vs, "llcn", cfg, kind)?),
            None => None,
        };
        Ok(Self {
            llcn,
            dscrt: Dscrt::new(vs, "dscrt", net)?,
        })
    }

    /// Divisor covering both the pyramid and the prior network strides.
    pub fn spatial_divisor(&self) -> usize {
        let net = self.dscrt.cfg.spatial_divisor();
        match &self.llcn {
            Some(l) => net.max(l.cfg.stride_product()),
            None => net,
        }
    }

    /// Pads the input to the working resolution, runs the prior and the
    /// separation network, and crops every output back to the input size.
    pub fn forward(&self, image: &Tensor) -> Result<(SeparationOutput, Tensor)> {
        let (_b, _c, h, w) = image.dims4()?;
        let padded = reflect_pad_to_multiple(image, self.spatial_divisor())?;
        let t_prior = match &self.llcn {
            Some(l) => l.forward(&padded)?,
            None => padded.clone(),
        };
        let out = self.dscrt.forward(&padded, &t_prior)?;
        let crop = |t: &Tensor| -> Result<Tensor> {
            Ok(t.narrow(2, 0, h)?.narrow(3, 0, w)?.contiguous()?)
        };
        Ok((
            SeparationOutput {
                t_hat: crop(&out.t_hat)?,
                r_hat: crop(&out.r_hat)?,
                phi_hat: crop(&out.phi_hat)?,
            },
            crop(&t_prior)?,
        ))
    }

    pub fn param_count(&self) -> u64 {
        self.dscrt.param_count() + self.llcn.as_ref().map_or(0, |l| l.param_count())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dscra::{attention_eval_count, reset_attention_eval_count};
    use candle_core::{DType, Device, Var};

    fn dev() -> Device {
        Device::Cpu
    }

    fn max_abs(t: &Tensor) -> f64 {
        t.abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .to_vec0::<f64>()
            .unwrap()
    }

    #[test]
    fn config_validation_catches_bad_widths() {
        assert!(NetworkConfig::default().validate().is_ok());
        assert!(NetworkConfig::micro().validate().is_ok());
        let mut bad = NetworkConfig::default();
        bad.channels[3] = 97; // not divisible by 4
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = NetworkConfig::default();
        bad.channels = vec![4, 8];
        assert!(bad.validate().is_err());
        let mut bad = NetworkConfig::micro();
        bad.heads = 3; // site width 2 not divisible
        assert!(bad.validate().is_err());
        let mut bad = NetworkConfig::default();
        bad.gpfen_widths.pop();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn spatial_divisors() {
        assert_eq!(NetworkConfig::default().spatial_divisor(), 64);
        assert_eq!(NetworkConfig::micro().spatial_divisor(), 4);
    }

    #[test]
    fn tpfen_level_sizes_halve() {
        let cfg = NetworkConfig::micro();
        let mut vs = VarStore::new(0, DType::F32, dev());
        let tp = Tpfen::new(&mut vs, "tp", &cfg).unwrap();
        let i = Tensor::rand(0f32, 1f32, (1, 3, 8, 8), &dev()).unwrap();
        let levels = tp.forward(&i, &i).unwrap();
        assert_eq!(levels.len(), 3);
        for (k, p) in levels.iter().enumerate() {
            let (_b, c, h, w) = p.dims4().unwrap();
            assert_eq!(c, cfg.channels[k]);
            assert_eq!(h, 8 >> k);
            assert_eq!(w, 8 >> k);
        }
    }

    #[test]
    fn tied_stems_collapse_streams_when_prior_equals_image() {
        let cfg = NetworkConfig::micro();
        let mut vs = VarStore::new(1, DType::F32, dev());
        let tp = Tpfen::new(&mut vs, "tp", &cfg).unwrap();
        for p in ["weight", "bias"] {
            let l = vs.get(&format!("tp.stem_l.{p}")).unwrap().as_tensor().clone();
            vs.get(&format!("tp.stem_r.{p}")).unwrap().set(&l).unwrap();
        }
        let i = Tensor::rand(0f32, 1f32, (1, 3, 8, 8), &dev()).unwrap();
        let levels = tp.forward(&i, &i).unwrap();
        assert_eq!(max_abs(&(&levels[0].left - &levels[0].right).unwrap()), 0.0);
    }

    #[test]
    fn gpfen_emits_levels_two_through_top() {
        let cfg = NetworkConfig::default();
        let mut vs = VarStore::new(2, DType::F32, dev());
        let gp = ToyGpfen::new(&mut vs, "gp", &cfg).unwrap();
        let i = Tensor::rand(0f32, 1f32, (1, 3, 64, 64), &dev()).unwrap();
        let maps = gp.extract(&i).unwrap();
        assert_eq!(maps.keys().copied().collect::<Vec<_>>(), vec![2, 3, 4, 5]);
        for (k, m) in &maps {
            let (_b, c, h, w) = m.dims4().unwrap();
            assert_eq!(c, cfg.channels[*k]);
            assert_eq!(h, 64 >> k);
            assert_eq!(w, 64 >> k);
        }
    }

    fn micro_model(seed: u64, with_prior: bool) -> (VarStore, Dpit) {
        let mut vs = VarStore::new(seed, DType::F64, dev());
        let lcfg = LlcnConfig::tiny();
        let llcn = if with_prior {
            Some((&lcfg, LlcnKind::Llcm))
        } else {
            None
        };
        let model = Dpit::new(&mut vs, llcn, &NetworkConfig::micro()).unwrap();
        (vs, model)
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let (_vs, model) = micro_model(3, true);
        let i = Tensor::rand(0f64, 1f64, (2, 3, 8, 8), &dev()).unwrap();
        let (out, t_prior) = model.forward(&i).unwrap();
        for t in [&out.t_hat, &out.r_hat, &out.phi_hat, &t_prior] {
            assert_eq!(t.dims(), i.dims());
        }
        let (out2, _) = model.forward(&i).unwrap();
        assert_eq!(max_abs(&(out.t_hat - out2.t_hat).unwrap()), 0.0);
        assert_eq!(max_abs(&(out.r_hat - out2.r_hat).unwrap()), 0.0);
    }

    #[test]
    fn forward_pads_and_crops_odd_sizes() {
        let (_vs, model) = micro_model(4, true);
        // Divisor is 4 for the micro net, 4 for the tiny prior; 10 needs
        // padding to 12.
        let i = Tensor::rand(0f64, 1f64, (1, 3, 10, 10), &dev()).unwrap();
        let (out, t_prior) = model.forward(&i).unwrap();
        assert_eq!(out.t_hat.dims(), &[1, 3, 10, 10]);
        assert_eq!(t_prior.dims(), &[1, 3, 10, 10]);
    }

    #[test]
    fn without_prior_the_image_is_the_prior() {
        let (_vs, model) = micro_model(5, false);
        let i = Tensor::rand(0f64, 1f64, (1, 3, 8, 8), &dev()).unwrap();
        let (_out, t_prior) = model.forward(&i).unwrap();
        assert_eq!(max_abs(&(t_prior - &i).unwrap()), 0.0);
    }

    #[test]
    fn unpadded_forward_rejects_bad_resolution() {
        let (_vs, model) = micro_model(6, false);
        let i = Tensor::rand(0f64, 1f64, (1, 3, 6, 6), &dev()).unwrap();
        assert!(matches!(
            model.dscrt.forward(&i, &i),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn zero_extractor_plugs_in() {
        let (_vs, model) = micro_model(7, false);
        let i = Tensor::rand(0f64, 1f64, (1, 3, 8, 8), &dev()).unwrap();
        let stub = ZeroExtractor {
            channels: model.dscrt.cfg.channels.clone(),
        };
        let out = model.dscrt.forward_with_extractor(&i, &i, &stub).unwrap();
        assert_eq!(out.t_hat.dims(), i.dims());
    }

    #[test]
    fn param_count_matches_store() {
        let (vs, model) = micro_model(8, true);
        assert_eq!(model.param_count(), vs.num_params() as u64);
        let (vs, model) = micro_model(9, false);
        assert_eq!(model.param_count(), vs.num_params() as u64);
    }

    #[test]
    fn attention_evaluations_per_fusion_site() {
        // Micro config: one same-layer site, no cross stages; the site block
        // runs once per stream, two evaluations each.
        let (_vs, model) = micro_model(10, false);
        let i = Tensor::rand(0f64, 1f64, (1, 3, 8, 8), &dev()).unwrap();
        reset_attention_eval_count();
        model.forward(&i).unwrap();
        assert_eq!(attention_eval_count(), 4);
    }

    #[test]
    fn gradients_reach_both_image_and_prior() {
        let (_vs, model) = micro_model(11, false);
        let i = Var::from_tensor(&Tensor::rand(0f64, 1f64, (1, 3, 8, 8), &dev()).unwrap()).unwrap();
        let tp = Var::from_tensor(&Tensor::rand(0f64, 1f64, (1, 3, 8, 8), &dev()).unwrap()).unwrap();
        let out = model
            .dscrt
            .forward(i.as_tensor(), tp.as_tensor())
            .unwrap();
        let loss = (out.t_hat.sqr().unwrap().sum_all().unwrap()
            + out.phi_hat.sqr().unwrap().sum_all().unwrap())
        .unwrap();
        let grads = loss.backward().unwrap();
        let gi = grads.get(&i).expect("image gradient");
        let gt = grads.get(&tp).expect("prior gradient");
        assert!(max_abs(gi) > 0.0);
        assert!(max_abs(gt) > 0.0);
    }

    #[test]
    fn end_to_end_micro_gradient_check() {
        use crate::gradcheck::{assert_grads_match, GradCheckOpts};
        let (vs, model) = micro_model(12, true);
        let i = Tensor::rand(0f64, 1f64, (1, 3, 8, 8), &dev()).unwrap();
        // The prior decoder heads are zero-initialized; randomize them so
        // their upstream path carries gradient.
        for (name, var) in vs.vars() {
            if name.contains(".head.") {
                let r = Tensor::rand(-0.5f64, 0.5f64, var.dims(), &dev()).unwrap();
                var.set(&r).unwrap();
            }
        }
        let vars = vs.vars();
        assert_grads_match(
            &vars,
            || {
                let (out, t_prior) = model.forward(&i)?;
                Ok(((out.t_hat.sqr()?.sum_all()? + out.r_hat.sqr()?.sum_all()?)?
                    + (out.phi_hat.sqr()?.sum_all()? + t_prior.sqr()?.sum_all()?)?)?)
            },
            &GradCheckOpts {
                max_per_tensor: 2,
                ..GradCheckOpts::default()
            },
        )
        .unwrap();
    }
}
