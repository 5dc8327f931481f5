//! Interchangeable dual-stream interaction blocks for the ablation study.
//!
//! The MLP, YTMT-style and MuGI-style blocks are deliberately small
//! stand-ins that match the interface (StreamPair -> StreamPair), not the
//! originals' sizes or internals. The DAI-style block reuses the DSCRAB
//! feed-forward stage so that the cost difference between the two is
//! entirely in the attention pathway.

use candle_core::Tensor;

use crate::dscra::{
    window_partition, window_reverse, Dscrab, DualStreamFfn, WindowAttention, WindowConfig,
    BLOCK_SCALE_INIT,
};
use crate::error::{Error, Result};
use crate::invalid_arg;
use crate::nn::{relu, sigmoid, Conv2d, Init, LayerNorm, VarStore};
use crate::types::StreamPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionKind {
    Mlp,
    Ytmt,
    Mugi,
    Daib,
    Dscrab,
}

impl std::str::FromStr for InteractionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "ytmt" => Ok(Self::Ytmt),
            "mugi" => Ok(Self::Mugi),
            "daib" => Ok(Self::Daib),
            "dscrab" => Ok(Self::Dscrab),
            other => Err(Error::Config(format!("unknown interaction kind {other:?}"))),
        }
    }
}

/// Per-stream two-layer pointwise MLP with a residual; no cross-stream
/// exchange at all (the "no interaction" ablation row).
pub struct MlpBlock {
    fc1_l: Conv2d,
    fc2_l: Conv2d,
    fc1_r: Conv2d,
    fc2_r: Conv2d,
    channels: usize,
}

impl MlpBlock {
    pub fn new(vs: &mut VarStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            fc1_l: Conv2d::new(vs, &format!("{name}.fc1_l"), channels, channels, 1, 1)?,
            fc2_l: Conv2d::new(vs, &format!("{name}.fc2_l"), channels, channels, 1, 1)?,
            fc1_r: Conv2d::new(vs, &format!("{name}.fc1_r"), channels, channels, 1, 1)?,
            fc2_r: Conv2d::new(vs, &format!("{name}.fc2_r"), channels, channels, 1, 1)?,
            channels,
        })
    }

    pub fn forward(&self, p: &StreamPair) -> Result<StreamPair> {
        let run = |x: &Tensor, fc1: &Conv2d, fc2: &Conv2d| -> Result<Tensor> {
            Ok((x + fc2.forward(&relu(&fc1.forward(x)?)?)?)?)
        };
        StreamPair::new(
            run(&p.left, &self.fc1_l, &self.fc2_l)?,
            run(&p.right, &self.fc1_r, &self.fc2_r)?,
        )
    }

    pub fn param_count(&self) -> u64 {
        self.fc1_l.param_count()
            + self.fc2_l.param_count()
            + self.fc1_r.param_count()
            + self.fc2_r.param_count()
    }

    pub fn flop_count(&self, h: usize, w: usize) -> u64 {
        let elems = (h * w * self.channels) as u64;
        // Per stream: two convs, a relu, a residual add.
        2 * (self.fc1_l.flop_count(h, w) + self.fc2_l.flop_count(h, w) + 2 * elems)
    }
}

/// Activation-exchange block: each stream keeps its positive part and
/// receives the other stream's negative part, then a per-stream convolution
/// with residual. Simplified from the cited dual-stream exchange idea.
pub struct YtmtBlock {
    conv_l: Conv2d,
    conv_r: Conv2d,
    channels: usize,
}

impl YtmtBlock {
    pub fn new(vs: &mut VarStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            conv_l: Conv2d::new(vs, &format!("{name}.conv_l"), channels, channels, 3, 1)?,
            conv_r: Conv2d::new(vs, &format!("{name}.conv_r"), channels, channels, 3, 1)?,
            channels,
        })
    }

    pub fn forward(&self, p: &StreamPair) -> Result<StreamPair> {
        let pos_l = relu(&p.left)?;
        let pos_r = relu(&p.right)?;
        let neg_l = (&p.left - &pos_l)?;
        let neg_r = (&p.right - &pos_r)?;
        let exch_l = (pos_l + neg_r)?;
        let exch_r = (pos_r + neg_l)?;
        StreamPair::new(
            (&exch_l + self.conv_l.forward(&exch_l)?)?,
            (&exch_r + self.conv_r.forward(&exch_r)?)?,
        )
    }

    pub fn param_count(&self) -> u64 {
        self.conv_l.param_count() + self.conv_r.param_count()
    }

    pub fn flop_count(&self, h: usize, w: usize) -> u64 {
        let elems = (h * w * self.channels) as u64;
        // Per stream: relu, negative-part subtract, exchange add, conv,
        // residual add.
        2 * (self.conv_l.flop_count(h, w) + 4 * elems)
    }
}

/// Mutually-gated interaction: each stream is modulated by a sigmoid gate
/// computed from the other, with a residual, then refined by a per-stream
/// convolution (itself residual). Simplified from the cited gating idea.
pub struct MugiBlock {
    gate_l: Conv2d,
    gate_r: Conv2d,
    conv_l: Conv2d,
    conv_r: Conv2d,
    channels: usize,
}

impl MugiBlock {
    pub fn new(vs: &mut VarStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gate_l: Conv2d::new(vs, &format!("{name}.gate_l"), channels, channels, 1, 1)?,
            gate_r: Conv2d::new(vs, &format!("{name}.gate_r"), channels, channels, 1, 1)?,
            conv_l: Conv2d::new(vs, &format!("{name}.conv_l"), channels, channels, 3, 1)?,
            conv_r: Conv2d::new(vs, &format!("{name}.conv_r"), channels, channels, 3, 1)?,
            channels,
        })
    }

    pub fn forward(&self, p: &StreamPair) -> Result<StreamPair> {
        let mid_l = (p.left.mul(&sigmoid(&self.gate_l.forward(&p.right)?)?)? + &p.left)?;
        let mid_r = (p.right.mul(&sigmoid(&self.gate_r.forward(&p.left)?)?)? + &p.right)?;
        StreamPair::new(
            (&mid_l + self.conv_l.forward(&mid_l)?)?,
            (&mid_r + self.conv_r.forward(&mid_r)?)?,
        )
    }

    pub fn param_count(&self) -> u64 {
        self.gate_l.param_count()
            + self.gate_r.param_count()
            + self.conv_l.param_count()
            + self.conv_r.param_count()
    }

    pub fn flop_count(&self, h: usize, w: usize) -> u64 {
        let elems = (h * w * self.channels) as u64;
        // Per stream: gate conv + sigmoid + multiply + residual, then the
        // refinement conv + residual.
        2 * (self.gate_l.flop_count(h, w) + self.conv_l.flop_count(h, w) + 4 * elems)
    }
}

/// Dual-attention interaction block: per stream, one attention module is
/// evaluated twice — once self (stream attends to itself) and once cross
/// (stream queries the other) — for four windowed attention evaluations per
/// block. Residual scaling and the FFN match the DSCRAB recipe.
pub struct Daib {
    ln_left: LayerNorm,
    ln_right: LayerNorm,
    attn_l: WindowAttention,
    attn_r: WindowAttention,
    proj_l: crate::nn::Linear,
    proj_r: crate::nn::Linear,
    alpha: Tensor,
    beta: Tensor,
    ffn: DualStreamFfn,
    pub cfg: WindowConfig,
}

impl Daib {
    pub fn new(vs: &mut VarStore, name: &str, cfg: WindowConfig) -> Result<Self> {
        let c = cfg.channels();
        Ok(Self {
            ln_left: LayerNorm::new(vs, &format!("{name}.ln_left"), c)?,
            ln_right: LayerNorm::new(vs, &format!("{name}.ln_right"), c)?,
            attn_l: WindowAttention::new(vs, &format!("{name}.attn_l"), cfg)?,
            attn_r: WindowAttention::new(vs, &format!("{name}.attn_r"), cfg)?,
            proj_l: crate::nn::Linear::new(vs, &format!("{name}.proj_l"), c, c)?,
            proj_r: crate::nn::Linear::new(vs, &format!("{name}.proj_r"), c, c)?,
            alpha: vs.param(&format!("{name}.alpha"), &[1], Init::Const(BLOCK_SCALE_INIT))?,
            beta: vs.param(&format!("{name}.beta"), &[1], Init::Const(BLOCK_SCALE_INIT))?,
            ffn: DualStreamFfn::new(vs, &format!("{name}.ffn"), c)?,
            cfg,
        })
    }

    /// Self- and cross-attention outputs for one stream, pre-projection.
    pub fn stream_attention(
        &self,
        own_win: &Tensor,
        other_win: &Tensor,
        attn: &WindowAttention,
    ) -> Result<(Tensor, Tensor)> {
        Ok((attn.forward(own_win, own_win)?, attn.forward(own_win, other_win)?))
    }

    pub fn forward(&self, p: &StreamPair) -> Result<StreamPair> {
        let (_b, c, h, w) = p.dims4()?;
        if c != self.cfg.channels() {
            return Err(Error::Config(format!(
                "daib configured for {} channels, got {c}",
                self.cfg.channels()
            )));
        }
        let ws = self.cfg.window_size;
        if h % ws != 0 || w % ws != 0 {
            invalid_arg!("daib input {h}x{w} not divisible by window size {ws}");
        }
        let nhwc = |t: &Tensor| -> Result<Tensor> { Ok(t.permute((0, 2, 3, 1))?.contiguous()?) };
        let win_l = window_partition(&self.ln_left.forward(&nhwc(&p.left)?)?, ws)?;
        let win_r = window_partition(&self.ln_right.forward(&nhwc(&p.right)?)?, ws)?;
        let (self_l, cross_l) = self.stream_attention(&win_l, &win_r, &self.attn_l)?;
        let (self_r, cross_r) = self.stream_attention(&win_r, &win_l, &self.attn_r)?;
        let attn_of = |s: Tensor, x: Tensor, proj: &crate::nn::Linear| -> Result<Tensor> {
            let combined = proj.forward(&(s + x)?)?;
            let combined = window_reverse(&combined, ws, h, w)?;
            Ok(combined.permute((0, 3, 1, 2))?.contiguous()?)
        };
        let attn_l = attn_of(self_l, cross_l, &self.proj_l)?;
        let attn_r = attn_of(self_r, cross_r, &self.proj_r)?;
        let res1 = StreamPair::new(
            (&p.left + attn_l.broadcast_mul(&self.alpha)?)?,
            (&p.right + attn_r.broadcast_mul(&self.alpha)?)?,
        )?;
        let ffn_out = self.ffn.forward(&res1)?;
        StreamPair::new(
            (&res1.left + ffn_out.left.broadcast_mul(&self.beta)?)?,
            (&res1.right + ffn_out.right.broadcast_mul(&self.beta)?)?,
        )
    }

    pub fn param_count(&self) -> u64 {
        self.ln_left.param_count()
            + self.ln_right.param_count()
            + self.attn_l.param_count()
            + self.attn_r.param_count()
            + self.proj_l.param_count()
            + self.proj_r.param_count()
            + 2
            + self.ffn.param_count()
    }

    pub fn flop_count(&self, h: usize, w: usize) -> u64 {
        let c = self.cfg.channels();
        let elems = (h * w * c) as u64;
        let ln = 2 * self.ln_left.flop_count(h * w * c);
        // Two evaluations per stream.
        let attn = 2 * (self.attn_l.flop_count(h, w) + self.attn_r.flop_count(h, w));
        let sum = 2 * elems; // self + cross per stream
        let proj = self.proj_l.flop_count(h * w) + self.proj_r.flop_count(h * w);
        let res = 2 * 2 * elems * 2;
        ln + attn + sum + proj + res + self.ffn.flop_count(h, w)
    }

    pub fn attention_flops(&self, h: usize, w: usize) -> u64 {
        2 * (self.attn_l.flop_count(h, w) + self.attn_r.flop_count(h, w))
            + self.proj_l.flop_count(h * w)
            + self.proj_r.flop_count(h * w)
    }
}

/// Kind-dispatched interaction block, selected by config key
/// `interaction.kind`.
pub enum InteractionBlock {
    Mlp(MlpBlock),
    Ytmt(YtmtBlock),
    Mugi(MugiBlock),
    Daib(Daib),
    Dscrab(Dscrab),
}

impl InteractionBlock {
    pub fn new(
        vs: &mut VarStore,
        name: &str,
        kind: InteractionKind,
        channels: usize,
        window_size: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(match kind {
            InteractionKind::Mlp => Self::Mlp(MlpBlock::new(vs, name, channels)?),
            InteractionKind::Ytmt => Self::Ytmt(YtmtBlock::new(vs, name, channels)?),
            InteractionKind::Mugi => Self::Mugi(MugiBlock::new(vs, name, channels)?),
            InteractionKind::Daib => Self::Daib(Daib::new(
                vs,
                name,
                WindowConfig::for_channels(channels, window_size, heads)?,
            )?),
            InteractionKind::Dscrab => Self::Dscrab(Dscrab::new(
                vs,
                name,
                WindowConfig::for_channels(channels, window_size, heads)?,
            )?),
        })
    }

    pub fn kind(&self) -> InteractionKind {
        match self {
            Self::Mlp(_) => InteractionKind::Mlp,
            Self::Ytmt(_) => InteractionKind::Ytmt,
            Self::Mugi(_) => InteractionKind::Mugi,
            Self::Daib(_) => InteractionKind::Daib,
            Self::Dscrab(_) => InteractionKind::Dscrab,
        }
    }

    pub fn forward(&self, p: &StreamPair) -> Result<StreamPair> {
        match self {
            Self::Mlp(b) => b.forward(p),
            Self::Ytmt(b) => b.forward(p),
            Self::Mugi(b) => b.forward(p),
            Self::Daib(b) => b.forward(p),
            Self::Dscrab(b) => b.forward(p),
        }
    }

    pub fn param_count(&self) -> u64 {
        match self {
            Self::Mlp(b) => b.param_count(),
            Self::Ytmt(b) => b.param_count(),
            Self::Mugi(b) => b.param_count(),
            Self::Daib(b) => b.param_count(),
            Self::Dscrab(b) => b.param_count(),
        }
    }

    pub fn flop_count(&self, h: usize, w: usize) -> u64 {
        match self {
            Self::Mlp(b) => b.flop_count(h, w),
            Self::Ytmt(b) => b.flop_count(h, w),
            Self::Mugi(b) => b.flop_count(h, w),
            Self::Daib(b) => b.flop_count(h, w),
            Self::Dscrab(b) => b.flop_count(h, w),
        }
    }
}
