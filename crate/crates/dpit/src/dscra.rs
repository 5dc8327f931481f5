//! Dual-stream channel reorganization attention.
//!
//! The block chunk-and-swaps the two streams' channels into a generation
//! stream and an exchange stream, runs windowed intra-stream self-attention
//! and cross-stream attention (queries always from the generation stream),
//! redistributes the combined result back into two streams, and finishes with
//! scaled residuals around a gated feed-forward stage.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::Tensor;
use candle_nn::ops::softmax;

use crate::error::{Error, Result};
use crate::invalid_arg;
use crate::nn::{relu, sigmoid, Conv2d, Init, LayerNorm, Linear, VarStore};
use crate::types::StreamPair;

/// Counts windowed-attention evaluations; the DSCRAB-vs-DAIB 2:4 claim is
/// asserted against it.
static ATTN_EVALS: AtomicUsize = AtomicUsize::new(0);

pub fn reset_attention_eval_count() {
    ATTN_EVALS.store(0, Ordering::SeqCst);
}

pub fn attention_eval_count() -> usize {
    ATTN_EVALS.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct WindowConfig {
    pub window_size: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl WindowConfig {
    pub fn for_channels(channels: usize, window_size: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!(
                "{channels} channels not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            window_size,
            heads,
            head_dim: channels / heads,
        })
    }

    pub fn channels(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window_size * self.window_size
    }
}

/// [B, H, W, C] -> [B*Nw, M, C]; windows are contiguous ws x ws tiles, tokens
/// row-major within a window, windows row-major over the grid.
pub fn window_partition(x: &Tensor, ws: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if ws == 0 || h % ws != 0 || w % ws != 0 {
        invalid_arg!("window_partition: {h}x{w} not divisible by window size {ws}");
    }
    let x = x.reshape((b, h / ws, ws, w / ws, ws, c))?;
    let x = x.permute((0, 1, 3, 2, 4, 5))?.contiguous()?;
    Ok(x.reshape((b * (h / ws) * (w / ws), ws * ws, c))?)
}

/// Exact inverse of [`window_partition`].
pub fn window_reverse(xw: &Tensor, ws: usize, h: usize, w: usize) -> Result<Tensor> {
    let (bnw, m, c) = xw.dims3()?;
    if m != ws * ws {
        invalid_arg!("window_reverse: {m} tokens per window, expected {}", ws * ws);
    }
    if ws == 0 || h % ws != 0 || w % ws != 0 {
        invalid_arg!("window_reverse: {h}x{w} not divisible by window size {ws}");
    }
    let nw = (h / ws) * (w / ws);
    if bnw % nw != 0 {
        invalid_arg!("window_reverse: {bnw} windows not a multiple of grid {nw}");
    }
    let b = bnw / nw;
    let x = xw.reshape((b, h / ws, w / ws, ws, ws, c))?;
    let x = x.permute((0, 1, 3, 2, 4, 5))?.contiguous()?;
    Ok(x.reshape((b, h, w, c))?)
}

fn reorganize_lastdim(left: &Tensor, right: &Tensor) -> Result<(Tensor, Tensor)> {
    let c = *left.dims().last().unwrap();
    if c % 2 != 0 {
        invalid_arg!("channel_reorganize: odd channel count {c}");
    }
    let last = left.rank() - 1;
    let gen = Tensor::cat(
        &[left.narrow(last, 0, c / 2)?, right.narrow(last, 0, c / 2)?],
        last,
    )?;
    let exch = Tensor::cat(
        &[
            left.narrow(last, c / 2, c / 2)?,
            right.narrow(last, c / 2, c / 2)?,
        ],
        last,
    )?;
    Ok((gen.contiguous()?, exch.contiguous()?))
}

/// Generation stream = first channel halves of both streams, exchange stream
/// = second halves. Input and outputs are [B, C, H, W].
pub fn channel_reorganize(p: &StreamPair) -> Result<(Tensor, Tensor)> {
    let (_b, c, _h, _w) = p.dims4()?;
    if c % 2 != 0 {
        invalid_arg!("channel_reorganize: odd channel count {c}");
    }
    let gen = Tensor::cat(
        &[p.left.narrow(1, 0, c / 2)?, p.right.narrow(1, 0, c / 2)?],
        1,
    )?;
    let exch = Tensor::cat(
        &[
            p.left.narrow(1, c / 2, c / 2)?,
            p.right.narrow(1, c / 2, c / 2)?,
        ],
        1,
    )?;
    Ok((gen.contiguous()?, exch.contiguous()?))
}

/// Split the combined [B, H, W, C] map into halves and duplicate each half to
/// restore two full-width [B, C, H, W] streams.
pub fn redistribute(combined: &Tensor) -> Result<StreamPair> {
    let (_b, _h, _w, c) = combined.dims4()?;
    if c % 2 != 0 {
        invalid_arg!("redistribute: odd channel count {c}");
    }
    let lo = combined.narrow(3, 0, c / 2)?;
    let hi = combined.narrow(3, c / 2, c / 2)?;
    let to_nchw = |t: Tensor| -> Result<Tensor> { Ok(t.permute((0, 3, 1, 2))?.contiguous()?) };
    let left = to_nchw(Tensor::cat(&[&lo, &lo], 3)?)?;
    let right = to_nchw(Tensor::cat(&[&hi, &hi], 3)?)?;
    StreamPair::new(left, right)
}

/// Swin-style relative position bias: a per-head table over all
/// (2*ws-1)^2 relative offsets, gathered through a precomputed index.
#[derive(Clone)]
pub struct RelPosBias {
    pub table: Tensor,
    index: Tensor,
    ws: usize,
    heads: usize,
}

impl RelPosBias {
    pub fn new(vs: &mut VarStore, name: &str, ws: usize, heads: usize) -> Result<Self> {
        let span = 2 * ws - 1;
        let table = vs.param(&format!("{name}.table"), &[span * span, heads], Init::Zeros)?;
        let m = ws * ws;
        let mut idx = Vec::with_capacity(m * m);
        for i in 0..m {
            let (yi, xi) = (i / ws, i % ws);
            for j in 0..m {
                let (yj, xj) = (j / ws, j % ws);
                let dy = yi as i64 - yj as i64 + ws as i64 - 1;
                let dx = xi as i64 - xj as i64 + ws as i64 - 1;
                idx.push((dy * span as i64 + dx) as u32);
            }
        }
        let index = Tensor::from_vec(idx, (m * m,), &vs.device)?;
        Ok(Self {
            table,
            index,
            ws,
            heads,
        })
    }

    /// [1, heads, M, M] bias ready to broadcast onto attention logits.
    pub fn bias(&self) -> Result<Tensor> {
        let m = self.ws * self.ws;
        let b = self.table.index_select(&self.index, 0)?;
        let b = b.reshape((m, m, self.heads))?.permute((2, 0, 1))?;
        Ok(b.reshape((1, self.heads, m, m))?.contiguous()?)
    }

    pub fn param_count(&self) -> u64 {
        ((2 * self.ws - 1) * (2 * self.ws - 1) * self.heads) as u64
    }
}

/// One windowed multi-head attention pathway (a query/key/value projection
/// triplet plus a relative position bias).
#[derive(Clone)]
pub struct WindowAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub bias: RelPosBias,
    pub cfg: WindowConfig,
}

impl WindowAttention {
    pub fn new(vs: &mut VarStore, name: &str, cfg: WindowConfig) -> Result<Self> {
        let c = cfg.channels();
        Ok(Self {
            wq: Linear::new(vs, &format!("{name}.wq"), c, c)?,
            wk: Linear::new(vs, &format!("{name}.wk"), c, c)?,
            wv: Linear::new(vs, &format!("{name}.wv"), c, c)?,
            bias: RelPosBias::new(vs, &format!("{name}.bias"), cfg.window_size, cfg.heads)?,
            cfg,
        })
    }

    fn split_heads(&self, t: &Tensor) -> Result<Tensor> {
        let (bnw, m, c) = t.dims3()?;
        let t = t.reshape((bnw, m, self.cfg.heads, c / self.cfg.heads))?;
        Ok(t.permute((0, 2, 1, 3))?.contiguous()?)
    }

    /// Queries come from `q_src`, keys and values from `kv_src`; both are
    /// window token tensors [B*Nw, M, C] with identical geometry.
    pub fn forward(&self, q_src: &Tensor, kv_src: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_probs(q_src, kv_src)?.0)
    }

    pub fn forward_with_probs(&self, q_src: &Tensor, kv_src: &Tensor) -> Result<(Tensor, Tensor)> {
        if q_src.dims() != kv_src.dims() {
            invalid_arg!(
                "attention window geometry mismatch: {:?} vs {:?}",
                q_src.dims(),
                kv_src.dims()
            );
        }
        let (bnw, m, c) = q_src.dims3()?;
        if c != self.cfg.channels() {
            return Err(Error::Config(format!(
                "attention configured for {} channels, got {c}",
                self.cfg.channels()
            )));
        }
        ATTN_EVALS.fetch_add(1, Ordering::SeqCst);
        let q = self.split_heads(&self.wq.forward(q_src)?)?;
        let k = self.split_heads(&self.wk.forward(kv_src)?)?;
        let v = self.split_heads(&self.wv.forward(kv_src)?)?;
        let scale = 1.0 / (self.cfg.head_dim as f64).sqrt();
        let logits = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?;
        let logits = logits.broadcast_add(&self.bias.bias()?.to_dtype(logits.dtype())?)?;
        let probs = softmax(&logits, 3)?;
        let out = probs.matmul(&v)?;
        let out = out.permute((0, 2, 1, 3))?.contiguous()?.reshape((bnw, m, c))?;
        Ok((out, probs))
    }

    pub fn param_count(&self) -> u64 {
        self.wq.param_count()
            + self.wk.param_count()
            + self.wv.param_count()
            + self.bias.param_count()
    }

    /// Convention: MAC = 2 FLOPs; softmax = 3 FLOPs per logit (exp, running
    /// sum, divide). Counted terms: QKV projections, QK^T, softmax, AV.
    pub fn flop_count(&self, h: usize, w: usize) -> u64 {
        let c = self.cfg.channels() as u64;
        let m = self.cfg.tokens_per_window() as u64;
        let nw = ((h / self.cfg.window_size) * (w / self.cfg.window_size)) as u64;
        let tokens = (h * w) as u64;
        let proj = 3 * 2 * tokens * c * c;
        let qkt = nw * 2 * m * m * c;
        let sm = nw * self.cfg.heads as u64 * m * m * 3;
        let av = nw * 2 * m * m * c;
        proj + qkt + sm + av
    }
}

/// Feed-forward stage: cross-stream sigmoid gating, per-stream squeeze-style
/// channel attention, then a shared pointwise expansion/contraction pair.
#[derive(Clone)]
pub struct DualStreamFfn {
    gate: Conv2d,
    ca_fc1: Linear,
    ca_fc2: Linear,
    expand: Conv2d,
    contract: Conv2d,
    channels: usize,
}

impl DualStreamFfn {
    pub fn new(vs: &mut VarStore, name: &str, channels: usize) -> Result<Self> {
        let hidden = (channels / 4).max(1);
        Ok(Self {
            gate: Conv2d::new(vs, &format!("{name}.gate"), channels, channels, 1, 1)?,
            ca_fc1: Linear::new(vs, &format!("{name}.ca_fc1"), channels, hidden)?,
            ca_fc2: Linear::new(vs, &format!("{name}.ca_fc2"), hidden, channels)?,
            expand: Conv2d::new(vs, &format!("{name}.expand"), channels, 2 * channels, 1, 1)?,
            contract: Conv2d::new(vs, &format!("{name}.contract"), 2 * channels, channels, 1, 1)?,
            channels,
        })
    }

    fn channel_attention(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, _h, _w) = x.dims4()?;
        let pooled = x.mean_keepdim(3)?.mean_keepdim(2)?.reshape((b, c))?;
        let wgt = sigmoid(&self.ca_fc2.forward(&relu(&self.ca_fc1.forward(&pooled)?)?)?)?;
        Ok(x.broadcast_mul(&wgt.reshape((b, c, 1, 1))?)?)
    }

    fn per_stream(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.channel_attention(x)?;
        self.contract.forward(&relu(&self.expand.forward(&x)?)?)
    }

    pub fn forward(&self, p: &StreamPair) -> Result<StreamPair> {
        let gated_l = p.left.mul(&sigmoid(&self.gate.forward(&p.right)?)?)?;
        let gated_r = p.right.mul(&sigmoid(&self.gate.forward(&p.left)?)?)?;
        StreamPair::new(self.per_stream(&gated_l)?, self.per_stream(&gated_r)?)
    }

    pub fn param_count(&self) -> u64 {
        self.gate.param_count()
            + self.ca_fc1.param_count()
            + self.ca_fc2.param_count()
            + self.expand.param_count()
            + self.contract.param_count()
    }

    pub fn flop_count(&self, h: usize, w: usize) -> u64 {
        let elems = (h * w * self.channels) as u64;
        // Two streams; per stream: gate conv + sigmoid + multiply, pooled MLP
        // + sigmoid + scale, expansion/contraction with a relu between.
        let gate = self.gate.flop_count(h, w) + 2 * elems;
        let ca = self.ca_fc1.flop_count(1)
            + self.ca_fc2.flop_count(1)
            + (self.ca_fc1.cout as u64)
            + (self.channels as u64)
            + elems;
        let ec = self.expand.flop_count(h, w)
            + (h * w * 2 * self.channels) as u64
            + self.contract.flop_count(h, w);
        2 * (gate + ca + ec)
    }
}

/// Learnable residual scales, both initialized to 0.1.
pub const BLOCK_SCALE_INIT: f64 = 0.1;

pub struct Dscrab {
    pub ln_left: LayerNorm,
    pub ln_right: LayerNorm,
    pub intra: WindowAttention,
    pub cross: WindowAttention,
    pub out_proj: Linear,
    pub alpha: Tensor,
    pub beta: Tensor,
    pub ffn: DualStreamFfn,
    pub cfg: WindowConfig,
}

impl Dscrab {
    pub fn new(vs: &mut VarStore, name: &str, cfg: WindowConfig) -> Result<Self> {
        let c = cfg.channels();
        if c % 2 != 0 {
            return Err(Error::Config(format!("dscrab requires even channels, got {c}")));
        }
        Ok(Self {
            ln_left: LayerNorm::new(vs, &format!("{name}.ln_left"), c)?,
            ln_right: LayerNorm::new(vs, &format!("{name}.ln_right"), c)?,
            intra: WindowAttention::new(vs, &format!("{name}.intra"), cfg)?,
            cross: WindowAttention::new(vs, &format!("{name}.cross"), cfg)?,
            out_proj: Linear::new(vs, &format!("{name}.out_proj"), c, c)?,
            alpha: vs.param(&format!("{name}.alpha"), &[1], Init::Const(BLOCK_SCALE_INIT))?,
            beta: vs.param(&format!("{name}.beta"), &[1], Init::Const(BLOCK_SCALE_INIT))?,
            ffn: DualStreamFfn::new(vs, &format!("{name}.ffn"), c)?,
            cfg,
        })
    }

    pub fn forward(&self, p: &StreamPair) -> Result<StreamPair> {
        let (_b, c, h, w) = p.dims4()?;
        if c != self.cfg.channels() {
            return Err(Error::Config(format!(
                "dscrab configured for {} channels, got {c}",
                self.cfg.channels()
            )));
        }
        let ws = self.cfg.window_size;
        if h % ws != 0 || w % ws != 0 {
            invalid_arg!("dscrab input {h}x{w} not divisible by window size {ws}");
        }
        let nhwc = |t: &Tensor| -> Result<Tensor> { Ok(t.permute((0, 2, 3, 1))?.contiguous()?) };
        let norm_l = self.ln_left.forward(&nhwc(&p.left)?)?;
        let norm_r = self.ln_right.forward(&nhwc(&p.right)?)?;
        let (gen, exch) = reorganize_lastdim(&norm_l, &norm_r)?;
        let gen_win = window_partition(&gen, ws)?;
        let exch_win = window_partition(&exch, ws)?;
        let a_intra = self.intra.forward(&gen_win, &gen_win)?;
        let a_cross = self.cross.forward(&gen_win, &exch_win)?;
        let combined = self.out_proj.forward(&(a_intra + a_cross)?)?;
        let combined = window_reverse(&combined, ws, h, w)?;
        let attn = redistribute(&combined)?;
        let res1 = StreamPair::new(
            (&p.left + attn.left.broadcast_mul(&self.alpha)?)?,
            (&p.right + attn.right.broadcast_mul(&self.alpha)?)?,
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
            + self.intra.param_count()
            + self.cross.param_count()
            + self.out_proj.param_count()
            + 2
            + self.ffn.param_count()
    }

    pub fn flop_count(&self, h: usize, w: usize) -> u64 {
        let c = self.cfg.channels();
        let elems = (h * w * c) as u64;
        let ln = 2 * self.ln_left.flop_count(h * w * c);
        let attn = self.intra.flop_count(h, w) + self.cross.flop_count(h, w);
        let sum = elems; // A_intra + A_cross
        let proj = self.out_proj.flop_count(h * w);
        let res = 2 * 2 * elems * 2; // two scaled residuals over two streams
        ln + attn + sum + proj + res + self.ffn.flop_count(h, w)
    }

    /// FLOPs spent in the attention pathways alone (projections, QK^T,
    /// softmax, AV, output projection).
    pub fn attention_flops(&self, h: usize, w: usize) -> u64 {
        self.intra.flop_count(h, w) + self.cross.flop_count(h, w) + self.out_proj.flop_count(h * w)
    }
}
