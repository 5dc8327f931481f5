//! Analytic parameter and FLOP accounting.
//!
//! Counting conventions (also printed in report headers, since absolute
//! figures depend entirely on them):
//!   - one multiply-accumulate = 2 FLOPs; biases 1 FLOP per output element
//!   - attention = QKV projections + QK^T + softmax (exp, sum, divide per
//!     logit) + AV + output projection
//!   - layer normalization 8 FLOPs/element, activations 1 FLOP/element
//!   - channel shuffles, concatenations and padding are free
//! Parameter counts cover trainable tensors only; frozen extractors are
//! excluded.

use candle_core::DType;

use crate::dscra::{Dscrab, WindowConfig};
use crate::error::{Error, Result};
use crate::interaction::Daib;
use crate::network::Dpit;
use crate::nn::VarStore;

pub const CONVENTIONS: &str = "MAC=2 FLOPs; softmax=3 FLOPs/logit; layernorm=8 FLOPs/elem; \
activations=1 FLOP/elem; reshapes free; trainable parameters only";

#[derive(Debug, Clone, serde::Serialize)]
pub struct ComplexityRow {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ComplexityReport {
    pub input: (usize, usize),
    pub conventions: String,
    pub rows: Vec<ComplexityRow>,
    pub params: u64,
    pub flops: u64,
}

impl ComplexityReport {
    pub fn new(input: (usize, usize), rows: Vec<ComplexityRow>) -> Self {
        let params = rows.iter().map(|r| r.params).sum();
        let flops = rows.iter().map(|r| r.flops).sum();
        Self {
            input,
            conventions: CONVENTIONS.to_string(),
            rows,
            params,
            flops,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# conventions: {}\n", self.conventions);
        out.push_str("name,params,flops\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.name, r.params, r.flops));
        }
        out.push_str(&format!("total,{},{}\n", self.params, self.flops));
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "Complexity at {}x{} input ({})\n",
            self.input.0, self.input.1, self.conventions
        );
        out.push_str(&format!(
            "{:<20} {:>14} {:>16}\n",
            "component", "params", "FLOPs"
        ));
        for r in &self.rows {
            out.push_str(&format!("{:<20} {:>14} {:>16}\n", r.name, r.params, r.flops));
        }
        out.push_str(&format!(
            "{:<20} {:>14} {:>16}\n",
            "total", self.params, self.flops
        ));
        out
    }
}

/// Per-component breakdown of the full model at a given input size.
pub fn network_report(model: &Dpit, h: usize, w: usize) -> Result<ComplexityReport> {
    let div = model.spatial_divisor();
    if h % div != 0 || w % div != 0 {
        return Err(Error::Config(format!(
            "input {h}x{w} not divisible by the model's working divisor {div}"
        )));
    }
    let mut rows = Vec::new();
    if let Some(llcn) = &model.llcn {
        rows.push(ComplexityRow {
            name: "llcn".into(),
            params: llcn.param_count(),
            flops: llcn.flop_count(h, w),
        });
    }
    let d = &model.dscrt;
    rows.push(ComplexityRow {
        name: "tpfen".into(),
        params: d.tpfen.param_count(),
        flops: d.tpfen.flop_count(h, w),
    });
    rows.push(ComplexityRow {
        name: "gpfen".into(),
        params: d.gpfen.param_count(),
        flops: d.gpfen.flop_count(h, w),
    });
    rows.push(ComplexityRow {
        name: "dpfin".into(),
        params: d.dpfin.param_count(),
        flops: d.dpfin.flop_count(h, w),
    });
    rows.push(ComplexityRow {
        name: "heads".into(),
        params: d.heads.param_count(),
        flops: d.heads.flop_count(h, w),
    });
    Ok(ComplexityReport::new((h, w), rows))
}

/// Head-to-head block comparison at identical dimensions.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BlockComparison {
    pub channels: usize,
    pub input: (usize, usize),
    pub dscrab_params: u64,
    pub daib_params: u64,
    pub dscrab_flops: u64,
    pub daib_flops: u64,
    pub dscrab_attention_flops: u64,
    pub daib_attention_flops: u64,
    pub dscrab_attention_evals: usize,
    pub daib_attention_evals: usize,
    /// flops(daib) / flops(dscrab)
    pub flops_ratio: f64,
}

pub fn compare_blocks(
    channels: usize,
    h: usize,
    w: usize,
    window_size: usize,
    heads: usize,
) -> Result<BlockComparison> {
    if h % window_size != 0 || w % window_size != 0 {
        return Err(Error::Config(format!(
            "input {h}x{w} not divisible by window size {window_size}"
        )));
    }
    if channels % 2 != 0 {
        return Err(Error::Config(format!(
            "block comparison needs even channels, got {channels}"
        )));
    }
    let cfg = WindowConfig::for_channels(channels, window_size, heads)?;
    let mut vs = VarStore::new(0, DType::F32, candle_core::Device::Cpu);
    let dscrab = Dscrab::new(&mut vs, "cmp.dscrab", cfg)?;
    let daib = Daib::new(&mut vs, "cmp.daib", cfg)?;
    let df = dscrab.flop_count(h, w);
    let af = daib.flop_count(h, w);
    Ok(BlockComparison {
        channels,
        input: (h, w),
        dscrab_params: dscrab.param_count(),
        daib_params: daib.param_count(),
        dscrab_flops: df,
        daib_flops: af,
        dscrab_attention_flops: dscrab.attention_flops(h, w),
        daib_attention_flops: daib.attention_flops(h, w),
        dscrab_attention_evals: 2,
        daib_attention_evals: 4,
        flops_ratio: af as f64 / df as f64,
    })
}

impl BlockComparison {
    pub fn to_table(&self) -> String {
        format!(
            "Block comparison at C={}, {}x{} ({})\n\
             {:<8} {:>12} {:>16} {:>16} {:>6}\n\
             {:<8} {:>12} {:>16} {:>16} {:>6}\n\
             {:<8} {:>12} {:>16} {:>16} {:>6}\n\
             FLOPs ratio daib/dscrab: {:.3} (reduction {:.1}%)\n",
            self.channels,
            self.input.0,
            self.input.1,
            CONVENTIONS,
            "block",
            "params",
            "FLOPs",
            "attn FLOPs",
            "evals",
            "dscrab",
            self.dscrab_params,
            self.dscrab_flops,
            self.dscrab_attention_flops,
            self.dscrab_attention_evals,
            "daib",
            self.daib_params,
            self.daib_flops,
            self.daib_attention_flops,
            self.daib_attention_evals,
            self.flops_ratio,
            100.0 * (1.0 - 1.0 / self.flops_ratio),
        )
    }
}
