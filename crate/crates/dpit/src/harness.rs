//! Training orchestration: data preparation, the two training stages with
//! validation-based model selection and per-epoch CSV logs, inference,
//! evaluation, and the ablation grid.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ckpt::{self, CheckpointMeta};
use crate::complexity::network_report;
use crate::config::{Stage, TrainConfig};
use crate::data::{load_image, save_image, Dataset};
use crate::error::{Error, Result};
use crate::interaction::InteractionKind;
use crate::llcn::{Llcn, LlcnKind};
use crate::losses::{
    compute_losses, total_loss, FeatureExtractor, LossComponents, PerceptualConfig,
    RandomConvExtractor,
};
use crate::metrics::{psnr, ssim, MetricReport, SsimConfig};
use crate::network::Dpit;
use crate::nn::VarStore;
use crate::optim::{accumulate, collect_grads, scale_grads, Adam, AdamConfig};
use crate::synth::{derive_reflection_gt, generate_synthetic_pair, procedural_image, sample_epoch, DatasetMix, ImagePair};

pub const LOG_HEADER: &str = "epoch,loss_total,loss_pix,loss_grad,loss_per,loss_rec,val_l1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_pix: f64,
    pub loss_grad: f64,
    pub loss_per: f64,
    pub loss_rec: f64,
    pub val_l1: f64,
}

impl EpochRow {
    fn csv_line(&self) -> String {
        format!(
            "{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}",
            self.epoch,
            self.loss_total,
            self.loss_pix,
            self.loss_grad,
            self.loss_per,
            self.loss_rec,
            self.val_l1
        )
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub ckpt_path: PathBuf,
    pub log_path: PathBuf,
    pub best_epoch: usize,
    pub best_val_l1: f64,
    pub log: Vec<EpochRow>,
}

/// Three source pools (synthetic, real-stand-in, nature-stand-in) plus the
/// held-out validation pairs, all [1, 3, S, S].
pub struct DataBundle {
    pub pools: [Vec<ImagePair>; 3],
    pub val: Vec<ImagePair>,
}

fn resize_nearest(t: &Tensor, s: usize) -> Result<Tensor> {
    Ok(t.upsample_nearest2d(s, s)?)
}

fn procedural_pair(s: usize, rng: &mut ChaCha8Rng, device: &Device) -> Result<ImagePair> {
    let t_src = procedural_image(s, s, rng, device)?
        .unsqueeze(0)?
        .to_dtype(DType::F64)?;
    let r_src = procedural_image(s, s, rng, device)?
        .unsqueeze(0)?
        .to_dtype(DType::F64)?;
    let (pair, _c) = generate_synthetic_pair(&t_src, &r_src, rng)?;
    Ok(pair)
}

/// Deterministic under (config, seed): pools and validation pairs come from
/// independent seeded streams. When `data_dir` is set its images replace the
/// first pool (resized to the working resolution).
pub fn prepare_data(cfg: &TrainConfig, seed: u64, device: &Device) -> Result<DataBundle> {
    let s = cfg.image_size;
    let mut pools: [Vec<ImagePair>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (k, pool) in pools.iter_mut().enumerate() {
        if k == 0 {
            if let Some(dir) = &cfg.data_dir {
                let ds = Dataset::open(dir)?;
                for idx in 0..ds.len() {
                    let (i, t) = ds.load_pair(idx, DType::F64, device)?;
                    let mixed = resize_nearest(&i, s)?;
                    let transmission = resize_nearest(&t, s)?;
                    let reflection = derive_reflection_gt(&mixed, &transmission)?;
                    pool.push(ImagePair {
                        transmission,
                        reflection,
                        mixed,
                    });
                }
                continue;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x706f6f6c00 + k as u64));
        for _ in 0..cfg.pool_sizes[k] {
            pool.push(procedural_pair(s, &mut rng, device)?);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x76616c00);
    let mut val = Vec::with_capacity(cfg.val_pairs);
    for _ in 0..cfg.val_pairs {
        val.push(procedural_pair(s, &mut rng, device)?);
    }
    Ok(DataBundle { pools, val })
}

/// What a stage trains: the correction prior alone, or a separation model
/// (with or without an embedded prior).
pub enum TrainModel {
    Prior(Llcn),
    Separation(Dpit),
}

impl TrainModel {
    pub fn predict_t(&self, image: &Tensor) -> Result<Tensor> {
        match self {
            TrainModel::Prior(m) => m.forward(image),
            TrainModel::Separation(m) => Ok(m.forward(image)?.0.t_hat),
        }
    }

    fn batch_losses(
        &self,
        cfg: &TrainConfig,
        mixed: &Tensor,
        t_gt: &Tensor,
        r_gt: &Tensor,
        per_cfg: &PerceptualConfig,
        extractor: &dyn FeatureExtractor,
    ) -> Result<(Tensor, LossComponents)> {
        match self {
            TrainModel::Prior(m) => {
                let mse = (m.forward(mixed)? - t_gt)?.sqr()?.mean_all()?;
                let zero = Tensor::zeros((), mse.dtype(), mse.device())?;
                let comps = LossComponents {
                    pix: mse.clone(),
                    grad: zero.clone(),
                    per: zero.clone(),
                    rec: zero,
                };
                Ok((mse, comps))
            }
            TrainModel::Separation(m) => {
                let (out, _prior) = m.forward(mixed)?;
                let comps = compute_losses(mixed, &out, t_gt, r_gt, per_cfg, extractor)?;
                let total = total_loss(&comps, &cfg.loss)?;
                Ok((total, comps))
            }
        }
    }
}

fn build_model(cfg: &TrainConfig, vs: &mut VarStore) -> Result<TrainModel> {
    match cfg.stage {
        Stage::Llcn => Ok(TrainModel::Prior(Llcn::new(
            vs,
            "llcn",
            &cfg.llcn,
            cfg.llcn_kind,
        )?)),
        Stage::Dscrt => Ok(TrainModel::Separation(Dpit::new(vs, None, &cfg.network)?)),
        Stage::Finetune => {
            let prior = cfg.use_prior.then_some((&cfg.llcn, cfg.llcn_kind));
            Ok(TrainModel::Separation(Dpit::new(vs, prior, &cfg.network)?))
        }
    }
}

fn perceptual_parts(
    cfg: &TrainConfig,
    device: &Device,
) -> Result<(PerceptualConfig, RandomConvExtractor)> {
    let taps = cfg.perceptual.taps;
    let per_cfg = PerceptualConfig {
        layers: (0..taps).collect(),
        weights: vec![1.0 / taps as f64; taps],
    };
    let extractor = RandomConvExtractor::new(
        cfg.perceptual.seed,
        taps,
        cfg.perceptual.width,
        DType::F64,
        device,
    )?;
    Ok((per_cfg, extractor))
}

fn collate(pairs: &[ImagePair]) -> Result<(Tensor, Tensor, Tensor)> {
    let cat = |f: &dyn Fn(&ImagePair) -> Tensor| -> Result<Tensor> {
        let parts: Vec<Tensor> = pairs.iter().map(f).collect();
        Ok(Tensor::cat(&parts, 0)?)
    };
    Ok((
        cat(&|p| p.mixed.clone())?,
        cat(&|p| p.transmission.clone())?,
        cat(&|p| p.reflection.clone())?,
    ))
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.reshape(())?.to_vec0::<f64>()?)
}

pub fn validation_l1(model: &TrainModel, val: &[ImagePair]) -> Result<f64> {
    let mut sum = 0.0;
    for p in val {
        let t_hat = model.predict_t(&p.mixed)?;
        sum += scalar(&(t_hat - &p.transmission)?.abs()?.mean_all()?)?;
    }
    Ok(sum / val.len() as f64)
}

struct EpochStats {
    sums: [f64; 5], // total, pix, grad, per, rec; item-weighted
    items: usize,
}

impl EpochStats {
    fn new() -> Self {
        Self {
            sums: [0.0; 5],
            items: 0,
        }
    }

    fn add(&mut self, total: f64, c: (f64, f64, f64, f64), n: usize) {
        let w = n as f64;
        for (s, v) in self.sums.iter_mut().zip([total, c.0, c.1, c.2, c.3]) {
            *s += v * w;
        }
        self.items += n;
    }

    fn row(&self, epoch: usize, val_l1: f64) -> EpochRow {
        let d = self.items.max(1) as f64;
        EpochRow {
            epoch,
            loss_total: self.sums[0] / d,
            loss_pix: self.sums[1] / d,
            loss_grad: self.sums[2] / d,
            loss_per: self.sums[3] / d,
            loss_rec: self.sums[4] / d,
            val_l1,
        }
    }
}

/// The full training loop for an already-built model: per-epoch sampling,
/// accumulated Adam updates, validation after every epoch, argmin-val-L1
/// checkpoint selection, and the fixed-column CSV log.
pub fn run_training(
    cfg: &TrainConfig,
    seed: u64,
    model: &TrainModel,
    vs: &VarStore,
    data: &DataBundle,
    device: &Device,
) -> Result<RunResult> {
    let (per_cfg, extractor) = perceptual_parts(cfg, device)?;
    let mix = DatasetMix::new(cfg.mix, cfg.samples_per_epoch)?;
    let pools = [
        data.pools[0].as_slice(),
        data.pools[1].as_slice(),
        data.pools[2].as_slice(),
    ];
    let vars = vs.vars();
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
        },
        vars.len(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x65706f6368);
    let mut log = Vec::with_capacity(cfg.epochs + 1);

    // Epoch 0: measure the untrained model on a sampled epoch, no updates.
    let mut stats = EpochStats::new();
    for batch in sample_epoch(&mix, pools, &mut rng)?.chunks(cfg.batch_size) {
        let (i, t, r) = collate(batch)?;
        let (total, comps) = model.batch_losses(cfg, &i, &t, &r, &per_cfg, &extractor)?;
        stats.add(scalar(&total)?, comps.to_f64()?, batch.len());
    }
    let val0 = validation_l1(model, &data.val)?;
    log.push(stats.row(0, val0));
    let mut best_epoch = 0;
    let mut best_val = val0;
    let mut best_tensors = ckpt::snapshot(vs)?;

    for epoch in 1..=cfg.epochs {
        let samples = sample_epoch(&mix, pools, &mut rng)?;
        let mut stats = EpochStats::new();
        let step_size = cfg.batch_size * cfg.grad_accum;
        for group in samples.chunks(step_size) {
            let mut acc: Vec<Option<Tensor>> = Vec::new();
            let mut micros = 0usize;
            for batch in group.chunks(cfg.batch_size) {
                let (i, t, r) = collate(batch)?;
                let (total, comps) = model.batch_losses(cfg, &i, &t, &r, &per_cfg, &extractor)?;
                let grads = total.backward()?;
                accumulate(&mut acc, &collect_grads(&vars, &grads))?;
                micros += 1;
                stats.add(scalar(&total)?, comps.to_f64()?, batch.len());
            }
            scale_grads(&mut acc, micros as f64)?;
            opt.step(&vars, &acc)?;
        }
        let val = validation_l1(model, &data.val)?;
        log.push(stats.row(epoch, val));
        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best_tensors = ckpt::snapshot(vs)?;
        }
    }

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let log_path = cfg.out_dir.join("train_log.csv");
    let mut text = String::from(LOG_HEADER);
    for row in &log {
        text.push('\n');
        text.push_str(&row.csv_line());
    }
    text.push('\n');
    std::fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;

    let ckpt_path = cfg.out_dir.join("model.safetensors");
    let meta = CheckpointMeta {
        schema_version: ckpt::SCHEMA_VERSION,
        stage: cfg.stage.to_string(),
        config: cfg.to_json()?,
        best_val_l1: Some(best_val),
    };
    ckpt::save(&ckpt_path, &best_tensors, &meta)?;

    Ok(RunResult {
        ckpt_path,
        log_path,
        best_epoch,
        best_val_l1: best_val,
        log,
    })
}

/// Stage 1: train the prior network or the separation network from scratch
/// (the separation stage uses the mixed image itself as the prior input).
pub fn train(cfg: &TrainConfig, cli_seed: Option<u64>, device: &Device) -> Result<RunResult> {
    cfg.validate()?;
    let seed = cfg.resolve_seed(cli_seed);
    let data = prepare_data(cfg, seed, device)?;
    let mut vs = VarStore::new(seed, DType::F64, device.clone());
    let model = build_model(cfg, &mut vs)?;
    run_training(cfg, seed, &model, &vs, &data, device)
}

fn parse_ckpt_config(meta: &CheckpointMeta, path: &Path) -> Result<TrainConfig> {
    serde_json::from_str(&meta.config).map_err(|e| {
        Error::Data(format!(
            "{}: checkpoint config block unreadable: {e}",
            path.display()
        ))
    })
}

/// Stage 2: compose the full model from a prior checkpoint and a separation
/// checkpoint (taking each one's architecture from its config echo) and
/// jointly fine-tune with the composite loss.
pub fn train_stage2(
    llcn_ckpt: &Path,
    dscrt_ckpt: &Path,
    cfg: &TrainConfig,
    cli_seed: Option<u64>,
    device: &Device,
) -> Result<RunResult> {
    let (llcn_tensors, llcn_meta) = ckpt::load(llcn_ckpt, device)?;
    let (dscrt_tensors, dscrt_meta) = ckpt::load(dscrt_ckpt, device)?;
    if llcn_meta.stage != "llcn" {
        return Err(Error::Data(format!(
            "{}: expected an llcn checkpoint, found stage '{}'",
            llcn_ckpt.display(),
            llcn_meta.stage
        )));
    }
    if dscrt_meta.stage != "dscrt" {
        return Err(Error::Data(format!(
            "{}: expected a dscrt checkpoint, found stage '{}'",
            dscrt_ckpt.display(),
            dscrt_meta.stage
        )));
    }
    let llcn_cfg = parse_ckpt_config(&llcn_meta, llcn_ckpt)?;
    let dscrt_cfg = parse_ckpt_config(&dscrt_meta, dscrt_ckpt)?;

    let mut cfg = cfg.clone();
    cfg.stage = Stage::Finetune;
    cfg.use_prior = true;
    cfg.llcn = llcn_cfg.llcn;
    cfg.llcn_kind = llcn_cfg.llcn_kind;
    cfg.network = dscrt_cfg.network;
    cfg.validate()?;

    let seed = cfg.resolve_seed(cli_seed);
    let data = prepare_data(&cfg, seed, device)?;
    let mut vs = VarStore::new(seed, DType::F64, device.clone());
    let model = build_model(&cfg, &mut vs)?;
    vs.assign(&llcn_tensors, false)?;
    vs.assign(&dscrt_tensors, false)?;
    run_training(&cfg, seed, &model, &vs, &data, device)
}

/// Rebuild the model a checkpoint was trained as, with its weights loaded.
pub fn load_model(path: &Path, device: &Device) -> Result<(TrainModel, TrainConfig, CheckpointMeta)> {
    let (tensors, meta) = ckpt::load(path, device)?;
    let cfg = parse_ckpt_config(&meta, path)?;
    let stage: Stage = meta.stage.parse().map_err(|_| {
        Error::Data(format!(
            "{}: unknown checkpoint stage '{}'",
            path.display(),
            meta.stage
        ))
    })?;
    let mut arch = cfg.clone();
    arch.stage = stage;
    let mut vs = VarStore::new(0, DType::F64, device.clone());
    let model = build_model(&arch, &mut vs)?;
    vs.assign(&tensors, false)?;
    Ok((model, cfg, meta))
}

fn require_separation(model: TrainModel, path: &Path) -> Result<Dpit> {
    match model {
        TrainModel::Separation(m) => Ok(m),
        TrainModel::Prior(_) => Err(Error::Config(format!(
            "{}: a prior-only checkpoint cannot separate images; train the full model first",
            path.display()
        ))),
    }
}

/// Run separation over every PNG in `input_dir`, writing `<name>_T.png`,
/// `<name>_R.png`, `<name>_Phi.png` and `<name>_prior.png`. Returns the
/// number of files written.
pub fn infer(ckpt: &Path, input_dir: &Path, output_dir: &Path, device: &Device) -> Result<usize> {
    let (model, _cfg, _meta) = load_model(ckpt, device)?;
    let model = require_separation(model, ckpt)?;
    let mut inputs: Vec<PathBuf> = std::fs::read_dir(input_dir)
        .map_err(|e| Error::io(input_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
        .collect();
    inputs.sort();
    if inputs.is_empty() {
        return Err(Error::Data(format!(
            "{}: no PNG inputs found",
            input_dir.display()
        )));
    }
    let mut written = 0;
    for path in &inputs {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image");
        let image = load_image(path, DType::F64, device)?;
        let (out, prior) = model.forward(&image)?;
        for (suffix, t) in [
            ("T", &out.t_hat),
            ("R", &out.r_hat),
            ("Phi", &out.phi_hat),
            ("prior", &prior),
        ] {
            save_image(t, &output_dir.join(format!("{stem}_{suffix}.png")))?;
            written += 1;
        }
    }
    Ok(written)
}

/// Score a separation checkpoint over a dataset directory, optionally
/// writing CSV and markdown reports.
pub fn eval_checkpoint(
    ckpt: &Path,
    data_root: &Path,
    report_csv: Option<&Path>,
    report_md: Option<&Path>,
    device: &Device,
) -> Result<MetricReport> {
    let (model, _cfg, _meta) = load_model(ckpt, device)?;
    let model = require_separation(model, ckpt)?;
    let ssim_cfg = SsimConfig::default();
    let report = crate::metrics::evaluate_directory(
        |i| Ok(model.forward(i)?.0.t_hat),
        data_root,
        &ssim_cfg,
    )?;
    if let Some(p) = report_csv {
        report.write_csv(p)?;
    }
    if let Some(p) = report_md {
        report.write_markdown(p)?;
    }
    Ok(report)
}

/// Which rows the ablation grid trains.
#[derive(Debug, Clone)]
pub struct AblationSpec {
    pub prior_kinds: Vec<LlcnKind>,
    pub interactions: Vec<InteractionKind>,
    pub no_prior_row: bool,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            prior_kinds: vec![
                LlcnKind::Llcm,
                LlcnKind::GlobalLinear,
                LlcnKind::DirectGeneration,
            ],
            interactions: vec![
                InteractionKind::Dscrab,
                InteractionKind::Mlp,
                InteractionKind::Ytmt,
                InteractionKind::Mugi,
                InteractionKind::Daib,
            ],
            no_prior_row: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub params: u64,
    pub flops: u64,
    pub val_l1: f64,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: f64,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub image_size: usize,
    pub rows: Vec<AblationRow>,
    /// Standalone prior-network cost at the working resolution; with-prior
    /// separation rows carry exactly this FLOPs surcharge.
    pub llcn_flops: u64,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,params,flops,val_l1,psnr_db,ssim\n");
        for r in &self.rows {
            let p = r
                .mean_psnr
                .map_or("inf".to_string(), |v| format!("{v:.4}"));
            out.push_str(&format!(
                "{},{},{},{:.6e},{},{:.6}\n",
                r.variant, r.params, r.flops, r.val_l1, p, r.mean_ssim
            ));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "# Ablation at {0}x{0}\n\n| variant | params | FLOPs | val L1 | PSNR (dB) | SSIM |\n|---|---|---|---|---|---|\n",
            self.image_size
        );
        for r in &self.rows {
            let p = r
                .mean_psnr
                .map_or("inf".to_string(), |v| format!("{v:.2}"));
            out.push_str(&format!(
                "| {} | {} | {} | {:.4e} | {} | {:.4} |\n",
                r.variant, r.params, r.flops, r.val_l1, p, r.mean_ssim
            ));
        }
        out.push_str(&format!(
            "\nPrior-network FLOPs (the with-prior surcharge): {}\n",
            self.llcn_flops
        ));
        out
    }
}

fn val_image_metrics(
    model: &TrainModel,
    val: &[ImagePair],
    image_size: usize,
) -> Result<(Option<f64>, f64)> {
    let window = if image_size >= 11 {
        11
    } else {
        image_size - (1 - image_size % 2) // largest odd value <= size
    };
    let ssim_cfg = SsimConfig {
        window,
        ..SsimConfig::default()
    };
    let mut psnrs = Vec::new();
    let mut ssim_sum = 0.0;
    for p in val {
        let t_hat = model.predict_t(&p.mixed)?.clamp(0.0, 1.0)?;
        if let Some(v) = psnr(&t_hat, &p.transmission, 1.0)? {
            psnrs.push(v);
        }
        ssim_sum += ssim(&t_hat, &p.transmission, &ssim_cfg)?;
    }
    let mean_psnr = if psnrs.is_empty() {
        None
    } else {
        Some(psnrs.iter().sum::<f64>() / psnrs.len() as f64)
    };
    Ok((mean_psnr, ssim_sum / val.len() as f64))
}

fn ablation_variant(
    cfg: &TrainConfig,
    variant: &str,
    seed: u64,
    device: &Device,
) -> Result<AblationRow> {
    let mut cfg = cfg.clone();
    cfg.out_dir = cfg.out_dir.join(variant.replace('/', "_"));
    let run = train(&cfg, Some(seed), device)?;
    let (model, _c, _m) = load_model(&run.ckpt_path, device)?;
    let s = cfg.image_size;
    let (params, flops) = match &model {
        TrainModel::Prior(m) => (m.param_count(), m.flop_count(s, s)),
        TrainModel::Separation(m) => {
            let div = m.spatial_divisor();
            let padded = s.div_ceil(div) * div;
            let rep = network_report(m, padded, padded)?;
            (rep.params, rep.flops)
        }
    };
    let (mean_psnr, mean_ssim) = {
        let data = prepare_data(&cfg, seed, device)?;
        val_image_metrics(&model, &data.val, s)?
    };
    Ok(AblationRow {
        variant: variant.to_string(),
        params,
        flops,
        val_l1: run.best_val_l1,
        mean_psnr,
        mean_ssim,
    })
}

/// Train every configured variant with a shared seed and data streams, then
/// collect parameters, FLOPs and validation scores into one table.
pub fn ablation_run(
    base: &TrainConfig,
    spec: &AblationSpec,
    cli_seed: Option<u64>,
    device: &Device,
) -> Result<AblationReport> {
    base.validate()?;
    let seed = base.resolve_seed(cli_seed);
    let mut rows = Vec::new();
    for kind in &spec.prior_kinds {
        let mut cfg = base.clone();
        cfg.stage = Stage::Llcn;
        cfg.llcn_kind = *kind;
        let name = format!("prior/{}", serde_variant_name(kind)?);
        rows.push(ablation_variant(&cfg, &name, seed, device)?);
    }
    for ik in &spec.interactions {
        let mut cfg = base.clone();
        cfg.stage = Stage::Finetune;
        cfg.use_prior = true;
        cfg.network.interaction = *ik;
        let name = format!("interaction/{}", serde_variant_name(ik)?);
        rows.push(ablation_variant(&cfg, &name, seed, device)?);
    }
    if spec.no_prior_row {
        let mut cfg = base.clone();
        cfg.stage = Stage::Finetune;
        cfg.use_prior = false;
        rows.push(ablation_variant(&cfg, "dpit/no_prior", seed, device)?);
    }
    let s = base.image_size;
    let llcn_flops = {
        let mut vs = VarStore::new(0, DType::F64, device.clone());
        let llcn = Llcn::new(&mut vs, "llcn", &base.llcn, base.llcn_kind)?;
        let div = base.network.spatial_divisor().max(base.llcn.stride_product());
        let padded = s.div_ceil(div) * div;
        llcn.flop_count(padded, padded)
    };
    let report = AblationReport {
        image_size: s,
        rows,
        llcn_flops,
    };
    std::fs::create_dir_all(&base.out_dir).map_err(|e| Error::io(&base.out_dir, e))?;
    let csv = base.out_dir.join("ablation.csv");
    std::fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let md = base.out_dir.join("report.md");
    std::fs::write(&md, report.to_markdown()).map_err(|e| Error::io(&md, e))?;
    Ok(report)
}

fn serde_variant_name<T: serde::Serialize>(v: &T) -> Result<String> {
    let s = serde_json::to_string(v).map_err(|e| Error::Config(e.to_string()))?;
    Ok(s.trim_matches('"').to_string())
}
