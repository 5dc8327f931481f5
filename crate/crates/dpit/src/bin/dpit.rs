use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dpit::config::{load_config, Stage, TrainConfig};
use dpit::data::Dataset;
use dpit::error::{Error, Result};
use dpit::harness;
use dpit::network::Dpit;
use dpit::nn::VarStore;
use dpit::synth::{generate_synthetic_pair, procedural_image};

#[derive(Parser)]
#[command(name = "dpit", about = "Dual-prior reflection removal: data synthesis, training, inference, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --set loss.lambda3=0.05 --set epochs=10.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Training seed (overrides config and the DPIT_SEED env var).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Paired dataset directory (blended/ + transmission/) for the first
    /// source pool; procedural data is used when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Where to put the best checkpoint (a .safetensors path or a run
    /// directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate paired synthetic PNGs plus a manifest of blend coefficients.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Stage 1: train the local linear correction prior.
    TrainLlcn(TrainArgs),
    /// Stage 1: train the separation network (mixed image as its own prior).
    TrainDscrt(TrainArgs),
    /// Stage 2: compose both checkpoints and jointly fine-tune.
    FinetuneDpit {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        llcn: PathBuf,
        #[arg(long)]
        dscrt: PathBuf,
    },
    /// Separate every PNG in a directory into T/R/Phi plus the prior.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint (PSNR/SSIM) over a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// CSV report path.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Markdown report path.
        #[arg(long)]
        markdown: Option<PathBuf>,
    },
    /// Analytic parameter/FLOPs breakdown for the configured model.
    Flops {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Input side in pixels (padded up to the model's working multiple).
        #[arg(long, default_value_t = 224)]
        input: usize,
    },
    /// Train the ablation grid and emit the comparison table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn resolve_train_cfg(args: &TrainArgs, stage: Stage) -> Result<TrainConfig> {
    let mut cfg = load_config(args.cfg.config.as_deref(), &args.cfg.set)?;
    cfg.stage = stage;
    if let Some(d) = &args.data {
        cfg.data_dir = Some(d.clone());
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = if out.extension().is_some() {
            out.parent()
                .filter(|p| !p.as_os_str().is_empty())
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."))
        } else {
            out.clone()
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn finish_run(run: &harness::RunResult, out: Option<&Path>) -> Result<()> {
    let final_path = match out {
        Some(p) if p.extension().is_some() && p != run.ckpt_path => {
            std::fs::copy(&run.ckpt_path, p).map_err(|e| Error::io(p, e))?;
            p.to_path_buf()
        }
        _ => run.ckpt_path.clone(),
    };
    println!(
        "best epoch {} (val L1 {:.6e}); checkpoint {}; log {}",
        run.best_epoch,
        run.best_val_l1,
        final_path.display(),
        run.log_path.display()
    );
    Ok(())
}

fn cmd_synth(out: &Path, count: usize, seed: u64, size: usize, device: &Device) -> Result<()> {
    if count == 0 {
        return Err(Error::Config("--count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = String::from("id,gamma1,gamma2\n");
    for k in 0..count {
        let t = procedural_image(size, size, &mut rng, device)?
            .unsqueeze(0)?
            .to_dtype(DType::F64)?;
        let r = procedural_image(size, size, &mut rng, device)?
            .unsqueeze(0)?
            .to_dtype(DType::F64)?;
        let (pair, c) = generate_synthetic_pair(&t, &r, &mut rng)?;
        let id = format!("{k:05}");
        Dataset::write_pair(out, &id, &pair.mixed, &pair.transmission)?;
        manifest.push_str(&format!("{id},{:.6},{:.6}\n", c.gamma1, c.gamma2));
    }
    let manifest_path = out.join("manifest.csv");
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    println!("wrote {count} pairs to {}", out.display());
    Ok(())
}

fn cmd_flops(args: &ConfigArgs, input: usize, device: &Device) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), &args.set)?;
    let mut vs = VarStore::new(0, DType::F64, device.clone());
    let prior = cfg.use_prior.then_some((&cfg.llcn, cfg.llcn_kind));
    let model = Dpit::new(&mut vs, prior, &cfg.network)?;
    let div = model.spatial_divisor();
    let padded = input.div_ceil(div) * div;
    if padded != input {
        println!("note: {input} px padded to {padded} px (working multiple {div})");
    }
    let report = dpit::complexity::network_report(&model, padded, padded)?;
    println!("{}", report.to_table());
    print!("{}", report.to_csv());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let device = Device::Cpu;
    match cli.command {
        Command::Synth {
            out,
            count,
            seed,
            size,
        } => cmd_synth(&out, count, seed, size, &device),
        Command::TrainLlcn(args) => {
            let cfg = resolve_train_cfg(&args, Stage::Llcn)?;
            let run = harness::train(&cfg, args.cfg.seed, &device)?;
            finish_run(&run, args.out.as_deref())
        }
        Command::TrainDscrt(args) => {
            let cfg = resolve_train_cfg(&args, Stage::Dscrt)?;
            let run = harness::train(&cfg, args.cfg.seed, &device)?;
            finish_run(&run, args.out.as_deref())
        }
        Command::FinetuneDpit { train, llcn, dscrt } => {
            let cfg = resolve_train_cfg(&train, Stage::Finetune)?;
            let run = harness::train_stage2(&llcn, &dscrt, &cfg, train.cfg.seed, &device)?;
            finish_run(&run, train.out.as_deref())
        }
        Command::Infer { ckpt, input, out } => {
            let n = harness::infer(&ckpt, &input, &out, &device)?;
            println!("wrote {n} images to {}", out.display());
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            report,
            markdown,
        } => {
            let rep = harness::eval_checkpoint(
                &ckpt,
                &data,
                report.as_deref(),
                markdown.as_deref(),
                &device,
            )?;
            print!("{}", rep.to_markdown());
            Ok(())
        }
        Command::Flops { cfg, input } => cmd_flops(&cfg, input, &device),
        Command::Ablate { cfg } => {
            let base = load_config(cfg.config.as_deref(), &cfg.set)?;
            let spec = harness::AblationSpec::default();
            let report = harness::ablation_run(&base, &spec, cfg.seed, &device)?;
            print!("{}", report.to_markdown());
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
