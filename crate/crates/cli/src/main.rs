//! `r2d`: data generation, training, evaluation, inference and receptive-field
//! reports for the shadow detector.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use r2d_core::checkpoint::{Checkpoint, Phase};
use r2d_core::config::RunConfig;
use r2d_core::data::{read_rgb, write_mask, write_rgb, DatasetManifest, ShadowSample};
use r2d_core::evaluation::{
    evaluate_model, evaluate_residual_baseline, model_from_checkpoint, overlay, predict,
    EvalOutputs,
};
use r2d_core::model::{unet_fingerprint, ArchMode, RestorationModel};
use r2d_core::nn::Tensor;
use r2d_core::rf::rf_report;
use r2d_core::synth::write_dataset;
use r2d_core::trainer::{
    build_model, finetune_r2d, pretrain_restoration, swa_finalize, TrainConfig,
};

/// Environment variable overriding the parent directory of run directories.
const RUN_ROOT_ENV: &str = "R2D_RUN_ROOT";

#[derive(Parser, Debug)]
#[command(
    name = "r2d",
    version,
    about = "Shadow detection with restoration-guided features"
)]
struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Parent directory of run directories.
    #[arg(long, global = true)]
    runs: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic train/test set with manifests.
    GenData(GenArgs),
    /// Pretrain the restoration network on clean targets.
    Pretrain(PretrainArgs),
    /// Fine-tune a detector variant.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Predict the shadow mask of one image.
    Infer(InferArgs),
    /// Theoretical and empirical receptive fields of the detector.
    RfReport(RfArgs),
    /// Average checkpoints and refresh normalization statistics.
    Swa(SwaArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of training samples.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    side: Option<usize>,
}

#[derive(Args, Debug)]
struct DataArg {
    /// Dataset root with `train.json` and `test.json`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    mode: Option<ArchMode>,
    /// Pretrained restoration checkpoint, required by the restoration modes.
    #[arg(long)]
    pretrain: Option<PathBuf>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    ckpt: PathBuf,
    /// Manifest to score; defaults to the test manifest of the dataset.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Treat the checkpoint as a restoration network and score the residual baseline.
    #[arg(long)]
    residual: bool,
    #[arg(long)]
    tau: Option<f32>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Output directory; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f32>,
}

#[derive(Args, Debug)]
struct RfArgs {
    #[arg(long)]
    side: Option<usize>,
}

#[derive(Args, Debug)]
struct SwaArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long, num_args = 2.., required = true)]
    ckpts: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Configuration from `--config` (or defaults), before flag overrides.
fn base_config(cli: &Cli) -> Result<RunConfig> {
    Ok(match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn set<T: Copy>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn apply_overrides(cli: &Cli, cfg: &mut RunConfig) {
    if let Some(s) = cli.seed {
        cfg.gen.seed = s;
        cfg.train.seed = s;
    }
    if let Some(r) = &cli.runs {
        cfg.paths.runs = r.clone();
    }
    match &cli.command {
        Command::GenData(a) => {
            set(&mut cfg.gen.n_samples, a.n);
            set(&mut cfg.gen.n_test, a.n_test);
            set(&mut cfg.gen.side, a.side);
            if let Some(o) = &a.out {
                cfg.paths.data = o.clone();
            }
        }
        Command::Pretrain(a) => {
            set_data(cfg, &a.data);
            set(&mut cfg.train.pretrain_epochs, a.epochs);
            set(&mut cfg.train.lr, a.lr);
            set(&mut cfg.train.batch_size, a.batch_size);
        }
        Command::Train(a) => {
            set_data(cfg, &a.data);
            set(&mut cfg.arch.mode, a.mode);
            set(&mut cfg.train.lr, a.lr);
            set(&mut cfg.train.batch_size, a.batch_size);
            if let Some(n) = a.iters {
                cfg.train.finetune_iters = n;
                cfg.train.swa_points = TrainConfig::proportional_swa_points(n);
            }
        }
        Command::Eval(a) => {
            set_data(cfg, &a.data);
            set(&mut cfg.eval.tau, a.tau);
        }
        Command::Infer(a) => set(&mut cfg.eval.tau, a.tau),
        Command::RfReport(a) => set(&mut cfg.arch.side, a.side),
        Command::Swa(a) => set_data(cfg, &a.data),
    }
}

fn set_data(cfg: &mut RunConfig, d: &DataArg) {
    if let Some(p) = &d.data {
        cfg.paths.data = p.clone();
    }
}

fn run_root(cfg: &RunConfig) -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.paths.runs.clone())
}

/// Fresh `<root>/<timestamp>-<name>` directory holding the effective config.
fn make_run_dir(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    let root = run_root(cfg);
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let mut dir = root.join(format!("{stamp}-{name}"));
    let mut k = 1;
    while dir.exists() {
        dir = root.join(format!("{stamp}-{name}-{k}"));
        k += 1;
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    cfg.save(&dir.join("config.toml"))?;
    log::info!("run directory {}", dir.display());
    Ok(dir)
}

fn load_split(cfg: &RunConfig, name: &str) -> Result<Vec<ShadowSample>> {
    let path = cfg.paths.data.join(format!("{name}.json"));
    load_manifest(&path)
}

fn load_manifest(path: &Path) -> Result<Vec<ShadowSample>> {
    let m = DatasetManifest::load(path)
        .with_context(|| format!("loading manifest {}", path.display()))?;
    Ok(m.load_all()?)
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?)
        .with_context(|| format!("writing {}", path.display()))
}

/// The configuration a checkpoint was trained with: `--config` when given,
/// else the `config.toml` next to the checkpoint, else the effective one.
fn checkpoint_config(cli: &Cli, cfg: &RunConfig, ckpt: &Path) -> Result<RunConfig> {
    if cli.config.is_some() {
        return Ok(cfg.clone());
    }
    let beside = ckpt.parent().unwrap_or(Path::new(".")).join("config.toml");
    if beside.is_file() {
        let mut c = RunConfig::load(&beside)?;
        c.paths = cfg.paths.clone();
        c.eval = cfg.eval.clone();
        return Ok(c);
    }
    Ok(cfg.clone())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = base_config(&cli)?;
    apply_overrides(&cli, &mut cfg);
    cfg.validate()?;
    match &cli.command {
        Command::GenData(_) => {
            let dir = make_run_dir(&cfg, "gen-data")?;
            let (train, test) = write_dataset(&cfg.gen, &cfg.paths.data)?;
            println!("{}\n{}", train.display(), test.display());
            write_json(&dir.join("manifests.json"), &[train, test])?;
        }
        Command::Pretrain(_) => {
            let train = load_split(&cfg, "train")?;
            let dir = make_run_dir(&cfg, "pretrain")?;
            let res = pretrain_restoration(
                &train,
                &cfg.arch.unet,
                cfg.arch.side,
                &cfg.train,
                Some(&dir),
            )?;
            write_json(&dir.join("pretrain_losses.json"), &res.epoch_losses)?;
            println!("{}", dir.join("pretrain.safetensors").display());
        }
        Command::Train(a) => {
            let train = load_split(&cfg, "train")?;
            let pre = a.pretrain.as_deref().map(Checkpoint::load).transpose()?;
            // surface mode/checkpoint inconsistencies before any training
            build_model(&cfg.arch, pre.as_ref(), cfg.train.seed)?;
            let dir = make_run_dir(&cfg, &format!("train-{}", cfg.arch.mode))?;
            let res = finetune_r2d(
                &train,
                &cfg.arch,
                pre.as_ref(),
                &cfg.train,
                &cfg.loss,
                Some(&dir),
            )?;
            write_json(&dir.join("losses.json"), &res.losses)?;
            let final_ck = if res.checkpoints.len() >= 2 {
                let mut model = res.model;
                swa_finalize(&mut model, &res.checkpoints, &train, cfg.eval.batch_size)?
            } else {
                Checkpoint::from_store(
                    &res.model.store,
                    r2d_core::checkpoint::CheckpointMeta {
                        iteration: cfg.train.finetune_iters,
                        fingerprint: res.model.fingerprint(),
                        phase: Phase::Finetune,
                    },
                )
            };
            let path = dir.join("final.safetensors");
            final_ck.save(&path)?;
            println!("{}", path.display());
        }
        Command::Eval(a) => {
            let samples = match &a.manifest {
                Some(m) => load_manifest(m)?,
                None => load_split(&cfg, "test")?,
            };
            let ck = Checkpoint::load(&a.ckpt)?;
            let ccfg = checkpoint_config(&cli, &cfg, &a.ckpt)?;
            let dir = make_run_dir(&cfg, "eval")?;
            let (pred_dir, over_dir) = (dir.join("predictions"), dir.join("overlays"));
            let report_path = dir.join("report.json");
            let outs = EvalOutputs {
                report: Some(&report_path),
                predictions: cfg.eval.save_predictions.then_some(pred_dir.as_path()),
                overlays: cfg.eval.save_overlays.then_some(over_dir.as_path()),
            };
            let report = if a.residual {
                let mut m = RestorationModel::new(&ccfg.arch.unet, 0)?;
                ck.apply_to(&mut m.store, &unet_fingerprint(&ccfg.arch.unet))?;
                evaluate_residual_baseline(
                    &m,
                    &samples,
                    ccfg.arch.side,
                    cfg.eval.tau_r,
                    cfg.eval.batch_size,
                    &outs,
                )?
            } else {
                let model = model_from_checkpoint(&ccfg.arch, &ck)?;
                evaluate_model(&model, &samples, cfg.eval.tau, cfg.eval.batch_size, &outs)?
            };
            print!("{}", report.table());
            println!("{}", report_path.display());
        }
        Command::Infer(a) => {
            let ck = Checkpoint::load(&a.ckpt)?;
            let ccfg = checkpoint_config(&cli, &cfg, &a.ckpt)?;
            let model = model_from_checkpoint(&ccfg.arch, &ck)?;
            let image = read_rgb(&a.image)?;
            let [_, _, h, w] = image.dims();
            let sample = ShadowSample {
                id: a
                    .image
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("image")
                    .to_string(),
                image,
                mask: Tensor::zeros([1, 1, h, w]),
                clean: None,
                fp_map: None,
                fn_map: None,
            };
            let pred = predict(&model, std::slice::from_ref(&sample), 1)?.remove(0);
            let out = match &a.out {
                Some(o) => o.clone(),
                None => make_run_dir(&cfg, "infer")?,
            };
            let tau = cfg.eval.tau;
            let mask = pred.map(|v| if v >= tau { 1.0 } else { 0.0 });
            let mask_path = out.join(format!("{}_mask.png", sample.id));
            let over_path = out.join(format!("{}_overlay.png", sample.id));
            write_mask(&mask_path, &mask)?;
            write_rgb(&over_path, &overlay(&sample.image, &pred, tau))?;
            println!("{}\n{}", mask_path.display(), over_path.display());
        }
        Command::RfReport(_) => {
            let dir = make_run_dir(&cfg, "rf-report")?;
            let report = rf_report(&cfg.arch.detector, cfg.arch.side, cfg.train.seed)?;
            write_json(&dir.join("rf_report.json"), &report)?;
            let md = report.markdown();
            fs::write(dir.join("rf_report.md"), &md)?;
            print!("{md}");
        }
        Command::Swa(a) => {
            let ckpts = a
                .ckpts
                .iter()
                .map(|p| Checkpoint::load(p))
                .collect::<r2d_core::Result<Vec<_>>>()?;
            let ccfg = checkpoint_config(&cli, &cfg, &a.ckpts[0])?;
            let train = load_split(&cfg, "train")?;
            let dir = make_run_dir(&cfg, "swa")?;
            let mut model = model_from_checkpoint(&ccfg.arch, &ckpts[0])?;
            let avg = swa_finalize(&mut model, &ckpts, &train, cfg.eval.batch_size)?;
            let path = dir.join("swa.safetensors");
            avg.save(&path)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}
