//! Command-line interface: dataset generation, training, evaluation,
//! single-sample reconstruction, pattern export, and gradient checks.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use kspace_loupe::error::Error;
use kspace_loupe::metrics::{psnr, ssim};
use kspace_loupe::mri::{build_dataset, read_sample, GenConfig, Split};
use kspace_loupe::numerics::{write_rtensor, Rng};
use kspace_loupe::sampling::{
    center_calib_mask, sample_binary, save_gray_png, topk_pattern, vd_pattern, vd_prob_map,
    PatternParams,
};
use kspace_loupe::train::{
    evaluate, load_checkpoint, train, EvalConfig, PatternSource, ReconMethod, SamplingMode,
    TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "kspace-loupe",
    version,
    about = "Joint learning of binary k-space under-sampling patterns and an unrolled multi-coil MRI reconstructor",
    arg_required_else_help = true
)]
struct Cli {
    /// Worker thread cap (overrides KSPACE_LOUPE_THREADS; default: logical cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-coil dataset and its manifest
    GenData(GenDataArgs),
    /// Train pattern and reconstructor jointly
    Train(TrainArgs),
    /// Evaluate a pattern/method combination on a dataset split
    Eval(EvalArgs),
    /// Reconstruct a single sample file
    Recon(ReconArgs),
    /// Export the learned probability map and binary pattern of a checkpoint
    ExportPattern(ExportArgs),
    /// Generate a variable-density baseline pattern
    VdPattern(VdArgs),
    /// Run the gradient verification suites
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON file with dataset generation settings
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for samples + manifest.json
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    n_coils: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise_std: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file with the full training configuration
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<CliMode>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    slope_a: Option<f64>,
    #[arg(long)]
    b_slope: Option<f64>,
    #[arg(long)]
    k_blocks: Option<usize>,
    #[arg(long)]
    n_cg: Option<usize>,
    #[arg(long)]
    n_cg_eval: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_pattern: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    calib: Option<usize>,
    /// Seed triplet data,init,sampling (e.g. --seed 7,11,13)
    #[arg(long, value_parser = parse_seed_triplet)]
    seed: Option<(u64, u64, u64)>,
}

#[derive(Copy, Clone, ValueEnum)]
enum CliMode {
    Bs,
    As,
}

#[derive(Copy, Clone, ValueEnum)]
enum CliPattern {
    LearnedTopk,
    LearnedDraw,
    Vd,
    File,
}

#[derive(Copy, Clone, ValueEnum)]
enum CliMethod {
    Modl,
    Tv,
    Zf,
}

#[derive(Copy, Clone, ValueEnum)]
enum CliSplit {
    Train,
    Val,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: CliSplit,
    #[arg(long, value_enum, default_value = "learned-topk")]
    pattern: CliPattern,
    /// Mask file (KST1) for --pattern file
    #[arg(long)]
    pattern_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "modl")]
    method: CliMethod,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "reports")]
    out: PathBuf,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    #[arg(long, default_value_t = 4.0)]
    vd_d: f64,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    calib: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    tv_alpha: f64,
    #[arg(long, default_value_t = 200)]
    tv_iters: usize,
}

#[derive(Args)]
struct ReconArgs {
    /// KSD1 sample file
    #[arg(long)]
    sample: PathBuf,
    #[arg(long, value_enum, default_value = "learned-topk")]
    pattern: CliPattern,
    #[arg(long)]
    pattern_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "modl")]
    method: CliMethod,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "recon-out")]
    out: PathBuf,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    #[arg(long, default_value_t = 4.0)]
    vd_d: f64,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    calib: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    tv_alpha: f64,
    #[arg(long, default_value_t = 200)]
    tv_iters: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "pattern-out")]
    out: PathBuf,
    /// Draw one Bernoulli pattern instead of the deterministic top-gamma
    #[arg(long)]
    draw: bool,
    #[arg(long, default_value_t = 17)]
    seed: u64,
}

#[derive(Args)]
struct VdArgs {
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    #[arg(long, default_value_t = 4.0)]
    d: f64,
    #[arg(long, default_value_t = 8)]
    calib: usize,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    #[arg(long, default_value = "pattern-out")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// all | ops | denoiser | pipeline | st
    #[arg(long, default_value = "all")]
    suite: String,
}

fn parse_seed_triplet(s: &str) -> Result<(u64, u64, u64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected three comma-separated seeds: data,init,sampling".into());
    }
    let parse = |p: &str| p.trim().parse::<u64>().map_err(|e| e.to_string());
    Ok((parse(parts[0])?, parse(parts[1])?, parse(parts[2])?))
}

fn load_json_config<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T, Error> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn run_gen_data(args: GenDataArgs) -> Result<(), Error> {
    let mut cfg: GenConfig = match &args.config {
        Some(p) => load_json_config(p)?,
        None => GenConfig::default(),
    };
    if let Some(v) = args.n_train {
        cfg.n_train = v;
    }
    if let Some(v) = args.n_val {
        cfg.n_val = v;
    }
    if let Some(v) = args.n_test {
        cfg.n_test = v;
    }
    if let Some(v) = args.height {
        cfg.h = v;
    }
    if let Some(v) = args.width {
        cfg.w = v;
    }
    if let Some(v) = args.n_coils {
        cfg.n_c = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.noise_std {
        cfg.noise_std = v;
    }
    let manifest = build_dataset(&cfg, &args.out)?;
    println!(
        "wrote {} samples ({}x{}, {} coils) under {}",
        manifest.samples.len(),
        cfg.h,
        cfg.w,
        cfg.n_c,
        args.out.display()
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<(), Error> {
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => load_json_config(p)?,
        None => TrainConfig::desk_default(),
    };
    if let Some(v) = args.manifest {
        cfg.manifest = v;
    }
    if let Some(v) = args.checkpoint_dir {
        cfg.checkpoint_dir = v;
    }
    if let Some(v) = args.mode {
        cfg.mode = match v {
            CliMode::Bs => SamplingMode::Bs,
            CliMode::As => SamplingMode::As,
        };
    }
    if let Some(v) = args.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = args.slope_a {
        cfg.slope_a = v;
    }
    if let Some(v) = args.b_slope {
        cfg.b_slope = Some(v);
    }
    if let Some(v) = args.k_blocks {
        cfg.k_blocks = v;
    }
    if let Some(v) = args.n_cg {
        cfg.n_cg = v;
    }
    if let Some(v) = args.n_cg_eval {
        cfg.n_cg_eval = v;
    }
    if let Some(v) = args.width {
        cfg.denoiser_width = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.lr_pattern {
        cfg.lr_pattern = Some(v);
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.calib {
        cfg.calib = v;
    }
    if let Some((d, i, s)) = args.seed {
        cfg.seed_data = d;
        cfg.seed_init = i;
        cfg.seed_sampling = s;
    }
    // AS mode default slope when not given anywhere
    if cfg.mode == SamplingMode::As && cfg.b_slope.is_none() {
        cfg.b_slope = Some(12.0);
    }
    let outcome = train(&cfg)?;
    println!(
        "best epoch {} (val psnr {:.3} dB), checkpoint {}",
        outcome.best_epoch,
        outcome.best_val_psnr,
        outcome.checkpoint_path.display()
    );
    Ok(())
}

fn pattern_source(
    pattern: CliPattern,
    pattern_file: Option<PathBuf>,
) -> Result<PatternSource, Error> {
    Ok(match pattern {
        CliPattern::LearnedTopk => PatternSource::LearnedTopk,
        CliPattern::LearnedDraw => PatternSource::LearnedDraw,
        CliPattern::Vd => PatternSource::Vd,
        CliPattern::File => PatternSource::File(
            pattern_file
                .ok_or_else(|| Error::Config("--pattern file needs --pattern-file".into()))?,
        ),
    })
}

fn run_eval(args: EvalArgs) -> Result<(), Error> {
    let mut cfg = EvalConfig::new(args.manifest, args.out);
    cfg.split = match args.split {
        CliSplit::Train => Split::Train,
        CliSplit::Val => Split::Val,
        CliSplit::Test => Split::Test,
    };
    cfg.pattern = pattern_source(args.pattern, args.pattern_file)?;
    cfg.method = match args.method {
        CliMethod::Modl => ReconMethod::Modl,
        CliMethod::Tv => ReconMethod::Tv,
        CliMethod::Zf => ReconMethod::Zf,
    };
    cfg.checkpoint = args.checkpoint;
    cfg.seed = args.seed;
    cfg.vd_d = args.vd_d;
    cfg.gamma = args.gamma;
    cfg.calib = args.calib;
    cfg.tv_alpha = args.tv_alpha;
    cfg.tv_iters = args.tv_iters;
    let outcome = evaluate(&cfg)?;
    println!(
        "{} / {} on {}: psnr {:.3} +/- {:.3} dB, ssim {:.4} +/- {:.4} (n = {})",
        cfg.method.label(),
        cfg.pattern.label(),
        cfg.split,
        outcome.report.psnr_mean,
        outcome.report.psnr_std,
        outcome.report.ssim_mean,
        outcome.report.ssim_std,
        outcome.report.n
    );
    println!("csv: {}", outcome.csv_path.display());
    println!("json: {}", outcome.json_path.display());
    Ok(())
}

fn run_recon(args: ReconArgs) -> Result<(), Error> {
    use kspace_loupe::recon::classical::{tv_recon, zero_filled, TVConfig};
    use kspace_loupe::recon::unrolled::modl_reconstruct;
    use kspace_loupe::sampling::BinaryMask;

    let sample = read_sample(&args.sample)?;
    let (h, w) = sample.sens.image_shape();
    let ckpt = match &args.checkpoint {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let gamma = args
        .gamma
        .or(ckpt.as_ref().map(|c| c.config.gamma))
        .unwrap_or(0.1);
    let calib_side = args
        .calib
        .or(ckpt.as_ref().map(|c| c.config.calib))
        .unwrap_or(8);
    let calib = center_calib_mask(h, w, calib_side, calib_side)?;

    let mask = match args.pattern {
        CliPattern::LearnedTopk | CliPattern::LearnedDraw => {
            let c = ckpt
                .as_ref()
                .ok_or_else(|| Error::Config("learned patterns require --checkpoint".into()))?;
            let logits = c
                .params
                .get("pattern.w")
                .ok_or_else(|| Error::Checkpoint("checkpoint lacks pattern.w".into()))?
                .clone();
            let pp = PatternParams::new(logits, c.config.slope_a, gamma, calib.clone())?;
            let prob = pp.prob_map()?;
            match args.pattern {
                CliPattern::LearnedTopk => topk_pattern(&prob, gamma, &calib)?,
                _ => {
                    let mut rng = Rng::new(args.seed);
                    let mut m = sample_binary(&prob, &mut rng)?.into_tensor();
                    for (mv, cv) in m.data_mut().iter_mut().zip(calib.tensor().data()) {
                        if *cv == 1.0 {
                            *mv = 1.0;
                        }
                    }
                    BinaryMask::new(m)?
                }
            }
        }
        CliPattern::Vd => {
            let mut rng = Rng::new(args.seed);
            vd_pattern(h, w, gamma, args.vd_d, &calib, &mut rng)?
        }
        CliPattern::File => {
            let path = args
                .pattern_file
                .as_ref()
                .ok_or_else(|| Error::Config("--pattern file needs --pattern-file".into()))?;
            BinaryMask::new(kspace_loupe::numerics::read_rtensor(path)?)?
        }
    };

    let recon = match args.method {
        CliMethod::Zf => zero_filled(&sample.kspace, &sample.sens, mask.tensor())?,
        CliMethod::Tv => {
            let cfg = TVConfig::new(args.tv_alpha, args.tv_iters)?;
            tv_recon(&sample.kspace, &sample.sens, mask.tensor(), &cfg)?
        }
        CliMethod::Modl => {
            let c = ckpt
                .as_ref()
                .ok_or_else(|| Error::Config("modl requires --checkpoint".into()))?;
            let unroll = c.config.unroll(c.config.n_cg_eval)?;
            modl_reconstruct(&sample, mask.tensor(), &c.params, &unroll)?
        }
    };

    std::fs::create_dir_all(&args.out)?;
    let mag = recon.magnitude();
    let peak = mag.data().iter().cloned().fold(0.0, f64::max).max(1e-12);
    save_gray_png(&mag.map(|v| v / peak), &args.out.join("recon.png"))?;
    write_rtensor(&args.out.join("recon-mag.kst"), &mag)?;
    save_gray_png(mask.tensor(), &args.out.join("mask.png"))?;
    write_rtensor(&args.out.join("mask.kst"), mask.tensor())?;
    let p = psnr(&recon, &sample.label)?;
    let s = ssim(&recon, &sample.label)?;
    println!(
        "psnr {p:.3} dB, ssim {s:.4}; outputs in {}",
        args.out.display()
    );
    Ok(())
}

fn run_export(args: ExportArgs) -> Result<(), Error> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let logits = ckpt
        .params
        .get("pattern.w")
        .ok_or_else(|| Error::Checkpoint("checkpoint lacks pattern.w".into()))?
        .clone();
    let (h, w) = (logits.shape()[0], logits.shape()[1]);
    let calib = center_calib_mask(h, w, ckpt.config.calib, ckpt.config.calib)?;
    let pattern =
        PatternParams::new(logits, ckpt.config.slope_a, ckpt.config.gamma, calib.clone())?;
    let prob = pattern.prob_map()?;
    let mask = if args.draw {
        let mut rng = Rng::new(args.seed);
        let mut m = sample_binary(&prob, &mut rng)?.into_tensor();
        for (mv, cv) in m.data_mut().iter_mut().zip(calib.tensor().data()) {
            if *cv == 1.0 {
                *mv = 1.0;
            }
        }
        kspace_loupe::sampling::BinaryMask::new(m)?
    } else {
        topk_pattern(&prob, ckpt.config.gamma, &calib)?
    };

    std::fs::create_dir_all(&args.out)?;
    save_gray_png(&prob, &args.out.join("prob.png"))?;
    write_rtensor(&args.out.join("prob.kst"), &prob)?;
    save_gray_png(mask.tensor(), &args.out.join("mask.png"))?;
    write_rtensor(&args.out.join("mask.kst"), mask.tensor())?;
    println!(
        "probability mean {:.6}, mask mean {:.6} ({} of {} locations), outputs in {}",
        prob.mean(),
        mask.mean(),
        mask.count_ones(),
        h * w,
        args.out.display()
    );
    Ok(())
}

fn run_vd(args: VdArgs) -> Result<(), Error> {
    let calib = center_calib_mask(args.height, args.width, args.calib, args.calib)?;
    let prob = vd_prob_map(args.height, args.width, args.gamma, args.d, &calib)?;
    let mut rng = Rng::new(args.seed);
    let mask = vd_pattern(args.height, args.width, args.gamma, args.d, &calib, &mut rng)?;
    std::fs::create_dir_all(&args.out)?;
    save_gray_png(&prob, &args.out.join("vd-prob.png"))?;
    write_rtensor(&args.out.join("vd-prob.kst"), &prob)?;
    save_gray_png(mask.tensor(), &args.out.join("vd-mask.png"))?;
    write_rtensor(&args.out.join("vd-mask.kst"), mask.tensor())?;
    println!(
        "expected mean {:.6}, drawn mean {:.6}, outputs in {}",
        prob.mean(),
        mask.mean(),
        args.out.display()
    );
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<bool, Error> {
    use kspace_loupe::suites;
    let results = match args.suite.as_str() {
        "all" => suites::run_all()?,
        "ops" => vec![suites::ops_suite()?],
        "denoiser" => vec![suites::denoiser_suite()?],
        "pipeline" => vec![suites::pipeline_suite()?],
        "st" => vec![suites::st_exactness()?],
        other => {
            return Err(Error::Config(format!(
                "unknown suite {other}; expected all|ops|denoiser|pipeline|st"
            )))
        }
    };
    let mut all_ok = true;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<14} max rel err {:>12.3e}  (threshold {:.0e})  {status}",
            r.name, r.max_rel_err, r.threshold
        );
        all_ok &= r.passed();
    }
    Ok(all_ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("KSPACE_LOUPE_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
    {
        eprintln!("warning: could not set thread pool size: {e}");
    }

    let result = match cli.command {
        Command::GenData(args) => run_gen_data(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Recon(args) => run_recon(args),
        Command::ExportPattern(args) => run_export(args),
        Command::VdPattern(args) => run_vd(args),
        Command::Gradcheck(args) => {
            return match run_gradcheck(args) {
                Ok(true) => ExitCode::SUCCESS,
                Ok(false) => ExitCode::FAILURE,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::Config(_) | Error::Json(_))) => {
            eprintln!("error: {e}");
            eprintln!("run with --help for usage");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
