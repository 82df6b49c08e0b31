use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::{Array3, Axis};

use miva_core::config::Config;
use miva_core::container::{
    load_adapter, load_base, load_video, read_png, read_png_sequence, save_adapter, save_base, save_video,
    write_loss_csv, write_png_sequence,
};
use miva_core::metrics::MetricReport;
use miva_core::synth::{Clip, MotionPattern, MotionPatternDataset, PatternKind, Region};
use miva_core::{animate, pretrain_base, train_miva, train_mmiva, BaseModel, Miva};

#[derive(Parser)]
#[command(name = "miva", version, about = "Modular image-to-video adapters")]
struct Cli {
    /// `key = value` config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a base model on several synthetic motion patterns.
    PretrainBase(PretrainArgs),
    /// Train one adapter on a clip directory written by `make-data`.
    TrainMiva(TrainArgs),
    /// Animate an image with one or more weighted adapters.
    Animate(AnimateArgs),
    /// Animate with several adapters; weights default to 1/n.
    Compose(AnimateArgs),
    /// Report metrics of a MIVV video as CSV.
    Eval(EvalArgs),
    /// Render synthetic clips with masks.
    MakeData(MakeDataArgs),
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated pattern names.
    #[arg(long, default_value = "translate_up,bounce,expand,rotate_bar")]
    patterns: String,
    /// Clips rendered per pattern.
    #[arg(long, default_value_t = 12)]
    clips: usize,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Loss curve CSV; defaults to the checkpoint path with `.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Train a masked adapter (needs clip masks).
    #[arg(long)]
    masked: bool,
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct AnimateArgs {
    /// Input PNG, RGB, model resolution.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    base: PathBuf,
    /// `CHECKPOINT[:WEIGHT]`, repeatable.
    #[arg(long = "adapter", required = true)]
    adapters: Vec<String>,
    /// Subject mask PNG, required with masked adapters.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha_shared: Option<f64>,
    #[arg(long)]
    lowpass_ratio: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    mask_steps: Option<String>,
    /// Output MIVV video.
    #[arg(long)]
    out: PathBuf,
    /// Also write the frames (and masks) as PNGs into this directory.
    #[arg(long)]
    png_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    video: PathBuf,
    /// Pattern label written into the report.
    #[arg(long)]
    pattern: Option<String>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MakeDataArgs {
    #[arg(long)]
    pattern: String,
    #[arg(long)]
    clips: usize,
    #[arg(long)]
    out: PathBuf,
    /// Frames per clip.
    #[arg(long, default_value_t = 12)]
    frames: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// `full`, `upper` or `lower`.
    #[arg(long, default_value = "full")]
    region: String,
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            Config::parse(&text)?
        }
        None => Config::default(),
    };
    if let Ok(seed) = std::env::var("MIVA_SEED") {
        cfg.set("seed", &seed).context("MIVA_SEED")?;
    }
    Ok(cfg)
}

fn override_opt<T: ToString>(cfg: &mut Config, key: &str, value: &Option<T>) -> Result<()> {
    if let Some(v) = value {
        cfg.set(key, &v.to_string())?;
    }
    Ok(())
}

fn pattern_kind(name: &str) -> Result<PatternKind> {
    Ok(PatternKind::from_name(name)?)
}

fn pretrain(cfg: &mut Config, a: &PretrainArgs) -> Result<()> {
    override_opt(cfg, "iters", &a.iters)?;
    override_opt(cfg, "lr", &a.lr)?;
    override_opt(cfg, "seed", &a.seed)?;
    let model = cfg.model()?;
    let mut data = MotionPatternDataset::default();
    for (i, name) in a.patterns.split(',').map(str::trim).enumerate() {
        let p = MotionPattern::preset(pattern_kind(name)?).scaled_to(model.image_size);
        let frames = model.frames + 4;
        data.extend(MotionPatternDataset::generate(
            &p,
            a.clips,
            frames,
            model.image_size,
            cfg.seed + 1000 * i as u64,
        )?);
    }
    let (base, losses) = pretrain_base(&data, model, &cfg.training())?;
    save_base(&a.out, &base, &cfg.to_map())?;
    let csv = a.loss_csv.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    write_loss_csv(&csv, &losses)?;
    println!(
        "base {} ({} parameters) -> {}",
        &base.hash()[..12],
        base.param_count(),
        a.out.display()
    );
    Ok(())
}

/// Clips written by `make-data`: `clip_NNN.mivv` plus optional
/// `clip_NNN_mask_FFF.png`.
fn read_dataset(dir: &Path) -> Result<MotionPatternDataset> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "mivv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .mivv clips in {}", dir.display());
    }
    let mut clips = Vec::new();
    for p in paths {
        let (video, meta) = load_video(&p)?;
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let masks = read_png_sequence(dir, &format!("{stem}_mask")).ok();
        let pattern = meta
            .get("pattern")
            .and_then(|v| v.as_str())
            .unwrap_or("unknown")
            .to_string();
        clips.push(Clip { video, masks, pattern });
    }
    Ok(MotionPatternDataset { clips })
}

fn train(cfg: &mut Config, a: &TrainArgs) -> Result<()> {
    override_opt(cfg, "iters", &a.iters)?;
    override_opt(cfg, "seed", &a.seed)?;
    override_opt(cfg, "lr", &a.lr)?;
    let (base, _) = load_base(&a.base)?;
    let data = read_dataset(&a.data)?;
    let tc = cfg.training();
    let mut miva = if a.masked {
        train_mmiva(&data, &base, &tc)?.miva
    } else {
        train_miva(&data, &base, &tc)?
    };
    miva.meta.config = cfg.to_map();
    save_adapter(&a.out, &miva, &base.config)?;
    let csv = a.loss_csv.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    write_loss_csv(&csv, &miva.meta.loss_curve)?;
    println!(
        "adapter `{}` ({} parameters, {:.2}% of base) -> {}",
        miva.meta.pattern,
        miva.param_count(),
        100.0 * miva_core::parameter_ratio(&miva, &base),
        a.out.display()
    );
    Ok(())
}

fn parse_adapter_spec(spec: &str) -> Result<(PathBuf, Option<f64>)> {
    match spec.rsplit_once(':') {
        Some((path, w)) if !path.is_empty() => match w.parse::<f64>() {
            Ok(w) if w.is_finite() => Ok((PathBuf::from(path), Some(w))),
            _ => bail!("bad adapter weight in `{spec}`"),
        },
        _ => Ok((PathBuf::from(spec), None)),
    }
}

fn run_animation(cfg: &mut Config, a: &AnimateArgs, default_weight: fn(usize) -> f64) -> Result<()> {
    override_opt(cfg, "seed", &a.seed)?;
    override_opt(cfg, "alpha_shared", &a.alpha_shared)?;
    override_opt(cfg, "lowpass_ratio", &a.lowpass_ratio)?;
    override_opt(cfg, "steps", &a.steps)?;
    override_opt(cfg, "mask_steps", &a.mask_steps)?;
    let (base, _): (BaseModel, _) = load_base(&a.base)?;
    let n = a.adapters.len();
    let mut loaded: Vec<(Miva, f64, String)> = Vec::with_capacity(n);
    for spec in &a.adapters {
        let (path, w) = parse_adapter_spec(spec)?;
        let (m, _) = load_adapter(&path).with_context(|| format!("loading adapter {}", path.display()))?;
        loaded.push((m, w.unwrap_or_else(|| default_weight(n)), path.display().to_string()));
    }
    let image = read_png(&a.image)?;
    if image.dim().0 != 3 {
        bail!("--image must be an RGB PNG");
    }
    let mask: Option<Array3<f64>> = match &a.mask {
        Some(p) => {
            let m = read_png(p)?;
            Some(m.index_axis(Axis(0), 0).to_owned().insert_axis(Axis(0)))
        }
        None => None,
    };
    let pairs: Vec<(&Miva, f64)> = loaded.iter().map(|(m, w, _)| (m, *w)).collect();
    let out = animate(&base, &image, mask.as_ref(), &pairs, &cfg.generation())?;
    let adapters: Vec<serde_json::Value> = loaded
        .iter()
        .map(|(m, w, p)| serde_json::json!({"path": p, "weight": w, "pattern": m.meta.pattern}))
        .collect();
    let meta = serde_json::json!({
        "config": cfg.to_map(),
        "base_hash": base.hash(),
        "adapters": adapters,
        "mask_computations": out.mask_computations,
    });
    save_video(&a.out, &out.video, &meta)?;
    if let Some(dir) = &a.png_dir {
        write_png_sequence(dir, "frame", &out.video)?;
        for (j, m) in out.masks.iter().enumerate() {
            write_png_sequence(dir, &format!("mask{j}"), m.maps())?;
        }
    }
    println!("{} frames -> {}", out.video.dim().0, a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (video, _) = load_video(&a.video)?;
    let report = MetricReport::evaluate(&video)?;
    let label = a.pattern.clone().unwrap_or_default();
    let text = format!(
        "video,pattern,{}\n{},{},{}\n",
        MetricReport::CSV_HEADER,
        a.video.display(),
        label,
        report.csv_row()
    );
    match &a.out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn make_data(cfg: &mut Config, a: &MakeDataArgs) -> Result<()> {
    override_opt(cfg, "seed", &a.seed)?;
    let region = match a.region.as_str() {
        "full" => Region::Full,
        "upper" => Region::UpperHalf,
        "lower" => Region::LowerHalf,
        other => bail!("unknown region `{other}` (full, upper, lower)"),
    };
    let pattern = MotionPattern::preset(pattern_kind(&a.pattern)?)
        .scaled_to(cfg.image_size)
        .with_region(region);
    let data = MotionPatternDataset::generate(&pattern, a.clips, a.frames, cfg.image_size, cfg.seed)?;
    std::fs::create_dir_all(&a.out)?;
    for (k, clip) in data.clips.iter().enumerate() {
        let stem = format!("clip_{k:03}");
        let meta = serde_json::json!({"pattern": clip.pattern, "seed": cfg.seed + k as u64, "config": cfg.to_map()});
        save_video(&a.out.join(format!("{stem}.mivv")), &clip.video, &meta)?;
        if let Some(m) = &clip.masks {
            write_png_sequence(&a.out, &format!("{stem}_mask"), m)?;
        }
    }
    println!("{} `{}` clips -> {}", data.len(), a.pattern, a.out.display());
    Ok(())
}

fn selftest() -> Result<bool> {
    let checks = miva_core::selftest::run();
    let mut ok = true;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        ok &= c.passed;
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::PretrainBase(a) => pretrain(&mut cfg, a)?,
        Command::TrainMiva(a) => train(&mut cfg, a)?,
        Command::Animate(a) => run_animation(&mut cfg, a, |_| 1.0)?,
        Command::Compose(a) => run_animation(&mut cfg, a, |n| 1.0 / n as f64)?,
        Command::Eval(a) => eval(a)?,
        Command::MakeData(a) => make_data(&mut cfg, a)?,
        Command::Selftest => return selftest(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
