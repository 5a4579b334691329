//! Command-line entry point: scene synthesis, normal maps, training,
//! inpainting and evaluation reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use depthfill::attention::TransferMode;
use depthfill::image::{DisparityImage, HoleMask};
use depthfill::io as dio;
use depthfill::losses::LossWeights;
use depthfill::metrics::{
    self, distance_table_csv, distance_table_markdown, pixel_table_csv, MetricReport,
};
use depthfill::attention::AttentionResult;
use depthfill::model::checkpoint::Checkpoint;
use depthfill::model::train::{inpaint_detailed, train};
use depthfill::model::TrainConfig;
use depthfill::normals::normals_from_disparity;
use depthfill::scene::{synth_mask, synth_scene, random_scene_spec, SyntheticStream};
use depthfill::{Error, Result};

#[derive(Parser)]
#[command(name = "depthfill", version, about = "Disparity-map inpainting toolkit")]
struct Cli {
    /// Optional key=value config file; explicit flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic piecewise-planar scenes plus hole masks.
    Synth(SynthArgs),
    /// Compute a surface-normal map from a disparity file.
    Normals(NormalsArgs),
    /// Train the inpainting model on synthetic scenes.
    Train(TrainArgs),
    /// Fill the hole of a disparity image with a trained model.
    Inpaint(InpaintArgs),
    /// Evaluate generated against ground-truth disparity.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of scenes.
    #[arg(long, default_value_t = 8)]
    n: usize,
    /// Image side length.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Hole side length.
    #[arg(long, default_value_t = 24)]
    hole: usize,
    /// Additive Gaussian noise sigma.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct NormalsArgs {
    /// Input disparity (.pgm or .pfm).
    #[arg(long = "in")]
    input: PathBuf,
    /// Treat 16-bit PGM input as CityScapes-encoded.
    #[arg(long, default_value_t = false)]
    cityscapes: bool,
    /// Output normal map (.pfm, three channels).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Vectorial-loss weight (0 disables it).
    #[arg(long)]
    alpha: Option<f64>,
    /// Adversarial weight.
    #[arg(long)]
    beta: Option<f64>,
    /// L1 weight.
    #[arg(long)]
    phi: Option<f64>,
    #[arg(long = "lambda-gp")]
    lambda_gp: Option<f64>,
    #[arg(long = "n-critic")]
    n_critic: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 24)]
    hole: usize,
    /// Base channel width of both networks.
    #[arg(long, default_value_t = 16)]
    width: usize,
    /// Training noise sigma for the synthetic stream.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long = "no-surface-attention", default_value_t = false)]
    no_surface_attention: bool,
    #[arg(long = "no-surface-discrimination", default_value_t = false)]
    no_surface_discrimination: bool,
    /// Restrict the vectorial loss to hole pixels.
    #[arg(long = "vl-region", value_parser = ["full", "hole"], default_value = "full")]
    vl_region: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output checkpoint path; the training log CSV lands next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InpaintArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Input disparity file or manifest (.txt).
    #[arg(long = "in")]
    input: PathBuf,
    /// Hole mask PGM (non-zero = hole) or manifest (.txt).
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, value_parser = ["argmax", "blend"], default_value = "argmax")]
    attention: String,
    #[arg(long, default_value_t = false)]
    cityscapes: bool,
    /// Dump the per-pixel best attention score as a PFM for inspection
    /// (single input: this path; manifest: `<stem>_scores.pfm` per image).
    #[arg(long = "dump-scores")]
    dump_scores: Option<PathBuf>,
    /// Output file (single input) or directory (manifest input).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Ground-truth disparity file or manifest (.txt).
    #[arg(long)]
    gt: PathBuf,
    /// Generated disparity file or manifest (.txt).
    #[arg(long)]
    gen: PathBuf,
    /// Hole mask or manifest (.txt).
    #[arg(long)]
    mask: PathBuf,
    /// Depth histogram bins.
    #[arg(long, default_value_t = metrics::DEFAULT_DEPTH_BINS)]
    bins: usize,
    /// Evaluate over the hole only or the full image.
    #[arg(long, value_parser = ["hole", "full"], default_value = "hole")]
    region: String,
    /// Log base for the divergences in the emitted tables.
    #[arg(long = "log-base", value_parser = ["e", "2"], default_value = "e")]
    log_base: String,
    #[arg(long, default_value_t = false)]
    cityscapes: bool,
    /// Output directory for the report files.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            let code = match &e {
                Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 3,
                Error::Parse { .. } => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let overrides = match &cli.config {
        Some(path) => parse_config_file(path)?,
        None => Vec::new(),
    };
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Normals(a) => cmd_normals(a),
        Command::Train(a) => cmd_train(apply_train_config(a, &overrides)?),
        Command::Inpaint(a) => cmd_inpaint(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

/// key=value lines; unknown keys are rejected so typos do not pass silently.
fn parse_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::parse(lineno, format!("config line {:?} is not key=value", line))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Config-file values fill in train options the command line left at their
/// defaults (flags always win: they are applied on top by clap already, so
/// here only Option-typed fields are filled).
fn apply_train_config(mut a: TrainArgs, overrides: &[(String, String)]) -> Result<TrainArgs> {
    for (k, v) in overrides {
        let parse_f64 = || -> Result<f64> {
            v.parse().map_err(|_| Error::contract(format!("config {}={} is not a number", k, v)))
        };
        match k.as_str() {
            "alpha" => {
                if a.alpha.is_none() {
                    a.alpha = Some(parse_f64()?);
                }
            }
            "beta" => {
                if a.beta.is_none() {
                    a.beta = Some(parse_f64()?);
                }
            }
            "phi" => {
                if a.phi.is_none() {
                    a.phi = Some(parse_f64()?);
                }
            }
            "lambda_gp" => {
                if a.lambda_gp.is_none() {
                    a.lambda_gp = Some(parse_f64()?);
                }
            }
            "n_critic" => {
                if a.n_critic.is_none() {
                    a.n_critic = Some(parse_f64()? as usize);
                }
            }
            other => {
                return Err(Error::contract(format!("unknown config key {:?}", other)));
            }
        }
    }
    Ok(a)
}

fn flag_echo(parts: &[String]) -> String {
    format!("depthfill {}", parts.join(" "))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let mut scene_files = Vec::new();
    let mut mask_files = Vec::new();
    let echo = flag_echo(&[
        format!("synth --n {} --size {} --hole {} --sigma {} --seed {}", a.n, a.size, a.hole, a.sigma, a.seed),
    ]);
    for i in 0..a.n {
        let mut spec = random_scene_spec(a.size, a.size, a.seed.wrapping_add(i as u64));
        spec.noise_sigma = a.sigma;
        let scene = synth_scene(&spec)?;
        let mask = synth_mask(a.size, a.hole, a.seed ^ ((i as u64).wrapping_mul(0x9e3779b9)))?;

        let scene_path = a.out.join(format!("scene_{:04}.pgm", i));
        dio::write_pgm16(&scene_path, &scene.disparity, 256.0, std::slice::from_ref(&echo))?;
        let mask_path = a.out.join(format!("mask_{:04}.pgm", i));
        let mask_img = DisparityImage::from_values(
            a.size,
            a.size,
            mask.flags().iter().map(|&h| if h { 1.0 } else { 0.0 }).collect(),
        )?;
        dio::write_pgm16(&mask_path, &mask_img, 1.0, std::slice::from_ref(&echo))?;
        let normals_path = a.out.join(format!("normals_{:04}.pfm", i));
        dio::write_pfm_normals(&normals_path, &scene.gt_normals)?;
        scene_files.push(scene_path);
        mask_files.push(mask_path);
    }
    dio::write_manifest(&a.out.join("scenes.txt"), &scene_files, std::slice::from_ref(&echo))?;
    dio::write_manifest(&a.out.join("masks.txt"), &mask_files, &[echo])?;
    println!("wrote {} scenes to {}", a.n, a.out.display());
    Ok(())
}

fn cmd_normals(a: NormalsArgs) -> Result<()> {
    let d = dio::read_disparity_auto(&a.input, a.cityscapes)?;
    let n = normals_from_disparity(&d)?;
    dio::write_pfm_normals(&a.out, &n)?;
    println!("wrote normal map to {}", a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let defaults = LossWeights::default();
    let weights = LossWeights {
        alpha: a.alpha.unwrap_or(defaults.alpha),
        beta: a.beta.unwrap_or(defaults.beta),
        phi: a.phi.unwrap_or(defaults.phi),
        lambda_gp: a.lambda_gp.unwrap_or(defaults.lambda_gp),
        n_critic: a.n_critic.unwrap_or(defaults.n_critic),
    };
    let cfg = TrainConfig {
        image_size: a.size,
        hole_size: a.hole,
        batch: a.batch,
        steps: a.steps,
        lr: a.lr,
        weights,
        seed: a.seed,
        width: a.width,
        vectorial_loss_on: weights.alpha > 0.0,
        surface_attention_on: !a.no_surface_attention,
        surface_discrimination_on: !a.no_surface_discrimination,
        vl_hole_only: a.vl_region == "hole",
        sigma: a.sigma,
        ..TrainConfig::default()
    };
    let echo = flag_echo(&[format!(
        "train --steps {} --batch {} --alpha {} --beta {} --phi {} --lambda-gp {} --n-critic {} \
         --lr {} --size {} --hole {} --width {} --sigma {}{}{} --vl-region {} --seed {}",
        a.steps,
        a.batch,
        weights.alpha,
        weights.beta,
        weights.phi,
        weights.lambda_gp,
        weights.n_critic,
        a.lr,
        a.size,
        a.hole,
        a.width,
        a.sigma,
        if a.no_surface_attention { " --no-surface-attention" } else { "" },
        if a.no_surface_discrimination { " --no-surface-discrimination" } else { "" },
        a.vl_region,
        a.seed
    )]);

    let mut stream = SyntheticStream::new(a.size, a.hole, a.sigma, a.seed);
    let (ckpt, log) = train(&cfg, &mut stream)?;
    ckpt.save(&a.out)?;
    let log_path = a.out.with_extension("log.csv");
    std::fs::write(&log_path, log.to_csv(&[echo]))?;
    println!(
        "trained {} steps; checkpoint at {}, log at {}",
        cfg.steps,
        a.out.display(),
        log_path.display()
    );
    Ok(())
}

fn read_mask(path: &Path) -> Result<HoleMask> {
    let pgm = dio::read_pgm16_raw(path)?;
    HoleMask::new(pgm.height, pgm.width, pgm.raw.iter().map(|&p| p != 0).collect())
}

/// Single path or, for `.txt`/`.lst`, the manifest contents.
fn expand_inputs(path: &Path) -> Result<Vec<PathBuf>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("txt") | Some("lst") => dio::read_manifest(path),
        _ => Ok(vec![path.to_path_buf()]),
    }
}

fn cmd_inpaint(a: InpaintArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let transfer =
        if a.attention == "blend" { TransferMode::Blend } else { TransferMode::Argmax };
    let inputs = expand_inputs(&a.input)?;
    let masks = expand_inputs(&a.mask)?;
    if inputs.len() != masks.len() {
        return Err(Error::contract(format!(
            "{} inputs vs {} masks",
            inputs.len(),
            masks.len()
        )));
    }
    let many = inputs.len() > 1;
    if many {
        std::fs::create_dir_all(&a.out)?;
    }
    let echo = flag_echo(&[format!(
        "inpaint --ckpt {} --attention {}",
        a.ckpt.display(),
        a.attention
    )]);
    let mut outputs = Vec::new();
    for (input, mask_path) in inputs.iter().zip(&masks) {
        let d = dio::read_disparity_auto(input, a.cityscapes)?;
        let mask = read_mask(mask_path)?;
        let (filled, attention) = inpaint_detailed(&ckpt, &d, &mask, transfer)?;
        let out_path = if many {
            a.out.join(input.file_name().expect("input file name"))
        } else {
            a.out.clone()
        };
        match out_path.extension().and_then(|e| e.to_str()) {
            Some("pfm") => dio::write_pfm_disparity(&out_path, &filled)?,
            _ => dio::write_pgm16(&out_path, &filled, 256.0, std::slice::from_ref(&echo))?,
        }
        if let Some(dump) = &a.dump_scores {
            let score_path = if many {
                let stem = input.file_stem().expect("stem").to_string_lossy();
                a.out.join(format!("{}_scores.pfm", stem))
            } else {
                dump.clone()
            };
            write_score_map(&score_path, &filled, attention.as_ref())?;
        }
        outputs.push(out_path);
    }
    if many {
        dio::write_manifest(&a.out.join("inpainted.txt"), &outputs, &[echo])?;
    }
    println!("inpainted {} image(s)", outputs.len());
    Ok(())
}

/// Best (renormalised) attention score per foreground pixel on a
/// full-image canvas, zero elsewhere.
fn write_score_map(
    path: &Path,
    filled: &DisparityImage,
    attention: Option<&AttentionResult>,
) -> Result<()> {
    let (h, w) = (filled.height(), filled.width());
    let mut canvas = vec![0.0f64; h * w];
    if let Some(res) = attention {
        for row in 0..res.scores.n_rows() {
            let (i, j) = res.scores.pixel(row);
            let best = res.scores.row(row).iter().cloned().fold(0.0f64, f64::max);
            canvas[i * w + j] = best;
        }
    }
    dio::write_pfm(path, h, w, 1, &canvas)
}

fn full_mask(h: usize, w: usize) -> HoleMask {
    HoleMask::new(h, w, vec![true; h * w]).expect("full mask")
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let gts = expand_inputs(&a.gt)?;
    let gens = expand_inputs(&a.gen)?;
    let masks = expand_inputs(&a.mask)?;
    if gts.len() != gens.len() || gts.len() != masks.len() {
        return Err(Error::contract("gt/gen/mask counts differ"));
    }
    let mut reports = Vec::new();
    for ((gt_p, gen_p), mask_p) in gts.iter().zip(&gens).zip(&masks) {
        let gt = dio::read_disparity_auto(gt_p, a.cityscapes)?;
        let gen = dio::read_disparity_auto(gen_p, a.cityscapes)?;
        let region = if a.region == "full" {
            full_mask(gt.height(), gt.width())
        } else {
            read_mask(mask_p)?
        };
        reports.push(metrics::evaluate_pair(
            &gt,
            &gen,
            &region,
            a.bins,
            metrics::DEFAULT_SURFACE_BINS,
        )?);
    }
    let mut mean = mean_report(&reports);
    if a.log_base == "2" {
        let ln2 = std::f64::consts::LN_2;
        for set in [&mut mean.depth, &mut mean.surface] {
            set.js /= ln2;
            set.kl /= ln2;
        }
    }

    std::fs::create_dir_all(&a.out)?;
    let echo = flag_echo(&[format!(
        "eval --gt {} --gen {} --mask {} --bins {} --region {} --log-base {} ({} pair(s))",
        a.gt.display(),
        a.gen.display(),
        a.mask.display(),
        a.bins,
        a.region,
        a.log_base,
        reports.len()
    )]);
    let rows = vec![("mean".to_string(), mean)];
    std::fs::write(
        a.out.join("pixel_metrics.csv"),
        pixel_table_csv(&[("mean".to_string(), mean.mse, mean.ve)], std::slice::from_ref(&echo)),
    )?;
    std::fs::write(a.out.join("distances.csv"), distance_table_csv(&rows, std::slice::from_ref(&echo)))?;
    std::fs::write(a.out.join("distances.md"), distance_table_markdown(&rows, &[echo]))?;
    println!(
        "evaluated {} pair(s): MSE {:.6}, VE {:.6}; reports in {}",
        reports.len(),
        mean.mse,
        mean.ve,
        a.out.display()
    );
    Ok(())
}

fn mean_report(reports: &[MetricReport]) -> MetricReport {
    let n = reports.len() as f64;
    let mut out = MetricReport {
        depth_bins: reports[0].depth_bins,
        surface_bins: reports[0].surface_bins,
        ..MetricReport::default()
    };
    let mut corr_d = Some(0.0);
    let mut corr_s = Some(0.0);
    for r in reports {
        out.mse += r.mse / n;
        out.ve += r.ve / n;
        out.depth.js += r.depth.js / n;
        out.depth.kl += r.depth.kl / n;
        out.depth.wasserstein += r.depth.wasserstein / n;
        out.depth.intersection += r.depth.intersection / n;
        out.surface.js += r.surface.js / n;
        out.surface.kl += r.surface.kl / n;
        out.surface.wasserstein += r.surface.wasserstein / n;
        out.surface.intersection += r.surface.intersection / n;
        corr_d = match (corr_d, r.depth.correlation) {
            (Some(acc), Some(c)) => Some(acc + c / n),
            _ => None,
        };
        corr_s = match (corr_s, r.surface.correlation) {
            (Some(acc), Some(c)) => Some(acc + c / n),
            _ => None,
        };
    }
    out.depth.correlation = corr_d;
    out.surface.correlation = corr_s;
    out
}
