use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crdr::checkpoint::Checkpoint;
use crdr::codec::{Bitstream, Codec};
use crdr::corpus::{load_images, write_corpus};
use crdr::disc::{DiscConfig, Discriminator, DesignKind};
use crdr::eval::{self, ModelReconstructor, RealityKind};
use crdr::image::ImageTensor;
use crdr::losses::FeatureMetric;
use crdr::train::{self, TrainConfig};

/// Directory searched for `final.ckpt` when `--ckpt` is omitted.
const CHECKPOINT_ENV: &str = "CRDR_CHECKPOINT_DIR";

#[derive(Parser)]
#[command(name = "crdr", version, about = "Variable-rate generative image codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run both training stages.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config field, e.g. `--set stage1_steps=100`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from `latest.ckpt` in the output directory if present.
        #[arg(long)]
        resume: bool,
    },
    /// Compress a PNG.
    Compress {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Quality dial in [0, Q-1]; fractional values interpolate.
        #[arg(long)]
        q: f64,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Decompress to PNG at a chosen realism weight.
    Decompress {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        beta: f64,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Mean bpp, PSNR and perceptual distance at every integer level.
    Eval {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        beta: f64,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// CSV output; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rate sweep over fractional quality values.
    Sweep {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        beta: f64,
        #[arg(long, default_value_t = 0.25)]
        step: f64,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Histogram of reconstruction MSE against relative reality score.
    AnalyzeDhist {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 0.0)]
        beta: f64,
        #[arg(long, default_value_t = 400)]
        crops: usize,
        #[arg(long, default_value_t = 64)]
        crop_size: usize,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = "dhist.csv")]
        out: PathBuf,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Parameter counts per component.
    Info {
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Write a synthetic PNG corpus.
    MakeCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long, default_value_t = 96)]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn checkpoint_path(explicit: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p);
    }
    match std::env::var_os(CHECKPOINT_ENV) {
        Some(dir) => Ok(Path::new(&dir).join("final.ckpt")),
        None => Err(UsageError(format!("no --ckpt given and {CHECKPOINT_ENV} is unset")).into()),
    }
}

fn load_checkpoint(explicit: Option<PathBuf>) -> Result<Checkpoint> {
    let path = checkpoint_path(explicit)?;
    Checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_dir(dir: &Path) -> Result<Vec<ImageTensor>> {
    let images: Vec<_> = load_images(dir).with_context(|| format!("reading {}", dir.display()))?.into_iter().map(|(_, i)| i).collect();
    if images.is_empty() {
        return Err(crdr::Error::Format(format!("no PNG files in {}", dir.display())).into());
    }
    Ok(images)
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn print_sweep(rows: &[eval::SweepRow]) {
    println!("q_frac,bpp,psnr,perceptual");
    for r in rows {
        println!("{},{},{},{}", r.q_frac, r.bpp, r.psnr, r.perceptual);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, overrides, resume } => {
            let cfg = TrainConfig::load(&config, &overrides).with_context(|| format!("reading {}", config.display()))?;
            let total = cfg.total_steps();
            let done = train::run(cfg, resume, |r| {
                if (r.step + 1) % 100 == 0 || r.step + 1 == total {
                    log::info!(
                        "step {}/{} stage {} q={} beta={:.2} bpp={:.4} d={:.2} lp={:.4} total={:.4}",
                        r.step + 1,
                        total,
                        r.stage,
                        r.q,
                        r.beta,
                        r.rate_bpp,
                        r.distortion,
                        r.perceptual,
                        r.total
                    );
                }
            })?;
            println!("{}", done.display());
        }
        Command::Compress { input, out, q, ckpt } => {
            let ck = load_checkpoint(ckpt)?;
            let qc = ck.model.quality(q)?;
            let img = ImageTensor::load_png(&input).with_context(|| format!("reading {}", input.display()))?;
            let stream = Codec::new(&ck.model).compress(&img, qc)?;
            std::fs::write(&out, stream.to_bytes()).map_err(crdr::Error::from).with_context(|| format!("writing {}", out.display()))?;
            println!("{} bytes, {:.4} bpp", stream.len(), eval::bpp(stream.len(), img.height(), img.width()));
        }
        Command::Decompress { input, out, beta, ckpt } => {
            let ck = load_checkpoint(ckpt)?;
            let beta = ck.model.realism(beta)?;
            let bytes = std::fs::read(&input).map_err(crdr::Error::from).with_context(|| format!("reading {}", input.display()))?;
            let stream = Bitstream::from_bytes(&bytes)?;
            let img = Codec::new(&ck.model).decompress(&stream, beta)?;
            img.save_png(&out).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Eval { dir, beta, ckpt, out } => {
            let ck = load_checkpoint(ckpt)?;
            let beta = ck.model.realism(beta)?;
            let images = load_dir(&dir)?;
            let rows = eval::sweep(&ck.model, &images, beta, 1.0, &FeatureMetric::default())?;
            match out {
                Some(p) => eval::write_sweep_csv(&rows, &p)?,
                None => print_sweep(&rows),
            }
        }
        Command::Sweep { dir, beta, step, ckpt, out, plot } => {
            let ck = load_checkpoint(ckpt)?;
            let beta = ck.model.realism(beta)?;
            let images = load_dir(&dir)?;
            let rows = eval::sweep(&ck.model, &images, beta, step, &FeatureMetric::default())?;
            eval::write_sweep_csv(&rows, &out)?;
            if let Some(p) = plot {
                eval::plot_sweep_png(&rows, &p)?;
            }
            let q: Vec<f64> = rows.iter().map(|r| r.q_frac).collect();
            let rate: Vec<f64> = rows.iter().map(|r| r.bpp).collect();
            match eval::spearman(&q, &rate) {
                Ok(rho) => println!("{} rows, spearman(q, bpp) = {rho:.4}", rows.len()),
                Err(_) => println!("{} rows", rows.len()),
            }
        }
        Command::AnalyzeDhist { dir, kind, beta, crops, crop_size, bins, seed, ckpt, out, plot } => {
            let kind: RealityKind = kind.parse().map_err(|e: crdr::Error| UsageError(e.to_string()))?;
            let ck = load_checkpoint(ckpt)?;
            let disc = ck
                .discriminator
                .as_ref()
                .ok_or_else(|| crdr::Error::Compatibility("checkpoint has no discriminator".into()))?;
            let beta = ck.model.realism(beta)?;
            let images = load_dir(&dir)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sample = eval::sample_crops(&images, crops, crop_size, ck.model.levels(), &mut rng)?;
            let recon = ModelReconstructor { model: &ck.model, beta };
            let h = eval::reality_histogram(&recon, disc, &sample, kind, bins)?;
            eval::write_histogram_csv(&h, &out)?;
            if let Some(p) = plot {
                eval::plot_histogram_png(&h, &p)?;
            }
            println!("{} crops binned, {} excluded", h.total(), h.excluded);
        }
        Command::Info { ckpt } => {
            let ck = load_checkpoint(ckpt)?;
            let cfg = ck.model.config();
            println!("levels {}  channels {}  latent channels {}  beta_max {}", cfg.levels, cfg.channels, cfg.latent_channels, cfg.beta_max);
            println!("{:<24}{:>12}", "component", "parameters");
            for (group, n) in ck.model.param_counts() {
                println!("{:<24}{n:>12}", group.name());
            }
            println!("{:<24}{:>12}", "codec total", ck.model.params().total_count());
            let widths = ck.discriminator.as_ref().map(|d| d.config().widths).unwrap_or(DiscConfig::default().widths);
            println!("\ndiscriminator designs at {} levels, widths {widths:?}", cfg.levels);
            println!("{:<18}{:>10}{:>12}{:>10}", "design", "shared", "per level", "total");
            for kind in DesignKind::ALL {
                let r = Discriminator::new(DiscConfig { kind, levels: cfg.levels, widths }, 0)?.param_report();
                let marker = if ck.discriminator.as_ref().is_some_and(|d| d.kind() == kind) { " *" } else { "" };
                println!("{:<18}{:>10}{:>12}{:>10}{marker}", kind.name(), r.shared, r.per_level.first().copied().unwrap_or(0), r.total());
            }
        }
        Command::MakeCorpus { out, count, size, seed } => {
            let paths = write_corpus(&out, count, size, seed)?;
            println!("{} images in {}", paths.len(), out.display());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    use crdr::Error as E;
    match err.downcast_ref::<crdr::Error>() {
        Some(E::Config(_)) => 2,
        Some(E::Domain(_) | E::Size { .. }) => 3,
        Some(E::Format(_) | E::Decode(_) | E::Compatibility(_) | E::Io(_) | E::Image(_) | E::Csv(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
