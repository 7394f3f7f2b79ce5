use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pcdc::error::{Error, Result};
use pcdc::harness::{
    evaluate_dirs, load_images, rd_sweep, train_codec, write_records, Budget, Mode, RunConfig, Session, Sidecar,
};
use pcdc::imaging::{load_image, save_image, write_atomic};

/// Perceptual-constrained diffusion image codec with per-image PPO bit allocation.
#[derive(Parser, Debug)]
#[command(name = "pcdc", version)]
struct Cli {
    /// TOML run configuration; defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed (the sampler seed for `decompress`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
#[group(multiple = false)]
struct BudgetArgs {
    /// Bit budget R_max for the whole stream.
    #[arg(long)]
    rmax_bits: Option<f64>,
    /// Compression ratio; R_max = 24 * pixels / ratio.
    #[arg(long)]
    target_ratio: Option<f64>,
}

impl BudgetArgs {
    fn budget(&self) -> Option<Budget> {
        self.rmax_bits
            .map(Budget::Bits)
            .or(self.target_ratio.map(Budget::TargetRatio))
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train encoder, entropy model and denoiser on the images in `paths.input_dir`.
    Train,
    /// Compress PPM images to `.pcdc` bitstreams.
    Compress {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Output file (single input) or directory; defaults to `paths.output_dir`.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// `ppo` or `uniform-<k>` with k in 1..=K.
        #[arg(long, default_value = "ppo")]
        mode: String,
        #[command(flatten)]
        budget: BudgetArgs,
        /// Reinitialize the policy before every image.
        #[arg(long)]
        reset_per_image: bool,
    },
    /// Decode `.pcdc` bitstreams to PPM images.
    Decompress {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Score reconstructions against originals paired by file name.
    Evaluate {
        originals: PathBuf,
        reconstructions: PathBuf,
        #[arg(short, long, default_value = "metrics.csv")]
        output: PathBuf,
    },
    /// Rate-distortion sweep over the images in `paths.input_dir`.
    RdSweep {
        /// Comma-separated bit budgets.
        #[arg(long, value_delimiter = ',')]
        budgets: Vec<f64>,
        /// Comma-separated compression ratios.
        #[arg(long, value_delimiter = ',')]
        target_ratios: Vec<f64>,
        #[arg(short, long, default_value = "rd.csv")]
        output: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => 2,
        Error::InfeasibleBudget { .. } => 3,
        _ => 4,
    }
}

/// Resolve where output number `i` of `n` goes.
fn output_path(output: Option<&Path>, default_dir: &Path, input: &Path, ext: &str, n: usize) -> Result<PathBuf> {
    let stem = input
        .file_stem()
        .ok_or_else(|| Error::InvalidArgument(format!("input `{}` has no file name", input.display())))?;
    let name = Path::new(stem).with_extension(ext);
    let path = match output {
        Some(o) if n == 1 && !o.is_dir() => o.to_path_buf(),
        Some(o) => o.join(name),
        None => default_dir.join(name),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(path)
}

fn train(config: RunConfig) -> Result<()> {
    let images: Vec<_> = load_images(&config.paths.input_dir)?
        .into_iter()
        .map(|(_, im)| im)
        .collect();
    let outcome = train_codec(&images, &config)?;
    let dir = &config.paths.checkpoint_dir;
    let ckpt = outcome.bundle.save(dir)?;
    let mut log = Vec::new();
    outcome.write_log(&mut log)?;
    let log_path = dir.join("train_log.csv");
    write_atomic(&log_path, &log)?;
    let session = Session::new(config, outcome.bundle)?;
    let sidecar = Sidecar::new("train", &session);
    sidecar.write(&ckpt)?;
    sidecar.write(&log_path)?;
    eprintln!("wrote {} ({})", ckpt.display(), session.model_hash);
    Ok(())
}

fn compress(
    mut config: RunConfig,
    inputs: &[PathBuf],
    output: Option<&Path>,
    mode: &str,
    budget: Option<Budget>,
    reset_per_image: bool,
) -> Result<()> {
    let mode: Mode = mode.parse()?;
    config.ppo.reset_per_image |= reset_per_image;
    let session = Session::open(config)?;
    let mut agent = session.agent();
    for (i, input) in inputs.iter().enumerate() {
        let image = load_image(input)?;
        let r_max = session.budget_bits(&image, budget)?;
        let seed = session.config.seed.wrapping_add(i as u64);
        let out = session.compress(&image, mode, r_max, &mut agent, seed)?;
        let path = output_path(output, &session.config.paths.output_dir, input, "pcdc", inputs.len())?;
        write_atomic(&path, out.bitstream.as_bytes())?;
        let mut sidecar = Sidecar::new("compress", &session);
        sidecar.seed = seed;
        sidecar.mode = Some(mode.to_string());
        sidecar.budget_bits = r_max;
        sidecar.write(&path)?;
        if let Some(report) = &out.adaptation {
            let csv_path = path.with_extension("adapt.csv");
            let mut buf = Vec::new();
            report.write_csv(&mut buf)?;
            write_atomic(&csv_path, &buf)?;
            sidecar.write(&csv_path)?;
        }
        let note = if out.feasible() { "" } else { " (exceeds budget)" };
        eprintln!(
            "{} -> {}: {} bits, minimum {} bits{note}",
            input.display(),
            path.display(),
            out.bitstream.total_bits(),
            out.minimum_bits
        );
    }
    Ok(())
}

fn decompress(config: RunConfig, inputs: &[PathBuf], output: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let session = Session::open(config)?;
    for input in inputs {
        if let Some(meta) = Sidecar::read(input)? {
            if meta.checkpoint_hash != session.model_hash {
                return Err(Error::Checkpoint(format!(
                    "{} was written with checkpoint {}, loaded {}",
                    input.display(),
                    meta.checkpoint_hash,
                    session.model_hash
                )));
            }
        }
        let bytes = std::fs::read(input)?;
        let image = session.decompress(&bytes, seed)?;
        let path = output_path(output, &session.config.paths.output_dir, input, "ppm", inputs.len())?;
        save_image(&image, &path)?;
        let mut sidecar = Sidecar::new("decompress", &session);
        sidecar.seed = seed.unwrap_or(session.config.sampler.seed);
        sidecar.write(&path)?;
        eprintln!("{} -> {}", input.display(), path.display());
    }
    Ok(())
}

fn evaluate(config: RunConfig, originals: &Path, recon: &Path, output: &Path) -> Result<bool> {
    let metrics = pcdc::metrics::MetricSuite::new(config.weights);
    let eval = evaluate_dirs(originals, recon, &metrics)?;
    let mut buf = Vec::new();
    write_records(&eval.records, &mut buf)?;
    write_atomic(output, &buf)?;
    for name in &eval.unpaired {
        eprintln!("unpaired: {name}");
    }
    eprintln!("{} pairs -> {}", eval.records.len().saturating_sub(1), output.display());
    Ok(eval.unpaired.is_empty())
}

fn sweep(config: RunConfig, budgets: &[f64], ratios: &[f64], output: &Path) -> Result<()> {
    let list: Vec<Budget> = budgets
        .iter()
        .map(|&b| Budget::Bits(b))
        .chain(ratios.iter().map(|&r| Budget::TargetRatio(r)))
        .collect();
    let list = if list.is_empty() {
        config.budget.into_iter().collect()
    } else {
        list
    };
    if list.is_empty() {
        return Err(Error::Config(
            "rd-sweep needs --budgets, --target-ratios or a config budget".into(),
        ));
    }
    let session = Session::open(config)?;
    let images = load_images(&session.config.paths.input_dir)?;
    if images.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no images in {}",
            session.config.paths.input_dir.display()
        )));
    }
    let records = rd_sweep(&session, &images, &list)?;
    let mut buf = Vec::new();
    write_records(&records, &mut buf)?;
    write_atomic(output, &buf)?;
    Sidecar::new("rd-sweep", &session).write(output)?;
    eprintln!("{} rows -> {}", records.len(), output.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let (Some(seed), false) = (cli.seed, matches!(cli.command, Command::Decompress { .. })) {
        config.seed = seed;
    }
    match cli.command {
        Command::Train => train(config).map(|_| true),
        Command::Compress {
            inputs,
            output,
            mode,
            budget,
            reset_per_image,
        } => compress(
            config,
            &inputs,
            output.as_deref(),
            &mode,
            budget.budget(),
            reset_per_image,
        )
        .map(|_| true),
        Command::Decompress { inputs, output } => {
            decompress(config, &inputs, output.as_deref(), cli.seed).map(|_| true)
        }
        Command::Evaluate {
            originals,
            reconstructions,
            output,
        } => evaluate(config, &originals, &reconstructions, &output),
        Command::RdSweep {
            budgets,
            target_ratios,
            output,
        } => sweep(config, &budgets, &target_ratios, &output).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
