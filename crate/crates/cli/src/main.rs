use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use compdiff::config::{load_run_config, RunConfig};
use compdiff::dataset::{classifier_stream, denoiser_stream, training_sample, DatasetConfig, SampleKind};
use compdiff::denoiser::train_toy_denoiser;
use compdiff::harness::{trace_strip, write_run, Experiment, Method};
use compdiff::imageio;
use compdiff::metrics::train_classifier;
use compdiff::par::Execution;
use compdiff::{Error, Result};

/// Composite diffusion on a procedural pattern domain.
#[derive(Debug, Parser)]
#[command(name = "compdiff", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run or dataset configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Overrides the configured scaffolding factor, in percent.
    #[arg(long, global = true, value_name = "X")]
    kappa: Option<f64>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Also write per-step latent snapshots as a PNG strip.
    #[arg(long, global = true)]
    trace: bool,

    /// No progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,

    /// Run segments one after another.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render training samples as PNGs with a manifest.
    GenDataset {
        /// Number of samples to write; defaults to one epoch.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the toy denoiser.
    TrainDenoiser,
    /// Train the pattern classifier used by the metrics.
    TrainClassifier,
    /// Run scaffolding and harmonization on the configured layout.
    Generate,
    /// Run a baseline method on the configured layout.
    Baseline {
        #[command(subcommand)]
        kind: BaselineKind,
    },
    /// Sweep the scaffolding factor and score every run.
    AblateKappa,
    /// Score an image against the configured layout.
    Eval {
        /// Image to score; defaults to composite.png in the output directory.
        image: Option<PathBuf>,
    },
    /// Score the composite and both baselines over the configured seeds.
    Compare,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum BaselineKind {
    /// Guided sampling from the union of all segment tokens.
    T2i,
    /// Inpaint the segments one after another.
    Serial,
}

struct Ctx {
    cli: Cli,
    config: PathBuf,
}

impl Ctx {
    fn log(&self, msg: impl AsRef<str>) {
        if !self.cli.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn execution(&self) -> Execution {
        if self.cli.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = load_run_config(&self.config)?;
        if let Some(seed) = self.cli.seed {
            cfg.seed = seed;
        }
        if let Some(kappa) = self.cli.kappa {
            cfg.kappa = kappa;
        }
        if let Some(out) = &self.cli.out {
            cfg.output_dir = std::path::absolute(out)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn dataset_config(&self) -> Result<DatasetConfig> {
        DatasetConfig::load(&self.config)
    }

    fn out_dir(&self, default: &str) -> PathBuf {
        self.cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }

    fn seed(&self) -> u64 {
        self.cli.seed.unwrap_or(0)
    }
}

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    kind: SampleKind,
    tokens: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    control: Option<String>,
}

fn gen_dataset(ctx: &Ctx, count: Option<usize>) -> Result<()> {
    let cfg = ctx.dataset_config()?;
    let vocab = cfg.vocab()?;
    let out = ctx.out_dir("dataset");
    std::fs::create_dir_all(&out)?;
    let stream = denoiser_stream(ctx.seed()).fork("dataset", 0, 0);
    let n = count.unwrap_or_else(|| cfg.epoch_len());
    let names = vocab.names();
    let mut manifest = Vec::with_capacity(n);
    for i in 0..n {
        let sample = training_sample(&cfg, &vocab, i as u64, &stream)?;
        let file = format!("{i:06}.png");
        imageio::write_grid_png(&out.join(&file), &sample.image)?;
        let control = match &sample.control {
            Some(m) => {
                let name = format!("{i:06}-control.png");
                let rgb: Vec<u8> = m.data().iter().flat_map(|&v| [v * 255; 3]).collect();
                imageio::write_rgb8(&out.join(&name), m.width(), m.height(), &rgb)?;
                Some(name)
            }
            None => None,
        };
        let tokens = sample.tokens.iter().map(|&t| names[t].clone()).collect();
        manifest.push(ManifestEntry { file, kind: sample.kind, tokens, control });
        if (i + 1) % 1000 == 0 {
            ctx.log(format!("{} / {n} samples", i + 1));
        }
    }
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    std::fs::write(out.join("dataset.toml"), cfg.to_toml_string())?;
    println!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn train_denoiser(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.dataset_config()?;
    let schedule = cfg.schedule.build()?;
    let out = ctx.out_dir("models");
    std::fs::create_dir_all(&out)?;
    let (model, log) = train_toy_denoiser(&cfg, &schedule, cfg.denoiser.epochs, &denoiser_stream(ctx.seed()), |step, loss| {
        ctx.log(format!("step {step} loss {loss:.4}"))
    })?;
    let path = out.join("denoiser.cdif");
    model.save(&path)?;
    std::fs::write(out.join("denoiser-log.json"), serde_json::to_string_pretty(&log.windows).expect("log serializes"))?;
    std::fs::write(out.join("dataset.toml"), cfg.to_toml_string())?;
    println!("{} steps, final loss {:.4}, saved {}", log.steps, log.last().unwrap_or(f64::NAN), path.display());
    Ok(())
}

fn train_cls(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.dataset_config()?;
    let out = ctx.out_dir("models");
    std::fs::create_dir_all(&out)?;
    let (model, report) =
        train_classifier(&cfg, &classifier_stream(ctx.seed()), |step, loss| ctx.log(format!("step {step} loss {loss:.4}")))?;
    let path = out.join("classifier.cdif");
    model.save(&path)?;
    println!(
        "{} steps, final loss {:.4}, held-out accuracy {:.4}, saved {}",
        report.steps,
        report.final_loss,
        report.holdout_accuracy,
        path.display()
    );
    Ok(())
}

fn run_method(ctx: &Ctx, method: Method) -> Result<()> {
    let exp = Experiment::new(ctx.run_config()?)?;
    let cfg = &exp.config;
    let denoiser = exp.load_denoiser()?;
    ctx.log(format!("{} with seed {}", method.name(), cfg.seed));
    let (image, trace) = match method {
        Method::Composite => {
            let out = exp.generate(&denoiser, cfg.seed, cfg.kappa, ctx.execution(), ctx.cli.trace)?;
            (out.image, Some(out.trace))
        }
        _ => (exp.run_method(method, &denoiser, cfg.seed, ctx.execution())?, None),
    };
    let report = if cfg.models.classifier.is_file() {
        let classifier = exp.load_classifier()?;
        Some(exp.evaluate(&image, &classifier, exp.metadata(method, cfg.seed, Some(cfg.kappa)))?)
    } else {
        ctx.log(format!("no classifier at {}, skipping the report", cfg.models.classifier.display()));
        None
    };
    let png = write_run(&cfg.output_dir, method.name(), &image, report.as_ref(), cfg)?;
    if let Some(strip) = trace.as_ref().filter(|_| ctx.cli.trace).and_then(trace_strip) {
        imageio::write_grid_png(&cfg.output_dir.join("trace.png"), &strip)?;
    }
    println!("wrote {}", png.display());
    if let Some(r) = report {
        println!(
            "content {:.4} spatial {:.4} noise {:.4} blending {:.4}",
            r.content_fidelity, r.spatial_fidelity, r.technical_quality, r.blending
        );
    }
    Ok(())
}

fn ablate(ctx: &Ctx) -> Result<()> {
    let exp = Experiment::new(ctx.run_config()?)?;
    let cfg = &exp.config;
    let kappas = match ctx.cli.kappa {
        Some(k) => vec![k],
        None => cfg.ablation.kappas.clone(),
    };
    let seeds = match ctx.cli.seed {
        Some(s) => vec![s],
        None => cfg.ablation.seeds.clone(),
    };
    let denoiser = exp.load_denoiser()?;
    let classifier = exp.load_classifier()?;
    let table = exp.ablate_kappa(&denoiser, &classifier, &kappas, &seeds, ctx.execution(), |k, s| {
        ctx.log(format!("kappa {k} seed {s}"))
    })?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("ablation.json"), table.to_json())?;
    std::fs::write(cfg.output_dir.join("resolved.toml"), cfg.to_toml_string())?;
    print!("{}", table.render());
    Ok(())
}

fn eval(ctx: &Ctx, image: Option<&Path>) -> Result<()> {
    let exp = Experiment::new(ctx.run_config()?)?;
    let cfg = &exp.config;
    let path = image.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join("composite.png"));
    let grid = imageio::read_grid_png(&path).map_err(|e| match e {
        Error::Io(io) => Error::config("image", format!("{}: {io}", path.display())),
        other => other,
    })?;
    let classifier = exp.load_classifier()?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    let report = exp.evaluate(&grid, &classifier, compdiff::metrics::ReportMetadata {
        method: stem.clone(),
        seed: cfg.seed,
        kappa: None,
        harmonization: None,
        band_radius: cfg.band_radius,
    })?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join(format!("{stem}-eval.json")), report.to_json())?;
    println!("{}", report.to_json());
    Ok(())
}

fn compare(ctx: &Ctx) -> Result<()> {
    let exp = Experiment::new(ctx.run_config()?)?;
    let cfg = &exp.config;
    let seeds = match ctx.cli.seed {
        Some(s) => vec![s],
        None => cfg.ablation.seeds.clone(),
    };
    let denoiser = exp.load_denoiser()?;
    let classifier = exp.load_classifier()?;
    ctx.log(format!("comparing over {} seeds", seeds.len()));
    let cmp = exp.compare(&denoiser, &classifier, &seeds, ctx.execution())?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("comparison.json"), cmp.to_json())?;
    std::fs::write(cfg.output_dir.join("resolved.toml"), cfg.to_toml_string())?;
    print!("{}", cmp.render());
    Ok(())
}

fn run(ctx: &Ctx) -> Result<()> {
    match &ctx.cli.command {
        Command::GenDataset { count } => gen_dataset(ctx, *count),
        Command::TrainDenoiser => train_denoiser(ctx),
        Command::TrainClassifier => train_cls(ctx),
        Command::Generate => run_method(ctx, Method::Composite),
        Command::Baseline { kind: BaselineKind::T2i } => run_method(ctx, Method::TextToImage),
        Command::Baseline { kind: BaselineKind::Serial } => run_method(ctx, Method::Serial),
        Command::AblateKappa => ablate(ctx),
        Command::Eval { image } => eval(ctx, image.as_deref()),
        Command::Compare => compare(ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let Some(config) = cli.config.clone() else {
        eprintln!("error: --config PATH is required");
        return ExitCode::from(1);
    };
    let ctx = Ctx { cli, config };
    match run(&ctx) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_configuration() { 1 } else { 2 })
        }
    }
}
