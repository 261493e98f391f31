use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use r3l_core::image::ImageBuffer;
use r3l_core::inference::{denoise, DenoiseRequest};
use r3l_core::metrics::{psnr, quantize};
use r3l_core::networks::ModelKind;

use r3l::checkpoint::{self, Checkpoint};
use r3l::config::RunConfig;
use r3l::sweep::{self, Method, SweepRequest, NOISY_COLUMN};
use r3l::train::{fmt_db, train_to_dir};
use r3l::{dataset, pgm, synth, Error, Result};

/// Residual-recovery image denoising: train, denoise and evaluate R3L / R3N models.
///
/// Every option may also be given in a flat JSON file passed with --config,
/// using the option name with underscores as the key (`--learning-rate` is
/// `learning_rate`, `--T` is `T`). Command-line values take precedence.
/// Set RUST_LOG=info (or debug) for progress output.
#[derive(Parser)]
#[command(name = "r3l", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Flat JSON config file; command-line options override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    run: RunConfig,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a directory of PGM images; writes checkpoint.json and metrics.csv to --out
    Train(Common),
    /// Denoise one PGM image with a trained checkpoint
    Denoise(Common),
    /// Tabulate mean PSNR of trained checkpoints over a range of test noise levels
    Sweep(Common),
    /// Write a corpus of procedural grayscale test images
    Synth(Common),
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        Ok(base.overridden_by(&self.run))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => c.resolve().and_then(|r| cmd_train(&r)),
        Command::Denoise(c) => c.resolve().and_then(|r| cmd_denoise(&r)),
        Command::Sweep(c) => c.resolve().and_then(|r| cmd_sweep(&r)),
        Command::Synth(c) => c.resolve().and_then(|r| cmd_synth(&r)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn existing_dir<'a>(run: &RunConfig, value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    let dir = run.require(value, key)?;
    if !dir.is_dir() {
        return Err(Error::Config(format!("{key}: {} is not a directory", dir.display())));
    }
    Ok(dir)
}

fn cmd_train(run: &RunConfig) -> Result<()> {
    let config = run.train_config()?;
    let data = existing_dir(run, &run.data, "data")?;
    let out = run.require(&run.out, "out")?;
    let images = dataset::usable_for_patches(dataset::load_dir(data)?, config.patch_size);
    info!("training {} on {} images from {}", config.model_kind, images.len(), data.display());
    let outcome = train_to_dir(&config, images, run.holdout_images(), out)?;
    println!("checkpoint: {}", out.join("checkpoint.json").display());
    println!("metrics: {}", out.join("metrics.csv").display());
    if let (Some(base), Some(fin)) = (outcome.baseline_psnr, outcome.final_psnr) {
        println!("held-out PSNR: {} dB (noisy input {} dB)", fmt_db(fin), fmt_db(base));
    }
    Ok(())
}

fn cmd_denoise(run: &RunConfig) -> Result<()> {
    let ckpt = checkpoint::load(run.require(&run.checkpoint, "checkpoint")?)?;
    let input = pgm::load_image(run.require(&run.input, "input")?)?;
    let output = run.require(&run.output, "output")?;
    let stages = run.stages()?;
    let clean = run.clean.as_deref().map(pgm::load_image).transpose()?;
    if let Some(c) = &clean {
        if (c.width(), c.height()) != (input.width(), input.height()) {
            return Err(Error::Config(format!(
                "clean: {}x{} does not match input {}x{}",
                c.width(),
                c.height(),
                input.width(),
                input.height()
            )));
        }
    }
    let noisy = input.to_tensor();
    let want_stages = clean.is_some() || run.emit_intermediates.is_some();
    let result = denoise(
        &DenoiseRequest::new(&noisy, &ckpt.params)
            .stages(stages)
            .emit_intermediates(want_stages),
    )?;
    let image = ImageBuffer::from_tensor(&result.image)?;
    pgm::save_image(output, &image)?;
    if let Some(dir) = &run.emit_intermediates {
        let frames = result
            .intermediates
            .iter()
            .map(ImageBuffer::from_tensor)
            .collect::<r3l_core::Result<Vec<_>>>()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (t, f) in frames.iter().enumerate() {
            pgm::save_image(dir.join(format!("stage_{}.pgm", t + 1)), f)?;
        }
    }
    if let Some(c) = &clean {
        let c = c.to_tensor();
        println!("stage 0 (input): {} dB", fmt_db(psnr(&c, &noisy)?));
        for (t, est) in result.intermediates.iter().enumerate() {
            println!("stage {}: {} dB", t + 1, fmt_db(psnr(&c, &quantize(est))?));
        }
    }
    Ok(())
}

fn method_name(ckpt: &Checkpoint, path: &Path, taken: &[String]) -> String {
    let base = match ckpt.params.kind {
        ModelKind::R3L => "R3L",
        ModelKind::R3N => "R3N",
    };
    if taken.iter().any(|t| t == base) {
        path.file_stem().map_or(base.to_owned(), |s| s.to_string_lossy().into_owned())
    } else {
        base.to_owned()
    }
}

fn cmd_sweep(run: &RunConfig) -> Result<()> {
    let first = run.require(&run.checkpoint, "checkpoint")?;
    let paths: Vec<&Path> = std::iter::once(first).chain(run.compare.iter().map(PathBuf::as_path)).collect();
    let ckpts = paths.iter().map(checkpoint::load).collect::<Result<Vec<_>>>()?;
    let trained_sigma = ckpts[0].training.sigma_train;
    if let Some((p, c)) = paths.iter().zip(&ckpts).find(|(_, c)| c.training.sigma_train != trained_sigma) {
        return Err(Error::Config(format!(
            "compare: {} was trained at sigma {} but {} at {trained_sigma}",
            p.display(),
            c.training.sigma_train,
            first.display()
        )));
    }
    let testset = existing_dir(run, &run.testset, "testset")?;
    let images = dataset::load_dir(testset)?;
    let out = run.require(&run.out, "out")?;
    let mut names: Vec<String> = Vec::new();
    for (c, p) in ckpts.iter().zip(&paths) {
        let n = method_name(c, p, &names);
        names.push(n);
    }
    let request = SweepRequest {
        methods: names
            .iter()
            .zip(&ckpts)
            .map(|(name, c)| Method {
                name: name.clone(),
                params: &c.params,
            })
            .collect(),
        test_set: &images,
        sigmas: run.sigmas.clone().unwrap_or_else(|| sweep::default_sigmas(trained_sigma)),
        trained_sigma,
        stages: run.stages()?,
        seed: run.seed(),
    };
    let report = sweep::sweep(&request)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for name in std::iter::once(NOISY_COLUMN).chain(names.iter().map(String::as_str)) {
        let path = out.join(format!("{}.csv", name.to_lowercase()));
        let csv = report.csv(name).expect("column exists");
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    }
    let md = report.markdown();
    let path = out.join("report.md");
    std::fs::write(&path, &md).map_err(|e| Error::io(&path, e))?;
    print!("{md}");
    Ok(())
}

fn cmd_synth(run: &RunConfig) -> Result<()> {
    let out = run.require(&run.out, "out")?;
    let count = run.count.unwrap_or(20);
    let (w, h) = (run.width.unwrap_or(128), run.height.unwrap_or(128));
    if count == 0 || w == 0 || h == 0 {
        return Err(Error::Config("count, width and height must be >= 1".into()));
    }
    let images = synth::corpus(count, w, h, run.seed());
    let paths = dataset::write_dir(out, "img", &images)?;
    println!("wrote {} images to {}", paths.len(), out.display());
    Ok(())
}
