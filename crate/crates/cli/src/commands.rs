use std::path::{Path, PathBuf};

use compass_core::export::export_directions;
use compass_core::generators::GeneratorRegistry;
use compass_core::metrics::{evaluate, EmbeddingNet};
use compass_core::training::{load_checkpoint, train_loop, Checkpoint};
use compass_core::viz::{linspace, traversal_png, Traversal};
use compass_core::{Error, GeneratorHandle, TrainConfig, Trainer};
use compass_service::{AppState, Explorer, ExplorerOptions};

use crate::{Command, EvalArgs, ExportArgs, ServeArgs, TrainArgs, TraverseArgs};

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

fn usage(err: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: err.to_string(),
    }
}

fn runtime(err: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_RUNTIME,
        message: err.to_string(),
    }
}

/// Everything is checked first (usage errors), then executed (runtime errors).
pub fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Traverse(args) => traverse(args),
        Command::ExportDirections(args) => export(args),
        Command::Serve(args) => serve(args),
    }
}

fn read_checkpoint(path: &Path) -> Result<(Checkpoint<f32>, GeneratorHandle<f32>), Failure> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint not found: {}", path.display())));
    }
    let ckpt = load_checkpoint::<f32>(path).map_err(usage)?;
    let gen = GeneratorRegistry::with_builtins()
        .build(&ckpt.config.generator, ckpt.config.latent_dim)
        .map_err(usage)?;
    Ok((ckpt, gen))
}

/// Rejects output paths whose parent directory is missing or that name a directory.
fn check_output_file(path: &Path) -> Result<(), Failure> {
    if path.is_dir() {
        return Err(usage(format!("output path is a directory: {}", path.display())));
    }
    match path.parent() {
        Some(parent) if !parent.as_os_str().is_empty() && !parent.is_dir() => {
            Err(usage(format!("output directory does not exist: {}", parent.display())))
        }
        _ => Ok(()),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let mut config = match &args.config {
        Some(path) => {
            if !path.is_file() {
                return Err(usage(format!("config file not found: {}", path.display())));
            }
            TrainConfig::from_json_file(path).map_err(usage)?
        }
        None => TrainConfig::default(),
    };
    if let Some(steps) = args.steps {
        config.steps = steps;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate().map_err(usage)?;
    if args.out.exists() && !args.out.is_dir() {
        return Err(usage(format!("--out is not a directory: {}", args.out.display())));
    }
    let mut trainer = Trainer::<f32>::from_config(config.clone()).map_err(usage)?;

    std::fs::create_dir_all(&args.out).map_err(|e| runtime(format!("cannot create {}: {e}", args.out.display())))?;
    write_file(&args.out.join("config.json"), config.to_json_pretty().as_bytes())?;
    let quiet = args.quiet;
    let outcome = train_loop(&mut trainer, Some(&args.out), |row| {
        if !quiet {
            eprintln!(
                "step {:>7}  total {:.4}  cl {:.4}  r {:.4}  c {:.4}  rca {:.3}  ppl {:.4}",
                row.step, row.total, row.classification, row.regression, row.centroid, row.rca, row.ppl
            );
        }
    })
    .map_err(runtime)?;
    if !quiet {
        if let Some(l) = outcome.last_losses {
            eprintln!("finished at step {} with total loss {:.6}", trainer.step(), l.total);
        }
        eprintln!("wrote {}", args.out.display());
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    if args.samples == 0 {
        return Err(usage("--samples must be at least 1"));
    }
    if !(args.delta > 0.0 && args.delta.is_finite()) {
        return Err(usage(format!("--delta must be positive, got {}", args.delta)));
    }
    let out = args.out.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .map_or_else(|| PathBuf::from("eval.json"), |p| p.join("eval.json"))
    });
    check_output_file(&out)?;
    let (ckpt, gen) = read_checkpoint(&args.checkpoint)?;

    let embed = EmbeddingNet::new(gen.output_shape(), ckpt.config.seed);
    let report = evaluate(
        &ckpt.deformator,
        &ckpt.reconstructor,
        &*gen,
        &embed,
        args.samples,
        args.delta,
        &ckpt.config.magnitudes(),
        args.seed,
    )
    .map_err(runtime)?;
    let json = serde_json::to_string_pretty(&report).map_err(runtime)?;
    println!("{json}");
    write_file(&out, json.as_bytes())
}

fn parse_range(flag: &str, text: &str) -> Result<Vec<f64>, Failure> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || usage(format!("{flag} must look like lo:hi:n, got `{text}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if !lo.is_finite() || !hi.is_finite() || n == 0 {
        return Err(usage(format!(
            "{flag}: bounds must be finite and n at least 1, got `{text}`"
        )));
    }
    Ok(linspace(lo, hi, n))
}

fn traverse(args: TraverseArgs) -> Result<(), Failure> {
    let magnitudes = parse_range("--eps-range", &args.eps_range)?;
    let second_mags = match &args.second_eps_range {
        Some(text) => parse_range("--second-eps-range", text)?,
        None => magnitudes.clone(),
    };
    if args.second_eps_range.is_some() && args.second_direction.is_none() {
        return Err(usage("--second-eps-range needs --second-direction"));
    }
    if args.seed.is_empty() {
        return Err(usage("--seed needs at least one value"));
    }
    check_output_file(&args.out)?;
    let (ckpt, gen) = read_checkpoint(&args.checkpoint)?;
    let spec = ckpt.spec();
    spec.check_direction(args.direction).map_err(usage)?;
    if let Some(k2) = args.second_direction {
        spec.check_direction(k2).map_err(usage)?;
    }

    let traversal = Traversal {
        seeds: args.seed,
        direction: args.direction,
        magnitudes,
        second: args.second_direction.map(|k2| (k2, second_mags)),
    };
    let png = traversal_png(&ckpt.deformator, &*gen, &traversal).map_err(runtime)?;
    write_file(&args.out, &png)
}

fn export(args: ExportArgs) -> Result<(), Failure> {
    check_output_file(&args.out)?;
    let (ckpt, _) = read_checkpoint(&args.checkpoint)?;
    let doc = export_directions(&ckpt.deformator, &ckpt.bank);
    let json = serde_json::to_string_pretty(&doc).map_err(runtime)?;
    write_file(&args.out, json.as_bytes())
}

fn serve(args: ServeArgs) -> Result<(), Failure> {
    if !args.checkpoint.is_file() {
        return Err(usage(format!("checkpoint not found: {}", args.checkpoint.display())));
    }
    if let Some(report) = &args.report {
        if !report.is_file() {
            return Err(usage(format!("report not found: {}", report.display())));
        }
    }
    if let Some(dir) = &args.static_dir {
        if !dir.is_dir() {
            return Err(usage(format!("static directory not found: {}", dir.display())));
        }
    }
    if args.rca_samples == 0 || args.workers == 0 {
        return Err(usage("--rca-samples and --workers must be at least 1"));
    }
    let opts = ExplorerOptions {
        rca_samples: args.rca_samples,
        seed: args.seed,
        report: args.report,
        max_shifts: args.max_shifts,
    };
    let explorer = Explorer::from_checkpoint(&args.checkpoint, &opts).map_err(|e| match e {
        Error::Io { .. } => runtime(e),
        _ => usage(e),
    })?;
    let state = AppState::new(explorer, args.workers);
    let runtime_ = tokio::runtime::Runtime::new().map_err(runtime)?;
    runtime_
        .block_on(compass_service::serve(
            (args.host, args.port).into(),
            state,
            args.static_dir,
        ))
        .map_err(runtime)
}
