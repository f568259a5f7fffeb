//! `vgnn`: data generation, training, inference and gradient checks.
//!
//! Every option can also come from a flat `key = value` file passed with
//! `--config`; a flag given on the command line wins over the file.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vgnn::datagen::{generate_beam_dataset, generate_plate_dataset, BeamConfig, PlateProblem};
use vgnn::gradcheck::{layer_suite, DEFAULT_STEP, DEFAULT_TOLERANCE};
use vgnn::infer::{evaluate, DEFAULT_SAMPLES, DEFAULT_Z};
use vgnn::io;
use vgnn::{presets, Error, ModelState, NoiseModel, PriorMode, Result};

#[derive(Parser)]
#[command(name = "vgnn", version, about = "Variational graph network for inverse problems on meshes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` file supplying defaults for any flag.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Generate {
        #[command(subcommand)]
        problem: Problem,
    },
    /// Shuffle a dataset and split it into train.json and test.json.
    Split(SplitArgs),
    /// Train a model; writes checkpoint.json and loss.csv.
    Train(TrainArgs),
    /// Predict every simulation of a dataset; writes per-simulation CSVs and metrics.json.
    Infer(InferArgs),
    /// Finite-difference check of every layer's gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Subcommand)]
enum Problem {
    /// Plate in tension with a random modulus field.
    Plate(PlateArgs),
    /// Cantilever with one nodal load.
    Beam(BeamArgs),
}

#[derive(Args)]
struct PlateArgs {
    #[command(flatten)]
    common: Common,
    /// Nodes per side.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    sims: Option<usize>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    traction: Option<f64>,
    #[arg(long)]
    length_scale: Option<f64>,
}

#[derive(Args)]
struct BeamArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    nx: Option<usize>,
    #[arg(long)]
    ny: Option<usize>,
    #[arg(long)]
    length: Option<f64>,
    #[arg(long)]
    height: Option<f64>,
    #[arg(long)]
    modulus: Option<f64>,
    #[arg(long)]
    nu: Option<f64>,
}

#[derive(Args)]
struct SplitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Simulations in the training part.
    #[arg(long)]
    train: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// plate, plate-desk, beam, beam-desk or smoke.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    n_batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    decay_every: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    message_passes: Option<usize>,
    #[arg(long)]
    decoder_width: Option<usize>,
    #[arg(long)]
    decoder_depth: Option<usize>,
    #[arg(long)]
    output_scale: Option<f64>,
    #[arg(long)]
    noise_init: Option<f64>,
    /// mixture or mixed-logs.
    #[arg(long)]
    prior_mode: Option<String>,
    /// quadrature, head-only or global-only.
    #[arg(long)]
    noise_model: Option<String>,
    /// Print losses every this many epochs.
    #[arg(long)]
    log_every: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Decoder weight samples per simulation.
    #[arg(long)]
    samples: Option<usize>,
    /// Half-width of the bands in total standard deviations.
    #[arg(long)]
    z: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
}

/// Command-line values layered over a config file.
struct Settings {
    file: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

fn normalise_key(k: &str) -> String {
    k.trim().replace('_', "-")
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut file = BTreeMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            for (n, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let Some((k, v)) = line.split_once('=') else {
                    return Err(Error::Schema {
                        path: format!("{}:{}", path.display(), n + 1),
                        msg: "expected `key = value`".into(),
                    });
                };
                file.insert(normalise_key(k), v.trim().to_string());
            }
        }
        Ok(Settings {
            file,
            used: RefCell::new(BTreeSet::new()),
        })
    }

    fn get<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.used.borrow_mut().insert(key.to_string());
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| Error::InvalidArgument(format!("config key {key} = {raw:?}: {e}"))),
        }
    }

    fn or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(flag, key)?.unwrap_or(default))
    }

    fn required<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(flag, key)?
            .ok_or_else(|| Error::InvalidArgument(format!("missing required option --{key}")))
    }

    /// Rejects config keys that no option of the command consumed.
    fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        if let Some(k) = self.file.keys().find(|k| !used.contains(*k)) {
            return Err(Error::InvalidArgument(format!("unknown config key {k}")));
        }
        Ok(())
    }
}

fn settings(common: &Common) -> Result<(Settings, u64, Option<PathBuf>)> {
    let s = Settings::load(common.config.as_deref())?;
    let seed = s.required(common.seed, "seed")?;
    let out = s.get(common.out.clone(), "out")?;
    Ok((s, seed, out))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn generate_plate(a: PlateArgs) -> Result<()> {
    let (s, seed, out) = settings(&a.common)?;
    let d = PlateProblem::default();
    let problem = PlateProblem {
        grid: s.or(a.grid, "grid", d.grid)?,
        nu: s.or(a.nu, "nu", d.nu)?,
        traction: s.or(a.traction, "traction", d.traction)?,
        length_scale: s.or(a.length_scale, "length-scale", d.length_scale)?,
        ..d
    };
    let sims = s.or(a.sims, "sims", 100)?;
    let out = out.ok_or_else(|| Error::InvalidArgument("missing required option --out".into()))?;
    s.finish()?;
    let ds = generate_plate_dataset(&problem, sims, seed)?;
    io::write_dataset(&out, &ds)?;
    println!("wrote {} plate simulations on a {}x{} grid to {}", ds.len(), problem.grid, problem.grid, out.display());
    Ok(())
}

fn generate_beam(a: BeamArgs) -> Result<()> {
    let (s, _seed, out) = settings(&a.common)?;
    let d = BeamConfig::default();
    let cfg = BeamConfig {
        nx: s.or(a.nx, "nx", d.nx)?,
        ny: s.or(a.ny, "ny", d.ny)?,
        length: s.or(a.length, "length", d.length)?,
        height: s.or(a.height, "height", d.height)?,
        modulus: s.or(a.modulus, "modulus", d.modulus)?,
        nu: s.or(a.nu, "nu", d.nu)?,
        ..d
    };
    let cfg = BeamConfig {
        columns: cfg.columns.iter().copied().filter(|&c| c < cfg.nx).collect(),
        ..cfg
    };
    let out = out.ok_or_else(|| Error::InvalidArgument("missing required option --out".into()))?;
    s.finish()?;
    let ds = generate_beam_dataset(&cfg)?;
    io::write_dataset(&out, &ds)?;
    println!("wrote {} beam simulations to {}", ds.len(), out.display());
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let (s, seed, out) = settings(&a.common)?;
    let data: PathBuf = s.required(a.data, "data")?;
    let n_train: usize = s.required(a.train, "train")?;
    let out = out.ok_or_else(|| Error::InvalidArgument("missing required option --out".into()))?;
    s.finish()?;
    let ds = io::read_dataset(&data)?;
    if n_train > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot take {n_train} training simulations from {}",
            ds.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    create_dir(&out)?;
    io::write_dataset(out.join("train.json"), &ds.subset(&idx[..n_train]))?;
    io::write_dataset(out.join("test.json"), &ds.subset(&idx[n_train..]))?;
    println!("split {} simulations into {} train / {} test", ds.len(), n_train, ds.len() - n_train);
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let (s, seed, out) = settings(&a.common)?;
    let data: PathBuf = s.required(a.data, "data")?;
    let preset: String = s.or(a.preset, "preset", "plate".to_string())?;
    let (Some(m), Some(t)) = (presets::model_preset(&preset), presets::train_preset(&preset)) else {
        return Err(Error::InvalidArgument(format!("unknown preset {preset:?}")));
    };
    let model_cfg = vgnn::ModelConfig {
        latent_dim: s.or(a.latent_dim, "latent-dim", m.latent_dim)?,
        message_passes: s.or(a.message_passes, "message-passes", m.message_passes)?,
        decoder_width: s.or(a.decoder_width, "decoder-width", m.decoder_width)?,
        decoder_depth: s.or(a.decoder_depth, "decoder-depth", m.decoder_depth)?,
        output_scale: s.or(a.output_scale, "output-scale", m.output_scale)?,
        noise_init: s.or(a.noise_init, "noise-init", m.noise_init)?,
        prior_mode: s.or(a.prior_mode.map(|v| v.parse::<PriorMode>()).transpose()?, "prior-mode", m.prior_mode)?,
        noise_model: s.or(
            a.noise_model.map(|v| v.parse::<NoiseModel>()).transpose()?,
            "noise-model",
            m.noise_model,
        )?,
        ..m
    };
    let train_cfg = vgnn::TrainConfig {
        epochs: s.or(a.epochs, "epochs", t.epochs)?,
        n_batch: s.or(a.n_batch, "n-batch", t.n_batch)?,
        lr: s.or(a.lr, "lr", t.lr)?,
        decay: s.or(a.decay, "decay", t.decay)?,
        decay_every: s.or(a.decay_every, "decay-every", t.decay_every)?,
        clip_norm: s.or(a.clip_norm, "clip-norm", t.clip_norm)?,
        seed: seed.wrapping_add(1),
    };
    let log_every = s.or(a.log_every, "log-every", 50)?.max(1);
    let out = out.ok_or_else(|| Error::InvalidArgument("missing required option --out".into()))?;
    s.finish()?;

    let ds = io::read_dataset(&data)?;
    let model_cfg = vgnn::ModelConfig {
        dim: ds.mesh.dim(),
        out_dim: ds.target_width().unwrap_or(model_cfg.out_dim),
        ..model_cfg
    };
    let model = ModelState::init(model_cfg, seed)?;
    println!(
        "training {} parameters on {} simulations for {} epochs",
        model.n_parameters(),
        ds.len(),
        train_cfg.epochs
    );
    let state = vgnn::train_with(&ds, model, &train_cfg, |r| {
        if r.epoch % log_every == 0 || r.epoch == 1 || r.epoch == train_cfg.epochs {
            println!(
                "epoch {} total {:.6} nll {:.6} kl {:.6} lr {:e}",
                r.epoch, r.total, r.nll, r.kl, r.lr
            );
        }
    })?;
    create_dir(&out)?;
    io::write_checkpoint(out.join("checkpoint.json"), &state.model)?;
    io::write_loss_csv(out.join("loss.csv"), &state.history)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let (s, seed, out) = settings(&a.common)?;
    let checkpoint: PathBuf = s.required(a.checkpoint, "checkpoint")?;
    let data: PathBuf = s.required(a.data, "data")?;
    let samples = s.or(a.samples, "samples", DEFAULT_SAMPLES)?;
    let z = s.or(a.z, "z", DEFAULT_Z)?;
    let out = out.ok_or_else(|| Error::InvalidArgument("missing required option --out".into()))?;
    s.finish()?;

    let model = io::read_checkpoint(&checkpoint)?;
    let ds = io::read_dataset(&data)?;
    let (fields, report) = evaluate(&model, &ds, samples, z, seed)?;
    create_dir(&out)?;
    for (i, (f, sim)) in fields.iter().zip(&ds.simulations).enumerate() {
        let csv = io::prediction_csv(&ds.mesh, f, &sim.y)?;
        write_file(&out.join(format!("pred_{i:04}.csv")), &csv)?;
    }
    io::write_metrics(out.join("metrics.json"), &report)?;
    println!(
        "{} simulations: mean rrmse {:.6}, median rrmse {:.6}, coverage {:.4} at z = {}",
        ds.len(),
        report.mean_rrmse,
        report.median_rrmse,
        report.coverage,
        z
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let (s, seed, _out) = settings(&a.common)?;
    let step = s.or(a.step, "step", DEFAULT_STEP)?;
    let tolerance = s.or(a.tolerance, "tolerance", DEFAULT_TOLERANCE)?;
    s.finish()?;
    let mut report = layer_suite(seed, step)?;
    report.tolerance = tolerance;
    for c in &report.cases {
        println!("{:<40} {:.3e}", c.name, c.max_rel_error());
    }
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!("max relative error {:.3e} (tolerance {:e}): {verdict}", report.max_rel_error(), tolerance);
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(3) })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate { problem } => match problem {
            Problem::Plate(a) => generate_plate(a)?,
            Problem::Beam(a) => generate_beam(a)?,
        },
        Command::Split(a) => split(a)?,
        Command::Train(a) => train(a)?,
        Command::Infer(a) => infer(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(4) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
