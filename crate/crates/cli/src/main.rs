use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use glowin::checkpoint::Checkpoint;
use glowin::data::{self, generate_corpus, load_corpus, read_pgm, save_corpus, write_pgm, SynthParams};
use glowin::latent::{self, export_latents, noise_sweep, LatentTable, Selection};
use glowin::probes::{self, ProbeRecord};
use glowin::train::{mean_bpd, TrainConfig, Trainer, METRICS_HEADER};
use glowin::{Error, ErrorKind, Float, Rng};

const CHECKPOINT_FILE: &str = "model.glwn";
const METRICS_FILE: &str = "metrics.csv";

#[derive(Parser)]
#[command(name = "glowin", version, about = "Multi-scale flow with a factorized final latent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (PGM images, labels.csv, corpus_meta).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4000)]
        count: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        anomaly_rate: f64,
    },
    /// Train on a corpus; writes model.glwn and metrics.csv to --out.
    Train {
        /// Flat `key = value` file; unset keys keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides learning_rate [config default: 1e-4].
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Overrides batch_size, in pairs [config default: 80].
        #[arg(long)]
        batch_size: Option<usize>,
        /// Overrides epochs [config default: 100].
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides max_steps; 0 runs `epochs` epochs [config default: 0].
        #[arg(long)]
        max_steps: Option<u64>,
        /// Overrides seed [config default: 0].
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides sigma_ab [config default: 0.85].
        #[arg(long)]
        sigma_ab: Option<f64>,
        /// Overrides n_bits [config default: 6].
        #[arg(long)]
        n_bits: Option<u32>,
        /// Overrides checkpoint_every [config default: 0, end only].
        #[arg(long)]
        checkpoint_every: Option<u64>,
    },
    /// Draw images from the prior at a temperature.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0.7)]
        temperature: Float,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Interpolate one factor (or all latents) from image A toward image B.
    Interpolate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Factor name, or `all` for every latent.
        #[arg(long)]
        factor: String,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean bits/dim of a corpus under the model.
    EvalBpd {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Seed of the dequantization noise.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write one row of latent values per image.
    ExportLatents {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `full` (z_L), `all` (every latent) or a factor name.
        #[arg(long, default_value = "full")]
        which: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a probe on a latent table and write probe_report rows.
    Probe {
        #[arg(long)]
        latents: PathBuf,
        /// `cls` (anomaly) or `reg` (slice index).
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Training epochs of the regression MLP.
        #[arg(long, default_value_t = probes::MlpRegressor::EPOCHS)]
        epochs: usize,
        /// Feature-set label in the report [default: file stem].
        #[arg(long)]
        name: Option<String>,
    },
    /// Export latents of noise-corrupted inputs and score anomaly AUC per weight.
    NoiseSweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.2,0.3")]
        weights: Vec<Float>,
        #[arg(long, default_value = "anomaly")]
        which: String,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

type CliResult<T = ()> = Result<T, Error>;

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.into(),
        source: e,
    }
}

fn write_images(dir: &Path, prefix: &str, images: &[glowin::Tensor], n_bits: u32) -> CliResult {
    create_dir(dir)?;
    for (i, x) in images.iter().enumerate() {
        write_pgm(&dir.join(format!("{prefix}_{i:03}.pgm")), &data::to_image(x, n_bits)?)?;
    }
    Ok(())
}

fn divisor(ckpt: &Checkpoint) -> usize {
    1 << ckpt.model.config().levels
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: Option<PathBuf>,
    data_dir: PathBuf,
    out: PathBuf,
    resume: Option<PathBuf>,
    overrides: impl FnOnce(&mut TrainConfig),
) -> CliResult {
    let resumed = resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut cfg = match (&config, &resumed) {
        (Some(path), _) => TrainConfig::load(path)?,
        (None, Some(ck)) => ck.train.clone(),
        (None, None) => TrainConfig::default(),
    };
    overrides(&mut cfg);
    let corpus = load_corpus(&data_dir, 1 << cfg.levels)?;
    info!("loaded {} images from {}", corpus.len(), data_dir.display());
    let mut trainer = match resumed {
        Some(ck) => ck.into_trainer(corpus, Some(cfg))?,
        None => Trainer::new(cfg, corpus)?,
    };
    create_dir(&out)?;
    let metrics_path = out.join(METRICS_FILE);
    let append = trainer.step() > 0 && metrics_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&metrics_path)
        .map_err(io_err(&metrics_path))?;
    let mut metrics = BufWriter::new(file);
    if !append {
        writeln!(metrics, "{METRICS_HEADER}").map_err(io_err(&metrics_path))?;
    }
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let every = trainer.config().checkpoint_every;
    let total = trainer.total_steps();
    let result = trainer.run(|t, m| {
        writeln!(metrics, "{}", m.csv_row()).map_err(io_err(&metrics_path))?;
        if m.step % 100 == 0 || m.step == total {
            info!("step {}/{} loss {:.3}", m.step, total, m.loss_total);
        }
        if let Some(b) = m.bpd_holdout {
            info!("epoch {} holdout bits/dim {b:.4}", m.epoch);
        }
        if every > 0 && m.step % every == 0 {
            metrics.flush().map_err(io_err(&metrics_path))?;
            Checkpoint::from_trainer(t).save(&ckpt_path)?;
        }
        Ok(())
    });
    metrics.flush().map_err(io_err(&metrics_path))?;
    // On failure the trainer still holds the last good state.
    Checkpoint::from_trainer(&trainer).save(&ckpt_path)?;
    result?;
    println!("trained {} steps; checkpoint {}", trainer.step(), ckpt_path.display());
    Ok(())
}

fn probe(latents: &Path, task: &str, out: &Path, seeds: &[u64], epochs: usize, name: Option<String>) -> CliResult {
    let table = LatentTable::read(latents)?;
    let name = name.unwrap_or_else(|| {
        latents
            .file_stem()
            .map_or("latents".into(), |s| s.to_string_lossy().into_owned())
    });
    let labels = table.labels();
    let features = table.features();
    let mut records: Vec<ProbeRecord> = Vec::new();
    for &seed in seeds {
        match task {
            "cls" => {
                let y: Vec<bool> = labels.iter().map(|l| l.anomaly).collect();
                let m = probes::classify(&features, &y, seed)?;
                println!("seed {seed}: accuracy {:.4} auc {:.4}", m.accuracy, m.auc);
                records.extend(ProbeRecord::classification(&name, table.dim(), m, seed));
            }
            "reg" => {
                let y: Vec<f64> = labels.iter().map(|l| l.slice_index).collect();
                let m = probes::regress(&features, &y, seed, epochs)?;
                println!("seed {seed}: mae {:.4} r2 {:.4}", m.mae, m.r2);
                records.extend(ProbeRecord::regression(&name, table.dim(), m, seed));
            }
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown task `{other}`; expected cls or reg"
                )))
            }
        }
    }
    probes::write_report(out, &records)
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData {
            out,
            count,
            size,
            seed,
            anomaly_rate,
        } => {
            let p = SynthParams {
                size,
                anomaly_rate,
                ..SynthParams::default()
            };
            let corpus = generate_corpus(seed, count, &p)?;
            let mut meta = vec![
                ("seed".to_string(), seed.to_string()),
                ("count".into(), count.to_string()),
            ];
            meta.extend(p.to_meta());
            save_corpus(&out, &corpus, &meta)?;
            println!("wrote {count} images to {}", out.display());
        }
        Command::Train {
            config,
            data,
            out,
            resume,
            learning_rate,
            batch_size,
            epochs,
            max_steps,
            seed,
            sigma_ab,
            n_bits,
            checkpoint_every,
        } => {
            train(config, data, out, resume, |c| {
                if let Some(v) = learning_rate {
                    c.learning_rate = v;
                }
                if let Some(v) = batch_size {
                    c.batch_size = v;
                }
                if let Some(v) = epochs {
                    c.epochs = v;
                }
                if let Some(v) = max_steps {
                    c.max_steps = v;
                }
                if let Some(v) = seed {
                    c.seed = v;
                }
                if let Some(v) = sigma_ab {
                    c.sigma_ab = v;
                }
                if let Some(v) = n_bits {
                    c.n_bits = v;
                }
                if let Some(v) = checkpoint_every {
                    c.checkpoint_every = v;
                }
            })?;
        }
        Command::Sample {
            ckpt,
            n,
            temperature,
            seed,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let images = ck.model.sample(&mut Rng::new(seed), temperature, n)?;
            write_images(&out, "sample", &images, ck.model.config().n_bits)?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Interpolate {
            ckpt,
            a,
            b,
            factor,
            steps,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let n_bits = ck.model.config().n_bits;
            let xa = data::to_model_input(&read_pgm(&a)?, n_bits)?;
            let xb = data::to_model_input(&read_pgm(&b)?, n_bits)?;
            let seq = if factor == "all" {
                latent::interpolate_full(&ck.model, &xa, &xb, steps)?
            } else {
                let m = ck.spec.index_of(&factor).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "unknown factor `{factor}`; expected all or one of {:?}",
                        ck.spec.names
                    ))
                })?;
                latent::interpolate_factor(&ck.model, &ck.spec, &xa, &xb, m, steps)?
            };
            write_images(&out, "interp", &seq, n_bits)?;
            println!("wrote {} frames to {}", seq.len(), out.display());
        }
        Command::EvalBpd { ckpt, data, seed } => {
            let ck = Checkpoint::load(&ckpt)?;
            let corpus = load_corpus(&data, divisor(&ck))?;
            let bpd = mean_bpd(&ck.model, corpus.samples.iter().map(|s| &s.image), &mut Rng::new(seed))?;
            println!("bits/dim: {bpd}");
        }
        Command::ExportLatents { ckpt, data, which, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let corpus = load_corpus(&data, divisor(&ck))?;
            let sel = Selection::parse(&which, &ck.spec)?;
            let table = export_latents(&ck.model, &ck.spec, &corpus, sel)?;
            table.write(&out)?;
            println!(
                "wrote {} rows of {} values to {}",
                table.rows.len(),
                table.dim(),
                out.display()
            );
        }
        Command::Probe {
            latents,
            task,
            out,
            seeds,
            epochs,
            name,
        } => probe(&latents, &task, &out, &seeds, epochs, name)?,
        Command::NoiseSweep {
            ckpt,
            data,
            weights,
            which,
            seeds,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let corpus = load_corpus(&data, divisor(&ck))?;
            let sel = Selection::parse(&which, &ck.spec)?;
            let seed = seeds.first().copied().unwrap_or(0);
            let sweep = noise_sweep(&ck.model, &ck.spec, &corpus, &weights, sel, seed)?;
            create_dir(&out)?;
            for (w, table) in &sweep {
                table.write(&out.join(format!("latents_w{w}.csv")))?;
            }
            let rows = probes::sweep_classification(&sweep, &seeds)?;
            let path = out.join("auc.csv");
            let mut f = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
            writeln!(f, "weight,seed,accuracy,auc").map_err(io_err(&path))?;
            for (w, s, m) in &rows {
                writeln!(f, "{w},{s},{},{}", m.accuracy, m.auc).map_err(io_err(&path))?;
                println!("weight {w} seed {s}: auc {:.4}", m.auc);
            }
            f.flush().map_err(io_err(&path))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            })
        }
    }
}
