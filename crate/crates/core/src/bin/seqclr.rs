use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use seqclr::config::{resolve_data_path, ExperimentConfig};
use seqclr::data::{render_synthetic, Charset, Dataset, Manifest, RenderSpec};
use seqclr::decoders::DecoderConfig;
use seqclr::metrics::{per_sample, write_samples_csv};
use seqclr::training::{
    decoder_eval, evaluate_checkpoint, finetune, pretrain, Checkpoint, Phase, ProtocolSpec, SupervisedOutcome,
};
use seqclr::{Error, Result};

#[derive(Parser)]
#[command(name = "seqclr", version, about = "Contrastive pretraining and evaluation for text recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DecoderKind {
    Ctc,
    Attention,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Toy encoder, short runs.
    Desk,
    /// Full-scale encoder and schedule.
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Print a preset configuration as JSON.
    Config {
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
    },
    /// Render a synthetic labeled word-image dataset.
    Render {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// File whose characters form the charset (default: letters and digits).
        #[arg(long)]
        charset: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        min_len: usize,
        #[arg(long, default_value_t = 8)]
        max_len: usize,
    },
    /// Contrastive pretraining on the images of a dataset (labels unused).
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue a run from one of its checkpoints.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Default: run.json next to the checkpoint.
        #[arg(long)]
        run_log: Option<PathBuf>,
    },
    /// Train a decoder on top of a frozen pretrained encoder.
    DecoderEval {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long, value_enum)]
        decoder: DecoderKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Held-out labeled dataset for the reported metrics.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Where to save encoder plus decoder.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        run_log: Option<PathBuf>,
    },
    /// Fine-tune encoder and decoder on a labeled fraction.
    Finetune {
        /// Pretrained checkpoint, or `none` for the supervised baseline.
        #[arg(long)]
        ckpt: String,
        #[arg(long, value_enum)]
        decoder: DecoderKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fraction: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        run_log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint that carries a trained decoder.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        decoder: DecoderKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Per-sample CSV of references, predictions and edit distances.
        #[arg(long)]
        dump_errors: Option<PathBuf>,
    },
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn make_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => Ok(std::fs::create_dir_all(dir)?),
        _ => Ok(()),
    }
}

fn load_manifest(dir: &Path) -> Result<Manifest> {
    Manifest::load(&resolve_data_path(dir))
}

fn load_labeled(dir: &Path, charset: &Charset, channels: usize) -> Result<(Manifest, Dataset)> {
    let m = load_manifest(dir)?;
    let ds = Dataset::load(&m, charset, channels)?;
    Ok((m, ds))
}

/// Config for a supervised run: the given file, or defaults with the
/// encoder taken from the checkpoint.
fn supervised_config(
    path: Option<&Path>,
    encoder: Option<&Checkpoint>,
    kind: DecoderKind,
    phase: Phase,
) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let mut c = ExperimentConfig::default();
            if let Some(ck) = encoder {
                c.encoder = ck.encoder.clone();
            }
            c.protocol = match phase {
                Phase::Finetune => ProtocolSpec::finetune(1.0),
                _ => ProtocolSpec::decoder_eval(),
            };
            c
        }
    };
    cfg = cfg.for_phase(phase);
    cfg.decoder = match (kind, cfg.decoder) {
        (DecoderKind::Ctc, _) => DecoderConfig::Ctc,
        (DecoderKind::Attention, d @ DecoderConfig::Attention { .. }) => d,
        (DecoderKind::Attention, DecoderConfig::Ctc) => DecoderConfig::attention(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write_outcome(out: &SupervisedOutcome, report: &Path, ckpt: Option<&Path>, run_log: Option<&Path>) -> Result<()> {
    make_parent(report)?;
    std::fs::write(report, serde_json::to_string_pretty(&out.report)?)?;
    let run_path = run_log.map_or_else(|| sibling(report, "run.json"), Path::to_path_buf);
    out.log.write_json(&run_path)?;
    if let Some(subset) = &out.subset {
        subset.write_json(&report.with_extension("subset.json"))?;
    }
    if let Some(p) = ckpt {
        make_parent(p)?;
        out.checkpoint.save(p)?;
    }
    log::info!(
        "acc {:.4} ed1 {:.4} cer {:.4} on {} ({} samples)",
        out.report.metrics.acc,
        out.report.metrics.ed1,
        out.report.metrics.cer,
        out.report.evaluated_on,
        out.report.metrics.n_samples
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config { preset } => {
            let cfg = match preset {
                Preset::Desk => ExperimentConfig::desk(),
                Preset::Full => ExperimentConfig::default(),
            };
            println!("{}", cfg.to_json()?);
        }
        Command::Render {
            out,
            num,
            seed,
            charset,
            min_len,
            max_len,
        } => {
            let mut spec = RenderSpec::new(num, seed);
            if let Some(p) = charset {
                spec.charset = Charset::from_file(&p)?;
            }
            spec.length_range = (min_len, max_len);
            let m = render_synthetic(&out, &spec)?;
            log::info!("rendered {} images into {}", m.len(), out.display());
        }
        Command::Pretrain {
            config,
            data,
            out,
            resume,
            run_log,
        } => {
            let cfg = ExperimentConfig::load(&config)?.for_phase(Phase::Pretrain);
            let m = load_manifest(&data)?;
            let ds = Dataset::load_unlabeled(&m, cfg.encoder.input_channels)?;
            let resume = resume.as_deref().map(Checkpoint::load).transpose()?;
            make_parent(&out)?;
            let dir = out.parent().unwrap_or(Path::new("."));
            let outcome = pretrain(&cfg, &ds, resume, Some(dir))?;
            outcome.checkpoint.save(&out)?;
            outcome
                .log
                .write_json(&run_log.unwrap_or_else(|| sibling(&out, "run.json")))?;
            log::info!("saved {} after {} iterations", out.display(), outcome.checkpoint.iteration);
        }
        Command::DecoderEval {
            encoder,
            decoder,
            data,
            report,
            config,
            test,
            out,
            run_log,
        } => {
            let ck = Checkpoint::load(&encoder)?;
            let cfg = supervised_config(config.as_deref(), Some(&ck), decoder, Phase::DecoderEval)?;
            let (_, ds) = load_labeled(&data, &cfg.charset, cfg.encoder.input_channels)?;
            let test = test
                .map(|t| load_labeled(&t, &cfg.charset, cfg.encoder.input_channels).map(|x| x.1))
                .transpose()?;
            let outcome = decoder_eval(&cfg, &ck, &ds, test.as_ref())?;
            log::info!("encoder digest after training {}", outcome.report.encoder_digest_after);
            write_outcome(&outcome, &report, out.as_deref(), run_log.as_deref())?;
        }
        Command::Finetune {
            ckpt,
            decoder,
            data,
            fraction,
            seed,
            report,
            config,
            test,
            out,
            run_log,
        } => {
            let ck = match ckpt.as_str() {
                "none" => None,
                p => Some(Checkpoint::load(Path::new(p))?),
            };
            let mut cfg = supervised_config(config.as_deref(), ck.as_ref(), decoder, Phase::Finetune)?;
            cfg.seed = seed;
            cfg.protocol.label_fraction = fraction;
            cfg.validate()?;
            let (m, ds) = load_labeled(&data, &cfg.charset, cfg.encoder.input_channels)?;
            let test = test
                .map(|t| load_labeled(&t, &cfg.charset, cfg.encoder.input_channels).map(|x| x.1))
                .transpose()?;
            let outcome = finetune(&cfg, ck.as_ref(), &m, &ds, test.as_ref())?;
            write_outcome(&outcome, &report, out.as_deref(), run_log.as_deref())?;
        }
        Command::Eval {
            ckpt,
            decoder,
            data,
            report,
            dump_errors,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let (stored, charset) = match (&ck.decoder, &ck.charset) {
                (Some(d), Some(c)) => (*d, c.clone()),
                _ => return Err(Error::Incompatible(format!("{} has no trained decoder", ckpt.display()))),
            };
            let wanted = match decoder {
                DecoderKind::Ctc => "ctc",
                DecoderKind::Attention => "attention",
            };
            if stored.name() != wanted {
                return Err(Error::Incompatible(format!(
                    "{} holds a {} decoder, not {wanted}",
                    ckpt.display(),
                    stored.name()
                )));
            }
            let (_, ds) = load_labeled(&data, &charset, ck.encoder.input_channels)?;
            let (preds, metrics) = evaluate_checkpoint(&ck, &ds)?;
            make_parent(&report)?;
            metrics.write_json(&report)?;
            if let Some(csv) = dump_errors {
                let refs = ds.texts().expect("labeled dataset");
                write_samples_csv(&per_sample(&preds, refs, false), &csv)?;
            }
            log::info!("acc {:.4} ed1 {:.4} cer {:.4}", metrics.acc, metrics.ed1, metrics.cer);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
