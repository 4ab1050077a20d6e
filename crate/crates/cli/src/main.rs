use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use him_core::bench::{evaluate, run_ablation, user_segments, Method};
use him_core::checkpoint::ModelCheckpoint;
use him_core::config::{HimConfig, Variant};
use him_core::data::{
    load_interactions, load_item_meta, Dataset, InputFormat, ItemMeta, LabeledSample,
    LoadedInteractions,
};
use him_core::eval::Segmenter;
use him_core::prep::{prepare, Prepared};
use him_core::synth::SynthSpec;
use him_core::train::train;

#[derive(Parser)]
#[command(
    name = "him",
    version,
    about = "Hybrid interest model: data prep, training, evaluation and ablations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter, index and split a log; writes the split and a summary.
    Prep {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic log with planted user groups.
    Synth {
        /// TOML file with generator settings (defaults when omitted).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one variant and save a checkpoint.
    Train {
        #[command(flatten)]
        input: Input,
        /// Overrides the variant in the config (base, ubp, him).
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every interaction of a log with a checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        items: Option<PathBuf>,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test-split AUC, overall and per user segment, of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        items: Option<PathBuf>,
        /// Split seed; defaults to the one stored in the checkpoint.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train every method over several seeds and write the AUC table.
    Ablate {
        #[command(flatten)]
        input: Input,
        /// Comma-separated methods; default BaseModel, BaseModel+UBP, HIM.
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        repetitions: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Input {
    /// Interaction log (CSV or JSONL), or a directory holding `interactions.csv` and optionally `items.csv`.
    #[arg(long)]
    data: PathBuf,
    /// Item side information CSV.
    #[arg(long)]
    items: Option<PathBuf>,
    /// TOML config (defaults when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Input {
    fn config(&self) -> Result<HimConfig> {
        let mut cfg = match &self.config {
            Some(p) => HimConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => HimConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

fn resolve(data: &Path, items: Option<&Path>) -> (PathBuf, Option<PathBuf>) {
    if data.is_dir() {
        let meta = items
            .map(Path::to_path_buf)
            .or_else(|| Some(data.join("items.csv")).filter(|p| p.exists()));
        (data.join("interactions.csv"), meta)
    } else {
        (data.to_path_buf(), items.map(Path::to_path_buf))
    }
}

fn load(data: &Path, items: Option<&Path>) -> Result<(LoadedInteractions, Vec<ItemMeta>)> {
    let (log, meta) = resolve(data, items);
    let loaded = load_interactions(&log, InputFormat::from_path(&log))
        .with_context(|| format!("loading {}", log.display()))?;
    if loaded.malformed > 0 {
        log::warn!(
            "skipped {} malformed rows in {}",
            loaded.malformed,
            log.display()
        );
    }
    let meta = match meta {
        Some(p) => load_item_meta(&p).with_context(|| format!("loading {}", p.display()))?,
        None => Vec::new(),
    };
    Ok((loaded, meta))
}

fn prepared(input: &Input, cfg: &HimConfig) -> Result<Prepared> {
    let (loaded, meta) = load(&input.data, input.items.as_deref())?;
    Ok(prepare(loaded, &meta, cfg)?)
}

fn write_samples(
    path: &Path,
    data: &Dataset,
    samples: &[LabeledSample],
    scores: Option<&[f64]>,
) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    write_rows(&mut w, data, samples, scores)
}

fn write_rows<W: std::io::Write>(
    w: &mut csv::Writer<W>,
    data: &Dataset,
    samples: &[LabeledSample],
    scores: Option<&[f64]>,
) -> Result<()> {
    let mut header = vec!["user_id", "item_id", "timestamp", "label"];
    if scores.is_some() {
        header.push("score");
    }
    w.write_record(&header)?;
    for (k, s) in samples.iter().enumerate() {
        let mut row = vec![
            data.users.token(s.user).unwrap_or("").to_string(),
            data.items.token(s.item).unwrap_or("").to_string(),
            s.timestamp.to_string(),
            s.label.to_string(),
        ];
        if let Some(sc) = scores {
            row.push(sc[k].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prep { input, out } => {
            let cfg = input.config()?;
            let prep = prepared(&input, &cfg)?;
            std::fs::create_dir_all(&out)?;
            write_samples(
                &out.join("train.csv"),
                &prep.dataset,
                &prep.split.train,
                None,
            )?;
            write_samples(
                &out.join("validation.csv"),
                &prep.dataset,
                &prep.split.validation,
                None,
            )?;
            write_samples(&out.join("test.csv"), &prep.dataset, &prep.split.test, None)?;
            std::fs::write(
                out.join("summary.json"),
                serde_json::to_string_pretty(&prep.summary)?,
            )?;
            println!("{}", serde_json::to_string(&prep.summary)?);
        }
        Command::Synth { spec, out, seed } => {
            let mut s = match spec {
                Some(p) => {
                    SynthSpec::load(&p).with_context(|| format!("reading {}", p.display()))?
                }
                None => SynthSpec::default(),
            };
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let data = s.generate()?;
            data.write(&out)?;
            println!(
                "wrote {} interactions for {} users to {}",
                data.interactions.len(),
                s.users,
                out.display()
            );
        }
        Command::Train {
            input,
            variant,
            out,
        } => {
            let mut cfg = input.config()?;
            if let Some(v) = variant {
                cfg.variant = Variant::parse(&v)?;
            }
            let prep = prepared(&input, &cfg)?;
            let outcome = train::<f64>(&cfg, &prep.dataset, &prep.split)?;
            for s in &outcome.trace {
                println!(
                    "epoch {} loss {:.5} ce {:.5} group {:.5} val_auc {}",
                    s.epoch,
                    s.train_loss,
                    s.train_cross_entropy,
                    s.train_group_loss,
                    s.validation_auc.map_or("-".into(), |a| format!("{a:.5}"))
                );
            }
            ModelCheckpoint::capture(&cfg, &outcome.model, &prep.dataset).save(&out)?;
            println!(
                "best epoch {}, checkpoint {}",
                outcome.best_epoch,
                out.display()
            );
        }
        Command::Predict {
            checkpoint,
            data,
            items,
            out,
        } => {
            let ckpt = ModelCheckpoint::load(&checkpoint)?;
            let (loaded, meta) = load(&data, items.as_deref())?;
            let dataset = ckpt.dataset(&loaded.interactions, &meta);
            let model = ckpt.model::<f64>()?;
            let samples = dataset.interaction_samples();
            let scores = model.predict(&dataset, &samples, ckpt.config.eval_batch_size)?;
            match out {
                Some(p) => write_samples(&p, &dataset, &samples, Some(&scores))?,
                None => write_rows(
                    &mut csv::Writer::from_writer(std::io::stdout()),
                    &dataset,
                    &samples,
                    Some(&scores),
                )?,
            }
        }
        Command::Eval {
            checkpoint,
            data,
            items,
            seed,
        } => {
            let ckpt = ModelCheckpoint::load(&checkpoint)?;
            let mut cfg = ckpt.config.clone();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let input = Input {
                data,
                items,
                config: None,
                seed: None,
            };
            let prep = prepared(&input, &cfg)?;
            let d = &prep.dataset;
            let [_, it, ca, br, sh, pr] = &ckpt.vocabularies;
            if (&d.items, &d.categories, &d.brands, &d.shops, &d.prices) != (it, ca, br, sh, pr) {
                bail!("the data indexes items differently from the checkpoint; score it with `him predict`");
            }
            let model = ckpt.model::<f64>()?;
            let scores = model.predict(d, &prep.split.test, cfg.eval_batch_size)?;
            let segmenter = Segmenter {
                tailed_below: cfg.tailed_below,
                head_above: cfg.head_above,
            };
            let report = evaluate(&scores, &prep.split.test, &user_segments(d, &segmenter))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate {
            input,
            methods,
            repetitions,
            out,
        } => {
            let cfg = input.config()?;
            let methods = match methods {
                Some(m) => m
                    .split(',')
                    .map(|s| Method::parse(s.trim()))
                    .collect::<him_core::Result<Vec<_>>>()?,
                None => Method::variants(),
            };
            let prep = prepared(&input, &cfg)?;
            let ablation = run_ablation(
                &cfg,
                &prep.dataset,
                &prep.split,
                &methods,
                repetitions.unwrap_or(cfg.repetitions),
            )?;
            ablation.write(&out)?;
            print!("{}", ablation.table.to_text());
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run(Cli::parse())
}
