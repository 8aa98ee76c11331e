//! Command-line entry points. Every command writes machine-readable output
//! (CSV or JSON) and exits 0 on success, 1 on a runtime failure and 2 on a
//! usage error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::data::{generate_synthetic_dataset, load_dataset, Dataset, SyntheticDatasetSpec};
use crate::infer::{
    assemble_semantic, classify_masks, ensemble, generator_probabilities, mask_acc_counts,
    oracle_assign, prepare_samples, read_proposals, IouAccumulator, MaskAccOptions,
    MaskProposalSet, Scorer,
};
use crate::linalg::Matrix;
use crate::psm::{demo_inconsistency, DemoConfig, PsmKind};
use crate::textenc::{load_text_embeddings, toy_encode, TextEmbeddings};
use crate::train::{
    load_checkpoint, metrics_csv, save_checkpoint, train, Model, StopReason, TrainConfig,
    TrainState, METRICS_HEADER,
};

#[derive(Debug, Parser)]
#[command(
    name = "maskclip",
    version,
    about = "Mask-conditioned CLIP fine-tuning and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic shape dataset.
    GenData {
        /// JSON dataset spec.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Print the plan without writing anything.
        #[arg(long)]
        dry_run: bool,
    },
    /// Fine-tune on ground-truth masks.
    Train {
        /// JSON training config; defaults apply to omitted fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory to write (metrics.csv goes alongside).
        #[arg(long)]
        out: PathBuf,
        /// Override the similarity head variant.
        #[arg(long)]
        psm: Option<PsmKind>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Accept a checkpoint whose config digest differs.
        #[arg(long)]
        force: bool,
        /// K x D text embeddings instead of the hash-seeded ones.
        #[arg(long)]
        text_embeddings: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Maskacc)]
        mode: Mode,
        /// Directory of `<id>.mcpp` / `<id>.json` proposal files.
        #[arg(long)]
        proposals: Option<PathBuf>,
        /// Weight of the generator's scores in the ensemble.
        #[arg(long, default_value_t = 0.0)]
        gamma: f64,
        #[arg(long, value_enum, default_value_t = Toggle::On)]
        use_psm: Toggle,
        /// In miou mode, use ground-truth masks as proposals.
        #[arg(long)]
        gt_masks: bool,
        #[arg(long, default_value = "val")]
        split: String,
        /// Comma-separated category names competing at prediction time.
        #[arg(long, value_delimiter = ',')]
        candidates: Option<Vec<String>>,
        /// Comma-separated category names whose masks are scored.
        #[arg(long, value_delimiter = ',')]
        evaluate: Option<Vec<String>>,
        #[arg(long)]
        text_embeddings: Option<PathBuf>,
    },
    /// Generator-only versus IoU-matched oracle mIoU of a proposal set.
    Oracle {
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Two-mask toy showing ordering inconsistency under an unconstrained Θ.
    DemoInconsistency {
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Theta::Canonical)]
        theta: Theta,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 1)]
        steps: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Maskacc,
    Miou,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Theta {
    Canonical,
    Identity,
}

impl clap::ValueEnum for PsmKind {
    fn value_variants<'a>() -> &'a [Self] {
        &PsmKind::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.as_str()))
    }
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<crate::Error> for Failure {
    fn from(e: crate::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn require(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(anyhow!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

/// Parse `args` (program name first) and run; returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<(), Failure> {
    match cmd {
        Command::GenData {
            spec,
            out: dir,
            dry_run,
        } => gen_data(&spec, &dir, dry_run, out),
        Command::Train {
            config,
            data,
            out: dir,
            psm,
            resume,
            force,
            text_embeddings,
        } => run_train(
            config.as_deref(),
            &data,
            &dir,
            psm,
            resume.as_deref(),
            force,
            text_embeddings.as_deref(),
            out,
        ),
        Command::Eval {
            ckpt,
            data,
            mode,
            proposals,
            gamma,
            use_psm,
            gt_masks,
            split,
            candidates,
            evaluate,
            text_embeddings,
        } => {
            require(&ckpt, "checkpoint")?;
            require(&data, "dataset")?;
            if !(0.0..=1.0).contains(&gamma) {
                return Err(Failure::Usage(anyhow!("--gamma must lie in [0, 1]")));
            }
            let ctx = EvalContext::load(&ckpt, &data, text_embeddings.as_deref())?;
            let use_psm = use_psm == Toggle::On;
            match mode {
                Mode::Maskacc => ctx.mask_acc(&split, use_psm, candidates, evaluate, out),
                Mode::Miou => {
                    if proposals.is_none() && !gt_masks {
                        return Err(Failure::Usage(anyhow!(
                            "miou mode needs --proposals or --gt-masks"
                        )));
                    }
                    ctx.miou(&split, use_psm, proposals.as_deref(), gamma, out)
                }
            }
        }
        Command::Oracle {
            proposals,
            data,
            split,
        } => {
            require(&proposals, "proposal directory")?;
            require(&data, "dataset")?;
            oracle(&proposals, &data, &split, out)
        }
        Command::DemoInconsistency {
            out: path,
            theta,
            lr,
            steps,
        } => {
            let mut cfg = DemoConfig::canonical();
            if theta == Theta::Identity {
                cfg = cfg.with_identity();
            }
            if let Some(lr) = lr {
                cfg.lr = lr;
            }
            cfg.steps = steps;
            let csv = demo_inconsistency(&cfg)?.to_csv();
            match path {
                Some(p) => {
                    std::fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?
                }
                None => out.write_all(csv.as_bytes())?,
            }
            Ok(())
        }
    }
}

fn gen_data(
    spec_path: &Path,
    dir: &Path,
    dry_run: bool,
    out: &mut dyn Write,
) -> Result<(), Failure> {
    require(spec_path, "spec file")?;
    let text = std::fs::read_to_string(spec_path)
        .with_context(|| format!("reading {}", spec_path.display()))?;
    let spec: SyntheticDatasetSpec = serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(anyhow!("{}: {e}", spec_path.display())))?;
    spec.validate().map_err(|e| Failure::Usage(e.into()))?;
    let plan = json!({
        "out": dir,
        "categories": spec.categories(),
        "train": spec.n_train,
        "val": spec.n_val,
        "image_size": spec.image_size,
        "dry_run": dry_run,
    });
    if !dry_run {
        generate_synthetic_dataset(&spec, dir)?;
    }
    writeln!(
        out,
        "{}",
        serde_json::to_string_pretty(&plan).map_err(anyhow::Error::from)?
    )?;
    Ok(())
}

fn text_for(
    dataset: &Dataset,
    config: &TrainConfig,
    path: Option<&Path>,
) -> crate::Result<TextEmbeddings> {
    match path {
        Some(p) => load_text_embeddings(p, &dataset.vocab),
        None => toy_encode(&dataset.vocab, config.encoder.embed_dim, config.text_seed),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_train(
    config_path: Option<&Path>,
    data: &Path,
    dir: &Path,
    psm: Option<PsmKind>,
    resume: Option<&Path>,
    force: bool,
    text_path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), Failure> {
    require(data, "dataset")?;
    let mut config = match config_path {
        Some(p) => {
            require(p, "config file")?;
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::Usage(anyhow!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(kind) = psm {
        config.psm = kind;
    }
    config.validate().map_err(|e| Failure::Usage(e.into()))?;
    let dataset = load_dataset(data)?;
    let text = text_for(&dataset, &config, text_path)?;

    let mut previous_rows = Vec::new();
    let state = match resume {
        Some(r) => {
            require(r, "checkpoint")?;
            let state = load_checkpoint(r, Some(&config), force)?;
            if let Ok(csv) = std::fs::read_to_string(r.join("metrics.csv")) {
                previous_rows = csv
                    .lines()
                    .skip(1)
                    .filter(|l| {
                        l.split(',')
                            .next()
                            .and_then(|s| s.parse::<usize>().ok())
                            .is_some_and(|s| s <= state.step)
                    })
                    .map(String::from)
                    .collect();
            }
            state
        }
        None => {
            let model = Model::init(&config, config.seed)?;
            TrainState::new(config.clone(), model)
        }
    };
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let metrics_path = dir.join("metrics.csv");
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    for l in &previous_rows {
        csv.push_str(l);
        csv.push('\n');
    }
    let run = train(state, &dataset, &text, |row| {
        log::info!("{}", row.csv_line())
    })?;
    csv.push_str(
        metrics_csv(&run.metrics)
            .split_once('\n')
            .map_or("", |(_, rest)| rest),
    );
    save_checkpoint(dir, &run.state)?;
    std::fs::write(&metrics_path, csv)
        .with_context(|| format!("writing {}", metrics_path.display()))?;
    let last_acc = run.metrics.iter().rev().find_map(|m| m.val_mask_acc);
    let (stop, at) = match run.stop {
        StopReason::Completed => ("completed", run.state.step),
        StopReason::EarlyStop { step } => ("early_stop", step),
        StopReason::Diverged { step } => ("diverged", step),
    };
    let summary = json!({
        "step": run.state.step,
        "stop": stop,
        "stop_step": at,
        "val_mask_acc": last_acc,
        "checkpoint": dir,
    });
    writeln!(out, "{summary}")?;
    if let StopReason::Diverged { step } = run.stop {
        return Err(Failure::Runtime(anyhow!(
            "loss became non-finite at step {step}; checkpoint holds step {}",
            run.state.step
        )));
    }
    Ok(())
}

struct EvalContext {
    state: TrainState,
    dataset: Dataset,
    text: Matrix,
}

impl EvalContext {
    fn load(ckpt: &Path, data: &Path, text_path: Option<&Path>) -> anyhow::Result<Self> {
        let state = load_checkpoint(ckpt, None, false)?;
        let dataset = load_dataset(data)?;
        let text = text_for(&dataset, &state.config, text_path)?;
        text.check_vocab(&dataset.vocab, false)?;
        Ok(Self {
            state,
            dataset,
            text: text.matrix().clone(),
        })
    }

    fn indices(&self, names: Option<Vec<String>>) -> Result<Option<Vec<usize>>, Failure> {
        names
            .map(|ns| {
                ns.iter()
                    .map(|n| {
                        self.dataset
                            .vocab
                            .index_of(n)
                            .ok_or_else(|| Failure::Usage(anyhow!("unknown category '{n}'")))
                    })
                    .collect()
            })
            .transpose()
    }

    fn split(&self, split: &str) -> Result<Vec<&crate::data::SegmentationSample>, Failure> {
        let s = self.dataset.split(split);
        if s.is_empty() {
            return Err(Failure::Runtime(anyhow!(
                "dataset has no '{split}' samples"
            )));
        }
        Ok(s)
    }

    fn mask_acc(
        &self,
        split: &str,
        use_psm: bool,
        candidates: Option<Vec<String>>,
        evaluate: Option<Vec<String>>,
        out: &mut dyn Write,
    ) -> Result<(), Failure> {
        let opts = MaskAccOptions {
            candidates: self.indices(candidates)?,
            evaluate: self.indices(evaluate)?,
        };
        let m = &self.state.model;
        let samples =
            prepare_samples(self.split(split)?, &m.encoder, crate::data::MaskPrior::Mask)?;
        let (correct, total) =
            mask_acc_counts(&m.encoder, &m.psm, &self.text, &samples, use_psm, &opts)?;
        if total == 0 {
            return Err(Failure::Runtime(anyhow!("no masks to evaluate")));
        }
        let report = json!({
            "mode": "maskacc",
            "split": split,
            "use_psm": use_psm,
            "psm": m.psm.kind(),
            "masks": total,
            "correct": correct,
            "mask_acc": correct as f64 / total as f64,
        });
        writeln!(out, "{report}")?;
        Ok(())
    }

    fn miou(
        &self,
        split: &str,
        use_psm: bool,
        proposals: Option<&Path>,
        gamma: f64,
        out: &mut dyn Write,
    ) -> Result<(), Failure> {
        let m = &self.state.model;
        let k = self.dataset.vocab.len();
        let scorer = Scorer {
            encoder: &m.encoder,
            psm: &m.psm,
            text: &self.text,
            use_psm,
        };
        let mut acc = IouAccumulator::new(k);
        for s in self.split(split)? {
            let set = match proposals {
                Some(dir) => read_proposals(dir, &s.id, k)?,
                None => MaskProposalSet {
                    masks: s.masks.clone(),
                    generator: None,
                },
            };
            let p_c = classify_masks(&scorer, &s.image, &set.masks)?;
            let p = match &set.generator {
                Some(g) => {
                    let (p_s, covered) = generator_probabilities(g, k)?;
                    ensemble(&p_c, &p_s, &covered, gamma)?
                }
                None => p_c.0,
            };
            let pred = assemble_semantic(&set.masks, &p, 0.0)?;
            acc.add(&pred.labels, &s.label_raster())?;
        }
        let r = acc.report();
        let report = json!({
            "mode": "miou",
            "split": split,
            "use_psm": use_psm,
            "gamma": gamma,
            "miou": r.mean,
            "per_class": self.dataset.vocab.names().iter().zip(&r.per_class)
                .map(|(n, v)| json!({"category": n, "iou": v})).collect::<Vec<_>>(),
        });
        writeln!(out, "{report}")?;
        Ok(())
    }
}

fn oracle(proposals: &Path, data: &Path, split: &str, out: &mut dyn Write) -> Result<(), Failure> {
    let dataset = load_dataset(data)?;
    let k = dataset.vocab.len();
    let samples = dataset.split(split);
    if samples.is_empty() {
        return Err(Failure::Runtime(anyhow!(
            "dataset has no '{split}' samples"
        )));
    }
    let mut gen_acc = IouAccumulator::new(k);
    let mut oracle_acc = IouAccumulator::new(k);
    for s in samples {
        let set = read_proposals(proposals, &s.id, k)?;
        let Some(g) = &set.generator else {
            return Err(Failure::Runtime(anyhow!(
                "proposals for sample {} carry no generator scores or vocabulary map",
                s.id
            )));
        };
        let (p_s, _) = generator_probabilities(g, k)?;
        let gt = s.label_raster();
        gen_acc.add(&assemble_semantic(&set.masks, &p_s, 0.0)?.labels, &gt)?;
        let o = oracle_assign(&set.masks, &s.masks, &s.labels, k)?;
        oracle_acc.add(&o.prediction.labels, &gt)?;
    }
    let (g, o) = (gen_acc.report().mean, oracle_acc.report().mean);
    writeln!(
        out,
        "{}",
        json!({"split": split, "generator_miou": g, "oracle_miou": o, "gap": o - g})
    )?;
    Ok(())
}
