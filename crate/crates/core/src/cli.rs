//! Command-line front end.
//!
//! Settings resolve in order: built-in defaults, `--config` file, `--set
//! key=value` pairs, then the dedicated flags.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::ablation::{self, AblationData, SWEEP_RATIOS};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{self, Dataset, Split};
use crate::error::{EdmaeError, Result};
use crate::gradcheck::{self, GradcheckConfig};
use crate::graph::OpKind;
use crate::metrics::MetricsReport;
use crate::params::ParamStore;
use crate::train::{self, Control, EpochRecord};

#[derive(Debug, Parser)]
#[command(name = "edmae", version, about = "Decoupled masked autoencoder pretraining on synthetic echo images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub mask_ratio: Option<f64>,
    #[arg(long, global = true)]
    pub momentum: Option<f64>,
    #[arg(long, global = true)]
    pub align_weight: Option<f64>,
    /// masked | full
    #[arg(long, global = true)]
    pub recon_scope: Option<String>,
    /// focal | ce
    #[arg(long, global = true)]
    pub loss: Option<String>,
    /// Any configuration key, as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset and its train/test manifests.
    GenData {
        #[arg(long, default_value_t = 400)]
        count: usize,
        /// Prefix for files and manifests; also namespaces the random stream.
        #[arg(long, default_value = "synth")]
        name: String,
        #[arg(long, default_value_t = 0.25)]
        test_fraction: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Self-supervised pretraining on the images of a manifest.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune encoder plus linear head for classification.
    FinetuneCls {
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune encoder plus segmentation head.
    FinetuneSeg {
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Re-evaluate a fine-tuned checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every op's backward rule.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, hide = true, value_name = "OP")]
        inject_fault: Option<String>,
    },
    /// Pretraining ablations scored by downstream classification.
    Ablate {
        mode: AblateMode,
        #[arg(long)]
        pretrain_data: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Paired seeds, comma-separated.
        #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Pretraining epochs; `--epochs` sets fine-tuning epochs.
        #[arg(long)]
        pretrain_epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args, Clone)]
pub struct TaskArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Pretraining or fine-tuned checkpoint supplying the encoder.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Start from a randomly initialised encoder.
    #[arg(long, conflicts_with = "checkpoint")]
    pub random_init: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AblateMode {
    MaskSweep,
    Alignment,
}

impl Common {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| EdmaeError::Config(format!("--set expects key=value, got {kv:?}")))?;
            cfg.set(k, v)?;
        }
        let flags: [(&str, Option<String>); 7] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("mask_ratio", self.mask_ratio.map(|v| v.to_string())),
            ("momentum", self.momentum.map(|v| v.to_string())),
            ("align_weight", self.align_weight.map(|v| v.to_string())),
            ("recon_scope", self.recon_scope.clone()),
            ("loss", self.loss.clone()),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir).map_err(|e| EdmaeError::io(&dir, e))?;
        Ok(dir)
    }
}

static STOP: AtomicBool = AtomicBool::new(false);

fn install_stop_handler() {
    // A second registration in one process fails harmlessly.
    let _ = ctrlc::set_handler(|| STOP.store(true, Ordering::SeqCst));
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| EdmaeError::io(path, e))
}

fn append(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| EdmaeError::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| EdmaeError::io(path, e))
}

fn load_split(path: &Path, split: Split) -> Result<Dataset> {
    Dataset::load(&data::load_manifest(path, split)?)
}

fn encoder_for(task: &TaskArgs) -> Result<Option<ParamStore>> {
    if task.random_init {
        return Ok(None);
    }
    let path = task.checkpoint.as_deref().ok_or_else(|| {
        EdmaeError::Usage("no encoder checkpoint given: pretrain first or pass --random-init".into())
    })?;
    if !path.exists() {
        return Err(EdmaeError::Usage(format!(
            "checkpoint {} not found: pretrain first or pass --random-init",
            path.display()
        )));
    }
    Ok(Some(train::encoder_from_checkpoint(&Checkpoint::load(path)?)?.1))
}

fn report(out: &Path, name: &str, r: &MetricsReport) -> Result<()> {
    print!("{r}");
    write(&out.join(name), &r.to_csv())
}

/// Runs a training loop with a curve CSV that grows one row per epoch and a
/// checkpoint that is rewritten after every epoch.
fn with_epoch_files<R>(
    out: &Path,
    stem: &str,
    run: impl FnOnce(Control<'_>) -> Result<R>,
) -> Result<R> {
    let curve = out.join(format!("{stem}_curve.csv"));
    let ckpt = out.join(format!("{stem}.edmk"));
    write(&curve, &format!("{}\n", EpochRecord::CSV_HEADER))?;
    install_stop_handler();
    let mut hook = |rec: &EpochRecord, ck: &Checkpoint| -> Result<()> {
        append(&curve, &rec.csv_row())?;
        ck.save(&ckpt)?;
        eprintln!("epoch {} loss {:.6} lr {:e}", rec.epoch, rec.total_loss, rec.lr);
        Ok(())
    };
    run(Control {
        stop: Some(&STOP),
        on_epoch: Some(&mut hook),
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            count,
            name,
            test_fraction,
            common,
        } => {
            let cfg = common.resolve()?;
            let out = common.out_dir()?;
            let (tr, te) = data::generate(&cfg.synth_spec(), &name, count, test_fraction, &out)?;
            println!(
                "wrote {} train and {} test images to {}",
                tr.len(),
                te.len(),
                out.display()
            );
            Ok(())
        }
        Command::Pretrain { data, common } => {
            let cfg = common.resolve()?;
            let out = common.out_dir()?;
            write(&out.join("config.txt"), &cfg.to_string())?;
            let images = load_split(&data, Split::Train)?.images;
            let result = with_epoch_files(&out, "pretrain", |ctl| train::pretrain(&cfg, &images, ctl));
            match result {
                Ok(o) => {
                    o.checkpoint.save(&out.join("pretrain.edmk"))?;
                    if o.interrupted {
                        eprintln!("interrupted; checkpoint saved after step {}", o.checkpoint.meta.step);
                    }
                    Ok(())
                }
                Err(EdmaeError::Diverged {
                    step,
                    reason,
                    last_good,
                }) => {
                    last_good.save(&out.join("pretrain_last_good.edmk"))?;
                    Err(EdmaeError::Diverged { step, reason, last_good })
                }
                Err(e) => Err(e),
            }
        }
        Command::FinetuneCls { task, common } => {
            let cfg = common.resolve()?;
            let out = common.out_dir()?;
            let encoder = encoder_for(&task)?;
            let (tr, te) = (load_split(&task.train, Split::Train)?, load_split(&task.test, Split::Test)?);
            write(&out.join("config.txt"), &cfg.to_string())?;
            let o = with_epoch_files(&out, "classifier", |ctl| {
                train::finetune_classify(&cfg, encoder.as_ref(), &tr, &te, ctl)
            })?;
            o.checkpoint.save(&out.join("classifier.edmk"))?;
            report(&out, "metrics.csv", &o.report)
        }
        Command::FinetuneSeg { task, common } => {
            let cfg = common.resolve()?;
            let out = common.out_dir()?;
            let encoder = encoder_for(&task)?;
            let (tr, te) = (load_split(&task.train, Split::Train)?, load_split(&task.test, Split::Test)?);
            write(&out.join("config.txt"), &cfg.to_string())?;
            let o = with_epoch_files(&out, "segmenter", |ctl| {
                train::finetune_segment(&cfg, encoder.as_ref(), &tr, &te, ctl)
            })?;
            o.checkpoint.save(&out.join("segmenter.edmk"))?;
            report(&out, "metrics.csv", &o.report)
        }
        Command::Eval {
            checkpoint,
            data,
            common,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let ds = load_split(&data, Split::Test)?;
            let r = match ck.meta.extra("kind") {
                Some("classifier") => train::evaluate_classifier(&train::classifier_from_checkpoint(&ck)?, &ds)?,
                Some("segmenter") => train::evaluate_segmenter(&train::segmenter_from_checkpoint(&ck)?, &ds)?,
                other => {
                    return Err(EdmaeError::Usage(format!(
                        "eval needs a fine-tuned checkpoint, got kind {other:?}"
                    )))
                }
            };
            match &common.out {
                Some(_) => report(&common.out_dir()?, "eval_metrics.csv", &r),
                None => {
                    print!("{r}");
                    Ok(())
                }
            }
        }
        Command::Gradcheck { seeds, inject_fault } => {
            let fault = match inject_fault {
                Some(name) => Some(
                    OpKind::from_name(&name)
                        .ok_or_else(|| EdmaeError::Usage(format!("unknown op {name:?}")))?,
                ),
                None => None,
            };
            let cfg = GradcheckConfig {
                seeds,
                fault,
                ..Default::default()
            };
            let reports = gradcheck::run(&cfg)?;
            println!("{:<16} {:>6} {:>8} {:>8} {:>12}", "op", "seeds", "checked", "skipped", "worst_rel");
            let mut failed = Vec::new();
            for r in &reports {
                let ok = r.passed(cfg.tolerance);
                println!(
                    "{:<16} {:>6} {:>8} {:>8} {:>12.3e} {}",
                    r.op.name(),
                    r.seeds,
                    r.checked,
                    r.skipped,
                    r.worst_rel_error,
                    if ok { "ok" } else { "FAIL" }
                );
                if !ok {
                    failed.push(r.op.name());
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(EdmaeError::Metric(format!("gradient check failed for: {}", failed.join(", "))))
            }
        }
        Command::Ablate {
            mode,
            pretrain_data,
            train,
            test,
            seeds,
            pretrain_epochs,
            common,
        } => {
            let fine = common.resolve()?;
            let mut pre = fine.clone();
            if let Some(e) = pretrain_epochs {
                pre.epochs = e;
            }
            let out = common.out_dir()?;
            let pre_ds = load_split(&pretrain_data, Split::Train)?;
            let (tr, te) = (load_split(&train, Split::Train)?, load_split(&test, Split::Test)?);
            let d = AblationData {
                pretrain: &pre_ds,
                train: &tr,
                test: &te,
            };
            match mode {
                AblateMode::MaskSweep => {
                    let t = ablation::mask_sweep(&pre, &fine, &d, &SWEEP_RATIOS, &seeds)?;
                    print!("{t}");
                    write(&out.join("mask_sweep.csv"), &t.to_csv())
                }
                AblateMode::Alignment => {
                    let t = ablation::alignment(&pre, &fine, &d, &seeds)?;
                    print!("{t}");
                    write(&out.join("alignment.csv"), &t.to_csv())
                }
            }
        }
    }
}
