use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mimlab::archive::WeightArchive;
use mimlab::config::{DataSource, LabConfig};
use mimlab::data::{augment_key, Dataset};
use mimlab::harness::{finetune, linear_probe, pipeline_gradcheck, run_sweep, PipelineCheck};
use mimlab::loss::{LossKind, SupervisionFlags};
use mimlab::masking::{sample_mask, target_mask_count, SamplerKind};
use mimlab::model::ModelBundle;
use mimlab::patching::PatchGrid;
use mimlab::rng::{self, Purpose};
use mimlab::teacher::{export_targets, Teacher, TeacherKind};
use mimlab::train::{pretrain, RunOptions, CHECKPOINT_FILE, METRICS_FILE};
use mimlab::{Error, Result};

#[derive(Parser)]
#[command(name = "mimlab", version, about = "Masked image modeling with frozen-teacher targets")]
struct Cli {
    /// JSON lab config; missing sections use defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the student and write metrics.csv and checkpoint.caet.
    Pretrain {
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Linear probe on frozen features of a checkpoint.
    Probe(CheckpointArg),
    /// Fine-tune every encoder weight plus a fresh classifier.
    Finetune(CheckpointArg),
    /// Run the configured sweep, appending to sweep.csv.
    Sweep {
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Compute teacher targets for a dataset and store them as an archive.
    ExportTargets {
        /// `synthetic` (uses the config's synthetic settings) or a CIFAR binary file.
        #[arg(long, default_value = "synthetic")]
        dataset: String,
        /// `pseudovit[:size[:seed]]` or an archive path.
        #[arg(long, default_value = "pseudovit")]
        teacher: String,
        #[arg(long)]
        out: PathBuf,
        /// Disable augmentation of the exported views.
        #[arg(long)]
        no_augment: bool,
    },
    /// Print sampled masks as text grids.
    MaskDump {
        #[arg(long, default_value_t = 14)]
        grid: usize,
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        #[arg(long, default_value = "blockwise")]
        sampler: SamplerKind,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Finite-difference check of the Micro pipeline for every loss and flag setting.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        probes: usize,
    },
}

#[derive(Args)]
struct CheckpointArg {
    /// Checkpoint archive; defaults to <out-dir>/checkpoint.caet.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn load_bundle(lab: &LabConfig, teacher: &Teacher, path: &Path) -> Result<ModelBundle> {
    let archive = WeightArchive::read(path)?;
    let bundle = ModelBundle {
        config: lab.train.model_config(teacher.dim()),
        params: archive.entries.strip_prefix("model/"),
    };
    bundle.validate()?;
    Ok(bundle)
}

fn run(cli: Cli) -> Result<()> {
    let mut lab = match &cli.config {
        Some(p) => LabConfig::read(p)?,
        None => LabConfig::default(),
    };
    if let Some(s) = cli.seed {
        lab = lab.with_seed(s);
    }
    let out = cli.out_dir.clone();
    let teacher = || Teacher::build(&lab.train.teacher, lab.train.patch, lab.train.normalize_targets);
    match cli.command {
        Command::Pretrain { resume, stop_after, threads } => {
            let data = lab.data.load()?;
            let res = pretrain(
                &lab.train,
                &data,
                &teacher()?,
                &RunOptions {
                    out_dir: Some(out.clone()),
                    resume_from: resume,
                    stop_after_epoch: stop_after,
                    threads,
                },
            )?;
            for m in &res.metrics {
                println!("epoch {:>3}  step {:>6}  loss {:.6}  lr {:.3e}", m.epoch, m.step, m.loss, m.lr);
            }
            println!("wrote {} and {}", out.join(METRICS_FILE).display(), out.join(CHECKPOINT_FILE).display());
        }
        Command::Probe(a) => {
            let data = lab.data.load()?;
            let path = a.checkpoint.unwrap_or_else(|| out.join(CHECKPOINT_FILE));
            let bundle = load_bundle(&lab, &teacher()?, &path)?;
            let r = linear_probe(&bundle, &data, &lab.probe)?;
            println!("probe top-1 {:.4} (train {:.4}, {} held out)", r.accuracy, r.train_accuracy, r.test_samples);
        }
        Command::Finetune(a) => {
            let data = lab.data.load()?;
            let path = a.checkpoint.unwrap_or_else(|| out.join(CHECKPOINT_FILE));
            let bundle = load_bundle(&lab, &teacher()?, &path)?;
            let r = finetune(&bundle, &data, &lab.finetune)?;
            println!("finetune top-1 {:.4} (train {:.4}, {} held out)", r.accuracy, r.train_accuracy, r.test_samples);
        }
        Command::Sweep { parallel } => {
            let data = lab.data.load()?;
            let mut plan = lab.sweep.clone();
            if let Some(p) = parallel {
                plan.parallel = p;
            }
            let r = run_sweep(&plan, &lab.train, &lab.probe, &data, &out)?;
            println!("{} rows written, {} already present, {} failed", r.written, r.skipped, r.failed);
        }
        Command::ExportTargets { dataset, teacher: teacher_arg, out: path, no_augment } => {
            let data = if dataset == "synthetic" {
                match &lab.data {
                    DataSource::Synthetic(s) => Dataset::synthetic(s)?,
                    DataSource::Cifar { .. } => Dataset::synthetic(&Default::default())?,
                }
            } else {
                Dataset::read_cifar(Path::new(&dataset))?
            };
            let kind: TeacherKind = teacher_arg.parse()?;
            let t = Teacher::build(&kind, lab.train.patch, lab.train.normalize_targets)?;
            let mut aug = lab.train.augment.clone();
            aug.enabled &= !no_augment;
            let key = augment_key(lab.train.seed, 0, &aug);
            export_targets(&data, &t, &aug, key, &data.channel_stats(), &path)?;
            println!("{} targets of width {} written to {}", data.len(), t.dim(), path.display());
        }
        Command::MaskDump { grid, gamma, sampler, count } => {
            let g = PatchGrid::new(grid, grid, 1)?;
            let k = target_mask_count(g.num_patches(), gamma)?;
            for i in 0..count {
                let m = sample_mask(sampler, g, k, &mut rng::stream(lab.train.seed, Purpose::Mask, 0, i as u64))?;
                println!("# sample {i}: {} of {} masked", m.masked.len(), g.num_patches());
                print!("{}", m.render());
            }
        }
        Command::Gradcheck { probes } => {
            let check = PipelineCheck {
                probes_per_tensor: probes,
                seed: lab.train.seed,
                ..Default::default()
            };
            let mut worst = 0.0f64;
            for kind in LossKind::ALL {
                for flags in SupervisionFlags::ALL {
                    let r = pipeline_gradcheck(&check, flags, kind)?;
                    println!("{kind:<9} flags {flags}  max rel error {:.3e}  ({} probes)", r.max_rel_error, r.probes);
                    worst = worst.max(r.max_rel_error);
                }
            }
            if worst >= 1e-3 {
                return Err(Error::InvalidArgument(format!("gradient check failed: {worst:.3e}")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
