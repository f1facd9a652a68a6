//! Command-line entry point. Exit codes: 0 on success, 1 when some images
//! failed but the batch completed, 2 on usage or configuration errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use coips::config::{self, PipelineConfig};
use coips::error::{Error, Result};
use coips::manifest;
use coips::pipeline;
use coips::qa;
use coips::seg;
use coips::split::{split_dataset, Split, SplitScheme, HOLDOUT_PROPORTIONS};
use coips::synthgen;
use coips::tensor::checkpoint;

#[derive(Parser)]
#[command(name = "coips", version, about = "OCTA quality assessment, FAZ segmentation and quantification")]
struct Cli {
    /// JSON configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides every seeded component.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (images, masks, manifest).
    Synth {
        /// Corpus output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Reassign hold-out splits of an existing manifest in place.
    Split {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train the quality classifier and save its checkpoint.
    TrainQa {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-epoch training log CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the FAZ segmenter with k-fold selection and save the best fold.
    TrainSeg {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Classify a batch of images and write assessments.csv.
    Assess {
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        input_dir: Option<PathBuf>,
        #[arg(long)]
        input_manifest: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Segment previously assessed images and write masks plus reports.
    Segment {
        #[arg(long)]
        segmenter: Option<PathBuf>,
        /// assessments.csv produced by `assess`.
        #[arg(long)]
        assessments: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Compute FAZ areas for a directory of mask PNGs.
    Quantify {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        field_mm: Option<f64>,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full run: assess, gate, segment, quantify, report.
    Pipeline {
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        segmenter: Option<PathBuf>,
        #[arg(long)]
        input_dir: Option<PathBuf>,
        #[arg(long)]
        input_manifest: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Evaluate checkpoints against manifest ground truth.
    Eval {
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        segmenter: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Manifest split to evaluate (train, test, internal_test, external_test).
        #[arg(long, default_value = "internal_test")]
        split: String,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Print the effective configuration as JSON.
    ShowConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = match &cli.config {
        Some(path) => config::load_config(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    if let Some(threads) = cfg.effective_threads() {
        // ignore the error when a pool already exists (tests set one up)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }

    match cli.command {
        Command::Synth { out } => {
            let rows = synthgen::generate_corpus(&cfg.synth, &out)?;
            println!("generated {} samples under {}", rows.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Split { manifest: path } => {
            let mut rows = manifest::load_manifest(&path)?;
            let ids: Vec<String> = rows.iter().map(|r| r.source_id.clone()).collect();
            let assignment = split_dataset(
                &ids,
                &SplitScheme::Proportional(HOLDOUT_PROPORTIONS.to_vec()),
                cfg.seed,
            )?;
            for r in &mut rows {
                r.split = assignment[&r.source_id];
            }
            manifest::save_manifest(&path, &rows)?;
            println!("reassigned splits for {} rows", rows.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::TrainQa {
            manifest: path,
            out,
            log,
        } => {
            let rows = manifest::load_manifest(&path)?;
            let (network, logs) = qa::train_classifier(&rows, &cfg.qa_train)?;
            checkpoint::save(&network, &out)?;
            if let Some(log_path) = log {
                std::fs::write(&log_path, qa::qa_log_csv(&logs))
                    .map_err(|e| Error::io(&log_path, e))?;
            }
            let last = logs.last().expect("training produced epochs");
            println!(
                "trained {} epochs, best checkpoint saved to {} (last val_acc {:.4})",
                logs.len(),
                out.display(),
                last.val_acc
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::TrainSeg {
            manifest: path,
            out,
            log,
        } => {
            let rows = manifest::load_manifest(&path)?;
            let outcome = seg::train_segmenter(&rows, &cfg.seg_train)?;
            checkpoint::save(&outcome.network, &out)?;
            if let Some(log_path) = log {
                std::fs::write(&log_path, seg::seg_log_csv(&outcome.logs))
                    .map_err(|e| Error::io(&log_path, e))?;
            }
            println!(
                "best fold {} with val dice {:.4}, checkpoint saved to {}",
                outcome.best_fold,
                outcome.best_dice,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Assess {
            classifier,
            input_dir,
            input_manifest,
            output_dir,
        } => {
            apply_overrides(&mut cfg, classifier, None, input_dir, input_manifest, output_dir);
            let path = cfg
                .classifier_checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("classifier checkpoint required".into()))?;
            let network = pipeline::load_classifier(path)?;
            let entries = pipeline::enumerate_inputs(&cfg)?;
            let (assessments, failures) = pipeline::assess_batch(&network, &entries);
            std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
            let out = cfg.output_dir.join("assessments.csv");
            std::fs::write(&out, pipeline::assessments_csv(&assessments))
                .map_err(|e| Error::io(&out, e))?;
            for f in &failures {
                eprintln!("failed {}: {}", f.source_id, f.reason);
            }
            println!(
                "assessed {} images ({} failures), wrote {}",
                assessments.len(),
                failures.len(),
                out.display()
            );
            Ok(partial_exit(!failures.is_empty()))
        }
        Command::Segment {
            segmenter,
            assessments,
            output_dir,
        } => {
            apply_overrides(&mut cfg, None, segmenter, None, None, output_dir);
            let path = cfg
                .segmenter_checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("segmenter checkpoint required".into()))?;
            let network = pipeline::load_segmenter(path)?;
            let text = std::fs::read_to_string(&assessments)
                .map_err(|e| Error::io(&assessments, e))?;
            let parsed = pipeline::parse_assessments_csv(&text)?;
            let (records, masks, failures) = pipeline::segment_batch(&network, &parsed);
            pipeline::write_outputs(&cfg.output_dir, &records, &masks, failures.clone())?;
            for f in &failures {
                eprintln!("failed {}: {}", f.source_id, f.reason);
            }
            println!(
                "segmented {} of {} images, outputs under {}",
                masks.len(),
                parsed.len(),
                cfg.output_dir.display()
            );
            Ok(partial_exit(!failures.is_empty()))
        }
        Command::Quantify {
            masks,
            field_mm,
            out,
        } => {
            let field = field_mm.unwrap_or(cfg.field_mm);
            let csv_text = pipeline::quantify_masks(&masks, field)?;
            match out {
                Some(path) => {
                    std::fs::write(&path, csv_text).map_err(|e| Error::io(&path, e))?;
                    println!("wrote {}", path.display());
                }
                None => print!("{csv_text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Pipeline {
            classifier,
            segmenter,
            input_dir,
            input_manifest,
            output_dir,
        } => {
            apply_overrides(&mut cfg, classifier, segmenter, input_dir, input_manifest, output_dir);
            let outcome = pipeline::run_pipeline(&cfg)?;
            for f in &outcome.summary.failures {
                eprintln!("failed {}: {}", f.source_id, f.reason);
            }
            println!(
                "processed {} images: {} ungradable, {} gradable, {} outstanding, {} failures",
                outcome.summary.total,
                outcome.summary.ungradable,
                outcome.summary.gradable,
                outcome.summary.outstanding,
                outcome.summary.failures.len()
            );
            Ok(ExitCode::from(outcome.exit_code as u8))
        }
        Command::Eval {
            classifier,
            segmenter,
            manifest: path,
            split,
            output_dir,
        } => {
            apply_overrides(&mut cfg, classifier, segmenter, None, None, output_dir);
            let cpath = cfg
                .classifier_checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("classifier checkpoint required".into()))?;
            let cnet = pipeline::load_classifier(cpath)?;
            let snet = match &cfg.segmenter_checkpoint {
                Some(p) => Some(pipeline::load_segmenter(p)?),
                None => None,
            };
            let split: Split = split.parse()?;
            let rows = manifest::load_manifest(&path)?;
            let report =
                pipeline::evaluate(&cnet, snet.as_ref(), &rows, split, &cfg.output_dir)?;
            println!(
                "evaluated {} samples on {}: accuracy {:.4}, macro F1 {:.4}",
                report.samples, split, report.classification.accuracy, report.classification.macro_f1
            );
            if let Some(s) = &report.segmentation {
                println!(
                    "segmentation over {} samples: dice {:.4}, jaccard {:.4}",
                    s.samples, s.mean_dice, s.mean_jaccard
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ShowConfig => {
            println!("{}", config::emit_config(&cfg)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn apply_overrides(
    cfg: &mut PipelineConfig,
    classifier: Option<PathBuf>,
    segmenter: Option<PathBuf>,
    input_dir: Option<PathBuf>,
    input_manifest: Option<PathBuf>,
    output_dir: Option<PathBuf>,
) {
    if classifier.is_some() {
        cfg.classifier_checkpoint = classifier;
    }
    if segmenter.is_some() {
        cfg.segmenter_checkpoint = segmenter;
    }
    if input_dir.is_some() {
        cfg.input_dir = input_dir;
        cfg.input_manifest = None;
    }
    if input_manifest.is_some() {
        cfg.input_manifest = input_manifest;
    }
    if let Some(out) = output_dir {
        cfg.output_dir = out;
    }
}

fn partial_exit(partial: bool) -> ExitCode {
    if partial {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}
