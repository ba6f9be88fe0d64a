//! Command-line front end: describe architectures, check gradients,
//! generate synthetic data, train, extract features, and evaluate
//! verification performance.
//!
//! Exit codes: 0 success, 1 contract/validation error, 2 internal panic.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use indexmap::IndexMap;

use seid_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use seid_core::data;
use seid_core::error::{Result, SeidError};
use seid_core::metrics::{roc_auc, roc_curve, tar_at_far, verification_accuracy, ScoreSet};
use seid_core::model::{build_model, check_table1, ArchitectureConfig, Model};
use seid_core::suite::run_suite;
use seid_core::train::{
    generate_synthetic_faces, train_loop, ClassCenters, LossConfig, LrSchedule, RmsPropState,
    TrainConfig,
};
use seid_core::init::rng_for;
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Parser)]
#[command(name = "seid", about = "SE-Inception-DenseNet training and evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Architecture selection shared by several commands.
#[derive(Args, Clone)]
struct ArchArgs {
    /// Architecture config file (key=value lines)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset bundle ("desk")
    #[arg(long)]
    preset: Option<String>,
    /// Override a config key, repeatable (e.g. --set growth_rate=16)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for --set growth_rate=K
    #[arg(short = 'k', long = "k")]
    growth_rate: Option<usize>,
    /// Shorthand for --set input_size=N
    #[arg(long)]
    input_size: Option<usize>,
    /// Base seed for parameter init (and training order)
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ArchArgs {
    fn resolve(&self) -> Result<ArchitectureConfig> {
        let mut cfg = match (&self.config, self.preset.as_deref()) {
            (Some(path), None) => ArchitectureConfig::parse(&std::fs::read_to_string(path)?)?,
            (None, Some("desk")) => ArchitectureConfig::desk_preset(self.seed),
            (None, Some(other)) => {
                return Err(SeidError::config(format!("unknown preset '{other}'")))
            }
            (Some(_), Some(_)) => {
                return Err(SeidError::config(
                    "--config and --preset are mutually exclusive".to_string(),
                ))
            }
            (None, None) => ArchitectureConfig::default(),
        };
        cfg.seed = self.seed;
        if let Some(k) = self.growth_rate {
            cfg.apply_override("growth_rate", &k.to_string())?;
        }
        if let Some(s) = self.input_size {
            cfg.apply_override("input_size", &s.to_string())?;
        }
        for kv in &self.overrides {
            let (key, value) = kv.split_once('=').ok_or_else(|| {
                SeidError::config(format!("override '{kv}' is not KEY=VALUE"))
            })?;
            cfg.apply_override(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Args, Clone)]
struct OutputArg {
    /// Output directory (default: $SEID_OUTPUT_ROOT or the current directory)
    #[arg(long)]
    output: Option<PathBuf>,
}

impl OutputArg {
    fn dir(&self) -> Result<PathBuf> {
        let dir = self
            .output
            .clone()
            .or_else(|| std::env::var_os("SEID_OUTPUT_ROOT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the layer/shape/parameter table for an architecture
    Describe {
        #[command(flatten)]
        arch: ArchArgs,
        #[command(flatten)]
        output: OutputArg,
        /// Assert the output sizes against a built-in template ("table1")
        #[arg(long)]
        expect: Option<String>,
    },
    /// Finite-difference checks of every differentiable component
    Gradcheck {
        #[command(flatten)]
        output: OutputArg,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Restrict to one component (e.g. se_block)
        #[arg(long)]
        component: Option<String>,
    },
    /// Generate the synthetic identity dataset (clean + degraded) and pairs
    GenData {
        #[command(flatten)]
        output: OutputArg,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 30)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a dataset file
    Train {
        #[command(flatten)]
        arch: ArchArgs,
        #[command(flatten)]
        output: OutputArg,
        #[arg(long)]
        dataset: PathBuf,
        /// Learning-rate schedule: "desk" or "paper"
        #[arg(long, default_value = "desk")]
        schedule: String,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Center-loss weight
        #[arg(long, default_value_t = 0.01)]
        lambda: f64,
        /// Center update rate
        #[arg(long, default_value_t = 0.9)]
        alpha: f64,
        /// Horizontal-flip augmentation
        #[arg(long)]
        flip: bool,
        /// Resume from a checkpoint directory
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Extract features for every image in a dataset file
    Extract {
        #[command(flatten)]
        output: OutputArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Id prefix for the feature lines (default: dataset file stem)
        #[arg(long)]
        tag: Option<String>,
    },
    /// Score pairs from feature files and report verification metrics
    Eval {
        #[command(flatten)]
        output: OutputArg,
        /// Feature files (merged; ids must be unique across them)
        #[arg(long, required = true)]
        features: Vec<PathBuf>,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn format_table(model: &Model) -> String {
    let rows = model.describe();
    let mut out = String::from("Layers\tFilter\tOutput size\tParams\n");
    for r in &rows {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", r.name, r.filter, r.output, r.param_count));
    }
    out.push_str(&format!("Total parameters\t\t\t{}\n", model.param_count()));
    out
}

fn cmd_describe(arch: &ArchArgs, output: &OutputArg, expect: Option<&str>) -> Result<()> {
    let cfg = arch.resolve()?;
    let model = build_model(&cfg)?;
    let table = format_table(&model);
    print!("{table}");
    let dir = output.dir()?;
    std::fs::write(dir.join("describe.txt"), &table)?;
    match expect {
        None => Ok(()),
        Some("table1") => {
            let mismatches = check_table1(&model)?;
            if mismatches.is_empty() {
                println!("table1 conformance: ok");
                Ok(())
            } else {
                for (got, want) in &mismatches {
                    eprintln!("table1 mismatch: got {got}, expected {want}");
                }
                Err(SeidError::contract(format!(
                    "{} output sizes deviate from the table-1 template",
                    mismatches.len()
                )))
            }
        }
        Some(other) => Err(SeidError::config(format!("unknown template '{other}'"))),
    }
}

fn cmd_gradcheck(
    output: &OutputArg,
    tolerance: f64,
    step: f64,
    component: Option<&str>,
) -> Result<()> {
    let reports = run_suite(component, step, tolerance)?;
    let mut text = String::from("component\tmax_rel_error\tchecked\tskipped\tresult\n");
    let mut failures = 0;
    for r in &reports {
        let status = if r.report.pass { "pass" } else { "FAIL" };
        if !r.report.pass {
            failures += 1;
        }
        text.push_str(&format!(
            "{}\t{:.3e}\t{}\t{}\t{status}\n",
            r.name, r.report.max_rel_error, r.report.checked, r.report.skipped
        ));
    }
    print!("{text}");
    std::fs::write(output.dir()?.join("gradcheck.txt"), &text)?;
    if failures > 0 {
        return Err(SeidError::contract(format!(
            "{failures} component(s) exceeded tolerance {tolerance}"
        )));
    }
    Ok(())
}

fn cmd_gen_data(
    output: &OutputArg,
    classes: usize,
    per_class: usize,
    size: usize,
    noise: f64,
    seed: u64,
) -> Result<()> {
    let dir = output.dir()?;
    let clean = generate_synthetic_faces(classes, per_class, size, noise, false, seed);
    let degraded = generate_synthetic_faces(classes, per_class, size, noise, true, seed);
    data::write_dataset(&dir.join("clean.seid"), &clean)?;
    data::write_dataset(&dir.join("degraded.seid"), &degraded)?;

    // genuine: clean vs degraded of the same identity (all cross products of
    // distinct indices within a class, capped); impostor: seeded cross-class
    let mut pairs: Vec<(String, String, bool)> = Vec::new();
    for c in 0..classes {
        for i in 0..per_class {
            for j in 0..per_class {
                if i != j {
                    pairs.push((
                        format!("clean:{}", c * per_class + i),
                        format!("degraded:{}", c * per_class + j),
                        true,
                    ));
                }
            }
        }
    }
    let mut rng = rng_for(seed, "gen-data.pairs");
    pairs.shuffle(&mut rng);
    let genuine_count = pairs.len().min(3 * classes * per_class);
    pairs.truncate(genuine_count);
    let mut impostors = 0;
    while impostors < 3 * genuine_count {
        let a = rng.random_range(0..classes * per_class);
        let b = rng.random_range(0..classes * per_class);
        if a / per_class == b / per_class {
            continue;
        }
        pairs.push((format!("clean:{a}"), format!("degraded:{b}"), false));
        impostors += 1;
    }
    data::write_pairs(&dir.join("pairs.txt"), &pairs)?;
    println!(
        "wrote {} images per set, {} pairs ({} genuine / {} impostor)",
        classes * per_class,
        pairs.len(),
        genuine_count,
        impostors
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    arch: &ArchArgs,
    output: &OutputArg,
    dataset: &Path,
    schedule: &str,
    batch_size: usize,
    lambda: f64,
    alpha: f64,
    flip: bool,
    resume: Option<&Path>,
) -> Result<()> {
    let dir = output.dir()?;
    let data = data::read_dataset(dataset)?;
    let schedule = match schedule {
        "desk" => LrSchedule::desk(),
        "paper" => LrSchedule::paper(),
        other => return Err(SeidError::config(format!("unknown schedule '{other}'"))),
    };
    let train_cfg = TrainConfig {
        loss: LossConfig { lambda, alpha },
        schedule,
        batch_size,
        flip_augment: flip,
        seed: arch.seed,
    };
    train_cfg.loss.validate()?;

    let (mut model, mut centers, mut opt, start_epoch) = match resume {
        Some(ckpt_dir) => {
            let ckpt = load_checkpoint(ckpt_dir)?;
            (ckpt.model, ckpt.centers, ckpt.opt, ckpt.epoch)
        }
        None => {
            let cfg = arch.resolve()?;
            let model = build_model(&cfg)?;
            let centers = ClassCenters::zeros(cfg.num_classes, cfg.feature_width());
            let opt = RmsPropState::new(&model.params);
            (model, centers, opt, 0)
        }
    };
    let (c, h, w) = data.image_dims();
    if c != model.cfg.input_channels || h != model.cfg.input_size || w != model.cfg.input_size {
        return Err(SeidError::contract(format!(
            "dataset images {c}x{h}x{w} do not fit architecture input {}x{}x{}",
            model.cfg.input_channels, model.cfg.input_size, model.cfg.input_size
        )));
    }
    if data.num_classes != model.cfg.num_classes {
        return Err(SeidError::contract(format!(
            "dataset has {} classes, architecture {}",
            data.num_classes, model.cfg.num_classes
        )));
    }

    let log_path = dir.join("train.log");
    let mut log = String::new();
    if resume.is_some() && log_path.exists() {
        log = std::fs::read_to_string(&log_path)?;
    }
    let logs = train_loop(
        &mut model,
        &data,
        &mut opt,
        &mut centers,
        &train_cfg,
        start_epoch,
        |e| {
            println!("{}\t{}\t{:.6}\t{:.4}", e.epoch, e.lr, e.loss, e.train_acc);
        },
    )?;
    for e in &logs {
        log.push_str(&format!("{}\t{}\t{:.6}\t{:.4}\n", e.epoch, e.lr, e.loss, e.train_acc));
    }
    std::fs::write(&log_path, &log)?;

    let stop = train_cfg.schedule.stop_epoch;
    save_checkpoint(
        &dir.join("checkpoint"),
        &Checkpoint {
            model,
            centers,
            opt,
            epoch: stop,
        },
    )?;
    let last = logs.last();
    let summary = serde_json::json!({
        "epochs": stop,
        "seed": arch.seed,
        "final_loss": last.map(|e| e.loss),
        "final_train_acc": last.map(|e| e.train_acc),
        "lambda": lambda,
        "alpha": alpha,
        "batch_size": batch_size,
        "flip_augment": flip,
    });
    let summary_text = serde_json::to_string_pretty(&summary)
        .map_err(|e| SeidError::Parse(format!("summary serialization: {e}")))?;
    std::fs::write(dir.join("summary.json"), summary_text)?;
    Ok(())
}

fn cmd_extract(
    output: &OutputArg,
    checkpoint: &Path,
    dataset: &Path,
    tag: Option<&str>,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let data = data::read_dataset(dataset)?;
    let tag = tag
        .map(str::to_string)
        .or_else(|| {
            dataset
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
        })
        .unwrap_or_else(|| "features".to_string());
    let mut features = IndexMap::new();
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(32) {
        let (batch, _) = data.gather(chunk);
        let f = ckpt.model.extract_features(&batch)?;
        let width = f.shape.dims()[1];
        for (row, &idx) in chunk.iter().enumerate() {
            features.insert(
                format!("{tag}:{idx}"),
                f.data[row * width..(row + 1) * width].to_vec(),
            );
        }
    }
    let dir = output.dir()?;
    let path = dir.join(format!("{tag}.features.tsv"));
    data::write_features(&path, &features)?;
    let width = features.first().map_or(0, |(_, v)| v.len());
    println!("wrote {} feature rows of width {width} to {}", features.len(), path.display());
    Ok(())
}

fn cmd_eval(
    output: &OutputArg,
    feature_files: &[PathBuf],
    pairs_path: &Path,
    folds: usize,
    seed: u64,
) -> Result<()> {
    let mut features: IndexMap<String, Vec<f64>> = IndexMap::new();
    for file in feature_files {
        for (id, vec) in data::read_features(file)? {
            if features.insert(id.clone(), vec).is_some() {
                return Err(SeidError::contract(format!(
                    "duplicate feature id '{id}' across files"
                )));
            }
        }
    }
    let pairs = data::read_pairs(pairs_path)?;
    let mut scores = ScoreSet::default();
    for (a, b, same) in &pairs {
        let fa = features
            .get(a)
            .ok_or_else(|| SeidError::contract(format!("no feature for id '{a}'")))?;
        let fb = features
            .get(b)
            .ok_or_else(|| SeidError::contract(format!("no feature for id '{b}'")))?;
        let s = seid_core::metrics::cosine_similarity(fa, fb)?;
        if *same {
            scores.genuine.push(s);
        } else {
            scores.impostor.push(s);
        }
    }

    let mut report = String::new();
    for far in [0.01, 0.001, 0.0001] {
        let r = tar_at_far(&scores, far)?;
        report.push_str(&format!(
            "tar@far={far}\t{:.6}\tthreshold={:.6}\tachieved_far={:.6}\tsmall_sample={}\n",
            r.tar, r.threshold, r.achieved_far, r.small_sample
        ));
    }
    let acc = verification_accuracy(&scores, folds, seed)?;
    report.push_str(&format!(
        "accuracy\t{:.6}\tfolds={folds}\tmean_threshold={:.6}\n",
        acc.accuracy, acc.mean_threshold
    ));
    let roc = roc_curve(&scores)?;
    report.push_str(&format!("auc\t{:.6}\n", roc_auc(&roc)));
    report.push_str(&format!(
        "pairs\tgenuine={}\timpostor={}\n",
        scores.genuine.len(),
        scores.impostor.len()
    ));
    print!("{report}");
    let dir = output.dir()?;
    std::fs::write(dir.join("report.txt"), &report)?;
    let mut roc_text = String::from("far\ttar\n");
    for (far, tar) in &roc {
        roc_text.push_str(&format!("{far:.6}\t{tar:.6}\n"));
    }
    std::fs::write(dir.join("roc.tsv"), roc_text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Describe { arch, output, expect } => cmd_describe(arch, output, expect.as_deref()),
        Cmd::Gradcheck {
            output,
            tolerance,
            step,
            component,
        } => cmd_gradcheck(output, *tolerance, *step, component.as_deref()),
        Cmd::GenData {
            output,
            classes,
            per_class,
            size,
            noise,
            seed,
        } => cmd_gen_data(output, *classes, *per_class, *size, *noise, *seed),
        Cmd::Train {
            arch,
            output,
            dataset,
            schedule,
            batch_size,
            lambda,
            alpha,
            flip,
            resume,
        } => cmd_train(
            arch,
            output,
            dataset,
            schedule,
            *batch_size,
            *lambda,
            *alpha,
            *flip,
            resume.as_deref(),
        ),
        Cmd::Extract {
            output,
            checkpoint,
            dataset,
            tag,
        } => cmd_extract(output, checkpoint, dataset, tag.as_deref()),
        Cmd::Eval {
            output,
            features,
            pairs,
            folds,
            seed,
        } => cmd_eval(output, features, pairs, *folds, *seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(cli))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(_) => {
            eprintln!("internal error (panic)");
            ExitCode::from(2)
        }
    }
}
