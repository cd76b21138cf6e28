//! Command-line entry point: wires data loading, training, evaluation,
//! and analysis into reproducible runs. Every command freezes its
//! resolved configuration in the output directory and writes metrics both
//! as key-value text and as a human-readable table.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::analysis::{evaluate, export_projections, pca_hidden_states, EvalReport};
use crate::checkpoint::{Checkpoint, CheckpointModel};
use crate::config::RunSpec;
use crate::data::{
    convert_archive, generate_synthetic, generic_channels, load_dataset, write_dataset,
    SynthConfig,
};
use crate::error::{Error, Result};
use crate::sequence::{fit_normalizer, normalize_all, NormStats, SequenceSample};
use crate::train::{
    cross_validate, kfold_split, semi_split, train_semi_supervised, train_supervised,
};

pub const DATA_ROOT_ENV: &str = "TERRAIN_RNN_DATA_ROOT";

#[derive(Debug, Parser)]
#[command(name = "terrain-rnn", about = "Recurrent terrain classification toolkit")]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Base directory for record paths; defaults to TERRAIN_RNN_DATA_ROOT.
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    cell: Option<String>,
    #[arg(long, global = true)]
    hidden: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a supervised classifier and save a checkpoint.
    Train,
    /// k-fold cross-validation (k = 5 or 10).
    Cv {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        parallel_folds: Option<usize>,
    },
    /// Semi-supervised training at a given labeled percentage.
    Semi {
        /// Labeled percentage: 5, 10, 15, 20, or 25.
        #[arg(long)]
        labels: Option<u32>,
        #[arg(long)]
        fine_tune: bool,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Project hidden states onto their top-2 principal components.
    Pca {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Percentages of each sequence to unroll, e.g. 10,40,70,100.
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
    },
    /// Generate a synthetic dataset in the canonical on-disk format.
    Synth,
    /// Convert a class-per-directory archive into the canonical format.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        name: Option<String>,
    },
}

pub fn run() -> i32 {
    run_from(std::env::args_os())
}

pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => 3,
        Error::Fold { source, .. } => exit_code(source),
        _ => 2,
    }
}

fn resolve(cli: &Cli) -> Result<RunSpec> {
    let mut spec = match &cli.config {
        Some(path) => RunSpec::load(path)?,
        None => RunSpec::default(),
    };
    if let Some(m) = &cli.manifest {
        spec.manifest = Some(m.clone());
    }
    if let Some(r) = &cli.data_root {
        spec.data_root = Some(r.clone());
    } else if spec.data_root.is_none() {
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV) {
            spec.data_root = Some(PathBuf::from(root));
        }
    }
    if let Some(o) = &cli.output {
        spec.output = o.clone();
    }
    if let Some(s) = cli.seed {
        spec.train.seed = s;
    }
    if let Some(c) = &cli.cell {
        spec.arch.cell = c.clone();
    }
    if let Some(h) = cli.hidden {
        spec.arch.hidden = h;
    }
    if let Some(e) = cli.epochs {
        spec.train.epochs = e;
    }
    if let Some(b) = cli.batch_size {
        spec.train.batch_size = b;
    }
    if let Some(lr) = cli.learning_rate {
        spec.train.learning_rate = lr;
    }
    match &cli.command {
        Command::Cv { k, parallel_folds } => {
            if let Some(k) = k {
                spec.k = *k;
            }
            if let Some(p) = parallel_folds {
                spec.parallel_folds = *p;
            }
            if spec.k != 5 && spec.k != 10 {
                return Err(Error::config(format!("cv k must be 5 or 10, got {}", spec.k)));
            }
        }
        Command::Semi { labels, fine_tune } => {
            if let Some(l) = labels {
                spec.label_fraction = *l;
            }
            if *fine_tune {
                spec.fine_tune = true;
            }
        }
        Command::Eval { checkpoint } | Command::Pca { checkpoint, .. } => {
            spec.checkpoint = Some(checkpoint.clone());
        }
        _ => {}
    }
    if let Command::Pca { fractions: Some(f), .. } = &cli.command {
        spec.fractions = f.clone();
    }
    spec.validate()?;
    Ok(spec)
}

fn dispatch(cli: Cli) -> Result<()> {
    let spec = resolve(&cli)?;
    spec.freeze(&spec.output)?;
    match &cli.command {
        Command::Train => cmd_train(&spec),
        Command::Cv { .. } => cmd_cv(&spec),
        Command::Semi { .. } => cmd_semi(&spec),
        Command::Eval { .. } => cmd_eval(&spec),
        Command::Pca { .. } => cmd_pca(&spec),
        Command::Synth => cmd_synth(&spec),
        Command::Convert { input, name } => cmd_convert(&spec, input, name.as_deref()),
    }
}

fn load_inputs(spec: &RunSpec) -> Result<(usize, usize, Vec<SequenceSample>)> {
    let (manifest, samples) = load_dataset(spec.manifest_path()?, spec.data_root.as_deref())?;
    if samples.is_empty() {
        return Err(Error::data("manifest lists no records".to_string()));
    }
    Ok((manifest.num_classes, samples[0].channels(), samples))
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// Key-value metrics plus an aligned table, both always written.
fn write_metrics(dir: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut kv = String::new();
    for (k, v) in entries {
        kv.push_str(&format!("{k} = {v}\n"));
    }
    std::fs::write(dir.join("metrics.txt"), kv)?;
    let width = entries.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut table = String::new();
    for (k, v) in entries {
        table.push_str(&format!("{k:<width$}  {v}\n"));
    }
    std::fs::write(dir.join("metrics_table.txt"), table)?;
    Ok(())
}

fn confusion_block(confusion: &[Vec<usize>]) -> String {
    let mut out = String::new();
    for row in confusion {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

fn write_confusion(dir: &Path, blocks: &[(String, &Vec<Vec<usize>>)]) -> Result<()> {
    let mut out = String::new();
    for (title, confusion) in blocks {
        out.push_str(&format!("# {title}\n"));
        out.push_str(&confusion_block(confusion));
    }
    std::fs::write(dir.join("confusion.txt"), out)?;
    Ok(())
}

fn save_model(
    dir: &Path,
    model: CheckpointModel,
    spec: &RunSpec,
    norm: NormStats,
) -> Result<()> {
    let ckpt = Checkpoint {
        model,
        config: spec.train.clone(),
        norm,
    };
    ckpt.save(&dir.join("model.ckpt"))
}

fn cmd_train(spec: &RunSpec) -> Result<()> {
    let (num_classes, channels, raw) = load_inputs(spec)?;
    let labels: Vec<usize> = raw.iter().map(|s| s.label).collect();
    let (train_raw, eval_raw) = if spec.holdout > 0.0 {
        let k = ((1.0 / spec.holdout).round() as usize).max(2);
        let plan = kfold_split(raw.len(), &labels, k, spec.train.seed)?;
        let train: Vec<SequenceSample> =
            plan.train_indices(0).iter().map(|&i| raw[i].clone()).collect();
        let held: Vec<SequenceSample> = plan.folds[0].iter().map(|&i| raw[i].clone()).collect();
        (train, held)
    } else {
        (raw.clone(), raw)
    };
    let norm = fit_normalizer(&train_raw)?;
    let train = normalize_all(&norm, &train_raw)?;
    let eval_set = normalize_all(&norm, &eval_raw)?;
    let arch = spec.arch.classifier(channels, num_classes)?;
    let (model, history) = train_supervised(&train, &arch, &spec.train)?;
    let report = evaluate(&model, &eval_set)?;
    save_model(&spec.output, CheckpointModel::Classifier(model), spec, norm)?;
    let last = history.epochs.last().expect("at least one epoch");
    let entries = vec![
        ("command".to_string(), "train".to_string()),
        ("seed".to_string(), spec.train.seed.to_string()),
        ("epochs".to_string(), history.epochs.len().to_string()),
        ("n_train".to_string(), train.len().to_string()),
        ("n_eval".to_string(), eval_set.len().to_string()),
        ("final_train_loss".to_string(), fmt(last.loss)),
        (
            "final_train_accuracy".to_string(),
            fmt(last.accuracy.unwrap_or(f64::NAN)),
        ),
        ("eval_accuracy".to_string(), fmt(report.accuracy)),
    ];
    write_metrics(&spec.output, &entries)?;
    write_confusion(&spec.output, &[("eval".to_string(), &report.confusion)])?;
    println!("eval accuracy {}", fmt(report.accuracy));
    Ok(())
}

fn cmd_cv(spec: &RunSpec) -> Result<()> {
    let (num_classes, channels, raw) = load_inputs(spec)?;
    let arch = spec.arch.classifier(channels, num_classes)?;
    let report = cross_validate(&raw, &arch, &spec.train, spec.k, spec.parallel_folds)?;
    let mut entries = vec![
        ("command".to_string(), "cv".to_string()),
        ("seed".to_string(), spec.train.seed.to_string()),
        ("k".to_string(), spec.k.to_string()),
    ];
    for (i, acc) in report.fold_accuracies.iter().enumerate() {
        entries.push((format!("fold_accuracy_{i}"), fmt(*acc)));
    }
    entries.push(("mean".to_string(), fmt(report.mean)));
    entries.push(("sd".to_string(), fmt(report.sd)));
    entries.push(("min".to_string(), fmt(report.min)));
    entries.push(("max".to_string(), fmt(report.max)));
    write_metrics(&spec.output, &entries)?;
    let blocks: Vec<(String, &Vec<Vec<usize>>)> = report
        .confusions
        .iter()
        .enumerate()
        .map(|(i, c)| (format!("fold {i}"), c))
        .collect();
    write_confusion(&spec.output, &blocks)?;
    println!("cv mean {} sd {}", fmt(report.mean), fmt(report.sd));
    Ok(())
}

fn cmd_semi(spec: &RunSpec) -> Result<()> {
    let (num_classes, channels, raw) = load_inputs(spec)?;
    let labels: Vec<usize> = raw.iter().map(|s| s.label).collect();
    let split = semi_split(raw.len(), &labels, spec.label_fraction, spec.train.seed)?;
    let predicting_raw: Vec<SequenceSample> =
        split.predicting.iter().map(|&i| raw[i].clone()).collect();
    let norm = fit_normalizer(&predicting_raw)?;
    let samples = normalize_all(&norm, &raw)?;
    let arch = spec.arch.semi(channels, num_classes)?;
    let (model, history) =
        train_semi_supervised(&samples, &arch, &split, &spec.train, spec.fine_tune)?;
    // the unlabeled predicting portion doubles as the test set
    let test: Vec<SequenceSample> = split.predicting.iter().map(|&i| samples[i].clone()).collect();
    let report = evaluate(&model, &test)?;
    save_model(&spec.output, CheckpointModel::SemiSupervised(model), spec, norm)?;
    let mut entries = vec![
        ("command".to_string(), "semi".to_string()),
        ("seed".to_string(), spec.train.seed.to_string()),
        ("label_fraction".to_string(), spec.label_fraction.to_string()),
        ("fine_tune".to_string(), spec.fine_tune.to_string()),
        ("n_test".to_string(), test.len().to_string()),
        ("val_accuracy_fe".to_string(), fmt(history.val_accuracy_fe)),
    ];
    if let Some(acc) = history.val_accuracy_ft {
        entries.push(("val_accuracy_ft".to_string(), fmt(acc)));
    }
    entries.push(("test_accuracy".to_string(), fmt(report.accuracy)));
    write_metrics(&spec.output, &entries)?;
    write_confusion(&spec.output, &[("test".to_string(), &report.confusion)])?;
    println!("semi test accuracy {}", fmt(report.accuracy));
    Ok(())
}

fn eval_checkpoint(ckpt: &Checkpoint, samples: &[SequenceSample]) -> Result<EvalReport> {
    match &ckpt.model {
        CheckpointModel::Classifier(m) => evaluate(m, samples),
        CheckpointModel::SemiSupervised(m) => evaluate(m, samples),
    }
}

fn cmd_eval(spec: &RunSpec) -> Result<()> {
    let path = spec
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::config("eval requires --checkpoint".to_string()))?;
    let ckpt = Checkpoint::load(path)?;
    let (_, _, raw) = load_inputs(spec)?;
    let samples = normalize_all(&ckpt.norm, &raw)?;
    let report = eval_checkpoint(&ckpt, &samples)?;
    let entries = vec![
        ("command".to_string(), "eval".to_string()),
        ("checkpoint".to_string(), path.display().to_string()),
        ("n".to_string(), report.n.to_string()),
        ("accuracy".to_string(), fmt(report.accuracy)),
    ];
    write_metrics(&spec.output, &entries)?;
    write_confusion(&spec.output, &[("eval".to_string(), &report.confusion)])?;
    println!("accuracy {}", fmt(report.accuracy));
    Ok(())
}

fn cmd_pca(spec: &RunSpec) -> Result<()> {
    let path = spec
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::config("pca requires --checkpoint".to_string()))?;
    let ckpt = Checkpoint::load(path)?;
    let model = match &ckpt.model {
        CheckpointModel::Classifier(m) => m,
        CheckpointModel::SemiSupervised(_) => {
            return Err(Error::config(
                "pca requires a classifier checkpoint".to_string(),
            ));
        }
    };
    let (_, _, raw) = load_inputs(spec)?;
    let samples = normalize_all(&ckpt.norm, &raw)?;
    let projections = pca_hidden_states(model, &samples, &spec.fractions)?;
    std::fs::write(spec.output.join("pca.csv"), export_projections(&projections))?;
    let mut entries = vec![("command".to_string(), "pca".to_string())];
    for p in &projections {
        entries.push((
            format!("explained_variance_{}", p.time_fraction),
            format!("{},{}", fmt(p.explained_variance[0]), fmt(p.explained_variance[1])),
        ));
    }
    write_metrics(&spec.output, &entries)?;
    println!("wrote {} projections", projections.len());
    Ok(())
}

fn cmd_synth(spec: &RunSpec) -> Result<()> {
    let cfg = spec
        .synth
        .clone()
        .unwrap_or_else(|| SynthConfig::six_class(100, spec.train.seed));
    let samples = generate_synthetic(&cfg)?;
    let classes: Vec<String> = (0..cfg.num_classes).map(|c| format!("class{c}")).collect();
    let dir = spec.output.join("dataset");
    let manifest = write_dataset(
        &dir,
        "synthetic",
        &classes,
        &generic_channels(cfg.channels, None),
        0.0,
        &samples,
    )?;
    let entries = vec![
        ("command".to_string(), "synth".to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("n".to_string(), samples.len().to_string()),
        ("num_classes".to_string(), cfg.num_classes.to_string()),
        ("channels".to_string(), cfg.channels.to_string()),
        ("manifest".to_string(), manifest.display().to_string()),
    ];
    write_metrics(&spec.output, &entries)?;
    println!("wrote {} samples to {}", samples.len(), dir.display());
    Ok(())
}

fn cmd_convert(spec: &RunSpec, input: &Path, name: Option<&str>) -> Result<()> {
    let dir = spec.output.join("dataset");
    let manifest = convert_archive(input, &dir, name.unwrap_or("converted"))?;
    println!("wrote {}", manifest.display());
    Ok(())
}
