use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::json;

use featpipe::dataio::make_split;
use featpipe::harness::config::{apply_override, read_config_file};
use featpipe::harness::container::{
    classifier_container, classifier_from_container, codes_container, pipeline_container, pipeline_from_container,
    Container, FeatureFile,
};
use featpipe::harness::experiment::{accuracy, fit_classifier, run_experiment_with};
use featpipe::harness::{
    append_records, emit_report, read_records, run_modular_comparison, sweep, Axis, ExperimentConfig, ExperimentData,
    FeatureTable, FittedPipeline, SynthSpec,
};
use featpipe::{Error, Result};

/// Worker threads for per-image and per-seed parallelism.
const WORKERS_ENV: &str = "FEATPIPE_WORKERS";

#[derive(Parser, Debug)]
#[command(name = "featpipe", version, about = "Patch feature learning pipeline for face recognition")]
struct Cli {
    /// TOML config with dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set dictionary.size=400`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic oriented-texture dataset with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 15)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Gaussian pixel noise standard deviation.
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        /// Per-image phase jitter in radians.
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
    },
    /// Print the train/test split of one seed as JSON.
    Split {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit whitening and dictionaries on the training side of one seed.
    FitDict {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode and pool the split images with a fitted model.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-image code maps into this directory.
        #[arg(long)]
        dump_codes: Option<PathBuf>,
    },
    /// Fit the ridge classifier on the training rows of a feature file.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a classifier on the test rows of a feature file.
    Eval {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
    },
    /// Run every seed of the config and append the record.
    Run {
        /// Compare against the modular residual baselines (writes modular.json, no record).
        #[arg(long)]
        modular: bool,
    },
    /// Run a grid of configs. Axis syntax: `key=v1,v2` (`|` separates values containing commas).
    Sweep {
        #[arg(long = "axis", required = true)]
        axes: Vec<String>,
    },
    /// Rebuild results.csv, plots.svg and summary.txt from a records file.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn raw_config(cli: &Cli) -> Result<BTreeMap<String, String>> {
    let mut raw = match &cli.config {
        Some(p) => read_config_file(p)?,
        None => BTreeMap::new(),
    };
    for o in &cli.overrides {
        apply_override(&mut raw, o)?;
    }
    Ok(raw)
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    ExperimentConfig::from_map(&raw_config(cli)?).map_err(|e| e.context("config"))
}

/// Classifier settings only; the dataset keys may be absent.
fn classifier_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut raw = raw_config(cli)?;
    raw.entry("dataset.manifest".into()).or_insert_with(|| "unused".into());
    ExperimentConfig::from_map(&raw)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json output"));
}

fn records_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("records.jsonl")
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth {
            out,
            classes,
            per_class,
            size,
            seed,
            noise,
            jitter,
        } => {
            let mut spec = SynthSpec::new(*classes, *per_class, *size, *seed);
            spec.noise = *noise;
            spec.phase_jitter = *jitter;
            let m = featpipe::harness::make_synthetic(&spec, out)?;
            print_json(&json!({
                "manifest": out.join("manifest.csv"),
                "images": m.len(),
                "classes": m.class_count,
            }));
        }
        Command::Split { seed } => {
            let cfg = config(cli)?;
            let manifest = featpipe::DatasetManifest::load(&cfg.manifest)?;
            let split = make_split(&manifest, &cfg.split_spec(*seed))?;
            let paths = |ids: &[usize]| -> Vec<String> {
                ids.iter().map(|&i| manifest.entries[i].path.to_string_lossy().into_owned()).collect()
            };
            print_json(&json!({
                "seed": seed,
                "train": split.train,
                "test": split.test,
                "train_paths": paths(&split.train),
                "test_paths": paths(&split.test),
            }));
        }
        Command::FitDict { seed, out } => {
            let cfg = config(cli)?;
            let data = ExperimentData::load(&cfg)?;
            let split = make_split(&data.dataset.manifest, &cfg.split_spec(*seed))?;
            let pipeline = FittedPipeline::fit(&cfg, &data.dataset, &split.train, data.external.as_ref(), *seed)?;
            let mut extra = BTreeMap::new();
            extra.insert("config".to_string(), cfg.fingerprint());
            extra.insert("seed".to_string(), seed.to_string());
            pipeline_container(&pipeline, &extra).write(out)?;
            print_json(&json!({
                "model": out,
                "pipeline": pipeline.fingerprint(),
                "feature_len": pipeline.feature_len(),
            }));
        }
        Command::Encode {
            model,
            seed,
            out,
            dump_codes,
        } => {
            let cfg = config(cli)?;
            let (pipeline, meta) = pipeline_from_container(&Container::read(model)?)?;
            if let Some(s) = meta.get("seed").filter(|s| **s != seed.to_string()) {
                log::warn!("model was fitted for seed {s}, encoding the split of seed {seed}");
            }
            let data = ExperimentData::load(&cfg)?;
            let ds = &data.dataset;
            let split = make_split(&ds.manifest, &cfg.split_spec(*seed))?;
            let labels = ds.labels();
            let table = |ids: &[usize]| -> Result<FeatureTable> {
                let images: Vec<_> = ids.iter().map(|&i| &ds.images[i]).collect();
                Ok(FeatureTable {
                    rows: pipeline.features_f32(&images)?,
                    labels: ids.iter().map(|&i| labels[i]).collect(),
                    ids: ids.to_vec(),
                })
            };
            let mut file_meta = BTreeMap::new();
            file_meta.insert("pipeline".to_string(), meta.get("pipeline").cloned().unwrap_or_default());
            file_meta.insert("seed".to_string(), seed.to_string());
            let file = FeatureFile {
                meta: file_meta,
                classes: ds.manifest.class_count,
                train: table(&split.train)?,
                test: table(&split.test)?,
            };
            file.to_container()?.write(out)?;
            if let Some(dir) = dump_codes {
                ensure_dir(dir)?;
                for &i in split.train.iter().chain(&split.test) {
                    for c in 0..pipeline.channels.len() {
                        let (codes, _) = pipeline.channel_codes(c, &ds.images[i])?;
                        let mut m = BTreeMap::new();
                        m.insert("image".to_string(), i.to_string());
                        m.insert("channel".to_string(), pipeline.channels[c].channel.name().to_string());
                        codes_container(&codes, &m).write(dir.join(format!("img{i:05}_c{c}.fcv")))?;
                    }
                }
            }
            print_json(&json!({
                "features": out,
                "train": file.train.len(),
                "test": file.test.len(),
                "dim": pipeline.feature_len(),
            }));
        }
        Command::Train { features, out } => {
            let cfg = classifier_config(cli)?;
            let file = FeatureFile::from_container(&Container::read(features)?)?;
            let model = fit_classifier(&cfg, &file.train, file.classes)?;
            let mut meta = BTreeMap::new();
            meta.insert("pipeline".to_string(), file.meta.get("pipeline").cloned().unwrap_or_default());
            classifier_container(&model, &meta).write(out)?;
            print_json(&json!({ "classifier": out, "dim": model.dim(), "classes": model.classes() }));
        }
        Command::Eval { features, classifier } => {
            let file = FeatureFile::from_container(&Container::read(features)?)?;
            let (model, meta) = classifier_from_container(&Container::read(classifier)?)?;
            if let (Some(a), Some(b)) = (file.meta.get("pipeline"), meta.get("pipeline")) {
                if a != b {
                    return Err(Error::Validation(format!(
                        "classifier was trained on pipeline {b}, features come from {a}"
                    )));
                }
            }
            let acc = accuracy(&model, &file.test)?;
            print_json(&json!({ "accuracy": acc, "test": file.test.len() }));
        }
        Command::Run { modular } => {
            let cfg = config(cli)?;
            if *modular {
                let cmp = run_modular_comparison(&cfg)?;
                ensure_dir(&cfg.output_dir)?;
                let path = cfg.output_dir.join("modular.json");
                let text = serde_json::to_string_pretty(&cmp).expect("json output");
                std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
                let (p, s, v) = cmp.means();
                print_json(&json!({ "pipeline": p, "sum": s, "voting": v, "file": path }));
            } else {
                let start = Instant::now();
                let data = ExperimentData::load(&cfg)?;
                let record = run_experiment_with(&cfg, &data, start)?;
                let path = records_path(&cfg);
                append_records(&path, std::slice::from_ref(&record))?;
                emit_report(&read_records(&path)?, &cfg.output_dir)?;
                print_json(&serde_json::to_value(&record).expect("json output"));
            }
        }
        Command::Sweep { axes } => {
            let raw = raw_config(cli)?;
            let cfg = ExperimentConfig::from_map(&raw).map_err(|e| e.context("base config"))?;
            let axes = axes.iter().map(|a| a.parse()).collect::<Result<Vec<Axis>>>()?;
            let records = sweep(&raw, &axes)?;
            append_records(records_path(&cfg), &records)?;
            let files = emit_report(&records, &cfg.output_dir)?;
            for r in &records {
                let params: Vec<String> = r.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
                match &r.error {
                    None => println!("{:<40} {:6.2} ± {:5.2}", params.join(" "), r.mean, r.std),
                    Some(e) => println!("{:<40} failed: {e}", params.join(" ")),
                }
            }
            println!("wrote {} and {}", files.csv.display(), files.svg.display());
        }
        Command::Report { records, out } => {
            let files = emit_report(&read_records(records)?, out)?;
            print_json(&json!({ "csv": files.csv, "svg": files.svg, "summary": files.summary }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Ok(n) = std::env::var(WORKERS_ENV) {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size the worker pool: {e}");
                }
            }
            _ => log::warn!("ignoring {WORKERS_ENV}={n:?}"),
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let err = json!({ "category": e.category(), "message": e.to_string() });
            eprintln!("{err}");
            ExitCode::from(2)
        }
    }
}
