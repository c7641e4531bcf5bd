//! Seeded end-to-end runs and their result records.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DictionarySource, ExperimentConfig};
use super::pipeline::{Dataset, FittedPipeline, PatchProvenance};
use crate::classifier::{fit_ridge_rows, LabelMatrix, RidgeClassifier};
use crate::dataio::{make_split, Split};
use crate::{Error, Result};

/// Features of a set of images, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub rows: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    /// Dataset indices of the rows.
    pub ids: Vec<usize>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// What each fitted component saw, for train/test hygiene checks.
#[derive(Debug, Clone, PartialEq)]
pub struct RunProvenance {
    pub train_images: Vec<usize>,
    pub test_images: Vec<usize>,
    /// Per channel: images behind the whitening and dictionary fit.
    pub patch_sources: Vec<PatchProvenance>,
    pub whitening_ids: Vec<String>,
    pub dictionary_ids: Vec<String>,
    /// Rows the standardizer and classifier were fitted on.
    pub classifier_rows: Vec<usize>,
    pub pipeline_id: String,
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Percentage in `[0, 100]`.
    pub accuracy: f64,
    pub provenance: RunProvenance,
}

/// Inputs shared by all seeds of one config.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub dataset: Dataset,
    pub external: Option<Dataset>,
}

impl ExperimentData {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let dataset = Dataset::load(&cfg.manifest, cfg.image_size)?;
        let external = match &cfg.dictionary.source {
            DictionarySource::Manifest(p) => Some(Dataset::load(p, cfg.image_size)?),
            _ => None,
        };
        Ok(Self { dataset, external })
    }
}

/// Split, fitted front end and features of one seed.
#[derive(Debug, Clone)]
pub struct SeedFeatures {
    pub split: Split,
    pub pipeline: FittedPipeline,
    pub train: FeatureTable,
    pub test: FeatureTable,
}

fn table(pipeline: &FittedPipeline, data: &Dataset, ids: &[usize]) -> Result<FeatureTable> {
    let images: Vec<_> = ids.iter().map(|&i| &data.images[i]).collect();
    let labels = data.labels();
    Ok(FeatureTable {
        rows: pipeline.features_f32(&images)?,
        labels: ids.iter().map(|&i| labels[i]).collect(),
        ids: ids.to_vec(),
    })
}

pub fn seed_features(cfg: &ExperimentConfig, data: &ExperimentData, seed: u64) -> Result<SeedFeatures> {
    let split = make_split(&data.dataset.manifest, &cfg.split_spec(seed))?;
    let pipeline = FittedPipeline::fit(cfg, &data.dataset, &split.train, data.external.as_ref(), seed)?;
    let train = table(&pipeline, &data.dataset, &split.train)?;
    let test = table(&pipeline, &data.dataset, &split.test)?;
    Ok(SeedFeatures {
        split,
        pipeline,
        train,
        test,
    })
}

pub fn fit_classifier(cfg: &ExperimentConfig, train: &FeatureTable, classes: usize) -> Result<RidgeClassifier> {
    let y = LabelMatrix::from_labels(&train.labels, classes)?;
    fit_ridge_rows(&train.rows, &y, cfg.classifier_delta, cfg.standardize)
}

/// Percentage of rows whose prediction matches the label.
pub fn accuracy(model: &RidgeClassifier, test: &FeatureTable) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Validation("empty test set".into()));
    }
    let hits = test
        .rows
        .par_iter()
        .zip(&test.labels)
        .map(|(row, &label)| {
            let z: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            Ok((model.predict(&z)? == label) as usize)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(100.0 * hits.iter().sum::<usize>() as f64 / test.len() as f64)
}

/// One seeded run. Test features are never stored; they are predicted as they are produced.
pub fn run_seed(cfg: &ExperimentConfig, data: &ExperimentData, seed: u64) -> Result<SeedOutcome> {
    let ds = &data.dataset;
    let split = make_split(&ds.manifest, &cfg.split_spec(seed))?;
    let pipeline = FittedPipeline::fit(cfg, ds, &split.train, data.external.as_ref(), seed)?;
    let train = table(&pipeline, ds, &split.train)?;
    let model = fit_classifier(cfg, &train, ds.manifest.class_count)?;
    drop(train);
    let labels = ds.labels();
    let hits = split
        .test
        .par_iter()
        .map(|&i| {
            let z: Vec<f64> = pipeline.features(&ds.images[i])?.values.iter().map(|&v| v as f32 as f64).collect();
            Ok((model.predict(&z)? == labels[i]) as usize)
        })
        .collect::<Result<Vec<_>>>()?;
    if hits.is_empty() {
        return Err(Error::Validation("empty test set".into()));
    }
    let accuracy = 100.0 * hits.iter().sum::<usize>() as f64 / hits.len() as f64;
    let provenance = RunProvenance {
        train_images: split.train.clone(),
        test_images: split.test.clone(),
        patch_sources: pipeline.channels.iter().filter_map(|c| c.provenance.clone()).collect(),
        whitening_ids: pipeline.channels.iter().map(|c| c.whitening.fingerprint()).collect(),
        dictionary_ids: pipeline.channels.iter().map(|c| c.dictionary().fingerprint()).collect(),
        classifier_rows: split.train.clone(),
        pipeline_id: pipeline.fingerprint(),
    };
    Ok(SeedOutcome {
        seed,
        accuracy,
        provenance,
    })
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub fingerprint: String,
    /// Canonical config (output location excluded).
    pub config: BTreeMap<String, String>,
    /// Swept parameters of this record; empty outside sweeps.
    pub params: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    #[serde(with = "nan_as_null")]
    pub mean: f64,
    #[serde(with = "nan_as_null")]
    pub std: f64,
    pub wall_time_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ResultRecord {
    pub fn new(cfg: &ExperimentConfig, accuracies: Vec<f64>, wall_time_s: f64) -> Self {
        let (mean, std) = mean_std(&accuracies);
        let mut config = cfg.to_map();
        config.remove("output.dir");
        Self {
            fingerprint: cfg.fingerprint(),
            config,
            params: BTreeMap::new(),
            seeds: cfg.seeds.clone(),
            accuracies,
            mean,
            std,
            wall_time_s,
            error: None,
        }
    }

    pub fn failed(fingerprint: String, params: BTreeMap<String, String>, error: &Error) -> Self {
        Self {
            fingerprint,
            config: BTreeMap::new(),
            params,
            seeds: Vec::new(),
            accuracies: Vec::new(),
            mean: f64::NAN,
            std: f64::NAN,
            wall_time_s: 0.0,
            error: Some(format!("{}: {error}", error.category())),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }
}

/// Runs every seed in parallel and merges outcomes in seed order.
pub fn run_seeds(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<Vec<SeedOutcome>> {
    cfg.seeds
        .par_iter()
        .map(|&s| run_seed(cfg, data, s).map_err(|e| e.context(format!("seed {s} of config {}", cfg.fingerprint()))))
        .collect()
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultRecord> {
    let start = Instant::now();
    cfg.validate()?;
    let data = ExperimentData::load(cfg)?;
    run_experiment_with(cfg, &data, start)
}

/// Like [`run_experiment`] with the datasets already loaded.
pub fn run_experiment_with(cfg: &ExperimentConfig, data: &ExperimentData, start: Instant) -> Result<ResultRecord> {
    let outcomes = run_seeds(cfg, data)?;
    for o in &outcomes {
        log::info!("seed {}: {:.2}%", o.seed, o.accuracy);
    }
    let accuracies = outcomes.iter().map(|o| o.accuracy).collect();
    Ok(ResultRecord::new(cfg, accuracies, start.elapsed().as_secs_f64()))
}

/// Appends records as JSON lines.
pub fn append_records(path: impl AsRef<Path>, records: &[ResultRecord]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(f, "{}", r.to_json()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<ResultRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m, 5.0);
        assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
    }
}
