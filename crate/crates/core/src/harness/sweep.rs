//! Grid sweeps over config keys.

use std::collections::{BTreeMap, HashMap};
use std::str::FromStr;
use std::time::Instant;

use super::config::{DictionarySource, ExperimentConfig};
use super::experiment::{run_experiment_with, ExperimentData, ResultRecord};
use crate::{Error, Result};

/// One swept key and its values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

impl FromStr for Axis {
    type Err = Error;

    /// `key=v1,v2,...`; use `|` as the separator when values contain commas
    /// (`pooling.levels=1|1,2|1,2,4`).
    fn from_str(s: &str) -> Result<Self> {
        let (key, rest) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("axis {s:?} is not key=values")))?;
        let sep = if rest.contains('|') { '|' } else { ',' };
        let values: Vec<String> = rest
            .split(sep)
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        let key = key.trim().to_string();
        if key.is_empty() || values.is_empty() {
            return Err(Error::Validation(format!("axis {s:?} has no values")));
        }
        Ok(Self { key, values })
    }
}

/// Cartesian product of the axes, first axis varying slowest.
pub fn grid(axes: &[Axis]) -> Result<Vec<BTreeMap<String, String>>> {
    if axes.is_empty() || axes.iter().any(|a| a.values.is_empty()) {
        return Err(Error::Validation("sweep grid is empty".into()));
    }
    let mut points = vec![BTreeMap::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(points.len() * axis.values.len());
        for p in &points {
            for v in &axis.values {
                let mut q = p.clone();
                q.insert(axis.key.clone(), v.clone());
                next.push(q);
            }
        }
        points = next;
    }
    Ok(points)
}

fn data_key(cfg: &ExperimentConfig) -> (String, usize, Option<String>) {
    let ext = match &cfg.dictionary.source {
        DictionarySource::Manifest(p) => Some(p.to_string_lossy().into_owned()),
        _ => None,
    };
    (cfg.manifest.to_string_lossy().into_owned(), cfg.image_size, ext)
}

/// Runs every grid point. Failures become records carrying the error; the
/// sweep carries on.
pub fn sweep(base: &BTreeMap<String, String>, axes: &[Axis]) -> Result<Vec<ResultRecord>> {
    let points = grid(axes)?;
    let mut cache: HashMap<(String, usize, Option<String>), ExperimentData> = HashMap::new();
    let mut records = Vec::with_capacity(points.len());
    for point in points {
        let mut raw = base.clone();
        raw.extend(point.clone());
        let start = Instant::now();
        let result = ExperimentConfig::from_map(&raw).and_then(|cfg| {
            let key = data_key(&cfg);
            if !cache.contains_key(&key) {
                cache.insert(key.clone(), ExperimentData::load(&cfg)?);
            }
            run_experiment_with(&cfg, &cache[&key], start)
        });
        let record = match result {
            Ok(mut r) => {
                r.params = point;
                r
            }
            Err(e) => {
                log::warn!("sweep point {point:?} failed: {e}");
                let fp = ExperimentConfig::from_map(&raw).map(|c| c.fingerprint()).unwrap_or_default();
                ResultRecord::failed(fp, point, &e)
            }
        };
        records.push(record);
    }
    Ok(records)
}
