//! Experiment configuration: flat dotted keys, read from TOML and overridable
//! with `key=value` strings.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::dataio::{SplitSpec, TestCount};
use crate::dictionary::{DictionaryMethod, DictionaryParams};
use crate::encoders::Encoder;
use crate::pooling::{PoolMode, PyramidSpec};
use crate::preprocess::{DEFAULT_NORM_EPS, DEFAULT_ZCA_EPS};
use crate::{Error, Result};

/// Every accepted key with its default; `None` marks keys without a default.
const KEYS: &[(&str, Option<&str>)] = &[
    ("dataset.manifest", None),
    ("dataset.image_size", Some("32")),
    ("split.train_per_class", Some("10")),
    ("split.test_per_class", Some("rest")),
    ("patch.side", Some("6")),
    ("patch.stride", Some("1")),
    ("whitening.norm_eps", None),
    ("whitening.zca_eps", None),
    ("dictionary.method", Some("random")),
    ("dictionary.size", Some("1600")),
    ("dictionary.patches", Some("50000")),
    ("dictionary.iters", Some("30")),
    ("dictionary.sparsity", Some("5")),
    ("dictionary.lambda", Some("1")),
    ("dictionary.source", Some("train")),
    ("encoder.name", Some("st")),
    ("encoder.alpha", Some("0.25")),
    ("encoder.lambda", Some("1")),
    ("encoder.k", Some("5")),
    ("encoder.delta", Some("0.01")),
    ("encoder.gamma", Some("0.01")),
    ("pooling.levels", Some("1,2,4,6,8")),
    ("pooling.mode", Some("max")),
    ("classifier.delta", Some("0.005")),
    ("classifier.standardize", Some("true")),
    ("channels", Some("raw")),
    ("seeds", Some("0,1,2,3,4")),
    ("output.dir", Some("results")),
    ("modular.side", Some("8")),
    ("modular.stride", Some("4")),
    ("modular.gamma", Some("0.01")),
];

/// Shorthand key: `pooling.depth = n` selects the first `n` standard levels.
const DEPTH_KEY: &str = "pooling.depth";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    Raw,
    Lbp,
}

impl Channel {
    pub fn name(self) -> &'static str {
        match self {
            Channel::Raw => "raw",
            Channel::Lbp => "lbp",
        }
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "raw" => Ok(Channel::Raw),
            "lbp" => Ok(Channel::Lbp),
            other => Err(Error::Config(format!("unknown channel {other:?}"))),
        }
    }
}

/// Where dictionary and whitening patches come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DictionarySource {
    /// Training images of the current split.
    Train,
    /// Uniform noise images.
    Noise,
    /// Images of another dataset.
    Manifest(PathBuf),
}

impl fmt::Display for DictionarySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DictionarySource::Train => f.write_str("train"),
            DictionarySource::Noise => f.write_str("noise"),
            DictionarySource::Manifest(p) => write!(f, "{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryConfig {
    pub method: DictionaryMethod,
    pub size: usize,
    /// Upper bound on sampled patches.
    pub patches: usize,
    pub iters: usize,
    pub sparsity: usize,
    pub lambda: f64,
    pub source: DictionarySource,
}

impl DictionaryConfig {
    pub fn params(&self, seed: u64) -> DictionaryParams {
        DictionaryParams {
            method: self.method,
            size: self.size,
            iters: self.iters,
            sparsity: self.sparsity,
            lambda: self.lambda,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModularConfig {
    pub side: usize,
    pub stride: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub manifest: PathBuf,
    pub image_size: usize,
    pub train_per_class: usize,
    pub test_per_class: TestCount,
    pub patch_side: usize,
    pub patch_stride: usize,
    pub norm_eps: f64,
    pub zca_eps: f64,
    pub dictionary: DictionaryConfig,
    pub encoder: Encoder,
    pub pyramid: PyramidSpec,
    pub classifier_delta: f64,
    pub standardize: bool,
    pub channels: Vec<Channel>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub modular: ModularConfig,
}

/// Reads a TOML file into flat dotted keys. Arrays become comma lists.
pub fn read_config_file(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = parse_config_text(&text)?;
    // relative dataset paths are taken relative to the config file
    let base = path.parent().unwrap_or(Path::new(""));
    for key in ["dataset.manifest", "dictionary.source", "output.dir"] {
        if let Some(v) = map.get_mut(key) {
            let is_keyword = key == "dictionary.source" && (v == "train" || v == "noise");
            if !is_keyword && Path::new(v.as_str()).is_relative() {
                *v = base.join(v.as_str()).to_string_lossy().into_owned();
            }
        }
    }
    Ok(map)
}

pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
    let mut out = BTreeMap::new();
    flatten("", &toml::Value::Table(table), &mut out)?;
    Ok(out)
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut BTreeMap<String, String>) -> Result<()> {
    let scalar = |v: &toml::Value| -> Result<String> {
        Ok(match v {
            toml::Value::String(s) => s.clone(),
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            toml::Value::Boolean(b) => b.to_string(),
            other => return Err(Error::Config(format!("unsupported value for {prefix}: {other}"))),
        })
    };
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out)?;
            }
        }
        toml::Value::Array(items) => {
            let parts = items.iter().map(scalar).collect::<Result<Vec<_>>>()?;
            out.insert(prefix.to_string(), parts.join(","));
        }
        v => {
            out.insert(prefix.to_string(), scalar(v)?);
        }
    }
    Ok(())
}

/// Applies one `key=value` override.
pub fn apply_override(map: &mut BTreeMap<String, String>, assignment: &str) -> Result<()> {
    let (k, v) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    map.insert(k.trim().to_string(), v.trim().to_string());
    Ok(())
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

impl ExperimentConfig {
    /// Builds a config from flat keys, filling defaults. Unknown keys are rejected.
    pub fn from_map(raw: &BTreeMap<String, String>) -> Result<Self> {
        for key in raw.keys() {
            if key != DEPTH_KEY && !KEYS.iter().any(|(k, _)| k == key) {
                return Err(Error::Config(format!("unknown key {key:?}")));
            }
        }
        let get = |key: &str| -> Result<String> {
            if let Some(v) = raw.get(key) {
                return Ok(v.clone());
            }
            KEYS.iter()
                .find(|(k, _)| *k == key)
                .and_then(|(_, d)| d.map(str::to_string))
                .ok_or_else(|| Error::Config(format!("missing required key {key:?}")))
        };
        let num = |key: &str| -> Result<usize> { parse_num(key, &get(key)?) };
        let real = |key: &str| -> Result<f64> { parse_num(key, &get(key)?) };

        let test_per_class = match get("split.test_per_class")?.as_str() {
            "rest" => TestCount::Rest,
            v => TestCount::Count(parse_num("split.test_per_class", v)?),
        };
        let norm_eps = match raw.get("whitening.norm_eps") {
            Some(v) => parse_num("whitening.norm_eps", v)?,
            None => DEFAULT_NORM_EPS,
        };
        let zca_eps = match raw.get("whitening.zca_eps") {
            Some(v) => parse_num("whitening.zca_eps", v)?,
            None => DEFAULT_ZCA_EPS,
        };
        let source = match get("dictionary.source")?.as_str() {
            "train" => DictionarySource::Train,
            "noise" => DictionarySource::Noise,
            path => DictionarySource::Manifest(PathBuf::from(path)),
        };
        let dictionary = DictionaryConfig {
            method: get("dictionary.method")?.parse()?,
            size: num("dictionary.size")?,
            patches: num("dictionary.patches")?,
            iters: num("dictionary.iters")?,
            sparsity: num("dictionary.sparsity")?,
            lambda: real("dictionary.lambda")?,
            source,
        };
        let encoder = match get("encoder.name")?.to_ascii_lowercase().as_str() {
            "sc" => Encoder::SparseCoding {
                lambda: real("encoder.lambda")?,
            },
            "llc" => Encoder::Llc {
                k: num("encoder.k")?,
                delta: real("encoder.delta")?,
            },
            "rr" => Encoder::Ridge {
                gamma: real("encoder.gamma")?,
            },
            "st" => Encoder::SoftThreshold {
                alpha: real("encoder.alpha")?,
            },
            other => Encoder::with_defaults(other)?,
        };
        encoder.validate()?;
        let mode: PoolMode = get("pooling.mode")?.parse()?;
        let pyramid = match raw.get(DEPTH_KEY) {
            Some(d) => PyramidSpec::standard(parse_num(DEPTH_KEY, d)?, mode)?,
            None => PyramidSpec::new(parse_list("pooling.levels", &get("pooling.levels")?)?, mode)?,
        };
        let standardize = match get("classifier.standardize")?.to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" | "on" => true,
            "false" | "0" | "no" | "off" => false,
            v => return Err(Error::Config(format!("classifier.standardize: {v:?} is not a boolean"))),
        };
        let channels = get("channels")?
            .split(',')
            .map(str::parse)
            .collect::<Result<Vec<Channel>>>()?;
        let seeds: Vec<u64> = parse_list("seeds", &get("seeds")?)?;

        let cfg = Self {
            manifest: PathBuf::from(get("dataset.manifest")?),
            image_size: num("dataset.image_size")?,
            train_per_class: num("split.train_per_class")?,
            test_per_class,
            patch_side: num("patch.side")?,
            patch_stride: num("patch.stride")?,
            norm_eps,
            zca_eps,
            dictionary,
            encoder,
            pyramid,
            classifier_delta: real("classifier.delta")?,
            standardize,
            channels,
            seeds,
            output_dir: PathBuf::from(get("output.dir")?),
            modular: ModularConfig {
                side: num("modular.side")?,
                stride: num("modular.stride")?,
                gamma: real("modular.gamma")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// A config with defaults for everything except the manifest.
    pub fn with_manifest(manifest: impl Into<PathBuf>) -> Self {
        let mut map = BTreeMap::new();
        map.insert("dataset.manifest".to_string(), manifest.into().to_string_lossy().into_owned());
        Self::from_map(&map).expect("defaults are valid")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.seeds.is_empty() {
            return fail("seeds must be nonempty".into());
        }
        if self.channels.is_empty() {
            return fail("channels must be nonempty".into());
        }
        let min_side = self.patch_side + if self.channels.contains(&Channel::Lbp) { 2 } else { 0 };
        if self.image_size < min_side.max(1) {
            return fail(format!("image size {} too small for the patch side", self.image_size));
        }
        if self.patch_side == 0 || self.patch_stride == 0 {
            return fail("patch side and stride must be positive".into());
        }
        if self.dictionary.size == 0 {
            return fail("dictionary size must be positive".into());
        }
        if self.dictionary.patches == 0 {
            return fail("dictionary patch count must be positive".into());
        }
        if !(self.classifier_delta > 0.0) {
            return fail(format!("classifier delta {}", self.classifier_delta));
        }
        if !(self.norm_eps >= 0.0) || !(self.zca_eps >= 0.0) {
            return fail("whitening epsilons must be nonnegative".into());
        }
        if self.modular.side == 0 || self.modular.stride == 0 || self.modular.side > self.image_size {
            return fail(format!("modular block {} stride {}", self.modular.side, self.modular.stride));
        }
        Ok(())
    }

    pub fn split_spec(&self, seed: u64) -> SplitSpec {
        SplitSpec {
            seed,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
        }
    }

    /// Canonical flat form; feeding it back to `from_map` gives the same config.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("dataset.manifest", self.manifest.to_string_lossy().into_owned());
        put("dataset.image_size", self.image_size.to_string());
        put("split.train_per_class", self.train_per_class.to_string());
        put(
            "split.test_per_class",
            match self.test_per_class {
                TestCount::Rest => "rest".into(),
                TestCount::Count(n) => n.to_string(),
            },
        );
        put("patch.side", self.patch_side.to_string());
        put("patch.stride", self.patch_stride.to_string());
        put("whitening.norm_eps", fmt_f64(self.norm_eps));
        put("whitening.zca_eps", fmt_f64(self.zca_eps));
        let d = &self.dictionary;
        put("dictionary.method", d.method.name().into());
        put("dictionary.size", d.size.to_string());
        put("dictionary.patches", d.patches.to_string());
        put("dictionary.iters", d.iters.to_string());
        put("dictionary.sparsity", d.sparsity.to_string());
        put("dictionary.lambda", fmt_f64(d.lambda));
        put("dictionary.source", d.source.to_string());
        put("encoder.name", self.encoder.short_name().into());
        match self.encoder {
            Encoder::SparseCoding { lambda } => put("encoder.lambda", fmt_f64(lambda)),
            Encoder::Llc { k, delta } => {
                put("encoder.k", k.to_string());
                put("encoder.delta", fmt_f64(delta));
            }
            Encoder::Ridge { gamma } => put("encoder.gamma", fmt_f64(gamma)),
            Encoder::SoftThreshold { alpha } => put("encoder.alpha", fmt_f64(alpha)),
            Encoder::KMeansTriangle | Encoder::VectorQuantization => {}
        }
        let levels: Vec<String> = self.pyramid.levels().iter().map(|g| g.to_string()).collect();
        put("pooling.levels", levels.join(","));
        put("pooling.mode", self.pyramid.mode.to_string());
        put("classifier.delta", fmt_f64(self.classifier_delta));
        put("classifier.standardize", self.standardize.to_string());
        let channels: Vec<&str> = self.channels.iter().map(|c| c.name()).collect();
        put("channels", channels.join(","));
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        put("seeds", seeds.join(","));
        put("output.dir", self.output_dir.to_string_lossy().into_owned());
        put("modular.side", self.modular.side.to_string());
        put("modular.stride", self.modular.stride.to_string());
        put("modular.gamma", fmt_f64(self.modular.gamma));
        m
    }

    /// Hash of everything that can change a result. Seeds and output location excluded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.to_map() {
            if k == "seeds" || k == "output.dir" {
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        crate::preprocess::hex(&h.finalize()[..8])
    }

    /// Fingerprint of one seeded run.
    pub fn seed_fingerprint(&self, seed: u64) -> String {
        let mut h = Sha256::new();
        h.update(self.fingerprint().as_bytes());
        h.update(seed.to_le_bytes());
        crate::preprocess::hex(&h.finalize()[..8])
    }

    /// Renders the canonical form as TOML-compatible dotted keys.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_map() {
            let quoted = v.parse::<f64>().is_err() && v != "true" && v != "false";
            if quoted {
                s.push_str(&format!("{k} = {v:?}\n"));
            } else {
                s.push_str(&format!("{k} = {v}\n"));
            }
        }
        s
    }
}
