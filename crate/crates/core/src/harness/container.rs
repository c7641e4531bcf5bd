//! `FCV1` binary container for fitted models, features and classifiers.
//!
//! Layout (little-endian): magic `FCV1`, version `u16`, kind `u16`, section
//! count `u32`, then sections of `tag [u8; 4]`, type `u8`, rows `u32`,
//! cols `u32` and the payload. Matrices are row-major `f32`; text is UTF-8
//! with `rows = 1` and `cols` bytes; index arrays are `u32`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::config::Channel;
use super::experiment::FeatureTable;
use super::pipeline::{ChannelModel, FittedPipeline};
use crate::classifier::{RidgeClassifier, Standardizer};
use crate::dictionary::{Dictionary, DictionaryMethod};
use crate::encoders::{CodeMap, Encoder};
use crate::pooling::{PoolMode, PyramidSpec};
use crate::preprocess::WhiteningModel;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FCV1";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContainerKind {
    Pipeline = 1,
    Features = 2,
    Classifier = 3,
    Codes = 4,
}

impl ContainerKind {
    fn from_u16(v: u16) -> Result<Self> {
        Ok(match v {
            1 => Self::Pipeline,
            2 => Self::Features,
            3 => Self::Classifier,
            4 => Self::Codes,
            other => return Err(Error::Format(format!("unknown container kind {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32 { rows: usize, cols: usize, data: Vec<f32> },
    Text(String),
    U32 { rows: usize, cols: usize, data: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub tag: [u8; 4],
    pub payload: Payload,
}

impl Section {
    pub fn matrix(tag: &[u8; 4], m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter().map(|&v| v as f32));
        }
        Self {
            tag: *tag,
            payload: Payload::F32 {
                rows: m.nrows(),
                cols: m.ncols(),
                data,
            },
        }
    }

    pub fn text(tag: &[u8; 4], s: impl Into<String>) -> Self {
        Self {
            tag: *tag,
            payload: Payload::Text(s.into()),
        }
    }

    pub fn indices(tag: &[u8; 4], v: &[usize]) -> Result<Self> {
        let data = v
            .iter()
            .map(|&i| u32::try_from(i).map_err(|_| Error::Validation(format!("index {i} exceeds u32"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tag: *tag,
            payload: Payload::U32 {
                rows: 1,
                cols: data.len(),
                data,
            },
        })
    }

    fn tag_str(&self) -> String {
        String::from_utf8_lossy(&self.tag).into_owned()
    }

    pub fn as_matrix(&self) -> Result<DMatrix<f64>> {
        match &self.payload {
            Payload::F32 { rows, cols, data } => Ok(DMatrix::from_row_iterator(*rows, *cols, data.iter().map(|&v| v as f64))),
            _ => Err(Error::Format(format!("section {} is not a matrix", self.tag_str()))),
        }
    }

    pub fn as_text(&self) -> Result<&str> {
        match &self.payload {
            Payload::Text(s) => Ok(s),
            _ => Err(Error::Format(format!("section {} is not text", self.tag_str()))),
        }
    }

    pub fn as_indices(&self) -> Result<Vec<usize>> {
        match &self.payload {
            Payload::U32 { data, .. } => Ok(data.iter().map(|&v| v as usize).collect()),
            _ => Err(Error::Format(format!("section {} is not an index array", self.tag_str()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    pub sections: Vec<Section>,
}

fn dim_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Validation(format!("dimension {v} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated container at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Container {
    pub fn new(kind: ContainerKind) -> Self {
        Self {
            kind,
            sections: Vec::new(),
        }
    }

    pub fn push(&mut self, s: Section) {
        self.sections.push(s);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u16).to_le_bytes());
        out.extend_from_slice(&dim_u32(self.sections.len())?.to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&s.tag);
            let (ty, rows, cols) = match &s.payload {
                Payload::F32 { rows, cols, .. } => (0u8, *rows, *cols),
                Payload::Text(t) => (1u8, 1, t.len()),
                Payload::U32 { rows, cols, .. } => (2u8, *rows, *cols),
            };
            out.push(ty);
            out.extend_from_slice(&dim_u32(rows)?.to_le_bytes());
            out.extend_from_slice(&dim_u32(cols)?.to_le_bytes());
            match &s.payload {
                Payload::F32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Payload::Text(t) => out.extend_from_slice(t.as_bytes()),
                Payload::U32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not an FCV1 container".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let kind = ContainerKind::from_u16(r.u16()?)?;
        let count = r.u32()? as usize;
        let mut sections = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
            let ty = r.u8()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Format("section size overflows".into()))?;
            let payload = match ty {
                0 => {
                    let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("section size overflows".into()))?)?;
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Payload::F32 { rows, cols, data }
                }
                1 => {
                    let raw = r.take(n)?;
                    Payload::Text(
                        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format("text section is not UTF-8".into()))?,
                    )
                }
                2 => {
                    let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("section size overflows".into()))?)?;
                    let data = raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
                    Payload::U32 { rows, cols, data }
                }
                other => return Err(Error::Format(format!("unknown section type {other}"))),
            };
            sections.push(Section { tag, payload });
        }
        if r.at != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Self { kind, sections })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn expect_kind(self, kind: ContainerKind) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind:?} container, found {:?}", self.kind)));
        }
        Ok(self)
    }

    pub fn all(&self, tag: &[u8; 4]) -> Vec<&Section> {
        self.sections.iter().filter(|s| &s.tag == tag).collect()
    }

    pub fn get(&self, tag: &[u8; 4]) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| &s.tag == tag)
            .ok_or_else(|| Error::Format(format!("missing section {}", String::from_utf8_lossy(tag))))
    }

    pub fn meta(&self) -> Result<BTreeMap<String, String>> {
        Ok(parse_meta(self.get(b"META")?.as_text()?))
    }
}

fn meta_text(pairs: &BTreeMap<String, String>) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn parse_meta(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn meta_get<'a>(m: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    m.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Format(format!("metadata key {key:?} missing")))
}

fn meta_parse<T: std::str::FromStr>(m: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let v = meta_get(m, key)?;
    v.parse().map_err(|_| Error::Format(format!("metadata {key}={v:?} unreadable")))
}

fn encoder_meta(e: Encoder, m: &mut BTreeMap<String, String>) {
    m.insert("encoder".into(), e.short_name().into());
    match e {
        Encoder::SparseCoding { lambda } => {
            m.insert("encoder.lambda".into(), format!("{lambda:?}"));
        }
        Encoder::Llc { k, delta } => {
            m.insert("encoder.k".into(), k.to_string());
            m.insert("encoder.delta".into(), format!("{delta:?}"));
        }
        Encoder::Ridge { gamma } => {
            m.insert("encoder.gamma".into(), format!("{gamma:?}"));
        }
        Encoder::SoftThreshold { alpha } => {
            m.insert("encoder.alpha".into(), format!("{alpha:?}"));
        }
        Encoder::KMeansTriangle | Encoder::VectorQuantization => {}
    }
}

fn encoder_from_meta(m: &BTreeMap<String, String>) -> Result<Encoder> {
    Ok(match meta_get(m, "encoder")? {
        "sc" => Encoder::SparseCoding {
            lambda: meta_parse(m, "encoder.lambda")?,
        },
        "llc" => Encoder::Llc {
            k: meta_parse(m, "encoder.k")?,
            delta: meta_parse(m, "encoder.delta")?,
        },
        "rr" => Encoder::Ridge {
            gamma: meta_parse(m, "encoder.gamma")?,
        },
        "st" => Encoder::SoftThreshold {
            alpha: meta_parse(m, "encoder.alpha")?,
        },
        other => Encoder::with_defaults(other)?,
    })
}

fn row_vector(tag: &[u8; 4], v: &DVector<f64>) -> Section {
    Section::matrix(tag, &DMatrix::from_row_slice(1, v.len(), v.as_slice()))
}

/// Whitening models and dictionaries of every channel, with the encoder and
/// pooling settings. `extra` lands in the metadata (config fingerprint, seed).
pub fn pipeline_container(p: &FittedPipeline, extra: &BTreeMap<String, String>) -> Container {
    let mut meta = extra.clone();
    meta.insert("pipeline".into(), p.fingerprint());
    meta.insert("patch.side".into(), p.patch_side.to_string());
    meta.insert("patch.stride".into(), p.patch_stride.to_string());
    let levels: Vec<String> = p.pyramid.levels().iter().map(|g| g.to_string()).collect();
    meta.insert("pooling.levels".into(), levels.join(","));
    meta.insert("pooling.mode".into(), p.pyramid.mode.to_string());
    encoder_meta(p.encoder(), &mut meta);
    let channels: Vec<&str> = p.channels.iter().map(|c| c.channel.name()).collect();
    meta.insert("channels".into(), channels.join(","));
    for (i, c) in p.channels.iter().enumerate() {
        let d = c.dictionary();
        meta.insert(format!("channel{i}.method"), d.method.name().into());
        meta.insert(format!("channel{i}.seed"), d.seed.to_string());
        meta.insert(format!("channel{i}.norm_eps"), format!("{:?}", c.whitening.norm_eps));
        meta.insert(format!("channel{i}.zca_eps"), format!("{:?}", c.whitening.zca_eps));
        meta.insert(format!("channel{i}.whitening"), c.whitening.fingerprint());
        meta.insert(format!("channel{i}.dictionary"), d.fingerprint());
    }
    let mut out = Container::new(ContainerKind::Pipeline);
    out.push(Section::text(b"META", meta_text(&meta)));
    for c in &p.channels {
        out.push(row_vector(b"WMEA", &c.whitening.mean));
        out.push(Section::matrix(b"WZCA", &c.whitening.transform));
        out.push(Section::matrix(b"DICT", c.dictionary().atoms()));
    }
    out
}

/// Rebuilds a pipeline; returns it with the stored metadata.
pub fn pipeline_from_container(c: &Container) -> Result<(FittedPipeline, BTreeMap<String, String>)> {
    if c.kind != ContainerKind::Pipeline {
        return Err(Error::Format(format!("expected a pipeline container, found {:?}", c.kind)));
    }
    let meta = c.meta()?;
    let encoder = encoder_from_meta(&meta)?;
    let levels = meta_get(&meta, "pooling.levels")?
        .split(',')
        .map(|g| g.parse().map_err(|_| Error::Format(format!("pooling level {g:?}"))))
        .collect::<Result<Vec<usize>>>()?;
    let mode: PoolMode = meta_get(&meta, "pooling.mode")?.parse()?;
    let pyramid = PyramidSpec::new(levels, mode)?;
    let names: Vec<Channel> = meta_get(&meta, "channels")?
        .split(',')
        .map(str::parse)
        .collect::<Result<_>>()?;
    let (means, zcas, dicts) = (c.all(b"WMEA"), c.all(b"WZCA"), c.all(b"DICT"));
    if means.len() != names.len() || zcas.len() != names.len() || dicts.len() != names.len() {
        return Err(Error::Format("channel sections do not match the channel list".into()));
    }
    let mut channels = Vec::with_capacity(names.len());
    for (i, &channel) in names.iter().enumerate() {
        let mean = means[i].as_matrix()?;
        let whitening = WhiteningModel {
            norm_eps: meta_parse(&meta, &format!("channel{i}.norm_eps"))?,
            zca_eps: meta_parse(&meta, &format!("channel{i}.zca_eps"))?,
            mean: DVector::from_iterator(mean.len(), mean.iter().copied()),
            transform: zcas[i].as_matrix()?,
        };
        let method: DictionaryMethod = meta_get(&meta, &format!("channel{i}.method"))?.parse()?;
        let seed: u64 = meta_parse(&meta, &format!("channel{i}.seed"))?;
        // f32 storage loses unit norm at the 1e-8 level; renormalize
        let dictionary =
            Dictionary::from_unnormalized(dicts[i].as_matrix()?, method, seed)?.with_whitening_id(whitening.fingerprint());
        channels.push(ChannelModel::new(channel, whitening, &dictionary, encoder)?);
    }
    let pipeline = FittedPipeline {
        channels,
        patch_side: meta_parse(&meta, "patch.side")?,
        patch_stride: meta_parse(&meta, "patch.stride")?,
        pyramid,
    };
    Ok((pipeline, meta))
}

/// Pooled features of a split with labels and dataset ids.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub meta: BTreeMap<String, String>,
    pub classes: usize,
    pub train: FeatureTable,
    pub test: FeatureTable,
}

fn rows_section(tag: &[u8; 4], rows: &[Vec<f32>]) -> Result<Section> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Dimension("feature rows differ in length".into()));
    }
    Ok(Section {
        tag: *tag,
        payload: Payload::F32 {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        },
    })
}

fn section_rows(s: &Section) -> Result<Vec<Vec<f32>>> {
    match &s.payload {
        Payload::F32 { cols, data, .. } if *cols > 0 => Ok(data.chunks_exact(*cols).map(<[f32]>::to_vec).collect()),
        Payload::F32 { rows, .. } => Ok(vec![Vec::new(); *rows]),
        _ => Err(Error::Format("feature section is not a matrix".into())),
    }
}

impl FeatureFile {
    pub fn to_container(&self) -> Result<Container> {
        let mut meta = self.meta.clone();
        meta.insert("classes".into(), self.classes.to_string());
        let mut c = Container::new(ContainerKind::Features);
        c.push(Section::text(b"META", meta_text(&meta)));
        for (t, tbl) in [(b"TRN", &self.train), (b"TST", &self.test)] {
            let tag = |last: u8| [t[0], t[1], t[2], last];
            c.push(rows_section(&tag(b'F'), &tbl.rows)?);
            c.push(Section::indices(&tag(b'L'), &tbl.labels)?);
            c.push(Section::indices(&tag(b'I'), &tbl.ids)?);
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != ContainerKind::Features {
            return Err(Error::Format(format!("expected a features container, found {:?}", c.kind)));
        }
        let mut meta = c.meta()?;
        let classes = meta_parse(&meta, "classes")?;
        meta.remove("classes");
        let table = |p: &[u8; 3]| -> Result<FeatureTable> {
            let tag = |last: u8| [p[0], p[1], p[2], last];
            let t = FeatureTable {
                rows: section_rows(c.get(&tag(b'F'))?)?,
                labels: c.get(&tag(b'L'))?.as_indices()?,
                ids: c.get(&tag(b'I'))?.as_indices()?,
            };
            if t.labels.len() != t.rows.len() || t.ids.len() != t.rows.len() {
                return Err(Error::Format("feature, label and id counts differ".into()));
            }
            Ok(t)
        };
        Ok(Self {
            meta,
            classes,
            train: table(b"TRN")?,
            test: table(b"TST")?,
        })
    }
}

pub fn classifier_container(model: &RidgeClassifier, extra: &BTreeMap<String, String>) -> Container {
    let mut meta = extra.clone();
    meta.insert("delta".into(), format!("{:?}", model.delta));
    meta.insert("standardize".into(), model.standardizer.is_some().to_string());
    let mut c = Container::new(ContainerKind::Classifier);
    c.push(Section::text(b"META", meta_text(&meta)));
    c.push(Section::matrix(b"WGHT", &model.weights));
    if let Some(s) = &model.standardizer {
        c.push(row_vector(b"SMEA", &s.mean));
        c.push(row_vector(b"SSTD", &s.std));
    }
    c
}

pub fn classifier_from_container(c: &Container) -> Result<(RidgeClassifier, BTreeMap<String, String>)> {
    if c.kind != ContainerKind::Classifier {
        return Err(Error::Format(format!("expected a classifier container, found {:?}", c.kind)));
    }
    let meta = c.meta()?;
    let weights = c.get(b"WGHT")?.as_matrix()?;
    let standardizer = if meta_parse::<bool>(&meta, "standardize")? {
        let row = |tag: &[u8; 4]| -> Result<DVector<f64>> {
            let m = c.get(tag)?.as_matrix()?;
            Ok(DVector::from_iterator(m.len(), m.iter().copied()))
        };
        let s = Standardizer {
            mean: row(b"SMEA")?,
            std: row(b"SSTD")?,
        };
        if s.mean.len() != weights.nrows() || s.std.len() != weights.nrows() {
            return Err(Error::Format("standardizer length differs from weights".into()));
        }
        Some(s)
    } else {
        None
    };
    let model = RidgeClassifier {
        weights,
        delta: meta_parse(&meta, "delta")?,
        standardizer,
    };
    Ok((model, meta))
}

/// Codes of one image with their patch centers.
pub fn codes_container(codes: &CodeMap, extra: &BTreeMap<String, String>) -> Container {
    let mut meta = extra.clone();
    encoder_meta(codes.encoder, &mut meta);
    let coords = DMatrix::from_fn(codes.coords.len(), 2, |i, j| if j == 0 { codes.coords[i].0 } else { codes.coords[i].1 });
    let mut c = Container::new(ContainerKind::Codes);
    c.push(Section::text(b"META", meta_text(&meta)));
    c.push(Section::matrix(b"CODE", &codes.codes));
    c.push(Section::matrix(b"COOR", &coords));
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_round_trip() {
        let mut c = Container::new(ContainerKind::Codes);
        c.push(Section::text(b"META", "a=1\n"));
        c.push(Section::matrix(b"MATX", &DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.5])));
        c.push(Section::indices(b"IDXS", &[3, 1, 4]).unwrap());
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"FCV1");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get(b"MATX").unwrap().as_matrix().unwrap()[(1, 2)], 6.5);
        assert_eq!(back.meta().unwrap()["a"], "1");
    }

    #[test]
    fn rejects_corruption() {
        let mut c = Container::new(ContainerKind::Features);
        c.push(Section::indices(b"IDXS", &[1, 2]).unwrap());
        let bytes = c.to_bytes().unwrap();
        assert!(matches!(Container::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Container::from_bytes(&long).is_err());
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(Container::from_bytes(&v2).is_err());
    }

    #[test]
    fn classifier_round_trip() {
        let model = RidgeClassifier {
            weights: DMatrix::from_row_slice(3, 2, &[0.5, -1.0, 2.0, 0.25, 0.0, 1.5]),
            delta: 0.005,
            standardizer: Some(Standardizer {
                mean: DVector::from_vec(vec![0.0, 1.0, 2.0]),
                std: DVector::from_vec(vec![1.0, 0.5, 4.0]),
            }),
        };
        let c = classifier_container(&model, &BTreeMap::new());
        let (back, _) = classifier_from_container(&Container::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, model);
    }
}
