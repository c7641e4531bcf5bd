//! Per-patch encoders: sparse coding, LLC, ridge regression, soft threshold,
//! K-means triangle and hard vector quantization.

mod lasso;
mod llc;

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dictionary::Dictionary;
use crate::linalg::spd_solve;
use crate::preprocess::PatchSet;
use crate::{Error, Result};

pub use lasso::{lasso_kkt_residual, lasso_objective, LassoSolution, LassoSolver, MAX_SWEEPS, SWEEP_TOL};
pub use llc::{llc_code, nearest_atoms};

pub const DEFAULT_ALPHA: f64 = 0.25;
pub const DEFAULT_SC_LAMBDA: f64 = 1.0;
pub const DEFAULT_LLC_K: usize = 5;
pub const DEFAULT_LLC_DELTA: f64 = 0.01;
pub const DEFAULT_RR_GAMMA: f64 = 0.01;

/// Encoder choice together with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Encoder {
    SparseCoding { lambda: f64 },
    Llc { k: usize, delta: f64 },
    Ridge { gamma: f64 },
    SoftThreshold { alpha: f64 },
    KMeansTriangle,
    VectorQuantization,
}

impl Encoder {
    pub fn short_name(&self) -> &'static str {
        match self {
            Encoder::SparseCoding { .. } => "sc",
            Encoder::Llc { .. } => "llc",
            Encoder::Ridge { .. } => "rr",
            Encoder::SoftThreshold { .. } => "st",
            Encoder::KMeansTriangle => "kt",
            Encoder::VectorQuantization => "vq",
        }
    }

    /// Default parameters for an encoder name (`sc`, `llc`, `rr`, `st`, `kt`, `vq`).
    pub fn with_defaults(name: &str) -> Result<Self> {
        Ok(match name.to_ascii_lowercase().as_str() {
            "sc" => Encoder::SparseCoding {
                lambda: DEFAULT_SC_LAMBDA,
            },
            "llc" => Encoder::Llc {
                k: DEFAULT_LLC_K,
                delta: DEFAULT_LLC_DELTA,
            },
            "rr" => Encoder::Ridge {
                gamma: DEFAULT_RR_GAMMA,
            },
            "st" => Encoder::SoftThreshold { alpha: DEFAULT_ALPHA },
            "kt" => Encoder::KMeansTriangle,
            "vq" => Encoder::VectorQuantization,
            other => return Err(Error::Config(format!("unknown encoder {other:?}"))),
        })
    }

    /// Code length for a dictionary of `m` atoms.
    pub fn code_dim(&self, m: usize) -> usize {
        match self {
            Encoder::SoftThreshold { .. } => 2 * m,
            _ => m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::Validation(format!("{what} = {v}")));
        match *self {
            Encoder::SparseCoding { lambda } if !(lambda > 0.0) => bad("sc lambda", lambda),
            Encoder::Llc { delta, .. } if !(delta > 0.0) => bad("llc delta", delta),
            Encoder::Llc { k: 0, .. } => Err(Error::Validation("llc k = 0".into())),
            Encoder::Ridge { gamma } if !(gamma > 0.0) => bad("rr gamma", gamma),
            Encoder::SoftThreshold { alpha } if !(alpha >= 0.0) => bad("st alpha", alpha),
            _ => Ok(()),
        }
    }

    /// Precomputes whatever the encoder can share across patches.
    pub fn prepare(&self, dict: &Dictionary) -> Result<PreparedEncoder> {
        self.validate()?;
        let atoms = dict.atoms();
        let kind = match *self {
            Encoder::SparseCoding { lambda } => Prepared::Lasso(LassoSolver::new(atoms, lambda)?),
            Encoder::Llc { k, .. } if k > atoms.ncols() => {
                return Err(Error::Validation(format!(
                    "llc k = {k} exceeds dictionary size {}",
                    atoms.ncols()
                )))
            }
            Encoder::Ridge { gamma } => {
                let m = atoms.ncols();
                let system = atoms.tr_mul(atoms) + DMatrix::identity(m, m) * gamma;
                Prepared::Projection(spd_solve(system, &atoms.transpose())?)
            }
            _ => Prepared::Plain,
        };
        Ok(PreparedEncoder {
            encoder: *self,
            dict: dict.clone(),
            kind,
        })
    }

    pub fn encode(&self, dict: &Dictionary, patches: &PatchSet) -> Result<CodeMap> {
        self.prepare(dict)?.encode(patches)
    }
}

impl fmt::Display for Encoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Encoder::SparseCoding { lambda } => write!(f, "sc(lambda={lambda})"),
            Encoder::Llc { k, delta } => write!(f, "llc(k={k},delta={delta})"),
            Encoder::Ridge { gamma } => write!(f, "rr(gamma={gamma})"),
            Encoder::SoftThreshold { alpha } => write!(f, "st(alpha={alpha})"),
            Encoder::KMeansTriangle => f.write_str("kt"),
            Encoder::VectorQuantization => f.write_str("vq"),
        }
    }
}

#[derive(Debug, Clone)]
enum Prepared {
    Plain,
    Lasso(LassoSolver),
    /// `(D^T D + gamma I)^(-1) D^T`
    Projection(DMatrix<f64>),
}

/// An encoder bound to a dictionary, safe to share across threads.
#[derive(Debug, Clone)]
pub struct PreparedEncoder {
    encoder: Encoder,
    dict: Dictionary,
    kind: Prepared,
}

/// Codes of every patch of one image, with the patch centers they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeMap {
    /// `k x N`: one code per column.
    pub codes: DMatrix<f64>,
    pub coords: Vec<(f64, f64)>,
    pub encoder: Encoder,
}

impl CodeMap {
    pub fn code_dim(&self) -> usize {
        self.codes.nrows()
    }

    pub fn len(&self) -> usize {
        self.codes.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.ncols() == 0
    }
}

fn columnwise(n: usize, f: impl Fn(usize) -> Result<DVector<f64>> + Sync + Send) -> Result<DMatrix<f64>> {
    let cols = (0..n).into_par_iter().map(f).collect::<Result<Vec<_>>>()?;
    if cols.is_empty() {
        return Err(Error::Validation("no patches to encode".into()));
    }
    Ok(DMatrix::from_columns(&cols))
}

fn sq_distances<'a>(atoms: &'a DMatrix<f64>, x: nalgebra::DVectorView<'_, f64>) -> impl Iterator<Item = f64> + 'a {
    let x = x.clone_owned();
    atoms
        .column_iter()
        .map(move |a| a.iter().zip(x.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
}

/// `f_j = max(0, mean(z) - z_j)` with `z_j = ||x - c_j||`. Works on any
/// centres, normalized or not.
pub fn triangle_code(centres: &DMatrix<f64>, x: nalgebra::DVectorView<'_, f64>) -> DVector<f64> {
    let m = centres.ncols();
    let z: Vec<f64> = sq_distances(centres, x).map(f64::sqrt).collect();
    let mu = z.iter().sum::<f64>() / m as f64;
    DVector::from_iterator(m, z.iter().map(|zj| (mu - zj).max(0.0)))
}

impl PreparedEncoder {
    pub fn dictionary(&self) -> &Dictionary {
        &self.dict
    }

    pub fn encoder(&self) -> Encoder {
        self.encoder
    }

    pub fn encode(&self, patches: &PatchSet) -> Result<CodeMap> {
        let atoms = self.dict.atoms();
        if patches.dim() != atoms.nrows() {
            return Err(Error::Dimension(format!(
                "patch dimension {} vs dictionary dimension {}",
                patches.dim(),
                atoms.nrows()
            )));
        }
        let x = &patches.data;
        let n = x.ncols();
        let m = atoms.ncols();
        let codes = match (&self.encoder, &self.kind) {
            (Encoder::SparseCoding { .. }, Prepared::Lasso(solver)) => {
                let dtx = atoms.tr_mul(x);
                let sols: Vec<LassoSolution> = (0..n)
                    .into_par_iter()
                    .map(|i| solver.solve_projected(dtx.column(i).into_owned(), None))
                    .collect();
                let stalled = sols.iter().filter(|s| !s.converged).count();
                if stalled > 0 {
                    log::warn!("lasso hit the sweep limit on {stalled} of {n} patches");
                }
                let cols: Vec<DVector<f64>> = sols.into_iter().map(|s| s.code).collect();
                if cols.is_empty() {
                    return Err(Error::Validation("no patches to encode".into()));
                }
                DMatrix::from_columns(&cols)
            }
            (Encoder::Llc { k, delta }, _) => columnwise(n, |i| llc_code(atoms, x.column(i), *k, *delta))?,
            (Encoder::Ridge { .. }, Prepared::Projection(p)) => p * x,
            (Encoder::SoftThreshold { alpha }, _) => {
                let z = atoms.tr_mul(x);
                let mut out = DMatrix::zeros(2 * m, n);
                for i in 0..n {
                    for j in 0..m {
                        let v = z[(j, i)];
                        out[(j, i)] = (v - alpha).max(0.0);
                        out[(j + m, i)] = (-v - alpha).max(0.0);
                    }
                }
                out
            }
            (Encoder::KMeansTriangle, _) => columnwise(n, |i| Ok(triangle_code(atoms, x.column(i))))?,
            (Encoder::VectorQuantization, _) => columnwise(n, |i| {
                let best = crate::linalg::argmin_first(sq_distances(atoms, x.column(i)));
                let mut code = DVector::zeros(m);
                code[best] = 1.0;
                Ok(code)
            })?,
            _ => unreachable!("prepared state always matches its encoder"),
        };
        Ok(CodeMap {
            codes,
            coords: patches.coords.clone(),
            encoder: self.encoder,
        })
    }
}

pub fn encode_sc(dict: &Dictionary, patches: &PatchSet, lambda: f64) -> Result<CodeMap> {
    Encoder::SparseCoding { lambda }.encode(dict, patches)
}

pub fn encode_llc(dict: &Dictionary, patches: &PatchSet, k: usize, delta: f64) -> Result<CodeMap> {
    Encoder::Llc { k, delta }.encode(dict, patches)
}

pub fn encode_rr(dict: &Dictionary, patches: &PatchSet, gamma: f64) -> Result<CodeMap> {
    Encoder::Ridge { gamma }.encode(dict, patches)
}

pub fn encode_st(dict: &Dictionary, patches: &PatchSet, alpha: f64) -> Result<CodeMap> {
    Encoder::SoftThreshold { alpha }.encode(dict, patches)
}

pub fn encode_kt(dict: &Dictionary, patches: &PatchSet) -> Result<CodeMap> {
    Encoder::KMeansTriangle.encode(dict, patches)
}

pub fn encode_vq(dict: &Dictionary, patches: &PatchSet) -> Result<CodeMap> {
    Encoder::VectorQuantization.encode(dict, patches)
}

/// Solves a single LASSO problem against `dict`.
pub fn lasso_solve(dict: &Dictionary, x: &DVector<f64>, lambda: f64) -> Result<LassoSolution> {
    if x.len() != dict.dim() {
        return Err(Error::Dimension(format!("x has {} entries, atoms {}", x.len(), dict.dim())));
    }
    Ok(LassoSolver::new(dict.atoms(), lambda)?.solve(dict.atoms(), x.as_view()))
}
