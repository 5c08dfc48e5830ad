//! Embedding-space domain-mismatch diagnostics: Fréchet distance between
//! Gaussian fits, PCA projections and a logistic-regression domain probe.

mod gaussian;
mod pca;
mod probe;
pub mod svg;

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gaussian::{frechet_distance, frechet_from_summaries, sqrtm_psd, FrechetParts, GaussianSummary};
pub use pca::{pca_project, Pca};
pub use probe::{auroc, duplicate_groups, linear_probe, probe_split, probe_split_grouped, ProbeConfig, ProbeResult};

pub const REPORT_FILE: &str = "mismatch_report.json";
pub const PCA_COMPONENTS: usize = 2;

/// Pooled embeddings of one domain, one row per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub domain: String,
    pub dim: usize,
    /// Row-major `n x dim`.
    pub data: Vec<f32>,
    /// Image names, in row order.
    pub items: Vec<String>,
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMeta {
    pub n: usize,
    pub d: usize,
    pub dtype: String,
    pub layout: String,
    pub domain: String,
    pub labels: Vec<String>,
    pub items: Vec<String>,
    pub fingerprint: String,
}

impl Embeddings {
    pub fn new(domain: impl Into<String>, rows: Vec<Vec<f32>>, items: Vec<String>, fingerprint: impl Into<String>) -> Result<Self> {
        let domain = domain.into();
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape(format!("{domain}: embedding rows have unequal widths")));
        }
        if rows.len() != items.len() {
            return Err(Error::Shape(format!("{domain}: {} rows but {} item names", rows.len(), items.len())));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("{domain}: non-finite embedding entries")));
        }
        Ok(Self {
            domain,
            dim,
            data: rows.concat(),
            items,
            fingerprint: fingerprint.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.items.len()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.n(), self.dim, self.data.iter().map(|&v| f64::from(v)))
    }

    pub fn paths(dir: &Path, domain: &str) -> (PathBuf, PathBuf) {
        (dir.join(format!("{domain}.f32")), dir.join(format!("{domain}.meta")))
    }

    /// Little-endian row-major floats plus a JSON descriptor.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (bin, meta) = Self::paths(dir, &self.domain);
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let m = EmbeddingMeta {
            n: self.n(),
            d: self.dim,
            dtype: "f32-le".into(),
            layout: "row-major".into(),
            domain: self.domain.clone(),
            labels: vec![self.domain.clone(); self.n()],
            items: self.items.clone(),
            fingerprint: self.fingerprint.clone(),
        };
        std::fs::write(&meta, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(&meta, e))
    }

    pub fn load(dir: &Path, domain: &str) -> Result<Self> {
        let (bin, meta) = Self::paths(dir, domain);
        let m: EmbeddingMeta =
            serde_json::from_str(&std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?)?;
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() != m.n * m.d * 4 || m.items.len() != m.n {
            return Err(Error::Integrity(format!(
                "{}: {} bytes do not match n = {}, d = {}",
                bin.display(),
                bytes.len(),
                m.n,
                m.d
            )));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Self {
            domain: m.domain,
            dim: m.d,
            data,
            items: m.items,
            fingerprint: m.fingerprint,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeDiagnostics {
    pub frechet: FrechetParts,
    pub probe: ProbeResult,
    pub pca_explained_variance_ratio: Vec<f64>,
    pub figure: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MismatchReport {
    pub domains: [String; 2],
    pub counts: [usize; 2],
    pub pca_components: usize,
    pub probe_config: ProbeConfig,
    pub frozen: RegimeDiagnostics,
    pub adapted: Option<RegimeDiagnostics>,
    /// Adapted minus frozen distance.
    pub fd_delta: Option<f64>,
}

/// FD, probe and PCA for one pair of domains. The first domain is the
/// negative probe class.
pub fn diagnose_pair(a: &Embeddings, b: &Embeddings, probe: &ProbeConfig, figure: Option<(&Path, &str)>) -> Result<RegimeDiagnostics> {
    if a.dim != b.dim {
        return Err(Error::Config(format!("embedding widths differ: {} vs {}", a.dim, b.dim)));
    }
    let (ma, mb) = (a.matrix(), b.matrix());
    let frechet = frechet_from_summaries(&GaussianSummary::fit(&ma)?, &GaussianSummary::fit(&mb)?)?;
    let stacked = DMatrix::from_fn(a.n() + b.n(), a.dim, |i, j| if i < a.n() { ma[(i, j)] } else { mb[(i - a.n(), j)] });
    let labels: Vec<bool> = (0..stacked.nrows()).map(|i| i >= a.n()).collect();
    let probe = linear_probe(&stacked, &labels, probe)?;
    let pca = pca_project(&stacked, PCA_COMPONENTS)?;
    let figure = match figure {
        Some((path, title)) => {
            let points: Vec<[f64; 2]> = pca.coords.iter().map(|c| [c[0], c[1]]).collect();
            let groups: Vec<String> = labels.iter().map(|&l| if l { b.domain.clone() } else { a.domain.clone() }).collect();
            let r = &pca.explained_variance_ratio;
            svg::write_scatter(
                path,
                &points,
                &groups,
                title,
                [&format!("PC1 ({:.1}%)", 100.0 * r[0]), &format!("PC2 ({:.1}%)", 100.0 * r[1])],
            )?;
            Some(path.to_path_buf())
        }
        None => None,
    };
    Ok(RegimeDiagnostics {
        frechet,
        probe,
        pca_explained_variance_ratio: pca.explained_variance_ratio,
        figure,
    })
}

/// Compare frozen and (optionally) adapted embeddings of the same images.
/// Figures go to `<figure_dir>/pca_<regime>.svg` when a directory is given.
pub fn mismatch_report(
    frozen: (&Embeddings, &Embeddings),
    adapted: Option<(&Embeddings, &Embeddings)>,
    probe: &ProbeConfig,
    figure_dir: Option<&Path>,
) -> Result<MismatchReport> {
    if let Some((a, b)) = adapted {
        for (f, x) in [(frozen.0, a), (frozen.1, b)] {
            if f.domain != x.domain || f.items != x.items {
                return Err(Error::Config(format!(
                    "frozen and adapted embeddings of `{}` cover different image lists",
                    f.domain
                )));
            }
        }
    }
    let fig = |regime: &str| figure_dir.map(|d| d.join(format!("pca_{regime}.svg")));
    let frozen_fig = fig("frozen");
    let frozen_diag = diagnose_pair(
        frozen.0,
        frozen.1,
        probe,
        frozen_fig.as_deref().map(|p| (p, "frozen backbone")),
    )?;
    let adapted_fig = fig("adapted");
    let adapted_diag = adapted
        .map(|(a, b)| diagnose_pair(a, b, probe, adapted_fig.as_deref().map(|p| (p, "adapted backbone"))))
        .transpose()?;
    Ok(MismatchReport {
        domains: [frozen.0.domain.clone(), frozen.1.domain.clone()],
        counts: [frozen.0.n(), frozen.1.n()],
        pca_components: PCA_COMPONENTS,
        probe_config: probe.clone(),
        fd_delta: adapted_diag.as_ref().map(|d| d.frechet.distance - frozen_diag.frechet.distance),
        frozen: frozen_diag,
        adapted: adapted_diag,
    })
}

pub fn write_report(report: &MismatchReport, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<MismatchReport> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?)
}
