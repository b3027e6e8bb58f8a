//! Projection of profile embeddings into the recommender's hidden size.

use std::str::FromStr;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::store::ProfileTarget;
use super::umap::UmapFit;
use super::ProfileError;

pub use super::umap::{Metric, UmapParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMethod {
    Umap,
    Pca,
    Identity,
}

impl FromStr for ProjectionMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "umap" => Ok(Self::Umap),
            "pca" => Ok(Self::Pca),
            "identity" => Ok(Self::Identity),
            other => Err(format!("unknown projection method `{other}`")),
        }
    }
}

/// Mean and leading principal directions.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaFit {
    mean: Array1<f64>,
    /// `[d, input_dim]`, rows ordered by decreasing singular value.
    components: Array2<f64>,
}

impl PcaFit {
    /// Components come from the SVD of the centred data; each is signed so
    /// its largest-magnitude coordinate is positive.
    pub fn fit(x: ArrayView2<f64>, d: usize) -> Self {
        let (n, p) = x.dim();
        let mean = x.mean_axis(Axis(0)).expect("at least one row");
        let centred = &x - &mean;
        let m = DMatrix::from_row_iterator(n, p, centred.iter().copied());
        let svd = m.svd(false, true);
        let v_t = svd.v_t.expect("requested v_t");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| {
            svd.singular_values[b]
                .total_cmp(&svd.singular_values[a])
                .then(a.cmp(&b))
        });
        let mut components = Array2::zeros((d, p));
        for (r, &i) in order.iter().take(d).enumerate() {
            let row = v_t.row(i);
            let pivot = row
                .iter()
                .copied()
                .max_by(|a, b| a.abs().total_cmp(&b.abs()))
                .unwrap_or(1.0);
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            for c in 0..p {
                components[[r, c]] = sign * row[c];
            }
        }
        Self { mean, components }
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn components(&self) -> &Array2<f64> {
        &self.components
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean).dot(&self.components.t())
    }
}

#[derive(Debug, Clone)]
enum Fitted {
    Identity,
    Pca(PcaFit),
    Umap(Box<UmapFit>),
}

#[derive(Debug, Clone)]
pub struct ProjectionModel {
    method: ProjectionMethod,
    input_dim: usize,
    output_dim: usize,
    seed: u64,
    fitted: Fitted,
}

/// Fits `method` on the rows of `x` (training users only).
pub fn fit_projection(
    x: ArrayView2<f64>,
    d: usize,
    method: ProjectionMethod,
    seed: u64,
    umap: &UmapParams,
) -> Result<ProjectionModel, ProfileError> {
    let (n, p) = x.dim();
    let bad = |m: String| Err(ProfileError::Projection(m));
    if d == 0 || p == 0 {
        return bad("dimensions must be positive".into());
    }
    if x.iter().any(|v| !v.is_finite()) {
        return bad("embeddings contain non-finite values".into());
    }
    let fitted = match method {
        ProjectionMethod::Identity => {
            if p != d {
                return bad(format!("identity needs input_dim = d, got {p} vs {d}"));
            }
            Fitted::Identity
        }
        ProjectionMethod::Pca | ProjectionMethod::Umap => {
            if d >= p {
                return bad(format!(
                    "target dimension {d} must be below input dimension {p}"
                ));
            }
            let min_rows = match method {
                ProjectionMethod::Umap => (d + 1).max(4),
                _ => d + 1,
            };
            if n < min_rows {
                return bad(format!(
                    "{method:?} needs at least {min_rows} rows, got {n}"
                ));
            }
            if method == ProjectionMethod::Pca {
                Fitted::Pca(PcaFit::fit(x, d))
            } else {
                if umap.n_neighbors < 2 || !(umap.min_dist >= 0.0 && umap.min_dist < 1.0) {
                    return bad("umap needs n_neighbors >= 2 and 0 <= min_dist < 1".into());
                }
                Fitted::Umap(Box::new(UmapFit::fit(x, d, umap, seed)))
            }
        }
    };
    Ok(ProjectionModel {
        method,
        input_dim: p,
        output_dim: d,
        seed,
        fitted,
    })
}

impl ProjectionModel {
    pub fn method(&self) -> ProjectionMethod {
        self.method
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn pca(&self) -> Option<&PcaFit> {
        match &self.fitted {
            Fitted::Pca(p) => Some(p),
            _ => None,
        }
    }

    /// Hyperparameters for run manifests.
    pub fn describe(&self) -> serde_json::Value {
        let mut v = serde_json::json!({
            "method": self.method,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "seed": self.seed,
        });
        if let Fitted::Umap(u) = &self.fitted {
            v["umap"] = serde_json::to_value(u.params()).expect("serializable");
        }
        v
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, ProfileError> {
        if x.ncols() != self.input_dim {
            return Err(ProfileError::DimensionMismatch {
                expected: self.input_dim,
                got: x.ncols(),
            });
        }
        Ok(match &self.fitted {
            Fitted::Identity => x.to_owned(),
            Fitted::Pca(p) => p.transform(x),
            Fitted::Umap(u) => u.transform(x),
        })
    }

    pub fn project(
        &self,
        user_ids: &[String],
        x: ArrayView2<f64>,
    ) -> Result<Vec<ProfileTarget>, ProfileError> {
        if user_ids.len() != x.nrows() {
            return Err(ProfileError::DimensionMismatch {
                expected: x.nrows(),
                got: user_ids.len(),
            });
        }
        let y = self.apply(x)?;
        Ok(user_ids
            .iter()
            .zip(y.rows())
            .map(|(u, r)| ProfileTarget {
                user_id: u.clone(),
                vector: r.iter().map(|&v| v as f32).collect(),
                frozen: true,
            })
            .collect())
    }
}
