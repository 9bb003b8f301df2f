use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, squared_distance, Matrix};

/// Ground cost between feature vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// `½‖x − y‖²`
    SquaredEuclidean,
    /// `1 − cos(x, y)`, in `[0, 2]`.
    CosineDistance,
}

impl CostKind {
    pub fn name(self) -> &'static str {
        match self {
            CostKind::SquaredEuclidean => "squared_euclidean",
            CostKind::CosineDistance => "cosine_distance",
        }
    }
}

impl std::str::FromStr for CostKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared_euclidean" | "sqeuclidean" => Ok(CostKind::SquaredEuclidean),
            "cosine_distance" | "cosine" => Ok(CostKind::CosineDistance),
            other => Err(Error::Validation(format!("unknown cost `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub values: Matrix,
    pub kind: CostKind,
}

impl CostMatrix {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn transpose(&self) -> CostMatrix {
        CostMatrix { values: self.values.transpose(), kind: self.kind }
    }

    pub fn mean(&self) -> f64 {
        self.values.sum() / (self.rows() * self.cols()).max(1) as f64
    }
}

/// Pairwise costs between the rows of `x` (m×d) and `y` (n×d).
pub fn cost_matrix(x: &Matrix, y: &Matrix, kind: CostKind) -> Result<CostMatrix> {
    if x.cols() != y.cols() {
        return Err(Error::Shape(format!("feature dims differ: {} vs {}", x.cols(), y.cols())));
    }
    x.check_finite("source features")?;
    y.check_finite("target features")?;
    let (m, n) = (x.rows(), y.rows());
    let mut values = Matrix::zeros(m, n);
    if n == 0 {
        return Ok(CostMatrix { values, kind });
    }
    match kind {
        CostKind::SquaredEuclidean => {
            values.as_mut_slice().par_chunks_mut(n).enumerate().for_each(|(i, row)| {
                let xi = x.row(i);
                for (j, c) in row.iter_mut().enumerate() {
                    *c = 0.5 * squared_distance(xi, y.row(j));
                }
            });
        }
        CostKind::CosineDistance => {
            let x_norms = row_norms(x, "source")?;
            let y_norms = row_norms(y, "target")?;
            values.as_mut_slice().par_chunks_mut(n).enumerate().for_each(|(i, row)| {
                let xi = x.row(i);
                for (j, c) in row.iter_mut().enumerate() {
                    let cos = dot(xi, y.row(j)) / (x_norms[i] * y_norms[j]);
                    *c = (1.0 - cos).clamp(0.0, 2.0);
                }
            });
        }
    }
    Ok(CostMatrix { values, kind })
}

fn row_norms(m: &Matrix, side: &str) -> Result<Vec<f64>> {
    m.row_iter()
        .enumerate()
        .map(|(i, r)| {
            let v = norm(r);
            if v > 0.0 {
                Ok(v)
            } else {
                Err(Error::Domain(format!("cosine cost: {side} row {i} has zero norm")))
            }
        })
        .collect()
}
