//! JSON descriptions of conditional datasets for neural OT training.
//!
//! ```json
//! {"conditions": [
//!   {"embedding": [1.0],
//!    "source": {"kind": "gaussian", "mean": [0, 0], "covariance": [[1, 0], [0, 1]]},
//!    "target": {"kind": "file", "path": "target.otf"}}
//! ]}
//! ```
//!
//! `file` paths are resolved relative to the spec file's directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural_ot::{Condition, ConditionalDataset, Sampler};
use crate::numerics::Matrix;

use super::feature_file::read_features;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplerSpec {
    Gaussian { mean: Vec<f64>, covariance: Vec<Vec<f64>> },
    Mixture { weights: Vec<f64>, components: Vec<SamplerSpec> },
    File { path: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    pub embedding: Vec<f64>,
    pub source: SamplerSpec,
    pub target: SamplerSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub conditions: Vec<ConditionSpec>,
}

impl SamplerSpec {
    /// `N(mean, scale²·I)`.
    pub fn isotropic(mean: &[f64], scale: f64) -> Self {
        let d = mean.len();
        let covariance = (0..d).map(|i| (0..d).map(|j| if i == j { scale * scale } else { 0.0 }).collect()).collect();
        SamplerSpec::Gaussian { mean: mean.to_vec(), covariance }
    }

    pub fn gaussian(mean: &[f64], covariance: &Matrix) -> Self {
        SamplerSpec::Gaussian { mean: mean.to_vec(), covariance: covariance.row_iter().map(|r| r.to_vec()).collect() }
    }

    pub fn build(&self, base_dir: &Path) -> Result<Sampler> {
        match self {
            SamplerSpec::Gaussian { mean, covariance } => {
                let cov = Matrix::from_rows(covariance)?;
                Sampler::gaussian(mean.clone(), &cov)
            }
            SamplerSpec::Mixture { weights, components } => {
                let built = components.iter().map(|c| c.build(base_dir)).collect::<Result<Vec<_>>>()?;
                Sampler::mixture(weights.clone(), built)
            }
            SamplerSpec::File { path } => Sampler::empirical(read_features(&base_dir.join(path))?.frames),
        }
    }
}

impl DatasetSpec {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("dataset spec: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn build(&self, base_dir: &Path) -> Result<ConditionalDataset> {
        let conditions = self
            .conditions
            .iter()
            .map(|c| {
                Ok(Condition {
                    embedding: c.embedding.clone(),
                    source: c.source.build(base_dir)?,
                    target: c.target.build(base_dir)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ConditionalDataset::new(conditions)
    }

    /// Loads and builds, resolving file samplers next to `path`.
    pub fn load_dataset(path: &Path) -> Result<ConditionalDataset> {
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        Self::load(path)?.build(dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conversion::FeatureMatrix;
    use crate::io::feature_file::{write_features, Dtype};
    use crate::numerics::Rng;

    #[test]
    fn parses_all_sampler_kinds() {
        let dir = tempfile::tempdir().unwrap();
        let frames = Matrix::from_rows(&[[5.0, 5.0], [6.0, 6.0]]).unwrap();
        write_features(&dir.path().join("t.otf"), &FeatureMatrix::new(frames).unwrap(), Dtype::F64).unwrap();
        let text = r#"{"conditions": [
            {"embedding": [1.0],
             "source": {"kind": "gaussian", "mean": [0, 0], "covariance": [[1, 0], [0, 1]]},
             "target": {"kind": "file", "path": "t.otf"}},
            {"embedding": [-1.0],
             "source": {"kind": "mixture", "weights": [1, 1], "components": [
                {"kind": "gaussian", "mean": [0, 0], "covariance": [[1, 0], [0, 1]]},
                {"kind": "gaussian", "mean": [9, 9], "covariance": [[1, 0], [0, 1]]}]},
             "target": {"kind": "gaussian", "mean": [1, 1], "covariance": [[2, 0], [0, 2]]}}
        ]}"#;
        let spec = DatasetSpec::parse(text).unwrap();
        let ds = spec.build(dir.path()).unwrap();
        assert_eq!((ds.len(), ds.dim(), ds.condition_dim()), (2, 2, 1));
        let y = ds.condition(0).target.sample(10, &mut Rng::new(1)).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 5.0 || v == 6.0));
        assert_eq!(DatasetSpec::parse(&spec.to_json().unwrap()).unwrap(), spec);
    }

    #[test]
    fn rejects_unknown_fields_and_bad_shapes() {
        assert!(DatasetSpec::parse(r#"{"conditions": [], "extra": 1}"#).is_err());
        let empty = DatasetSpec::parse(r#"{"conditions": []}"#).unwrap();
        assert!(empty.build(Path::new(".")).is_err());
        let mismatched = DatasetSpec {
            conditions: vec![ConditionSpec {
                embedding: vec![1.0],
                source: SamplerSpec::isotropic(&[0.0, 0.0], 1.0),
                target: SamplerSpec::isotropic(&[0.0, 0.0, 0.0], 1.0),
            }],
        };
        assert!(mismatched.build(Path::new(".")).is_err());
    }
}
