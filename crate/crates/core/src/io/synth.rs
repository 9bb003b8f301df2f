//! Synthetic tasks with known ground truth.
//!
//! * `gauss_shift`: `N(0, I) → N(m, I)` with `‖m‖ = 3`; the OT map is `x + m`.
//! * `gauss_affine`: `N(0, Σ₁) → N(m, Σ₂)` with random SPD covariances and
//!   `‖m‖ = 2`; the OT map is the closed-form affine Gaussian map.
//! * `clusters_outlier`: `N(0, σ²I)` source; the target mixes a near cluster
//!   (weight 0.75) with a distant outlier cluster (weight 0.25), `σ = 0.5`.
//! * `two_conditions`: embeddings `[1]` and `[−1]`, `N(0, I)` sources, targets
//!   `N(+m, I)` and `N(−m, I)` with `‖m‖ = 3`.
//!
//! Every task writes its sample files, `truth.json` (map parameters, cluster
//! centres and labels) and `dataset.json`, a conditional dataset spec over the
//! exact generating distributions.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conversion::FeatureMatrix;
use crate::error::{Error, Result};
use crate::metrics::{gaussian_ot_map, GaussianStats};
use crate::neural_ot::Sampler;
use crate::numerics::{norm, streams, Matrix, Rng};

use super::dataset_spec::{ConditionSpec, DatasetSpec, SamplerSpec};
use super::feature_file::{write_features, Dtype};
use super::write_atomic;

pub const SHIFT_NORM: f64 = 3.0;
pub const AFFINE_SHIFT_NORM: f64 = 2.0;
pub const CLUSTER_SCALE: f64 = 0.5;
pub const NEAR_WEIGHT: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthTask {
    GaussShift,
    GaussAffine,
    ClustersOutlier,
    TwoConditions,
}

impl SynthTask {
    pub fn name(self) -> &'static str {
        match self {
            SynthTask::GaussShift => "gauss_shift",
            SynthTask::GaussAffine => "gauss_affine",
            SynthTask::ClustersOutlier => "clusters_outlier",
            SynthTask::TwoConditions => "two_conditions",
        }
    }
}

impl std::str::FromStr for SynthTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss_shift" => Ok(SynthTask::GaussShift),
            "gauss_affine" => Ok(SynthTask::GaussAffine),
            "clusters_outlier" => Ok(SynthTask::ClustersOutlier),
            "two_conditions" => Ok(SynthTask::TwoConditions),
            other => Err(Error::Validation(format!(
                "unknown task `{other}` (expected gauss_shift, gauss_affine, clusters_outlier or two_conditions)"
            ))),
        }
    }
}

/// Ground truth for one condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionTruth {
    pub embedding: Vec<f64>,
    pub source_file: String,
    pub target_file: String,
    /// OT map `T(x) = A(x − source_mean) + target_mean`, when closed form.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map_a: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map_source_mean: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map_target_mean: Option<Vec<f64>>,
    /// Target cluster centres, near cluster first.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target_centres: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target_weights: Option<Vec<f64>>,
    /// Cluster index of each target row.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target_labels: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub task: SynthTask,
    pub n: usize,
    pub dim: usize,
    pub seed: u64,
    pub conditions: Vec<ConditionTruth>,
}

#[derive(Clone, Debug)]
pub struct SynthBundle {
    pub files: Vec<(String, FeatureMatrix)>,
    pub truth: SynthTruth,
    pub dataset: DatasetSpec,
}

impl SynthBundle {
    pub fn file(&self, name: &str) -> Option<&FeatureMatrix> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, f)| f)
    }
}

fn random_direction(dim: usize, length: f64, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.iter().map(|x| x * length / n).collect();
        }
    }
}

/// `B·Bᵀ/d + ½I` with `B` standard normal.
fn random_spd(dim: usize, rng: &mut Rng) -> Result<Matrix> {
    let mut b = Matrix::zeros(dim, dim);
    rng.fill_normal(b.as_mut_slice());
    let mut s = b.matmul_nt(&b)?.scale(1.0 / dim as f64);
    for i in 0..dim {
        s.set(i, i, s.get(i, i) + 0.5);
    }
    s.symmetrize()
}

fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.to_vec()).collect()
}

fn sample(spec: &SamplerSpec, n: usize, rng: &mut Rng, tag: &str) -> Result<(FeatureMatrix, Vec<usize>)> {
    let (x, labels) = spec.build(Path::new("."))?.sample_labeled(n, rng)?;
    Ok((FeatureMatrix::new(x)?.with_tag(tag), labels))
}

fn affine_truth(truth: &mut ConditionTruth, source: &GaussianStats, target: &GaussianStats) -> Result<()> {
    let map = gaussian_ot_map(source, target)?;
    truth.map_a = Some(matrix_rows(&map.a));
    truth.map_source_mean = Some(map.source_mean);
    truth.map_target_mean = Some(map.target_mean);
    Ok(())
}

fn blank_truth(embedding: Vec<f64>, source_file: &str, target_file: &str) -> ConditionTruth {
    ConditionTruth {
        embedding,
        source_file: source_file.into(),
        target_file: target_file.into(),
        map_a: None,
        map_source_mean: None,
        map_target_mean: None,
        target_centres: None,
        target_weights: None,
        target_labels: None,
    }
}

/// Draws a task's samples. All randomness comes from the data stream of `seed`.
pub fn generate(task: SynthTask, n: usize, dim: usize, seed: u64) -> Result<SynthBundle> {
    if n == 0 || dim == 0 {
        return Err(Error::Validation("synth needs n >= 1 and dim >= 1".into()));
    }
    let mut rng = Rng::new(seed).fork(streams::DATA);
    let zero = vec![0.0; dim];
    let identity = Matrix::identity(dim);
    let mut files = Vec::new();
    let mut conditions = Vec::new();
    let mut specs = Vec::new();
    match task {
        SynthTask::GaussShift => {
            let m = random_direction(dim, SHIFT_NORM, &mut rng);
            let src = SamplerSpec::isotropic(&zero, 1.0);
            let tgt = SamplerSpec::isotropic(&m, 1.0);
            files.push(("source.otf".to_string(), sample(&src, n, &mut rng, "source")?.0));
            files.push(("target.otf".to_string(), sample(&tgt, n, &mut rng, "target")?.0));
            let mut truth = blank_truth(vec![1.0], "source.otf", "target.otf");
            affine_truth(
                &mut truth,
                &GaussianStats::new(zero.clone(), identity.clone())?,
                &GaussianStats::new(m, identity.clone())?,
            )?;
            conditions.push(truth);
            specs.push(ConditionSpec { embedding: vec![1.0], source: src, target: tgt });
        }
        SynthTask::GaussAffine => {
            let s1 = random_spd(dim, &mut rng)?;
            let s2 = random_spd(dim, &mut rng)?;
            let m = random_direction(dim, AFFINE_SHIFT_NORM, &mut rng);
            let src = SamplerSpec::gaussian(&zero, &s1);
            let tgt = SamplerSpec::gaussian(&m, &s2);
            files.push(("source.otf".to_string(), sample(&src, n, &mut rng, "source")?.0));
            files.push(("target.otf".to_string(), sample(&tgt, n, &mut rng, "target")?.0));
            let mut truth = blank_truth(vec![1.0], "source.otf", "target.otf");
            affine_truth(&mut truth, &GaussianStats::new(zero.clone(), s1)?, &GaussianStats::new(m, s2)?)?;
            conditions.push(truth);
            specs.push(ConditionSpec { embedding: vec![1.0], source: src, target: tgt });
        }
        SynthTask::ClustersOutlier => {
            if dim < 2 {
                return Err(Error::Validation("clusters_outlier needs dim >= 2".into()));
            }
            let mut near = zero.clone();
            near[0] = 1.5;
            let mut far = zero.clone();
            far[0] = -6.0;
            far[1] = 6.0;
            let src = SamplerSpec::isotropic(&zero, CLUSTER_SCALE);
            let tgt = SamplerSpec::Mixture {
                weights: vec![NEAR_WEIGHT, 1.0 - NEAR_WEIGHT],
                components: vec![SamplerSpec::isotropic(&near, CLUSTER_SCALE), SamplerSpec::isotropic(&far, CLUSTER_SCALE)],
            };
            files.push(("source.otf".to_string(), sample(&src, n, &mut rng, "source")?.0));
            let (target, labels) = sample(&tgt, n, &mut rng, "target")?;
            files.push(("target.otf".to_string(), target));
            let mut truth = blank_truth(vec![1.0], "source.otf", "target.otf");
            truth.target_centres = Some(vec![near, far]);
            truth.target_weights = Some(vec![NEAR_WEIGHT, 1.0 - NEAR_WEIGHT]);
            truth.target_labels = Some(labels);
            conditions.push(truth);
            specs.push(ConditionSpec { embedding: vec![1.0], source: src, target: tgt });
        }
        SynthTask::TwoConditions => {
            let m = random_direction(dim, SHIFT_NORM, &mut rng);
            for (c, sign) in [(0usize, 1.0f64), (1, -1.0)] {
                let shift: Vec<f64> = m.iter().map(|v| sign * v).collect();
                let src = SamplerSpec::isotropic(&zero, 1.0);
                let tgt = SamplerSpec::isotropic(&shift, 1.0);
                let (sname, tname) = (format!("source_{c}.otf"), format!("target_{c}.otf"));
                files.push((sname.clone(), sample(&src, n, &mut rng, &format!("source_{c}"))?.0));
                files.push((tname.clone(), sample(&tgt, n, &mut rng, &format!("target_{c}"))?.0));
                let mut truth = blank_truth(vec![sign], &sname, &tname);
                affine_truth(
                    &mut truth,
                    &GaussianStats::new(zero.clone(), identity.clone())?,
                    &GaussianStats::new(shift, identity.clone())?,
                )?;
                conditions.push(truth);
                specs.push(ConditionSpec { embedding: vec![sign], source: src, target: tgt });
            }
        }
    }
    Ok(SynthBundle {
        files,
        truth: SynthTruth { task, n, dim, seed, conditions },
        dataset: DatasetSpec { conditions: specs },
    })
}

/// Writes sample files, `truth.json` and `dataset.json` into `dir`.
pub fn write_bundle(dir: &Path, bundle: &SynthBundle) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (name, features) in &bundle.files {
        let path = dir.join(name);
        write_features(&path, features, Dtype::F64)?;
        written.push(path);
    }
    let truth = dir.join("truth.json");
    write_atomic(&truth, (serde_json::to_string_pretty(&bundle.truth)? + "\n").as_bytes())?;
    written.push(truth);
    let dataset = dir.join("dataset.json");
    write_atomic(&dataset, bundle.dataset.to_json()?.as_bytes())?;
    written.push(dataset);
    Ok(written)
}

/// Sampler over the exact generating distribution of condition `c`'s target.
pub fn target_sampler(bundle: &SynthBundle, c: usize) -> Result<Sampler> {
    bundle.dataset.conditions[c].target.build(Path::new("."))
}
