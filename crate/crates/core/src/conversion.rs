//! Frame-wise conversion of a source sequence against a reference bag of frames.
//!
//! [`sinkvc_convert`] solves one entropic OT problem between all source and
//! reference frames under the cosine cost and replaces each source frame by
//! the mean of the `k` reference frames it sends the most mass to.
//! [`knn_convert`] is the plain nearest-neighbour baseline. Both keep the
//! source frame count, so the temporal alignment is preserved.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::ot::{cost_matrix, plan_top_k_map, sinkhorn, top_k_indices, uniform_marginal, CostKind, CostMatrix, SinkhornConfig, TransportPlan};

/// Default number of reference frames averaged per output frame.
pub const DEFAULT_TOP_K: usize = 4;

/// A sequence (or bag) of feature frames, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub frames: Matrix,
    /// Frames per second; metadata only.
    pub frame_rate_hint: Option<f64>,
    pub tag: Option<String>,
}

impl FeatureMatrix {
    pub fn new(frames: Matrix) -> Result<Self> {
        frames.check_finite("feature frames")?;
        Ok(Self { frames, frame_rate_hint: None, tag: None })
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = Some(tag.into());
        self
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConversionMethod {
    Sinkvc,
    Knn,
    Fmvc,
}

impl ConversionMethod {
    pub fn name(self) -> &'static str {
        match self {
            ConversionMethod::Sinkvc => "sinkvc",
            ConversionMethod::Knn => "knn",
            ConversionMethod::Fmvc => "fmvc",
        }
    }
}

impl std::str::FromStr for ConversionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinkvc" => Ok(ConversionMethod::Sinkvc),
            "knn" => Ok(ConversionMethod::Knn),
            "fmvc" => Ok(ConversionMethod::Fmvc),
            other => Err(Error::Validation(format!("unknown conversion method `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanStats {
    pub epsilon: f64,
    pub iterations_used: usize,
    pub marginal_error: f64,
}

impl From<&TransportPlan> for PlanStats {
    fn from(plan: &TransportPlan) -> Self {
        Self { epsilon: plan.epsilon, iterations_used: plan.iterations_used, marginal_error: plan.marginal_error }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    /// Absent for kNN, which solves no transport problem.
    pub plan_stats: Option<PlanStats>,
    /// `⟨C, π⟩` for plan-based methods; mean cost to the selected
    /// neighbours for kNN.
    pub mean_transport_cost: f64,
    pub method: ConversionMethod,
    pub k: usize,
}

fn check_pair(source: &FeatureMatrix, reference: &FeatureMatrix, k: usize) -> Result<()> {
    if source.dim() != reference.dim() {
        return Err(Error::Validation(format!(
            "source has dim {} but reference has dim {}",
            source.dim(),
            reference.dim()
        )));
    }
    if source.is_empty() || reference.is_empty() {
        return Err(Error::Validation("source and reference need at least one frame".into()));
    }
    if k == 0 || k > reference.len() {
        return Err(Error::Validation(format!("k = {k} must be in 1..={} (reference size)", reference.len())));
    }
    Ok(())
}

/// Cosine cost and Sinkhorn plan between source and reference frames with
/// uniform marginals.
pub fn sinkvc_plan(source: &FeatureMatrix, reference: &FeatureMatrix, cfg: &SinkhornConfig) -> Result<(CostMatrix, TransportPlan)> {
    check_pair(source, reference, 1)?;
    let cost = cost_matrix(&source.frames, &reference.frames, CostKind::CosineDistance)?;
    let plan = sinkhorn(&cost, &uniform_marginal(source.len()), &uniform_marginal(reference.len()), cfg)?;
    Ok((cost, plan))
}

pub fn sinkvc_convert(
    source: &FeatureMatrix,
    reference: &FeatureMatrix,
    cfg: &SinkhornConfig,
    k: usize,
) -> Result<(FeatureMatrix, ConversionReport)> {
    check_pair(source, reference, k)?;
    let (cost, plan) = sinkvc_plan(source, reference, cfg)?;
    let frames = plan_top_k_map(&plan, &reference.frames, k)?;
    let report = ConversionReport {
        plan_stats: Some(PlanStats::from(&plan)),
        mean_transport_cost: plan.transport_cost(&cost).max(0.0),
        method: ConversionMethod::Sinkvc,
        k,
    };
    Ok((converted(frames, source), report))
}

/// Indices of the `k` most cosine-similar reference frames per source frame.
pub fn knn_indices(source: &FeatureMatrix, reference: &FeatureMatrix, k: usize) -> Result<(CostMatrix, Vec<Vec<usize>>)> {
    check_pair(source, reference, k)?;
    let cost = cost_matrix(&source.frames, &reference.frames, CostKind::CosineDistance)?;
    let neighbours = (0..source.len())
        .into_par_iter()
        .map(|i| {
            let similarity: Vec<f64> = cost.values.row(i).iter().map(|c| -c).collect();
            top_k_indices(&similarity, k)
        })
        .collect();
    Ok((cost, neighbours))
}

pub fn knn_convert(source: &FeatureMatrix, reference: &FeatureMatrix, k: usize) -> Result<(FeatureMatrix, ConversionReport)> {
    let (cost, neighbours) = knn_indices(source, reference, k)?;
    let mut frames = Matrix::zeros(source.len(), source.dim());
    let mut total = 0.0;
    for (i, idx) in neighbours.iter().enumerate() {
        let out = frames.row_mut(i);
        for &j in idx {
            total += cost.values.get(i, j);
            for (o, &v) in out.iter_mut().zip(reference.frames.row(j)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= k as f64);
    }
    let report = ConversionReport {
        plan_stats: None,
        mean_transport_cost: (total / (source.len() * k) as f64).max(0.0),
        method: ConversionMethod::Knn,
        k,
    };
    Ok((converted(frames, source), report))
}

fn converted(frames: Matrix, source: &FeatureMatrix) -> FeatureMatrix {
    FeatureMatrix { frames, frame_rate_hint: source.frame_rate_hint, tag: source.tag.clone() }
}
