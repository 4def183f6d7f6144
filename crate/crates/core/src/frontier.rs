//! Frontier scoring and selection with gated adaptive weighting: strong
//! semantic evidence suppresses the efficiency terms so the agent commits to
//! the relevant frontier regardless of distance or heading cost.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bev::Frontier;
use crate::scalar::{real, Real};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrontierError {
    #[error("empty input")]
    EmptyInput,
    #[error("frontier {index} has non-positive geodesic distance")]
    NonpositiveDistance { index: usize },
}

/// Weights of the composite frontier score and the relevance cap threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontierWeights<T> {
    pub relevance: T,
    pub distance: T,
    pub heading: T,
    pub info_gain: T,
    /// Relevance cap: `S_norm = min(S / relevance_cap, 1)`. Kept on the same
    /// scale as the cascade's proximity threshold.
    pub relevance_cap: T,
}

impl<T: Real> Default for FrontierWeights<T> {
    fn default() -> Self {
        Self {
            relevance: real(0.60),
            distance: real(0.55),
            heading: real(0.35),
            info_gain: real(0.10),
            relevance_cap: real(crate::cascade::DEFAULT_PROXIMITY_THRESHOLD),
        }
    }
}

impl<T: Real> FrontierWeights<T> {
    pub fn validate(&self) -> Result<(), FrontierError> {
        let ok = self.relevance >= T::zero()
            && self.distance >= T::zero()
            && self.heading >= T::zero()
            && self.info_gain >= T::zero()
            && self.relevance_cap > T::zero();
        if ok {
            Ok(())
        } else {
            Err(FrontierError::EmptyInput)
        }
    }
}

/// Alternate single-factor scorings used by the ablation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoringVariant {
    #[default]
    Full,
    RelevanceOnly,
    DistanceOnly,
    InfoGainOnly,
}

/// A frontier with its normalized score terms and composite score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredFrontier<T> {
    pub frontier: Frontier<T>,
    pub relevance_norm: T,
    pub distance_norm: T,
    pub heading_norm: T,
    pub info_gain_norm: T,
    pub score: T,
}

/// Smooth rank normalization: `0.5 + 0.5·tanh((x − mean)/std)`. Collapses to
/// 0.5 everywhere when the input is (numerically) constant, which keeps the
/// score finite on near-uniform distributions.
pub fn norm_stat<T: Real>(values: &[T]) -> Result<Vec<T>, FrontierError> {
    if values.is_empty() {
        return Err(FrontierError::EmptyInput);
    }
    let n = real::<T>(values.len() as f64);
    let mean = values.iter().copied().fold(T::zero(), |a, b| a + b) / n;
    let var = values
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .fold(T::zero(), |a, b| a + b)
        / n;
    let std = var.sqrt();
    let half = real::<T>(0.5);
    if std < real(1e-12) {
        return Ok(vec![half; values.len()]);
    }
    Ok(values
        .iter()
        .map(|&v| half + half * ((v - mean) / std).tanh())
        .collect())
}

/// Scores frontiers with the gated composite:
/// `w_s·S + (1 − S)(w_d·D + w_h·H) + w_e·E` over normalized terms, where
/// `S = min(relevance/cap, 1)`, `D = norm_stat(1/distance)`,
/// `H = norm_stat(1 − deviation/180)`, `E = norm_stat(info gain)`.
pub fn score_frontiers<T: Real>(
    frontiers: &[Frontier<T>],
    weights: &FrontierWeights<T>,
) -> Result<Vec<ScoredFrontier<T>>, FrontierError> {
    score_frontiers_variant(frontiers, weights, ScoringVariant::Full)
}

/// [`score_frontiers`] with an ablation variant selecting the score formula.
pub fn score_frontiers_variant<T: Real>(
    frontiers: &[Frontier<T>],
    weights: &FrontierWeights<T>,
    variant: ScoringVariant,
) -> Result<Vec<ScoredFrontier<T>>, FrontierError> {
    if frontiers.is_empty() {
        return Err(FrontierError::EmptyInput);
    }
    for (index, f) in frontiers.iter().enumerate() {
        if f.geodesic_distance_m <= T::zero() {
            return Err(FrontierError::NonpositiveDistance { index });
        }
    }

    let inv_d: Vec<T> = frontiers
        .iter()
        .map(|f| T::one() / f.geodesic_distance_m)
        .collect();
    let heading: Vec<T> = frontiers
        .iter()
        .map(|f| T::one() - f.heading_deviation_deg / real(180.0))
        .collect();
    let info: Vec<T> = frontiers.iter().map(|f| f.unexplored_ratio).collect();

    let d_norm = norm_stat(&inv_d)?;
    let h_norm = norm_stat(&heading)?;
    let e_norm = norm_stat(&info)?;

    Ok(frontiers
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let s_norm = (f.relevance / weights.relevance_cap).min(T::one());
            let score = match variant {
                ScoringVariant::Full => {
                    weights.relevance * s_norm
                        + (T::one() - s_norm)
                            * (weights.distance * d_norm[i] + weights.heading * h_norm[i])
                        + weights.info_gain * e_norm[i]
                }
                ScoringVariant::RelevanceOnly => s_norm,
                ScoringVariant::DistanceOnly => d_norm[i],
                ScoringVariant::InfoGainOnly => e_norm[i],
            };
            ScoredFrontier {
                frontier: f.clone(),
                relevance_norm: s_norm,
                distance_norm: d_norm[i],
                heading_norm: h_norm[i],
                info_gain_norm: e_norm[i],
                score,
            }
        })
        .collect())
}

/// Picks the best-scored frontier. Ties break toward the smaller geodesic
/// distance, then toward the earlier entry in the (deterministic) input
/// order.
pub fn select_frontier<T: Real>(
    scored: &[ScoredFrontier<T>],
) -> Result<&ScoredFrontier<T>, FrontierError> {
    let mut best: Option<&ScoredFrontier<T>> = None;
    for cand in scored {
        best = Some(match best {
            None => cand,
            Some(cur) => {
                if cand.score > cur.score
                    || (cand.score == cur.score
                        && cand.frontier.geodesic_distance_m < cur.frontier.geodesic_distance_m)
                {
                    cand
                } else {
                    cur
                }
            }
        });
    }
    best.ok_or(FrontierError::EmptyInput)
}
