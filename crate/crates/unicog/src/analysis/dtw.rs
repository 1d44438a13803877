//! Dynamic time warping between latent trajectories.
//!
//! Classic dynamic program with step set {(1,0),(0,1),(1,1)} and no window
//! constraint; the accumulated cost at (len_a, len_b) is the distance.

use crate::error::{Error, Result};
use crate::latent::{LatentMind, Trajectory};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DtwMetric {
    Euclidean,
    Cosine,
}

impl std::str::FromStr for DtwMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(DtwMetric::Euclidean),
            "cosine" => Ok(DtwMetric::Cosine),
            other => Err(Error::config(format!(
                "unknown DTW metric {other} (expected euclidean or cosine)"
            ))),
        }
    }
}

/// Pointwise distance between two latent minds, computed sparsely over the
/// union of supports. Cosine distance of a zero vector against a nonzero one
/// is 1; two zero vectors are at distance 0.
pub fn pointwise_distance(a: &LatentMind, b: &LatentMind, metric: DtwMetric) -> f64 {
    match metric {
        DtwMetric::Euclidean => {
            let mut acc = 0.0;
            merge_supports(a, b, |av, bv| {
                let dl = av - bv;
                acc += dl * dl;
            });
            acc.sqrt()
        }
        DtwMetric::Cosine => {
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            merge_supports(a, b, |av, bv| {
                dot += av * bv;
                na += av * av;
                nb += bv * bv;
            });
            if na == 0.0 && nb == 0.0 {
                0.0
            } else if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                1.0 - dot / (na.sqrt() * nb.sqrt())
            }
        }
    }
}

fn merge_supports(a: &LatentMind, b: &LatentMind, mut f: impl FnMut(f64, f64)) {
    let (sa, sb) = (&a.support, &b.support);
    let (mut i, mut j) = (0usize, 0usize);
    while i < sa.len() || j < sb.len() {
        match (sa.get(i), sb.get(j)) {
            (Some(&ia), Some(&ib)) if ia == ib => {
                f(a.mu[ia], b.mu[ib]);
                i += 1;
                j += 1;
            }
            (Some(&ia), Some(&ib)) if ia < ib => {
                f(a.mu[ia], 0.0);
                i += 1;
            }
            (Some(_), Some(&ib)) => {
                f(0.0, b.mu[ib]);
                j += 1;
            }
            (Some(&ia), None) => {
                f(a.mu[ia], 0.0);
                i += 1;
            }
            (None, Some(&ib)) => {
                f(0.0, b.mu[ib]);
                j += 1;
            }
            (None, None) => unreachable!(),
        }
    }
}

/// DTW distance between two trajectories. Errors on an empty trajectory.
pub fn dtw_distance(a: &Trajectory, b: &Trajectory, metric: DtwMetric) -> Result<f64> {
    if a.minds.is_empty() || b.minds.is_empty() {
        return Err(Error::data("DTW over an empty trajectory"));
    }
    let m = a.minds.len();
    let n = b.minds.len();
    let mut prev = vec![f64::INFINITY; n + 1];
    let mut curr = vec![f64::INFINITY; n + 1];
    prev[0] = 0.0;
    for i in 1..=m {
        curr[0] = f64::INFINITY;
        for j in 1..=n {
            let cost = pointwise_distance(&a.minds[i - 1], &b.minds[j - 1], metric);
            curr[j] = cost + prev[j].min(curr[j - 1]).min(prev[j - 1]);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[n])
}
