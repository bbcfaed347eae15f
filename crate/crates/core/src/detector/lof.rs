//! Local Outlier Factor in novelty mode.
//!
//! Fitting precomputes every training point's k-distance and local
//! reachability density, so scoring a query costs one pass over the training
//! set. Neighborhoods include all points tied at the k-distance.

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Stand-in for a zero reachability sum, giving lrd = 1 / EPS.
pub const EPS: f64 = 1e-12;

/// Distances within this relative margin of the k-distance count as tied.
/// Standardization rounding would otherwise split exact ties arbitrarily.
pub const TIE_RTOL: f64 = 1e-9;

fn within(d: f64, k_distance: f64) -> bool {
    d <= k_distance + TIE_RTOL * k_distance
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LofParams", into = "LofParams")]
pub struct Lof {
    k: usize,
    points: Vec<Vec<f64>>,
    k_distance: Vec<f64>,
    lrd: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LofParams {
    k_eff: usize,
    training: Vec<Vec<f64>>,
}

impl TryFrom<LofParams> for Lof {
    type Error = ModelError;

    fn try_from(p: LofParams) -> Result<Self, Self::Error> {
        let n = p.training.len();
        if n >= 2 && p.k_eff > n - 1 {
            return Err(ModelError::InvalidParameter(format!(
                "k_eff {} exceeds n - 1 = {}",
                p.k_eff,
                n - 1
            )));
        }
        Lof::fit(p.training, p.k_eff)
    }
}

impl From<Lof> for LofParams {
    fn from(l: Lof) -> Self {
        LofParams {
            k_eff: l.k,
            training: l.points,
        }
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn kth_smallest(mut ds: Vec<f64>, k: usize) -> f64 {
    ds.sort_by(f64::total_cmp);
    ds[k - 1]
}

/// Sum in ascending order so the result does not depend on training order.
fn sorted_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

fn lrd_from(sum: f64, count: usize) -> f64 {
    if sum == 0.0 {
        1.0 / EPS
    } else {
        1.0 / (sum / count as f64)
    }
}

impl Lof {
    /// `k` is clamped to `n - 1`.
    pub fn fit(points: Vec<Vec<f64>>, k: usize) -> Result<Self, ModelError> {
        let n = points.len();
        if n < 2 {
            return Err(ModelError::InsufficientTraining { n });
        }
        if k == 0 {
            return Err(ModelError::InvalidParameter("k must be at least 1".into()));
        }
        let dim = points[0].len();
        if points.iter().any(|p| p.len() != dim) {
            return Err(ModelError::DimensionMismatch {
                expected: dim,
                found: points.iter().map(Vec::len).find(|&l| l != dim).unwrap_or(0),
            });
        }
        let k = k.min(n - 1);

        let mut dist = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = euclidean(&points[i], &points[j]);
                dist[i][j] = d;
                dist[j][i] = d;
            }
        }

        let k_distance: Vec<f64> = (0..n)
            .map(|i| {
                let others = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
                kth_smallest(others, k)
            })
            .collect();

        let lrd = (0..n)
            .map(|i| {
                let reach: Vec<f64> = (0..n)
                    .filter(|&j| j != i && within(dist[i][j], k_distance[i]))
                    .map(|j| k_distance[j].max(dist[i][j]))
                    .collect();
                let count = reach.len();
                lrd_from(sorted_sum(reach), count)
            })
            .collect();

        Ok(Self {
            k,
            points,
            k_distance,
            lrd,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// Exactly 1.0 when the query coincides with a training point.
    pub fn score(&self, query: &[f64]) -> f64 {
        let d: Vec<f64> = self.points.iter().map(|p| euclidean(query, p)).collect();
        if d.contains(&0.0) {
            return 1.0;
        }
        let kd = kth_smallest(d.clone(), self.k);

        let mut reach = Vec::new();
        let mut lrds = Vec::new();
        for (j, &dj) in d.iter().enumerate().filter(|(_, &dj)| within(dj, kd)) {
            reach.push(self.k_distance[j].max(dj));
            lrds.push(self.lrd[j]);
        }
        let count = reach.len();
        (sorted_sum(lrds) / count as f64) / lrd_from(sorted_sum(reach), count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(values: &[f64]) -> Vec<Vec<f64>> {
        values.iter().map(|&v| vec![v]).collect()
    }

    #[test]
    fn rejects_tiny_training_sets() {
        assert!(matches!(
            Lof::fit(line(&[1.0]), 5),
            Err(ModelError::InsufficientTraining { n: 1 })
        ));
        assert!(Lof::fit(line(&[1.0, 2.0]), 0).is_err());
    }

    #[test]
    fn k_is_clamped() {
        assert_eq!(Lof::fit(line(&[1.0, 2.0]), 5).unwrap().k(), 1);
    }

    #[test]
    fn uniform_line_inlier_and_outlier() {
        let lof = Lof::fit(line(&[0.0, 1.0, 2.0, 3.0, 4.0]), 2).unwrap();
        // Hand-derived: k-distances [2,1,1,1,2], lrds [2/3,2/3,1,2/3,2/3].
        assert!((lof.score(&[2.5]) - 5.0 / 6.0).abs() < 1e-12);
        assert!(lof.score(&[100.0]) > 10.0);
        assert_eq!(lof.score(&[3.0]), 1.0);
    }

    #[test]
    fn identical_training_points() {
        let lof = Lof::fit(line(&[7.0; 10]), 5).unwrap();
        assert_eq!(lof.score(&[7.0]), 1.0);
        assert!(lof.score(&[7.5]) > 1e6);
    }

    #[test]
    fn serde_refits_derived_state() {
        let lof = Lof::fit(line(&[0.0, 1.0, 5.0, 6.0]), 2).unwrap();
        let json = serde_json::to_string(&lof).unwrap();
        let back: Lof = serde_json::from_str(&json).unwrap();
        assert_eq!(back, lof);
    }
}
