use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;

const EULER_GAMMA: f64 = 0.577_215_664_9;

/// Average path length of an unsuccessful BST search among `n` points.
pub fn c_factor(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let m = (n - 1) as f64;
            2.0 * ((m).ln() + EULER_GAMMA) - 2.0 * m / n as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        size: usize,
    },
}

/// Nodes stored flat; index 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationTree {
    pub nodes: Vec<Node>,
}

impl IsolationTree {
    fn build(points: &[&[f64]], height_limit: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut tree = IsolationTree { nodes: Vec::new() };
        tree.grow(points, 0, height_limit, rng);
        tree
    }

    fn grow(
        &mut self,
        points: &[&[f64]],
        depth: usize,
        limit: usize,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { size: points.len() });
        if depth >= limit || points.len() <= 1 {
            return id;
        }

        let dim = points[0].len();
        let spans: Vec<(usize, f64, f64)> = (0..dim)
            .filter_map(|f| {
                let lo = points.iter().map(|p| p[f]).fold(f64::INFINITY, f64::min);
                let hi = points
                    .iter()
                    .map(|p| p[f])
                    .fold(f64::NEG_INFINITY, f64::max);
                (hi > lo).then_some((f, lo, hi))
            })
            .collect();
        if spans.is_empty() {
            return id;
        }

        let (feature, lo, hi) = spans[rng.random_range(0..spans.len())];
        let threshold = rng.random_range(lo..hi);
        let (l, r): (Vec<&[f64]>, Vec<&[f64]>) =
            points.iter().partition(|p| p[feature] < threshold);

        let left = self.grow(&l, depth + 1, limit, rng);
        let right = self.grow(&r, depth + 1, limit, rng);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    pub fn path_length(&self, x: &[f64]) -> f64 {
        let mut id = 0;
        let mut depth = 0.0;
        loop {
            match self.nodes[id] {
                Node::Leaf { size } => return depth + c_factor(size),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    id = if x[feature] < threshold { left } else { right };
                    depth += 1.0;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationForest {
    pub subsample: usize,
    pub seed: u64,
    pub trees: Vec<IsolationTree>,
}

impl IsolationForest {
    pub fn fit(
        points: &[Vec<f64>],
        trees: usize,
        subsample: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let n = points.len();
        if n < 2 {
            return Err(ModelError::InsufficientTraining { n });
        }
        if trees == 0 {
            return Err(ModelError::InvalidParameter(
                "trees must be at least 1".into(),
            ));
        }
        if subsample < 2 || subsample > n {
            return Err(ModelError::InvalidParameter(format!(
                "subsample must be in [2, {n}], got {subsample}"
            )));
        }

        let limit = (subsample as f64).log2().ceil() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trees = (0..trees)
            .map(|_| {
                let picked: Vec<&[f64]> = index::sample(&mut rng, n, subsample)
                    .into_iter()
                    .map(|i| points[i].as_slice())
                    .collect();
                IsolationTree::build(&picked, limit, &mut rng)
            })
            .collect();

        Ok(Self {
            subsample,
            seed,
            trees,
        })
    }

    /// In (0, 1]; values near 1 are anomalous, around 0.5 or below are normal.
    pub fn score(&self, x: &[f64]) -> f64 {
        let mean =
            self.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / self.trees.len() as f64;
        2f64.powf(-mean / c_factor(self.subsample))
    }
}
