//! Exhaustive Local Outlier Factor, straight from the definitions.
//!
//! Every quantity is recomputed from pairwise distances on each call. Nothing
//! is cached, so this is quadratic per point and only suitable as a reference.

const EPS: f64 = 1e-12;
/// Relative margin under which two distances are the same distance.
const TIE_RTOL: f64 = 1e-9;

/// Per-dimension z-score with population stddev; constant dimensions keep scale 1.
pub fn standardize(training: &[Vec<f64>], query: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = training.len() as f64;
    let d = query.len();
    let mut mean = vec![0.0; d];
    let mut scale = vec![0.0; d];
    for dim in 0..d {
        mean[dim] = training.iter().map(|p| p[dim]).sum::<f64>() / n;
        let var = training
            .iter()
            .map(|p| (p[dim] - mean[dim]) * (p[dim] - mean[dim]))
            .sum::<f64>()
            / n;
        scale[dim] = if var.sqrt() > 0.0 { var.sqrt() } else { 1.0 };
    }
    let z = |p: &[f64]| -> Vec<f64> { (0..d).map(|i| (p[i] - mean[i]) / scale[i]).collect() };
    (training.iter().map(|p| z(p)).collect(), z(query))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// k-distance of `p` against `set`, skipping index `skip` (the point itself).
fn k_distance(p: &[f64], set: &[Vec<f64>], skip: Option<usize>, k: usize) -> f64 {
    let mut ds: Vec<f64> = set
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .map(|(_, o)| dist(p, o))
        .collect();
    ds.sort_by(f64::total_cmp);
    ds[k - 1]
}

fn neighborhood(p: &[f64], set: &[Vec<f64>], skip: Option<usize>, k: usize) -> Vec<usize> {
    let kd = k_distance(p, set, skip, k);
    (0..set.len())
        .filter(|&i| Some(i) != skip && dist(p, &set[i]) <= kd * (1.0 + TIE_RTOL))
        .collect()
}

fn reach_dist(p: &[f64], o: usize, set: &[Vec<f64>], k: usize) -> f64 {
    k_distance(&set[o], set, Some(o), k).max(dist(p, &set[o]))
}

fn lrd(p: &[f64], set: &[Vec<f64>], skip: Option<usize>, k: usize) -> f64 {
    let nb = neighborhood(p, set, skip, k);
    let sum: f64 = nb.iter().map(|&o| reach_dist(p, o, set, k)).sum();
    if sum == 0.0 {
        1.0 / EPS
    } else {
        1.0 / (sum / nb.len() as f64)
    }
}

/// LOF of `query` relative to `training` in standardized space, k clamped to n - 1.
pub fn brute_force_lof(training: &[Vec<f64>], query: &[f64], k: usize) -> f64 {
    let (set, q) = standardize(training, query);
    let k = k.min(set.len() - 1);
    if set.iter().any(|p| dist(&q, p) == 0.0) {
        return 1.0;
    }
    let nb = neighborhood(&q, &set, None, k);
    let mean_lrd: f64 = nb
        .iter()
        .map(|&o| lrd(&set[o], &set, Some(o), k))
        .sum::<f64>()
        / nb.len() as f64;
    mean_lrd / lrd(&q, &set, None, k)
}

/// A seeded dataset of `n <= 50` points in `d <= 19` dimensions with `queries`
/// query points. Every third dataset is drawn from a coarse integer grid so
/// that ties and duplicates occur.
pub struct Dataset {
    pub training: Vec<Vec<f64>>,
    pub queries: Vec<Vec<f64>>,
    pub k: usize,
}

pub fn dataset(seed: u64, queries: usize) -> Dataset {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=50);
    let d = rng.random_range(1..=19);
    let k = rng.random_range(1..=10);
    let grid = seed % 3 == 0;
    let point = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..d)
            .map(|_| {
                if grid {
                    rng.random_range(0..4) as f64
                } else {
                    rng.random_range(-50.0..50.0)
                }
            })
            .collect()
    };
    let training: Vec<Vec<f64>> = (0..n).map(|_| point(&mut rng)).collect();
    let queries = (0..queries)
        .map(|i| {
            if i % 5 == 0 {
                training[rng.random_range(0..n)].clone()
            } else {
                point(&mut rng)
            }
        })
        .collect();
    Dataset {
        training,
        queries,
        k,
    }
}

/// Pads to the full feature width; the extra dimensions are constant zero.
pub fn as_features(p: &[f64]) -> replayprobe_core::FeatureVector {
    let mut a = [0.0; replayprobe_core::detector::FEATURE_DIM];
    a[..p.len()].copy_from_slice(p);
    replayprobe_core::FeatureVector::from_array(a)
}

/// Largest |library - oracle| over `datasets` datasets of 20 queries each.
pub fn max_deviation(datasets: u64) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut compared = 0;
    for seed in 0..datasets {
        let ds = dataset(seed, 20);
        let train: Vec<_> = ds.training.iter().map(|p| as_features(p)).collect();
        let model = replayprobe_core::detector::train_lof(&train, ds.k).expect("trains");
        for q in &ds.queries {
            let got = model.lof_score(&as_features(q)).expect("lof model");
            let want = brute_force_lof(&ds.training, q, ds.k);
            let diff = (got - want).abs();
            worst = if diff.is_nan() {
                f64::INFINITY
            } else {
                worst.max(diff)
            };
            compared += 1;
        }
    }
    (worst, compared)
}
