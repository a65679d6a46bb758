//! K-Means with k-means++ seeding and best-of-n restarts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub restarts: usize,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            seed,
            max_iter: 300,
            restarts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    /// `[k×d]`.
    pub centroids: Tensor,
    pub inertia: f64,
    pub n_iter: usize,
    /// Inertia after each assignment step of the winning restart.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[f64], d: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.chunks(d).enumerate() {
        let dist = sq_dist(x, mu);
        if dist < best.1 {
            best = (c, dist);
        }
    }
    best
}

fn plus_plus(data: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = data.shape()[0];
    let d = data.shape()[1];
    let mut centroids = Vec::with_capacity(k * d);
    centroids.extend_from_slice(data.row(rng.gen_range(0..n)));
    let mut closest: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), &centroids[..d])).collect();
    for _ in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in closest.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(data.row(pick));
        for (i, c) in closest.iter_mut().enumerate() {
            *c = c.min(sq_dist(data.row(i), &centroids[start..]));
        }
    }
    centroids
}

fn assign(data: &Tensor, centroids: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let d = data.shape()[1];
    (0..data.shape()[0])
        .map(|i| nearest(data.row(i), centroids, d))
        .unzip()
}

fn lloyd(data: &Tensor, k: usize, max_iter: usize, rng: &mut ChaCha8Rng) -> ClusterResult {
    let (n, d) = (data.shape()[0], data.shape()[1]);
    let mut centroids = plus_plus(data, k, rng);
    let (mut labels, mut dists) = assign(data, &centroids);
    let mut history = vec![dists.iter().sum()];
    let mut n_iter = 0;
    while n_iter < max_iter {
        n_iter += 1;
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, x) in sums[labels[i] * d..(labels[i] + 1) * d].iter_mut().zip(data.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centroids[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            } else {
                // move the empty centroid onto the worst-served point
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("non-empty data");
                centroids[c * d..(c + 1) * d].copy_from_slice(data.row(far));
                dists[far] = 0.0;
            }
        }
        let (next, next_dists) = assign(data, &centroids);
        history.push(next_dists.iter().sum());
        dists = next_dists;
        if next == labels {
            break;
        }
        labels = next;
    }
    ClusterResult {
        inertia: dists.iter().sum(),
        assignments: labels,
        centroids: Tensor::new(vec![k, d], centroids).expect("centroid shape"),
        n_iter,
        inertia_history: history,
    }
}

/// Clusters the rows of `data` (`[N×d]`); the best-inertia restart wins, ties
/// going to the earlier restart.
pub fn kmeans(data: &Tensor, config: &KMeansConfig) -> Result<ClusterResult> {
    if data.rank() != 2 {
        return Err(Error::Config(format!("kmeans expects a matrix, got {:?}", data.shape())));
    }
    let n = data.shape()[0];
    if config.k == 0 || config.k > n {
        return Err(Error::Config(format!("kmeans needs 1 <= k <= N, got k={}, N={n}", config.k)));
    }
    let restarts = config.restarts.max(1);
    let runs = par::map(restarts, |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(r as u64);
        lloyd(data, config.k, config.max_iter, &mut rng)
    });
    Ok(runs
        .into_iter()
        .reduce(|best, run| if run.inertia < best.inertia { run } else { best })
        .expect("at least one restart"))
}

#[cfg(test)]
mod tests {
    use rand_distr::{Distribution, Normal};

    use super::*;
    use crate::metrics::accuracy;

    #[test]
    fn two_pairs_hand_geometry() {
        let data = Tensor::new(vec![4, 1], vec![0.0, 2.0, 100.0, 104.0]).unwrap();
        let r = kmeans(&data, &KMeansConfig::new(2, 0)).unwrap();
        assert_eq!(r.assignments[0], r.assignments[1]);
        assert_eq!(r.assignments[2], r.assignments[3]);
        assert_ne!(r.assignments[0], r.assignments[2]);
        assert!((r.inertia - (1.0 + 1.0 + 4.0 + 4.0)).abs() < 1e-12);
    }

    #[test]
    fn k_equal_n_has_zero_inertia() {
        let data = Tensor::new(vec![5, 2], (0..10).map(|v| v as f64 * 1.7).collect()).unwrap();
        let r = kmeans(&data, &KMeansConfig::new(5, 3)).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert!(matches!(kmeans(&data, &KMeansConfig::new(6, 3)), Err(Error::Config(_))));
    }

    #[test]
    fn separated_gaussians_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let centers = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let truth: Vec<usize> = (0..150).map(|i| i % 3).collect();
        let data = Tensor::from_fn(vec![150, 2], |idx| centers[truth[idx / 2]][idx % 2] + noise.sample(&mut rng));
        let r = kmeans(&data, &KMeansConfig::new(3, 1)).unwrap();
        assert!(accuracy(&r.assignments, &truth).unwrap() >= 0.99);
    }

    #[test]
    fn inertia_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = Tensor::from_fn(vec![200, 3], |_| rng.gen_range(-1.0..1.0));
        for seed in 0..5 {
            let mut cfg = KMeansConfig::new(7, seed);
            cfg.restarts = 1;
            let r = kmeans(&data, &cfg).unwrap();
            for w in r.inertia_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{:?}", r.inertia_history);
            }
            assert_eq!(*r.inertia_history.last().unwrap(), r.inertia);
        }
    }

    #[test]
    fn duplicate_points_leave_no_empty_cluster_behind() {
        let data = Tensor::new(vec![4, 1], vec![1.0, 1.0, 1.0, 5.0]).unwrap();
        let r = kmeans(&data, &KMeansConfig::new(3, 0)).unwrap();
        assert!(r.assignments.iter().all(|&a| a < 3));
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = Tensor::from_fn(vec![120, 4], |_| rng.gen_range(-1.0..1.0));
        let a = kmeans(&data, &KMeansConfig::new(5, 9)).unwrap();
        let b = kmeans(&data, &KMeansConfig::new(5, 9)).unwrap();
        assert_eq!(a, b);
    }
}
