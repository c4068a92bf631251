//! k-means with farthest-point seeding and the silhouette coefficient.

use rand::Rng as _;

use crate::error::{CmglError, Result};
use crate::rng;
use crate::tape::Mat;

pub const MAX_ITER: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Mat,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd iterations from a seeded first centre followed by greedy
/// farthest-point picks (ties to the smaller index).
pub fn kmeans(x: &Mat, k: usize, seed: u64) -> Result<KMeans> {
    let n = x.nrows();
    if k < 1 || k > n {
        return Err(CmglError::Domain(format!("k = {k} clusters for {n} points")));
    }
    let mut rng = rng::stream(seed, "cluster", k as u64);
    let mut centres = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(centres[0]))).collect();
    while centres.len() < k {
        let mut pick = 0;
        for i in 0..n {
            if nearest[i] > nearest[pick] || (centres.contains(&pick) && !centres.contains(&i)) {
                pick = i;
            }
        }
        centres.push(pick);
        for i in 0..n {
            nearest[i] = nearest[i].min(sq_dist(x.row(i), x.row(pick)));
        }
    }
    let mut centroids = x.select(ndarray::Axis(0), &centres);
    let mut assignments = vec![usize::MAX; n];
    let mut iterations = 0;
    while iterations < MAX_ITER {
        iterations += 1;
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = sq_dist(x.row(i), centroids.row(c));
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for c in 0..k {
            let members: Vec<usize> = (0..n).filter(|&i| assignments[i] == c).collect();
            // an emptied cluster keeps its previous centre
            if !members.is_empty() {
                let mean = x.select(ndarray::Axis(0), &members).mean_axis(ndarray::Axis(0)).expect("non-empty");
                centroids.row_mut(c).assign(&mean);
            }
        }
    }
    let inertia = (0..n).map(|i| sq_dist(x.row(i), centroids.row(assignments[i]))).sum();
    Ok(KMeans {
        assignments,
        centroids,
        inertia,
        iterations,
    })
}

/// Mean silhouette under Euclidean distance; singletons score 0, and so
/// does any point with `max(a, b) = 0`.
pub fn silhouette(x: &Mat, assignments: &[usize]) -> Result<f64> {
    let n = x.nrows();
    if assignments.len() != n {
        return Err(CmglError::Shape(format!("{} assignments for {n} points", assignments.len())));
    }
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    let sizes: Vec<usize> = (0..k).map(|c| assignments.iter().filter(|&&a| a == c).count()).collect();
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(CmglError::Domain("silhouette needs at least two clusters".into()));
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[assignments[j]] += sq_dist(x.row(i), x.row(j)).sqrt();
            }
        }
        let own = assignments[i];
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClusterScore {
    pub k: usize,
    pub silhouette: f64,
    pub inertia: f64,
    pub sizes: Vec<usize>,
}

/// k-means and silhouette for each candidate cluster count.
pub fn cluster_sweep(x: &Mat, ks: &[usize], seed: u64) -> Result<Vec<(ClusterScore, KMeans)>> {
    ks.iter()
        .map(|&k| {
            let km = kmeans(x, k, seed)?;
            let sizes = (0..k).map(|c| km.assignments.iter().filter(|&&a| a == c).count()).collect();
            let score = ClusterScore {
                k,
                silhouette: silhouette(x, &km.assignments)?,
                inertia: km.inertia,
                sizes,
            };
            Ok((score, km))
        })
        .collect()
}
