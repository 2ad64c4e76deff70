//! Lloyd's k-means with k-means++ seeding, used to initialize fits.

use rand::Rng;

use crate::error::{invalid, Error, Result};

/// Result of [`kmeans`].
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub wcss: f64,
}

const MAX_ITER: usize = 300;
const MAX_RESEEDS: usize = 10;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn seed_centers<R: Rng>(data: &[f64], n: usize, d: usize, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let row = |i: usize| &data[i * d..(i + 1) * d];
    let mut centers = vec![row(rng.gen_range(0..n)).to_vec()];
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in dist.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centers.push(row(pick).to_vec());
        let c = centers.last().unwrap();
        for (i, slot) in dist.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(row(i), c));
        }
    }
    centers
}

/// Lloyd iterations from given centers; `None` if a cluster empties.
fn lloyd(data: &[f64], n: usize, d: usize, mut centers: Vec<Vec<f64>>) -> Option<KMeans> {
    let k = centers.len();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..MAX_ITER {
        let mut changed = false;
        for i in 0..n {
            let x = &data[i * d..(i + 1) * d];
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let dist = sq_dist(x, center);
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; d]; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for j in 0..d {
                sums[labels[i]][j] += data[i * d + j];
            }
        }
        if counts.contains(&0) {
            return None;
        }
        for c in 0..k {
            for j in 0..d {
                centers[c][j] = sums[c][j] / counts[c] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    let wcss = (0..n)
        .map(|i| sq_dist(&data[i * d..(i + 1) * d], &centers[labels[i]]))
        .sum();
    Some(KMeans {
        labels,
        centers,
        wcss,
    })
}

/// Cluster the row-major `n×d` matrix `data` into `k` groups, keeping the
/// best of `starts` k-means++ seedings by within-cluster sum of squares.
/// A seeding whose clusters empty out is redrawn, at most ten times in total.
pub fn kmeans<R: Rng>(data: &[f64], n: usize, d: usize, k: usize, starts: usize, rng: &mut R) -> Result<KMeans> {
    if k == 0 || starts == 0 {
        return invalid("k-means needs k ≥ 1 and at least one start");
    }
    if data.len() != n * d {
        return invalid("k-means data has the wrong size");
    }
    if k > n {
        return invalid(format!("cannot form {k} clusters from {n} samples"));
    }
    let mut best: Option<KMeans> = None;
    let mut reseeds = 0;
    let mut done = 0;
    while done < starts {
        let centers = seed_centers(data, n, d, k, rng);
        match lloyd(data, n, d, centers) {
            Some(fit) => {
                done += 1;
                if best.as_ref().is_none_or(|b| fit.wcss < b.wcss) {
                    best = Some(fit);
                }
            }
            None => {
                reseeds += 1;
                if reseeds > MAX_RESEEDS {
                    return Err(Error::KMeansEmptyCluster { attempts: MAX_RESEEDS });
                }
            }
        }
    }
    Ok(best.expect("at least one start completed"))
}
