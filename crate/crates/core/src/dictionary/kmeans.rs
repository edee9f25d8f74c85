//! Lloyd's k-means with k-means++ seeding, restarts and empty-cluster repair.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            restarts: 3,
            max_iter: 300,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// `k x dim`, row-major.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub dim: usize,
    /// Inertia after every assignment step, one list per restart.
    pub inertia_history: Vec<Vec<f64>>,
    pub converged: bool,
}

impl KMeansResult {
    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }
}

fn sq_dist(a: &[f32], c: &[f64]) -> f64 {
    a.iter().zip(c).map(|(&x, &y)| (x as f64 - y).powi(2)).sum()
}

/// Nearest centroid index (smallest index on ties) and its squared distance.
fn nearest(x: &[f32], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// One D^2-weighted draw; falls back to a uniform pick when every point
/// already coincides with a center.
fn d2_sample(d2: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let m = d2.len();
    let total: f64 = d2.iter().sum();
    if total <= 0.0 {
        return rng.gen_range(0..m);
    }
    let mut target = rng.gen::<f64>() * total;
    let mut chosen = m - 1;
    for (i, &d) in d2.iter().enumerate() {
        if d > 0.0 && target < d {
            chosen = i;
            break;
        }
        target -= d;
    }
    if d2[chosen] == 0.0 {
        chosen = d2.iter().rposition(|&d| d > 0.0).unwrap_or(chosen);
    }
    chosen
}

/// Greedy k-means++: each new center is the best of `2 + ln K` D^2-weighted
/// candidates by resulting potential.
fn plus_plus_init(samples: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let m = samples.len() / dim;
    let row = |i: usize| &samples[i * dim..(i + 1) * dim];
    let as_f64 = |i: usize| row(i).iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centroids: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..m);
    centroids.extend(as_f64(first));
    let mut d2: Vec<f64> = (0..m).map(|i| sq_dist(row(i), &centroids[..dim])).collect();
    for _ in 1..k {
        let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
        for _ in 0..trials {
            let c = as_f64(d2_sample(&d2, rng));
            let next: Vec<f64> = (0..m).map(|i| d2[i].min(sq_dist(row(i), &c))).collect();
            let potential: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|(p, _, _)| potential < *p) {
                best = Some((potential, c, next));
            }
        }
        let (_, c, next) = best.expect("at least one trial");
        centroids.extend(c);
        d2 = next;
    }
    centroids
}

struct Run {
    centroids: Vec<f64>,
    assignments: Vec<usize>,
    inertia: f64,
    history: Vec<f64>,
    converged: bool,
}

fn lloyd(samples: &[f32], dim: usize, mut centroids: Vec<f64>, k: usize, max_iter: usize) -> Run {
    let m = samples.len() / dim;
    let row = |i: usize| &samples[i * dim..(i + 1) * dim];
    let mut assignments = vec![usize::MAX; m];
    let mut history = Vec::new();
    let mut converged = false;
    let mut inertia = 0.0;
    for _ in 0..max_iter {
        let mut changed = false;
        inertia = 0.0;
        for (i, a) in assignments.iter_mut().enumerate() {
            let (j, d) = nearest(row(i), &centroids, dim);
            if *a != j {
                *a = j;
                changed = true;
            }
            inertia += d;
        }
        history.push(inertia);
        if !changed {
            converged = true;
            break;
        }
        update_centroids(samples, dim, k, &assignments, &mut centroids);
    }
    if !converged {
        inertia = 0.0;
        for (i, a) in assignments.iter_mut().enumerate() {
            let (j, d) = nearest(row(i), &centroids, dim);
            *a = j;
            inertia += d;
        }
        history.push(inertia);
    }
    Run {
        centroids,
        assignments,
        inertia,
        history,
        converged,
    }
}

/// Recomputes means; an empty cluster takes over the point farthest from
/// its centroid inside the cluster with the largest within-cluster inertia.
fn update_centroids(samples: &[f32], dim: usize, k: usize, assignments: &[usize], centroids: &mut [f64]) {
    let row = |i: usize| &samples[i * dim..(i + 1) * dim];
    let mut counts = vec![0usize; k];
    centroids.iter_mut().for_each(|c| *c = 0.0);
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for (c, &x) in centroids[a * dim..(a + 1) * dim].iter_mut().zip(row(i)) {
            *c += x as f64;
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            let n = counts[j] as f64;
            centroids[j * dim..(j + 1) * dim].iter_mut().for_each(|c| *c /= n);
        }
    }
    if counts.iter().all(|&c| c > 0) {
        return;
    }
    let mut cluster_sse = vec![0.0f64; k];
    let mut dists: Vec<f64> = Vec::with_capacity(assignments.len());
    for (i, &a) in assignments.iter().enumerate() {
        let d = sq_dist(row(i), &centroids[a * dim..(a + 1) * dim]);
        cluster_sse[a] += d;
        dists.push(d);
    }
    let mut taken = vec![false; assignments.len()];
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let donor = (0..k)
            .filter(|&c| counts[c] > 1)
            .max_by(|&a, &b| cluster_sse[a].total_cmp(&cluster_sse[b]).then(b.cmp(&a)));
        let Some(donor) = donor else { break };
        let far = assignments
            .iter()
            .enumerate()
            .filter(|&(i, &a)| a == donor && !taken[i])
            .max_by(|&(i, _), &(l, _)| dists[i].total_cmp(&dists[l]).then(l.cmp(&i)))
            .map(|(i, _)| i);
        let Some(far) = far else { continue };
        taken[far] = true;
        counts[donor] -= 1;
        cluster_sse[donor] -= dists[far];
        counts[j] = 1;
        for (c, &x) in centroids[j * dim..(j + 1) * dim].iter_mut().zip(row(far)) {
            *c = x as f64;
        }
    }
}

/// Clusters `samples` (`M x dim`, row-major) into `config.k` groups under
/// Euclidean distance, keeping the restart with the lowest inertia.
pub fn kmeans(samples: &[f32], dim: usize, config: &KMeansConfig) -> Result<KMeansResult> {
    if dim == 0 || samples.len() % dim != 0 {
        return Err(Error::param(format!("{} values do not form rows of length {dim}", samples.len())));
    }
    let m = samples.len() / dim;
    if config.k == 0 || m < config.k {
        return Err(Error::param(format!("k-means needs 1 <= K <= M, got K={} M={m}", config.k)));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("k-means samples contain non-finite values".into()));
    }
    let mut best: Option<Run> = None;
    let mut history = Vec::with_capacity(config.restarts.max(1));
    for restart in 0..config.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(restart as u64 * 0x9e37_79b9));
        let init = plus_plus_init(samples, dim, config.k, &mut rng);
        let run = lloyd(samples, dim, init, config.k, config.max_iter);
        history.push(run.history.clone());
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");
    Ok(KMeansResult {
        centroids: best.centroids,
        assignments: best.assignments,
        inertia: best.inertia,
        dim,
        inertia_history: history,
        converged: best.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_equal_m_reproduces_samples() {
        let s = [0.0f32, 0.0, 5.0, 1.0, -3.0, 2.0, 9.0, 9.0];
        let r = kmeans(&s, 2, &KMeansConfig::new(4, 1)).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut rows: Vec<Vec<f64>> = (0..4).map(|j| r.centroid(j).to_vec()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want: Vec<Vec<f64>> = s.chunks(2).map(|c| c.iter().map(|&v| v as f64).collect()).collect();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, want);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let s: Vec<f32> = (0..30).map(|i| ((i * 7) % 11) as f32 * 0.3).collect();
        let r = kmeans(&s, 3, &KMeansConfig::new(1, 5)).unwrap();
        for d in 0..3 {
            let mean = (0..10).map(|i| s[i * 3 + d] as f64).sum::<f64>() / 10.0;
            assert!((r.centroid(0)[d] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(kmeans(&[1.0, 2.0], 1, &KMeansConfig::new(3, 0)), Err(Error::Parameter(_))));
        assert!(matches!(kmeans(&[1.0, f32::NAN], 1, &KMeansConfig::new(1, 0)), Err(Error::Data(_))));
    }

    #[test]
    fn duplicates_leave_no_cluster_empty() {
        let mut s = vec![1.0f32; 20];
        s.extend([5.0, 6.0]);
        let r = kmeans(&s, 1, &KMeansConfig::new(3, 2)).unwrap();
        for h in &r.inertia_history {
            for w in h.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
            }
        }
        assert!(r.inertia.abs() < 1e-9);
    }
}
