//! Latent-space K-means with medoid snapping, its on-disk cache, and a
//! per-view cluster overlay.

use std::path::Path;

use clift_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{CliftError, Result};
use crate::geometry::PATCH;
use crate::imaging::Image;

pub const KMAS_MAGIC: &[u8; 4] = b"KMAS";
pub const DEFAULT_MAX_ITERS: usize = 50;

/// A partition of N tokens into K clusters, each represented by one member.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub k: usize,
    /// Cluster id per token.
    pub assignment: Vec<u32>,
    /// Token index of each cluster's representative.
    pub medoids: Vec<u32>,
}

impl ClusterAssignment {
    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Checks ids are in range, no cluster is empty and every medoid lies in
    /// its own cluster.
    pub fn validate(&self) -> Result<()> {
        if self.medoids.len() != self.k {
            return Err(CliftError::Shape(format!(
                "{} medoids for K={}",
                self.medoids.len(),
                self.k
            )));
        }
        let n = self.assignment.len();
        let mut counts = vec![0usize; self.k];
        for (i, &a) in self.assignment.iter().enumerate() {
            let a = a as usize;
            if a >= self.k {
                return Err(CliftError::Shape(format!(
                    "token {i} assigned to cluster {a} of {}",
                    self.k
                )));
            }
            counts[a] += 1;
        }
        if let Some(c) = counts.iter().position(|&c| c == 0) {
            return Err(CliftError::Shape(format!("cluster {c} is empty")));
        }
        for (c, &m) in self.medoids.iter().enumerate() {
            if m as usize >= n || self.assignment[m as usize] as usize != c {
                return Err(CliftError::Shape(format!(
                    "medoid {m} does not belong to cluster {c}"
                )));
            }
        }
        Ok(())
    }

    /// Non-medoid members of cluster `c`, ascending.
    pub fn members_excluding_medoid(&self, c: usize) -> Vec<usize> {
        let m = self.medoids[c] as usize;
        self.assignment
            .iter()
            .enumerate()
            .filter(|&(i, &a)| a as usize == c && i != m)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * (self.assignment.len() + self.medoids.len()));
        out.extend_from_slice(KMAS_MAGIC);
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.assignment.len() as u32).to_le_bytes());
        for &a in self.assignment.iter().chain(&self.medoids) {
            out.extend_from_slice(&a.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let err = |d: String| CliftError::format(origin, d);
        if bytes.len() < 12 {
            return Err(err(format!(
                "{} bytes is shorter than the 12-byte header",
                bytes.len()
            )));
        }
        if &bytes[..4] != KMAS_MAGIC {
            return Err(err("bad magic, expected KMAS".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let k = word(4) as usize;
        let n = word(8) as usize;
        let expected = (n + k)
            .checked_mul(4)
            .and_then(|b| b.checked_add(12))
            .ok_or_else(|| err("declared sizes overflow".into()))?;
        if bytes.len() != expected {
            return Err(err(format!(
                "K={k}, N={n} needs {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let assignment = (0..n).map(|i| word(12 + 4 * i)).collect();
        let medoids = (0..k).map(|i| word(12 + 4 * (n + i))).collect();
        let ca = Self {
            k,
            assignment,
            medoids,
        };
        if k == 0 || k > n {
            return Err(err(format!("K={k} is invalid for N={n}")));
        }
        ca.validate().map_err(|e| err(e.to_string()))?;
        Ok(ca)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| CliftError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| CliftError::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub clusters: ClusterAssignment,
    /// Final sum of squared distances to the cluster means.
    pub objective: f64,
    /// Objective after every Lloyd update, starting with the initial one.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center per point; ties go to the lowest cluster index.
fn assign(points: &[Vec<f64>], centers: &[Vec<f64>]) -> Vec<u32> {
    points
        .par_iter()
        .map(|p| {
            let mut best = (f64::INFINITY, 0);
            for (c, m) in centers.iter().enumerate() {
                let d = sq_dist(p, m);
                if d < best.0 {
                    best = (d, c);
                }
            }
            best.1 as u32
        })
        .collect()
}

fn means(points: &[Vec<f64>], assignment: &[u32], k: usize) -> Vec<Vec<f64>> {
    let d = points[0].len();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment) {
        counts[a as usize] += 1;
        for (s, v) in sums[a as usize].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    sums
}

fn objective(points: &[Vec<f64>], assignment: &[u32], centers: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &a)| sq_dist(p, &centers[a as usize]))
        .sum()
}

/// Moves the farthest member of the largest cluster into each empty cluster.
fn repair_empty(points: &[Vec<f64>], assignment: &mut [u32], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignment.iter() {
            counts[a as usize] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut largest = 0;
        for (c, &n) in counts.iter().enumerate() {
            if n > counts[largest] {
                largest = c;
            }
        }
        let members: Vec<usize> = (0..points.len())
            .filter(|&i| assignment[i] as usize == largest)
            .collect();
        let d = points[0].len();
        let mut mean = vec![0.0; d];
        for &i in &members {
            for (m, v) in mean.iter_mut().zip(&points[i]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= members.len() as f64);
        let mut far = (f64::NEG_INFINITY, members[0]);
        for &i in &members {
            let dist = sq_dist(&points[i], &mean);
            if dist > far.0 {
                far = (dist, i);
            }
        }
        assignment[far.1] = empty as u32;
    }
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centers = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if u < w {
                        break;
                    }
                    u -= w;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // Every remaining point coincides with a center.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[next] = true;
        centers.push(points[next].clone());
        for (w, p) in d2.iter_mut().zip(points) {
            *w = w.min(sq_dist(p, &points[next]));
        }
    }
    centers
}

/// Lloyd's algorithm from a seeded k-means++ start, then medoid snapping.
///
/// Runs until assignments stop changing or `max_iters` updates have been
/// made. Each cluster's representative is its member nearest the final mean,
/// with ties going to the lowest token index.
pub fn kmeans(
    embeddings: &Tensor<f32>,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<KMeansResult> {
    let n = embeddings.rows();
    if k < 1 || k > n {
        return Err(CliftError::InvalidArgument(format!(
            "K={k} must lie in 1..={n}"
        )));
    }
    let points: Vec<Vec<f64>> = (0..n)
        .map(|i| embeddings.row(i).iter().map(|&v| v as f64).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = kmeans_pp(&points, k, &mut rng);
    let mut assignment = assign(&points, &init);
    repair_empty(&points, &mut assignment, k);
    let mut centers = means(&points, &assignment, k);
    let mut history = vec![objective(&points, &assignment, &centers)];
    for _ in 0..max_iters {
        let mut next = assign(&points, &centers);
        repair_empty(&points, &mut next, k);
        if next == assignment {
            break;
        }
        assignment = next;
        centers = means(&points, &assignment, k);
        history.push(objective(&points, &assignment, &centers));
    }
    let mut medoids = vec![u32::MAX; k];
    let mut best = vec![f64::INFINITY; k];
    for (i, p) in points.iter().enumerate() {
        let c = assignment[i] as usize;
        let d = sq_dist(p, &centers[c]);
        if d < best[c] {
            best[c] = d;
            medoids[c] = i as u32;
        }
    }
    let clusters = ClusterAssignment {
        k,
        assignment,
        medoids,
    };
    clusters.validate()?;
    Ok(KMeansResult {
        clusters,
        objective: *history.last().unwrap(),
        history,
    })
}

/// Distinct, fairly saturated color for cluster `c`.
pub fn cluster_color(c: usize) -> [f32; 3] {
    let h = (c as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let (s, v) = (0.75, 0.95);
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let rgb = match i as u32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [rgb.0 as f32, rgb.1 as f32, rgb.2 as f32]
}

const RING: [f32; 3] = [1.0, 0.9, 0.0];

/// Blends each patch of each view with its cluster's color and draws a
/// yellow ring on every medoid patch. Tokens are expected in view order,
/// row-major patches within a view, as produced by the encoder.
pub fn export_cluster_viz(clusters: &ClusterAssignment, views: &[&Image]) -> Result<Vec<Image>> {
    let Some(first) = views.first() else {
        return Ok(Vec::new());
    };
    let (rows, cols) = (first.height / PATCH, first.width / PATCH);
    if views.len() * rows * cols != clusters.len() {
        return Err(CliftError::Shape(format!(
            "{} views of {}x{} patches do not match {} tokens",
            views.len(),
            rows,
            cols,
            clusters.len()
        )));
    }
    let mut is_medoid = vec![false; clusters.len()];
    for &m in &clusters.medoids {
        is_medoid[m as usize] = true;
    }
    let mut out = Vec::with_capacity(views.len());
    for (v, img) in views.iter().enumerate() {
        let mut o = (*img).clone();
        for r in 0..rows {
            for c in 0..cols {
                let tok = v * rows * cols + r * cols + c;
                let color = cluster_color(clusters.assignment[tok] as usize);
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        let (x, y) = (c * PATCH + dx, r * PATCH + dy);
                        let base = img.get(x, y);
                        let rad = ((dx as f32 - 3.5).powi(2) + (dy as f32 - 3.5).powi(2)).sqrt();
                        let px = if is_medoid[tok] && (2.2..=3.6).contains(&rad) {
                            RING
                        } else {
                            [
                                0.45 * base[0] + 0.55 * color[0],
                                0.45 * base[1] + 0.55 * color[1],
                                0.45 * base[2] + 0.55 * color[2],
                            ]
                        };
                        o.set(x, y, px);
                    }
                }
            }
        }
        out.push(o);
    }
    Ok(out)
}
