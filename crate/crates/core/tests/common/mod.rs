//! Independent reference implementations shared by the integration tests
//! and the acceptance runner. Everything here is written with plain loops
//! over `f64` and does not reuse library internals beyond reading weights.
#![allow(dead_code)]

use std::collections::BTreeSet;

use clift::geometry::{Camera, PluckerRay, RayCoords, Vec3};
use clift::selection::{Candidates, SelectionConfig};
use clift::tensor::{ParamStore, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor<f32>) -> Mat {
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|&v| v as f64).collect())
        .collect()
}

pub fn weight(ps: &ParamStore, name: &str) -> Mat {
    to_mat(ps.value(ps.id(name).unwrap()))
}

pub fn vector(ps: &ParamStore, name: &str) -> Vec<f64> {
    ps.value(ps.id(name).unwrap())
        .data()
        .iter()
        .map(|&v| v as f64)
        .collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn add_bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter()
        .map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn linear(ps: &ParamStore, name: &str, x: &Mat, bias: bool) -> Mat {
    let y = matmul(x, &weight(ps, &format!("{name}.weight")));
    if bias {
        add_bias(&y, &vector(ps, &format!("{name}.bias")))
    } else {
        y
    }
}

pub fn layer_norm(ps: &ParamStore, name: &str, x: &Mat) -> Mat {
    let g = vector(ps, &format!("{name}.gamma"));
    let b = vector(ps, &format!("{name}.beta"));
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mu) * inv * g[j] + b[j])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn ffn(ps: &ParamStore, name: &str, x: &Mat) -> Mat {
    let h = linear(ps, &format!("{name}.fc1"), x, true);
    let h: Mat = h
        .iter()
        .map(|r| r.iter().map(|&v| gelu(v)).collect())
        .collect();
    linear(ps, &format!("{name}.fc2"), &h, true)
}

/// Multi-head attention of `q_in` over `kv_in`; `groups[i]` lists the
/// context rows query `i` may see (all rows when `None`).
pub fn attention(
    ps: &ParamStore,
    name: &str,
    q_in: &Mat,
    kv_in: &Mat,
    heads: usize,
    groups: Option<&[Vec<usize>]>,
) -> Mat {
    let q = linear(ps, &format!("{name}.wq"), q_in, false);
    let k = linear(ps, &format!("{name}.wk"), kv_in, false);
    let v = linear(ps, &format!("{name}.wv"), kv_in, false);
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for i in 0..q.len() {
        let ctx: Vec<usize> = match groups {
            Some(g) => g[i].clone(),
            None => (0..k.len()).collect(),
        };
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let logits: Vec<f64> = ctx
                .iter()
                .map(|&j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (w, &j) in e.iter().zip(&ctx) {
                for c in cols.clone() {
                    out[i][c] += w / z * v[j][c];
                }
            }
        }
    }
    linear(ps, &format!("{name}.wo"), &out, false)
}

/// Renderer forward pass for a `[P, 384]` query grid; returns RGB patches.
pub fn naive_renderer(
    ps: &ParamStore,
    blocks: usize,
    heads: usize,
    queries: &Mat,
    tokens: &Mat,
) -> Mat {
    let mut x = linear(ps, "renderer.query", queries, true);
    for b in 0..blocks {
        let p = format!("renderer.block{b}");
        let a = attention(ps, &format!("{p}.self_attn"), &x, &x, heads, None);
        x = layer_norm(ps, &format!("{p}.norm1"), &add(&x, &a));
        let c = attention(ps, &format!("{p}.cross_attn"), &x, tokens, heads, None);
        x = layer_norm(ps, &format!("{p}.norm2"), &add(&x, &c));
        let f = ffn(ps, &format!("{p}.ffn"), &x);
        x = layer_norm(ps, &format!("{p}.norm3"), &add(&x, &f));
    }
    linear(ps, "renderer.head", &x, true)
        .iter()
        .map(|r| r.iter().map(|&v| sigmoid(v)).collect())
        .collect()
}

/// Condenser forward pass given the cluster of every token and its medoids.
pub fn naive_condenser(
    ps: &ParamStore,
    blocks: usize,
    heads: usize,
    lifts: &Mat,
    assignment: &[u32],
    medoids: &[u32],
) -> Mat {
    let k = medoids.len();
    let mut tokens: Mat = medoids.iter().map(|&m| lifts[m as usize].clone()).collect();
    // Remaining members per cluster; a lone medoid stands in for itself.
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &a) in assignment.iter().enumerate() {
        if medoids[a as usize] as usize != i {
            members[a as usize].push(i);
        }
    }
    for (c, m) in members.iter_mut().enumerate() {
        if m.is_empty() {
            m.push(medoids[c] as usize);
        }
    }
    for b in 0..blocks {
        let p = format!("condenser.block{b}");
        let t = layer_norm(ps, &format!("{p}.norm_tokens"), &tokens);
        let h = attention(ps, &format!("{p}.self_attn"), &t, &t, heads, None);
        let mut h2 = Vec::with_capacity(k);
        for c in 0..k {
            let rows: Mat = members[c].iter().map(|&i| lifts[i].clone()).collect();
            let normed = layer_norm(ps, &format!("{p}.norm_members"), &rows);
            let q = vec![h[c].clone()];
            h2.push(attention(ps, &format!("{p}.cross_attn"), &q, &normed, heads, None).remove(0));
        }
        let f = ffn(
            ps,
            &format!("{p}.ffn"),
            &layer_norm(ps, &format!("{p}.norm_ffn"), &h2),
        );
        let z = linear(ps, &format!("{p}.w_z"), &f, false);
        tokens = add(&tokens, &z);
    }
    tokens
}

/// Reassembles `[rows·cols, 192]` patch colors into an interleaved RGB buffer.
pub fn naive_unpatchify(patches: &Mat, height: usize, width: usize) -> Vec<f64> {
    let mut img = vec![0.0; height * width * 3];
    let cols = width / 8;
    for y in 0..height {
        for x in 0..width {
            let p = (y / 8) * cols + x / 8;
            let local = (y % 8) * 8 + x % 8;
            for ch in 0..3 {
                img[(y * width + x) * 3 + ch] = patches[p][local * 3 + ch];
            }
        }
    }
    img
}

// ---------------------------------------------------------------------------
// Token selection, transcribed step by step from the published pseudocode.

pub struct SelectionInput {
    /// Target camera center and the direction of every expanded patch ray.
    pub target_origin: [f64; 3],
    pub patch_dirs: Vec<[f64; 3]>,
    /// Candidate token directions and the center of the camera each came from.
    pub token_dirs: Vec<[f64; 3]>,
    pub token_origins: Vec<[f64; 3]>,
    pub mask: Vec<bool>,
    pub prev: Option<Vec<Vec<f64>>>,
    pub budget: usize,
}

pub struct SelectionOutput {
    pub selected: BTreeSet<usize>,
    /// Objective after momentum, `[patch][token]`.
    pub objective: Vec<Vec<f64>>,
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn reference_select(inp: &SelectionInput) -> SelectionOutput {
    let (w_angle, w_dist, w_mask, eta) = (1.0, 0.02, -0.03, 0.5);
    let n_patch = inp.patch_dirs.len();
    let n_tok = inp.token_dirs.len();
    let t = inp.budget;
    let n = std::cmp::max(1, t / n_patch);
    let mut d = vec![vec![0.0; n_tok]; n_patch];
    let mut patch_set = BTreeSet::new();
    for i in 0..n_patch {
        for j in 0..n_tok {
            let theta = dot3(&inp.patch_dirs[i], &inp.token_dirs[j])
                .clamp(-1.0, 1.0)
                .acos();
            let o = &inp.token_origins[j];
            let delta = ((inp.target_origin[0] - o[0]).powi(2)
                + (inp.target_origin[1] - o[1]).powi(2)
                + (inp.target_origin[2] - o[2]).powi(2))
            .sqrt();
            let m = if inp.mask.get(j).copied().unwrap_or(false) {
                1.0
            } else {
                0.0
            };
            let mut v = w_angle * theta + w_dist * delta + w_mask * m;
            if let Some(prev) = &inp.prev {
                v = (1.0 - eta) * v + eta * prev[i][j];
            }
            d[i][j] = v;
        }
        let mut order: Vec<usize> = (0..n_tok).collect();
        order.sort_by(|&a, &b| d[i][a].partial_cmp(&d[i][b]).unwrap().then(a.cmp(&b)));
        for &j in order.iter().take(n) {
            patch_set.insert(j);
        }
    }
    let global: Vec<f64> = (0..n_tok)
        .map(|j| (0..n_patch).map(|i| d[i][j]).fold(f64::INFINITY, f64::min))
        .collect();
    let by_global = |set: &mut Vec<usize>| {
        set.sort_by(|&a, &b| global[a].partial_cmp(&global[b]).unwrap().then(a.cmp(&b)));
    };
    let target = t.min(n_tok);
    let selected: BTreeSet<usize> = if patch_set.len() >= target {
        let mut v: Vec<usize> = patch_set.into_iter().collect();
        by_global(&mut v);
        v.into_iter().take(target).collect()
    } else {
        let rest = target - patch_set.len();
        let mut others: Vec<usize> = (0..n_tok).filter(|j| !patch_set.contains(j)).collect();
        by_global(&mut others);
        patch_set
            .iter()
            .copied()
            .chain(others.into_iter().take(rest))
            .collect()
    };
    SelectionOutput {
        selected,
        objective: d,
    }
}

/// Directions of the expanded patch-center rays, computed from intrinsics
/// directly.
pub fn reference_patch_dirs(cam: &Camera, grid: usize, margin: usize) -> Vec<[f64; 3]> {
    let side = grid + 2 * margin;
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let u = (c as f64 - margin as f64 + 0.5) * cam.width as f64 / grid as f64;
            let v = (r as f64 - margin as f64 + 0.5) * cam.height as f64 / grid as f64;
            let local = [(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0];
            let rot = &cam.rotation;
            let mut w = [0.0; 3];
            for (a, wa) in w.iter_mut().enumerate() {
                *wa = (0..3).map(|b| rot[(a, b)] * local[b]).sum();
            }
            let n = dot3(&w, &w).sqrt();
            out.push([w[0] / n, w[1] / n, w[2] / n]);
        }
    }
    out
}

pub fn random_unit(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n = dot3(&v, &v).sqrt();
        if n > 0.1 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Random candidate tokens spread over a few source views.
pub struct Pool {
    pub rays: Vec<RayCoords>,
    pub views: Vec<u32>,
    pub centers: Vec<[f32; 3]>,
}

impl Pool {
    pub fn random(rng: &mut ChaCha8Rng, n: usize, n_views: usize) -> Self {
        let centers: Vec<[f32; 3]> = (0..n_views)
            .map(|_| {
                [
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-2.0..2.0),
                ]
            })
            .collect();
        let mut rays = Vec::new();
        let mut views = Vec::new();
        for _ in 0..n {
            let v = rng.random_range(0..n_views);
            let c = centers[v];
            let d = random_unit(rng);
            let r = PluckerRay::from_origin_direction(
                Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64),
                Vec3::new(d[0], d[1], d[2]),
            );
            rays.push(r.to_coords());
            views.push(v as u32);
        }
        Self {
            rays,
            views,
            centers,
        }
    }

    pub fn candidates(&self) -> Candidates<'_> {
        Candidates {
            rays: &self.rays,
            source_view: &self.views,
            view_centers: &self.centers,
        }
    }

    pub fn reference_input(
        &self,
        cam: &Camera,
        cfg: &SelectionConfig,
        mask: Vec<bool>,
        prev: Option<Vec<Vec<f64>>>,
    ) -> SelectionInput {
        let c = cam.center();
        SelectionInput {
            target_origin: [c.x, c.y, c.z],
            patch_dirs: reference_patch_dirs(cam, cfg.grid, cfg.margin),
            token_dirs: self
                .rays
                .iter()
                .map(|r| {
                    let n = ((r[0] as f64).powi(2) + (r[1] as f64).powi(2) + (r[2] as f64).powi(2))
                        .sqrt();
                    [r[0] as f64 / n, r[1] as f64 / n, r[2] as f64 / n]
                })
                .collect(),
            token_origins: self
                .views
                .iter()
                .map(|&v| {
                    let c = self.centers[v as usize];
                    [c[0] as f64, c[1] as f64, c[2] as f64]
                })
                .collect(),
            mask,
            prev,
            budget: cfg.budget,
        }
    }
}

pub fn random_camera(rng: &mut ChaCha8Rng) -> Camera {
    let eye = Vec3::new(
        rng.random_range(-3.0..3.0),
        rng.random_range(0.5..2.5),
        rng.random_range(2.0..4.0),
    );
    let target = Vec3::new(
        rng.random_range(-0.5..0.5),
        rng.random_range(0.0..0.5),
        rng.random_range(-0.5..0.5),
    );
    Camera::look_at(eye, target, Vec3::y(), rng.random_range(30.0..80.0), 32, 32).unwrap()
}

pub fn random_config(rng: &mut ChaCha8Rng) -> SelectionConfig {
    SelectionConfig {
        grid: rng.random_range(1..=6),
        margin: rng.random_range(0..=2),
        budget: rng.random_range(1..=40),
        ..SelectionConfig::default()
    }
}

// ---------------------------------------------------------------------------
// Clustering.

/// Minimum within-cluster sum of squares over every 2-partition.
pub fn best_two_partition(points: &[[f64; 2]]) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    for mask in 1..(1u32 << n) - 1 {
        let mut total = 0.0;
        for side in [true, false] {
            let members: Vec<&[f64; 2]> = (0..n)
                .filter(|&i| ((mask >> i) & 1 == 1) == side)
                .map(|i| &points[i])
                .collect();
            let m = members.len() as f64;
            let cx = members.iter().map(|p| p[0]).sum::<f64>() / m;
            let cy = members.iter().map(|p| p[1]).sum::<f64>() / m;
            total += members
                .iter()
                .map(|p| (p[0] - cx).powi(2) + (p[1] - cy).powi(2))
                .sum::<f64>();
        }
        best = best.min(total);
    }
    best
}

// ---------------------------------------------------------------------------
// SSIM straight from the definition.

pub fn reference_ssim(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let (c1, c2) = ((0.01f64).powi(2), (0.03f64).powi(2));
    let mut win = 11.min(w).min(h);
    if win % 2 == 0 {
        win -= 1;
    }
    let half = (win / 2) as f64;
    let mut kern = vec![vec![0.0; win]; win];
    let mut z = 0.0;
    for (i, row) in kern.iter_mut().enumerate() {
        for (j, k) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - half, j as f64 - half);
            *k = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
            z += *k;
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        for y0 in 0..=h - win {
            for x0 in 0..=w - win {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..win {
                    for j in 0..win {
                        let k = kern[i][j] / z;
                        let idx = ((y0 + i) * w + x0 + j) * 3 + ch;
                        mx += k * a[idx];
                        my += k * b[idx];
                    }
                }
                for i in 0..win {
                    for j in 0..win {
                        let k = kern[i][j] / z;
                        let idx = ((y0 + i) * w + x0 + j) * 3 + ch;
                        sxx += k * (a[idx] - mx).powi(2);
                        syy += k * (b[idx] - my).powi(2);
                        sxy += k * (a[idx] - mx) * (b[idx] - my);
                    }
                }
                total += ((2.0 * mx * my + c1) * (2.0 * sxy + c2))
                    / ((mx * mx + my * my + c1) * (sxx + syy + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

// ---------------------------------------------------------------------------
// Parameter helpers.

/// Overwrites every parameter whose name starts with `prefix` with uniform
/// noise in `[-scale, scale]`; LayerNorm gains are centered on 1.
pub fn randomize(ps: &mut ParamStore, prefix: &str, scale: f32, rng: &mut impl Rng) {
    let ids: Vec<_> = ps
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(id, p)| (id, p.name.ends_with(".gamma")))
        .collect();
    for (id, gain) in ids {
        for v in ps.value_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale) + if gain { 1.0 } else { 0.0 };
        }
    }
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
