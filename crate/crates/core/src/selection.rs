//! Picks which stored tokens to hand the renderer for a given target view
//! and budget.
//!
//! The target view is split into a 16×16 grid padded by a 4-cell margin.
//! Every stored token is scored against every cell ray by
//! `w_angle·θ + w_dist·δ + w_mask·m`, where `θ` is the angle between the
//! directions, `δ` the distance between the target camera and the token's
//! source camera, and `m` marks tokens used in the previous frame. Each cell
//! keeps its `n = max(1, T / cells)` best tokens; the union is then trimmed
//! or topped up to exactly `T` by each token's best score over all cells.

use crate::condenser::CliftSet;
use crate::error::{CliftError, Result};
use crate::geometry::{expanded_patch_rays, Camera, PluckerRay, RayCoords, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionConfig {
    pub w_angle: f64,
    pub w_dist: f64,
    pub w_mask: f64,
    pub momentum: f64,
    pub grid: usize,
    pub margin: usize,
    pub budget: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            w_angle: 1.0,
            w_dist: 0.02,
            w_mask: -0.03,
            momentum: 0.5,
            grid: 16,
            margin: 4,
            budget: 1,
        }
    }
}

impl SelectionConfig {
    pub fn with_budget(budget: usize) -> Self {
        Self {
            budget,
            ..Self::default()
        }
    }

    pub fn cells(&self) -> usize {
        let side = self.grid + 2 * self.margin;
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 {
            return Err(CliftError::InvalidArgument(
                "selection grid must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CliftError::InvalidArgument(format!(
                "momentum {} must lie in [0, 1)",
                self.momentum
            )));
        }
        if self.budget < 1 {
            return Err(CliftError::InvalidArgument(
                "token budget must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-frame memory carried along a trajectory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelectionState {
    /// Smoothed score per (cell, token), cell-major.
    pub prev_objective: Option<Vec<f64>>,
    /// Whether each token was used in the previous frame.
    pub prev_mask: Vec<bool>,
}

impl SelectionState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// The token pool a selection draws from.
#[derive(Clone, Copy, Debug)]
pub struct Candidates<'a> {
    pub rays: &'a [RayCoords],
    pub source_view: &'a [u32],
    pub view_centers: &'a [[f32; 3]],
}

impl<'a> From<&'a CliftSet> for Candidates<'a> {
    fn from(s: &'a CliftSet) -> Self {
        Self {
            rays: &s.rays,
            source_view: &s.source_view,
            view_centers: &s.view_centers,
        }
    }
}

impl Candidates<'_> {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.rays.is_empty() {
            return Err(CliftError::InvalidArgument("no candidate tokens".into()));
        }
        if self.source_view.len() != self.rays.len() {
            return Err(CliftError::Shape(format!(
                "{} rays but {} source views",
                self.rays.len(),
                self.source_view.len()
            )));
        }
        if self
            .source_view
            .iter()
            .any(|&v| v as usize >= self.view_centers.len())
        {
            return Err(CliftError::Shape(
                "source view without a camera center".into(),
            ));
        }
        Ok(())
    }
}

/// Score matrix, `cells × candidates`, cell-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub cells: usize,
    pub candidates: usize,
    pub values: Vec<f64>,
}

impl Scores {
    pub fn get(&self, cell: usize, cand: usize) -> f64 {
        self.values[cell * self.candidates + cand]
    }

    /// Best score of each candidate over all cells.
    pub fn best(&self) -> Vec<f64> {
        let mut best = vec![f64::INFINITY; self.candidates];
        for row in self.values.chunks(self.candidates) {
            for (b, &v) in best.iter_mut().zip(row) {
                *b = b.min(v);
            }
        }
        best
    }
}

/// Raw score of one token against one cell ray.
pub fn pair_score(
    cfg: &SelectionConfig,
    cell: &PluckerRay,
    token_dir: &Vec3,
    delta: f64,
    masked: bool,
) -> f64 {
    let theta = cell.direction.dot(token_dir).clamp(-1.0, 1.0).acos();
    cfg.w_angle * theta + cfg.w_dist * delta + if masked { cfg.w_mask } else { 0.0 }
}

/// Scores every (cell, candidate) pair and applies momentum when `state`
/// holds a previous objective; the smoothed scores are written back.
pub fn score(
    target: &Camera,
    cands: Candidates<'_>,
    state: Option<&mut SelectionState>,
    cfg: &SelectionConfig,
) -> Result<Scores> {
    cands.validate()?;
    let grid = expanded_patch_rays(target, cfg.grid, cfg.margin);
    let o_t = target.center();
    let deltas: Vec<f64> = cands
        .source_view
        .iter()
        .map(|&v| {
            let c = cands.view_centers[v as usize];
            (o_t - Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64)).norm()
        })
        .collect();
    let dirs: Vec<Vec3> = cands
        .rays
        .iter()
        .map(|r| PluckerRay::from_coords(r).direction)
        .collect();
    let n = cands.len();
    let mask = state
        .as_ref()
        .map(|s| s.prev_mask.as_slice())
        .unwrap_or(&[]);
    let mut values = Vec::with_capacity(grid.rays.len() * n);
    for cell in &grid.rays {
        for k in 0..n {
            let masked = mask.get(k).copied().unwrap_or(false);
            values.push(pair_score(cfg, cell, &dirs[k], deltas[k], masked));
        }
    }
    if let Some(st) = state {
        if let Some(prev) = &st.prev_objective {
            if prev.len() == values.len() {
                let eta = cfg.momentum;
                for (v, p) in values.iter_mut().zip(prev) {
                    *v = (1.0 - eta) * *v + eta * p;
                }
            }
        }
        st.prev_objective = Some(values.clone());
    }
    Ok(Scores {
        cells: grid.rays.len(),
        candidates: n,
        values,
    })
}

/// Chooses `min(T, pool)` unique tokens from precomputed scores, ordered by
/// ascending best score (ties by index).
pub fn select_from_scores(scores: &Scores, budget: usize) -> Result<Vec<usize>> {
    if budget < 1 {
        return Err(CliftError::InvalidArgument(
            "token budget must be at least 1".into(),
        ));
    }
    let n = scores.candidates;
    let per_cell = (budget / scores.cells).max(1).min(n);
    let mut picked = vec![false; n];
    let mut order: Vec<usize> = (0..n).collect();
    for row in scores.values.chunks(n) {
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        for &k in &order[..per_cell] {
            picked[k] = true;
        }
    }
    let best = scores.best();
    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by(|&a, &b| best[a].total_cmp(&best[b]).then(a.cmp(&b)));
    let target = budget.min(n);
    let mut chosen: Vec<usize> = ranked.iter().copied().filter(|&k| picked[k]).collect();
    if chosen.len() > target {
        chosen.truncate(target);
    } else {
        for &k in &ranked {
            if chosen.len() == target {
                break;
            }
            if !picked[k] {
                picked[k] = true;
                chosen.push(k);
            }
        }
        chosen.sort_by(|&a, &b| best[a].total_cmp(&best[b]).then(a.cmp(&b)));
    }
    Ok(chosen)
}

/// Scores and selects; with a state, the chosen set becomes the mask for
/// the next frame.
pub fn select(
    target: &Camera,
    cands: Candidates<'_>,
    mut state: Option<&mut SelectionState>,
    cfg: &SelectionConfig,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    let scores = score(target, cands, state.as_deref_mut(), cfg)?;
    let chosen = select_from_scores(&scores, cfg.budget)?;
    if let Some(st) = state {
        st.prev_mask = vec![false; cands.len()];
        for &k in &chosen {
            st.prev_mask[k] = true;
        }
    }
    Ok(chosen)
}
