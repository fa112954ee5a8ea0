//! Classic Poisson image editing: assemble the discrete Dirichlet problem over
//! the mask and solve it per channel with Gauss-Seidel or conjugate gradients.
//!
//! Every mask-1 pixel is an unknown. Its four neighbours are either unknowns
//! themselves or mask-0 pixels whose target values act as the boundary
//! condition. Masks touching the frame edge are rejected.
//!
//! V-cycle multigrid is not provided; the two solvers here are enough for a
//! baseline blend and for checking the optimisation-based engine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{align, BlendInstance, ImageTensor, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    /// `v_pq = g_p - g_q` from the source alone.
    #[default]
    SourceOnly,
    /// `v_pq = (g_p - g_q) + (t_p - t_q)`: source plus target gradients.
    MixedSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PoissonSolver {
    #[default]
    GaussSeidel,
    ConjugateGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub solver: PoissonSolver,
    pub tol: f64,
    pub max_iter: usize,
}

impl SolverSettings {
    pub const DEFAULT_TOL: f64 = 1e-6;

    pub fn gauss_seidel() -> Self {
        Self {
            solver: PoissonSolver::GaussSeidel,
            tol: Self::DEFAULT_TOL,
            max_iter: 10_000,
        }
    }

    pub fn conjugate_gradient() -> Self {
        Self {
            solver: PoissonSolver::ConjugateGradient,
            tol: Self::DEFAULT_TOL,
            max_iter: 2_000,
        }
    }
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self::gauss_seidel()
    }
}

const OFFSETS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// The sparse system `|N_p| f_p - sum_{q in N_p ∩ Ω} f_q = b_p`, one row per
/// mask pixel, with one right-hand side per channel.
#[derive(Debug, Clone)]
pub struct PoissonSystem {
    pixels: Vec<(usize, usize)>,
    neighbors: Vec<[Option<usize>; 4]>,
    diagonal: Vec<f64>,
    rhs: Vec<Vec<f64>>,
    initial: Vec<Vec<f64>>,
}

impl PoissonSystem {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.rhs.len()
    }

    /// `(y, x)` of each unknown, in row order.
    pub fn pixels(&self) -> &[(usize, usize)] {
        &self.pixels
    }

    pub fn rhs(&self, channel: usize) -> &[f64] {
        &self.rhs[channel]
    }

    /// Target values on the region; the default starting guess.
    pub fn initial_guess(&self) -> &[Vec<f64>] {
        &self.initial
    }

    pub fn diagonal(&self, row: usize) -> f64 {
        self.diagonal[row]
    }

    /// Matrix entry `(p, q)`.
    pub fn coefficient(&self, p: usize, q: usize) -> f64 {
        if p == q {
            return self.diagonal[p];
        }
        if self.neighbors[p].contains(&Some(q)) {
            -1.0
        } else {
            0.0
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.len();
        (0..n)
            .map(|p| {
                let mut row = vec![0.0; n];
                row[p] = self.diagonal[p];
                for q in self.neighbors[p].iter().flatten() {
                    row[*q] -= 1.0;
                }
                row
            })
            .collect()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|p| {
                self.diagonal[p] * x[p]
                    - self.neighbors[p].iter().flatten().map(|&q| x[q]).sum::<f64>()
            })
            .collect()
    }

    fn residual_inf(&self, channel: usize, x: &[f64]) -> f64 {
        let b = &self.rhs[channel];
        self.apply(x)
            .iter()
            .zip(b)
            .map(|(ax, bi)| (bi - ax).abs())
            .fold(0.0, f64::max)
    }

    /// Writes a per-channel solution into a copy of `base`.
    pub fn scatter(&self, solution: &[Vec<f64>], base: &ImageTensor) -> ImageTensor {
        let mut out = base.clone();
        for (c, values) in solution.iter().enumerate() {
            for (&(y, x), &v) in self.pixels.iter().zip(values) {
                out.set(c, y, x, v);
            }
        }
        out
    }
}

/// Builds the system for an aligned source/target pair.
pub fn assemble_system(
    source: &ImageTensor,
    target: &ImageTensor,
    mask: &Mask,
    mode: GuidanceMode,
) -> Result<PoissonSystem> {
    if !source.same_shape(target) {
        return Err(Error::DimensionMismatch(format!(
            "source {}x{}x{} vs target {}x{}x{}",
            source.height(),
            source.width(),
            source.channels(),
            target.height(),
            target.width(),
            target.channels()
        )));
    }
    if mask.height() != target.height() || mask.width() != target.width() {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{} vs target {}x{}",
            mask.height(),
            mask.width(),
            target.height(),
            target.width()
        )));
    }
    let (h, w) = (target.height(), target.width());
    let mut index = vec![None; h * w];
    let mut pixels = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                    return Err(Error::MaskTouchesFrame { x, y });
                }
                index[y * w + x] = Some(pixels.len());
                pixels.push((y, x));
            }
        }
    }
    if pixels.is_empty() {
        return Err(Error::EmptyRegion);
    }

    let channels = target.channels();
    let mut neighbors = Vec::with_capacity(pixels.len());
    let mut rhs = vec![Vec::with_capacity(pixels.len()); channels];
    for &(y, x) in &pixels {
        let mut row = [None; 4];
        for (slot, (dy, dx)) in row.iter_mut().zip(OFFSETS) {
            let (qy, qx) = ((y as isize + dy) as usize, (x as isize + dx) as usize);
            *slot = index[qy * w + qx];
        }
        for (c, b) in rhs.iter_mut().enumerate() {
            let mut sum = 0.0;
            for (slot, (dy, dx)) in row.iter().zip(OFFSETS) {
                let (qy, qx) = ((y as isize + dy) as usize, (x as isize + dx) as usize);
                if slot.is_none() {
                    sum += target.get(c, qy, qx);
                }
                sum += source.get(c, y, x) - source.get(c, qy, qx);
                if mode == GuidanceMode::MixedSum {
                    sum += target.get(c, y, x) - target.get(c, qy, qx);
                }
            }
            b.push(sum);
        }
        neighbors.push(row);
    }
    let initial = (0..channels)
        .map(|c| pixels.iter().map(|&(y, x)| target.get(c, y, x)).collect())
        .collect();
    Ok(PoissonSystem {
        diagonal: vec![OFFSETS.len() as f64; pixels.len()],
        pixels,
        neighbors,
        rhs,
        initial,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChannelStats {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub values: Vec<Vec<f64>>,
    pub stats: Vec<ChannelStats>,
    /// Residual 2-norms after each CG iteration (empty for Gauss-Seidel).
    pub residual_history: Vec<Vec<f64>>,
}

impl Solution {
    pub fn converged(&self) -> bool {
        self.stats.iter().all(|s| s.converged)
    }
}

pub fn gauss_seidel_solve(system: &PoissonSystem, tol: f64, max_iter: usize) -> Solution {
    gauss_seidel_solve_from(system, system.initial_guess(), tol, max_iter)
}

pub fn gauss_seidel_solve_from(
    system: &PoissonSystem,
    start: &[Vec<f64>],
    tol: f64,
    max_iter: usize,
) -> Solution {
    let mut values = Vec::with_capacity(system.channels());
    let mut stats = Vec::with_capacity(system.channels());
    for c in 0..system.channels() {
        let b = &system.rhs[c];
        let mut x = start[c].clone();
        let mut residual = system.residual_inf(c, &x);
        let mut iterations = 0;
        while residual > tol && iterations < max_iter {
            for p in 0..system.len() {
                let off: f64 = system.neighbors[p].iter().flatten().map(|&q| x[q]).sum();
                x[p] = (b[p] + off) / system.diagonal[p];
            }
            iterations += 1;
            residual = system.residual_inf(c, &x);
        }
        stats.push(ChannelStats {
            iterations,
            residual,
            converged: residual <= tol,
        });
        values.push(x);
    }
    Solution {
        values,
        stats,
        residual_history: Vec::new(),
    }
}

pub fn cg_solve(system: &PoissonSystem, tol: f64, max_iter: usize) -> Solution {
    cg_solve_from(system, system.initial_guess(), tol, max_iter)
}

pub fn cg_solve_from(system: &PoissonSystem, start: &[Vec<f64>], tol: f64, max_iter: usize) -> Solution {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let inf = |a: &[f64]| a.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let mut values = Vec::with_capacity(system.channels());
    let mut stats = Vec::with_capacity(system.channels());
    let mut histories = Vec::with_capacity(system.channels());
    for c in 0..system.channels() {
        let mut x = start[c].clone();
        let mut r: Vec<f64> = system.rhs[c]
            .iter()
            .zip(system.apply(&x))
            .map(|(b, ax)| b - ax)
            .collect();
        let mut p = r.clone();
        let mut rr = dot(&r, &r);
        let mut history = vec![rr.sqrt()];
        let mut iterations = 0;
        while inf(&r) > tol && iterations < max_iter {
            let ap = system.apply(&p);
            let alpha = rr / dot(&p, &ap);
            x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
            r.iter_mut().zip(&ap).for_each(|(ri, api)| *ri -= alpha * api);
            let rr_next = dot(&r, &r);
            let beta = rr_next / rr;
            p.iter_mut().zip(&r).for_each(|(pi, ri)| *pi = ri + beta * *pi);
            rr = rr_next;
            history.push(rr.sqrt());
            iterations += 1;
        }
        let residual = system.residual_inf(c, &x);
        stats.push(ChannelStats {
            iterations,
            residual,
            converged: residual <= tol,
        });
        values.push(x);
        histories.push(history);
    }
    Solution {
        values,
        stats,
        residual_history: histories,
    }
}

pub fn solve(system: &PoissonSystem, settings: &SolverSettings) -> Solution {
    match settings.solver {
        PoissonSolver::GaussSeidel => gauss_seidel_solve(system, settings.tol, settings.max_iter),
        PoissonSolver::ConjugateGradient => cg_solve(system, settings.tol, settings.max_iter),
    }
}

/// Full Poisson blend: align, assemble, solve, paste into the target, clamp.
pub fn poisson_blend(
    instance: &BlendInstance,
    mode: GuidanceMode,
    settings: &SolverSettings,
) -> Result<(ImageTensor, Solution)> {
    let (source, mask) = align(instance)?;
    let system = assemble_system(&source, &instance.target, &mask, mode)?;
    let solution = solve(&system, settings);
    if !solution.converged() {
        log::warn!(
            "poisson solve did not reach tol {:e}: {:?}",
            settings.tol,
            solution.stats
        );
    }
    Ok((system.scatter(&solution.values, &instance.target).clamped(), solution))
}
