//! Frame reconstruction from (patterns, measurements): the correlation
//! estimator and isotropic total-variation minimization.
//!
//! The TV solver minimizes
//!
//! ```text
//!     sum_i ||D_i x||_2 + (mu / 2) ||A x - b||^2     subject to x >= 0
//! ```
//!
//! by splitting `w_i = D_i x` with an augmented Lagrangian on the split.
//! Each outer iteration shrinks `w`, takes projected Barzilai-Borwein steps
//! on `x`, and updates the split multipliers. [`TvModel::Equality`] adds a
//! multiplier on `A x = b` so the data constraint is met exactly at
//! convergence.
//!
//! Internally the system is normalized: `A` is divided by its spectral norm
//! and `x` by an estimate of the mean pixel value, so `mu` and `beta` act
//! on an image of unit scale.

use std::sync::{Arc, OnceLock};

use rayon::prelude::*;

use crate::demux::FrameMeasurements;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numeric::{axpy, axpy_f32, dot, dot_f32, norm2, DdAccum};
use crate::patterns::PatternStack;
use crate::rng::{self, Domain};

pub mod export;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preprocessing {
    Raw,
    /// Column means removed from `A` and the mean removed from `b`; the mean
    /// equation is enforced separately.
    MeanCentered,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TvModel {
    /// TV plus quadratic data fidelity.
    Penalized,
    /// TV subject to `A x = b`, via a multiplier on the data constraint.
    Equality,
}

/// Dense row-major sensing matrix, one row per realization, stored in
/// single precision like the patterns themselves.
#[derive(Clone, Debug)]
pub struct SensingMatrix {
    rows: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    /// Mean row removed by centering.
    mean_row: Option<Vec<f64>>,
    zero_rows: Vec<usize>,
    norm: OnceLock<f64>,
}

impl SensingMatrix {
    pub fn from_stack(stack: &PatternStack) -> Self {
        let data = stack.data().to_vec();
        let zero_rows = stack
            .patterns()
            .enumerate()
            .filter(|(_, p)| p.iter().all(|&v| v == 0.0))
            .map(|(i, _)| i)
            .collect();
        Self { rows: stack.count(), height: stack.height(), width: stack.width(), data, mean_row: None, zero_rows, norm: OnceLock::new() }
    }

    /// Build from explicit rows (`rows x (height * width)`).
    pub fn from_rows(rows: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let p = height * width;
        if rows == 0 || p == 0 || data.len() != rows * p {
            return Err(Error::DimensionMismatch(format!("{} entries for {rows}x{p}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sensing matrix"));
        }
        let zero_rows = data.chunks_exact(p).enumerate().filter(|(_, r)| r.iter().all(|&v| v == 0.0)).map(|(i, _)| i).collect();
        let data = data.into_iter().map(|v| v as f32).collect();
        Ok(Self { rows, height, width, data, mean_row: None, zero_rows, norm: OnceLock::new() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.height * self.width
    }

    pub fn is_centered(&self) -> bool {
        self.mean_row.is_some()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let p = self.cols();
        &self.data[r * p..(r + 1) * p]
    }

    /// Rows that are identically zero (permitted, reported in diagnostics).
    pub fn zero_rows(&self) -> &[usize] {
        &self.zero_rows
    }

    fn centered(&self) -> SensingMatrix {
        let p = self.cols();
        let mut mean = vec![DdAccum::default(); p];
        for row in self.data.chunks_exact(p) {
            for (m, &v) in mean.iter_mut().zip(row) {
                m.add(v as f64);
            }
        }
        let mean: Vec<f64> = mean.iter().map(|m| m.value() / self.rows as f64).collect();
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(p) {
            for (v, m) in row.iter_mut().zip(&mean) {
                *v = (*v as f64 - m) as f32;
            }
        }
        SensingMatrix {
            rows: self.rows,
            height: self.height,
            width: self.width,
            data,
            mean_row: Some(mean),
            zero_rows: self.zero_rows.clone(),
            norm: OnceLock::new(),
        }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols())) {
            *o = dot_f32(row, x);
        }
    }

    fn apply_t(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (&yr, row) in y.iter().zip(self.data.chunks_exact(self.cols())) {
            if yr != 0.0 {
                axpy_f32(yr, row, out);
            }
        }
    }

    /// One pass over `A`: `ad = A d` and `atad = A^T A d`.
    fn apply_normal(&self, d: &[f64], ad: &mut [f64], atad: &mut [f64]) {
        atad.iter_mut().for_each(|v| *v = 0.0);
        for (o, row) in ad.iter_mut().zip(self.data.chunks_exact(self.cols())) {
            let v = dot_f32(row, d);
            *o = v;
            if v != 0.0 {
                axpy_f32(v, row, atad);
            }
        }
    }

    /// Largest singular value by power iteration on `A^T A`, computed once.
    pub fn spectral_norm(&self) -> f64 {
        *self.norm.get_or_init(|| self.power_iteration())
    }

    fn power_iteration(&self) -> f64 {
        let p = self.cols();
        let mut v: Vec<f64> =
            (0..p).map(|j| rng::uniform01(rng::key(0x5eed, Domain::Solver, j as u64, 0)) - 0.5).collect();
        let mut av = vec![0.0; self.rows];
        let mut w = vec![0.0; p];
        let mut sigma = 0.0;
        for _ in 0..40 {
            let n = norm2(&v);
            if n == 0.0 {
                return 0.0;
            }
            v.iter_mut().for_each(|x| *x /= n);
            self.apply_normal(&v, &mut av, &mut w);
            let next = norm2(&av);
            let done = (next - sigma).abs() <= 1e-6 * next;
            sigma = next;
            std::mem::swap(&mut v, &mut w);
            if done {
                break;
            }
        }
        sigma
    }
}

/// Discretized measurement model `A x = b` for one frame.
#[derive(Clone, Debug)]
pub struct SensingSystem {
    pub matrix: Arc<SensingMatrix>,
    /// Measurements; centered when the matrix is.
    pub measurements: Vec<f64>,
    /// Mean measurement removed by centering (zero for raw systems).
    pub measurement_mean: f64,
}

impl SensingSystem {
    pub fn new(stack: &PatternStack, measurements: &[f64]) -> Result<Self> {
        Self::from_matrix(Arc::new(SensingMatrix::from_stack(stack)), measurements)
    }

    /// System sharing an existing matrix; raw measurements are centered when
    /// the matrix is centered.
    pub fn from_matrix(matrix: Arc<SensingMatrix>, measurements: &[f64]) -> Result<Self> {
        if measurements.len() != matrix.rows() {
            return Err(Error::DimensionMismatch(format!(
                "{} measurements for {} patterns",
                measurements.len(),
                matrix.rows()
            )));
        }
        if measurements.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("measurements"));
        }
        let (measurements, measurement_mean) = if matrix.is_centered() {
            let mean = mean_dd(measurements);
            (measurements.iter().map(|v| v - mean).collect(), mean)
        } else {
            (measurements.to_vec(), 0.0)
        };
        Ok(Self { matrix, measurements, measurement_mean })
    }

    pub fn preprocessing(&self) -> Preprocessing {
        if self.matrix.is_centered() {
            Preprocessing::MeanCentered
        } else {
            Preprocessing::Raw
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.matrix.height, self.matrix.width)
    }

    /// Residual `||A x - b||` of the uncentered model.
    pub fn residual_norm(&self, x: &[f64]) -> f64 {
        let mut ax = vec![0.0; self.matrix.rows()];
        self.matrix.apply(x, &mut ax);
        let mut ss: f64 = ax.iter().zip(&self.measurements).map(|(a, b)| (a - b) * (a - b)).sum();
        if let Some(mean_row) = &self.matrix.mean_row {
            let d = dot(mean_row, x) - self.measurement_mean;
            ss += self.matrix.rows() as f64 * d * d;
        }
        ss.sqrt()
    }
}

fn mean_dd(v: &[f64]) -> f64 {
    let mut acc = DdAccum::default();
    v.iter().for_each(|&x| acc.add(x));
    acc.value() / v.len() as f64
}

/// Apply a preprocessing mode. Centering requires at least two realizations.
pub fn preprocess(system: &SensingSystem, mode: Preprocessing) -> Result<SensingSystem> {
    match mode {
        Preprocessing::Raw => Ok(system.clone()),
        Preprocessing::MeanCentered if system.matrix.is_centered() => Ok(system.clone()),
        Preprocessing::MeanCentered => {
            if system.matrix.rows() < 2 {
                return Err(Error::invalid("mean centering needs at least two realizations"));
            }
            SensingSystem::from_matrix(Arc::new(system.matrix.centered()), &system.measurements)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TvConfig {
    /// Data-fidelity weight.
    pub mu: f64,
    /// Splitting penalty.
    pub beta: f64,
    /// Relative-change stopping threshold.
    pub outer_tol: f64,
    pub max_outer: usize,
    /// Projected gradient steps on `x` per outer iteration.
    pub inner_steps: usize,
    pub nonneg: bool,
    pub model: TvModel,
}

impl Default for TvConfig {
    fn default() -> Self {
        Self {
            mu: 256.0,
            beta: 64.0,
            outer_tol: 1e-4,
            max_outer: 300,
            inner_steps: 1,
            nonneg: true,
            model: TvModel::Penalized,
        }
    }
}

impl TvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.beta > 0.0 && self.outer_tol > 0.0) {
            return Err(Error::invalid("mu, beta and tolerance must be positive"));
        }
        if self.max_outer == 0 || self.inner_steps == 0 {
            return Err(Error::invalid("iteration limits must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ReconstructedFrame {
    pub image: Image,
    pub iterations: usize,
    /// Normalized objective at the starting point and at the result.
    pub initial_objective: f64,
    pub final_objective: f64,
    pub initial_residual_norm: f64,
    pub residual_norm: f64,
    pub converged: bool,
    /// Realizations whose pattern row was identically zero.
    pub zero_rows: usize,
}

/// `(s_x, s_y)` shortened by `t` along its own direction; radially zero
/// inside the `t` ball.
#[inline]
pub fn shrink2(gx: f64, gy: f64, t: f64) -> (f64, f64) {
    let n = gx.hypot(gy);
    if n == 0.0 {
        return (0.0, 0.0);
    }
    let s = (n - t).max(0.0) / n;
    (s * gx, s * gy)
}

/// Forward differences with replicate border (zero across the edge).
fn grad(h: usize, w: usize, x: &[f64], gx: &mut [f64], gy: &mut [f64]) {
    for r in 0..h {
        let row = &x[r * w..(r + 1) * w];
        for c in 0..w {
            let i = r * w + c;
            gx[i] = if c + 1 < w { row[c + 1] - row[c] } else { 0.0 };
            gy[i] = if r + 1 < h { x[i + w] - x[i] } else { 0.0 };
        }
    }
}

/// Adjoint of [`grad`].
fn grad_t(h: usize, w: usize, gx: &[f64], gy: &[f64], out: &mut [f64]) {
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let mut v = 0.0;
            if c + 1 < w {
                v -= gx[i];
            }
            if c > 0 {
                v += gx[i - 1];
            }
            if r + 1 < h {
                v -= gy[i];
            }
            if r > 0 {
                v += gy[i - w];
            }
            out[i] = v;
        }
    }
}

/// Isotropic total variation with replicate border.
pub fn total_variation(img: &Image) -> f64 {
    let (h, w) = (img.height, img.width);
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    grad(h, w, &img.data, &mut gx, &mut gy);
    gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).sum()
}

/// Feasible set for the image iterate.
struct Constraint<'a> {
    nonneg: bool,
    /// Mean equation `a . u = m` for centered systems.
    mean: Option<(&'a [f64], f64)>,
}

impl Constraint<'_> {
    fn project(&self, y: &mut [f64]) {
        match self.mean {
            None => {
                if self.nonneg {
                    y.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
            Some((a, m)) if !self.nonneg => {
                let tau = (dot(a, y) - m) / dot(a, a);
                axpy(-tau, a, y);
            }
            Some((a, m)) => project_weighted_simplex(y, a, m),
        }
    }
}

/// Euclidean projection onto `{u >= 0, a . u = m}` for positive weights `a`:
/// `u = max(y - tau a, 0)` with `tau` found by bisection.
fn project_weighted_simplex(y: &mut [f64], a: &[f64], m: f64) {
    if m <= 0.0 {
        y.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mass = |tau: f64| -> f64 { y.iter().zip(a).map(|(v, w)| w * (v - tau * w).max(0.0)).sum() };
    // mass is non-increasing in tau
    let mut lo = y.iter().zip(a).map(|(v, w)| if *w > 0.0 { v / w } else { 0.0 }).fold(f64::INFINITY, f64::min);
    lo = lo.min(0.0) - m / dot(a, a);
    let mut hi = y.iter().zip(a).map(|(v, w)| if *w > 0.0 { v / w } else { 0.0 }).fold(f64::NEG_INFINITY, f64::max);
    while mass(lo) < m {
        lo -= (hi - lo).abs().max(1.0);
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) > m {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi.abs().max(lo.abs()).max(1e-300) {
            break;
        }
    }
    let tau = 0.5 * (lo + hi);
    for (v, w) in y.iter_mut().zip(a) {
        *v = (*v - tau * w).max(0.0);
    }
    // exact rescale of the positive part removes residual bisection error
    let got: f64 = y.iter().zip(a).map(|(v, w)| v * w).sum();
    if got > 0.0 {
        let f = m / got;
        y.iter_mut().for_each(|v| *v *= f);
    }
}

/// Reconstruct one frame by TV minimization.
pub fn reconstruct_tv(system: &SensingSystem, cfg: &TvConfig) -> Result<ReconstructedFrame> {
    cfg.validate()?;
    let a = &*system.matrix;
    let (h, w) = (a.height, a.width);
    let p = h * w;
    let n = a.rows();
    let b = &system.measurements;

    let has_mean = a.mean_row.is_some();
    let b_all_zero = b.iter().all(|&v| v == 0.0) && system.measurement_mean == 0.0;
    if b_all_zero && (cfg.nonneg || !has_mean) {
        return Ok(ReconstructedFrame {
            image: Image::zeros(h, w),
            iterations: 1,
            initial_objective: 0.0,
            final_objective: 0.0,
            initial_residual_norm: 0.0,
            residual_norm: 0.0,
            converged: true,
            zero_rows: a.zero_rows.len(),
        });
    }

    let alpha = a.spectral_norm();
    let mean_row_zero = a.mean_row.as_ref().is_none_or(|m| m.iter().all(|&v| v == 0.0));
    if alpha == 0.0 && mean_row_zero {
        return Err(Error::invalid("sensing matrix is identically zero"));
    }

    // pixel scale estimate
    let x_scale = match &a.mean_row {
        Some(m) => system.measurement_mean / m.iter().sum::<f64>(),
        None => {
            let mut atb = vec![0.0; p];
            a.apply_t(b, &mut atb);
            let mut aatb = vec![0.0; n];
            a.apply(&atb, &mut aatb);
            let c = b.iter().sum::<f64>() / aatb.iter().sum::<f64>();
            c * atb.iter().sum::<f64>() / p as f64
        }
    };
    let x_scale = if x_scale.is_finite() && x_scale > 0.0 { x_scale } else { 1.0 };
    // normalized data: A_s = A / alpha, b_s = b / (alpha x_scale)
    let inv_alpha = if alpha > 0.0 { 1.0 / alpha } else { 0.0 };
    let bs: Vec<f64> = b.iter().map(|v| v * inv_alpha / x_scale).collect();
    let mean_target = a.mean_row.as_ref().map(|m| (m.as_slice(), system.measurement_mean / x_scale));
    let constraint = Constraint { nonneg: cfg.nonneg, mean: mean_target };

    let mut u = initial_guess(a, &bs, inv_alpha, &constraint, p);

    let (mu, beta) = (cfg.mu, cfg.beta);
    let mut lambda = vec![0.0; n];
    let mut nu_x = vec![0.0; p];
    let mut nu_y = vec![0.0; p];
    let mut gx = vec![0.0; p];
    let mut gy = vec![0.0; p];
    let mut wx = vec![0.0; p];
    let mut wy = vec![0.0; p];

    // r = A_s u - b_s - lambda / mu, q = A_s^T r
    let mut au = vec![0.0; n];
    let mut r = vec![0.0; n];
    let mut q = vec![0.0; p];
    let refresh = |u: &[f64], lambda: &[f64], au: &mut [f64], r: &mut [f64], q: &mut [f64]| {
        a.apply(u, au);
        au.iter_mut().for_each(|v| *v *= inv_alpha);
        for i in 0..n {
            r[i] = au[i] - bs[i] - lambda[i] / mu;
        }
        a.apply_t(r, q);
        q.iter_mut().for_each(|v| *v *= inv_alpha);
    };
    refresh(&u, &lambda, &mut au, &mut r, &mut q);

    let objective = |u: &[f64], au: &[f64]| -> f64 {
        let img = Image { height: h, width: w, data: u.to_vec() };
        let fit: f64 = au.iter().zip(&bs).map(|(x, y)| (x - y) * (x - y)).sum();
        total_variation(&img) + 0.5 * mu * fit
    };
    let initial_objective = objective(&u, &au);
    let initial_residual_norm = system.residual_norm(&u.iter().map(|v| v * x_scale).collect::<Vec<_>>());

    let mut grad_u = vec![0.0; p];
    let mut tmp = vec![0.0; p];
    let mut prev_u = vec![0.0; p];
    let mut prev_g = vec![0.0; p];
    let mut have_prev = false;
    let mut step = 1.0 / (8.0 * beta + mu);
    let mut d = vec![0.0; p];
    let mut ad = vec![0.0; n];
    let mut atad = vec![0.0; p];
    let mut ddx = vec![0.0; p];
    let mut ddy = vec![0.0; p];
    let mut u_old = vec![0.0; p];

    let mut iterations = 0;
    let mut converged = false;
    for k in 0..cfg.max_outer {
        iterations = k + 1;
        u_old.copy_from_slice(&u);

        // (a) shrinkage on the split variable
        grad(h, w, &u, &mut gx, &mut gy);
        for i in 0..p {
            let (sx, sy) = shrink2(gx[i] - nu_x[i] / beta, gy[i] - nu_y[i] / beta, 1.0 / beta);
            wx[i] = sx;
            wy[i] = sy;
        }

        // (b) projected BB steps on the quadratic surrogate in u
        for _ in 0..cfg.inner_steps {
            grad(h, w, &u, &mut gx, &mut gy);
            for i in 0..p {
                gx[i] -= wx[i] + nu_x[i] / beta;
                gy[i] -= wy[i] + nu_y[i] / beta;
            }
            grad_t(h, w, &gx, &gy, &mut tmp);
            for i in 0..p {
                grad_u[i] = beta * tmp[i] + mu * q[i];
            }
            if have_prev {
                let (mut ss, mut sy) = (0.0, 0.0);
                for i in 0..p {
                    let s = u[i] - prev_u[i];
                    ss += s * s;
                    sy += s * (grad_u[i] - prev_g[i]);
                }
                if sy > 0.0 && ss > 0.0 {
                    step = ss / sy;
                }
            }
            prev_u.copy_from_slice(&u);
            prev_g.copy_from_slice(&grad_u);
            have_prev = true;

            for i in 0..p {
                d[i] = u[i] - step * grad_u[i];
            }
            constraint.project(&mut d);
            for i in 0..p {
                d[i] -= u[i];
            }
            let slope = dot(&grad_u, &d);
            if !(slope < 0.0) {
                break;
            }
            a.apply_normal(&d, &mut ad, &mut atad);
            grad(h, w, &d, &mut ddx, &mut ddy);
            let curv_tv = beta * (dot(&ddx, &ddx) + dot(&ddy, &ddy));
            let curv_fit = mu * inv_alpha * inv_alpha * dot(&ad, &ad);
            let curvature = curv_tv + curv_fit;
            // exact minimizer of the quadratic along d, capped to stay feasible
            let theta = if curvature > 0.0 { (-slope / curvature).min(1.0) } else { 1.0 };
            axpy(theta, &d, &mut u);
            for i in 0..n {
                let delta = theta * ad[i] * inv_alpha;
                au[i] += delta;
                r[i] += delta;
            }
            axpy(theta * inv_alpha * inv_alpha, &atad, &mut q);
        }

        // (c) split multipliers
        grad(h, w, &u, &mut gx, &mut gy);
        for i in 0..p {
            nu_x[i] -= beta * (gx[i] - wx[i]);
            nu_y[i] -= beta * (gy[i] - wy[i]);
        }

        // data multiplier, equality model only
        let refresh_now = (k + 1) % 32 == 0;
        if cfg.model == TvModel::Equality {
            au.iter().zip(&bs).zip(lambda.iter_mut()).for_each(|((x, y), l)| *l -= mu * (x - y));
            refresh(&u, &lambda, &mut au, &mut r, &mut q);
        } else if refresh_now {
            refresh(&u, &lambda, &mut au, &mut r, &mut q);
        }

        let change: f64 = u.iter().zip(&u_old).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let base = norm2(&u_old).max(f64::EPSILON);
        if change / base < cfg.outer_tol {
            converged = true;
            break;
        }
    }

    a.apply(&u, &mut au);
    au.iter_mut().for_each(|v| *v *= inv_alpha);
    let final_objective = objective(&u, &au);
    let x: Vec<f64> = u.iter().map(|v| v * x_scale).collect();
    let residual_norm = system.residual_norm(&x);
    Ok(ReconstructedFrame {
        image: Image { height: h, width: w, data: x },
        iterations,
        initial_objective,
        final_objective,
        initial_residual_norm,
        residual_norm,
        converged,
        zero_rows: a.zero_rows.len(),
    })
}

/// `A^T b` scaled by the least-squares step along it, then made feasible.
fn initial_guess(a: &SensingMatrix, bs: &[f64], inv_alpha: f64, constraint: &Constraint, p: usize) -> Vec<f64> {
    let mut g = vec![0.0; p];
    a.apply_t(bs, &mut g);
    g.iter_mut().for_each(|v| *v *= inv_alpha);
    let mut ag = vec![0.0; a.rows()];
    a.apply(&g, &mut ag);
    ag.iter_mut().for_each(|v| *v *= inv_alpha);
    let mut u = match constraint.mean {
        Some((mean_row, m)) => {
            // centered data carry no mean; start from the uniform image that
            // satisfies the mean equation and add the scaled back-projection
            let base = m / mean_row.iter().sum::<f64>();
            let agg = dot(&ag, &ag);
            let c = if agg > 0.0 { dot(&ag, bs) / agg } else { 0.0 };
            g.iter().map(|v| base + c * v).collect()
        }
        None => {
            // mean(A_s u) = mean(b_s)
            let sum_ag: f64 = ag.iter().sum();
            let c = if sum_ag != 0.0 { bs.iter().sum::<f64>() / sum_ag } else { 0.0 };
            g.iter().map(|v| c * v).collect::<Vec<_>>()
        }
    };
    constraint.project(&mut u);
    u
}

/// Correlation ghost image `G = (1/N) sum_r (B_r - <B>)(I_r - <I>)`.
pub fn correlate_gi(stack: &PatternStack, frame: &FrameMeasurements) -> Result<Image> {
    let n = stack.count();
    if n < 2 {
        return Err(Error::invalid("correlation needs at least two realizations"));
    }
    if frame.values.len() != n {
        return Err(Error::DimensionMismatch(format!("{} measurements for {n} patterns", frame.values.len())));
    }
    let mean_b = mean_dd(&frame.values);
    let mean_i = stack.mean_pattern_accurate();
    let p = stack.pixels();
    let mut acc = vec![DdAccum::default(); p];
    for (pat, &bv) in stack.patterns().zip(&frame.values) {
        let db = bv - mean_b;
        for ((a, &iv), &mi) in acc.iter_mut().zip(pat).zip(&mean_i) {
            a.add_prod(db, iv as f64 - mi);
        }
    }
    let data = acc.iter().map(|a| a.value() / n as f64).collect();
    Image::from_vec(stack.height(), stack.width(), data)
}

impl PatternStack {
    /// Pixelwise mean, accurately rounded and independent of pattern order.
    pub(crate) fn mean_pattern_accurate(&self) -> Vec<f64> {
        let mut acc = vec![DdAccum::default(); self.pixels()];
        for pat in self.patterns() {
            for (a, &v) in acc.iter_mut().zip(pat) {
                a.add(v as f64);
            }
        }
        acc.iter().map(|a| a.value() / self.count() as f64).collect()
    }
}

/// Reconstruct every frame independently. The sensing matrix is built and
/// preprocessed once; frames run in parallel with per-frame results that do
/// not depend on the worker count.
pub fn reconstruct_movie(
    stack: &PatternStack,
    frames: &[FrameMeasurements],
    cfg: &TvConfig,
    preprocessing: Preprocessing,
) -> Result<Vec<ReconstructedFrame>> {
    if let Some(bad) = frames.iter().find(|f| f.values.len() != stack.count()) {
        return Err(Error::DimensionMismatch(format!(
            "frame {} has {} measurements, stack has {} patterns",
            bad.frame_index,
            bad.values.len(),
            stack.count()
        )));
    }
    let mut matrix = SensingMatrix::from_stack(stack);
    if preprocessing == Preprocessing::MeanCentered {
        if stack.count() < 2 {
            return Err(Error::invalid("mean centering needs at least two realizations"));
        }
        matrix = matrix.centered();
    }
    let matrix = Arc::new(matrix);
    frames
        .par_iter()
        .map(|f| reconstruct_tv(&SensingSystem::from_matrix(matrix.clone(), &f.values)?, cfg))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum ReconMethod {
    Correlation,
    Tv { config: TvConfig, preprocessing: Preprocessing },
}

impl Default for ReconMethod {
    fn default() -> Self {
        ReconMethod::Tv { config: TvConfig::default(), preprocessing: Preprocessing::MeanCentered }
    }
}

/// Images for each frame with either estimator, in frame order.
pub fn reconstruct_frames(stack: &PatternStack, frames: &[FrameMeasurements], method: &ReconMethod) -> Result<Vec<Image>> {
    match method {
        ReconMethod::Correlation => frames.par_iter().map(|f| correlate_gi(stack, f)).collect(),
        ReconMethod::Tv { config, preprocessing } => {
            Ok(reconstruct_movie(stack, frames, config, *preprocessing)?.into_iter().map(|r| r.image).collect())
        }
    }
}
