//! The interaction functional on configurations of concentration points,
//! its gradient, constrained critical-point search, and the effective
//! weight with prescribed zeros.
//!
//! A configuration is k interior points plus l boundary points (the
//! latter tracked by global arclength). On it the functional
//!
//!   F(ξ) = Σᵢ ϱ(ξᵢ)² R(ξᵢ) + Σ_{i≠j} ϱ(ξᵢ)ϱ(ξⱼ) G(ξᵢ,ξⱼ) + Σᵢ 2ϱ(ξᵢ) log V(ξᵢ)
//!
//! is assembled from per-point Green caches rebuilt at every evaluation
//! (no interpolation between source positions; accuracy over speed). The
//! admissible set requires pairwise separations, interior depth, and a
//! weight floor of at least the configuration's `delta_guard`; straight-
//! line distances stand in for geodesic ones, which they equal for the
//! flat-metric domains bundled here.

use std::fmt::Write as _;
use std::rc::Rc;

use faer::linalg::solvers::{PartialPivLu, SelfAdjointEigen, Solve};
use faer::{Mat, Side};

use crate::error::{Error, Result};
use crate::fem::EllipticOperator;
use crate::geometry::{dist, dot, Mesh, P2};
use crate::green::{grad_green, regular_part, smooth_green_read, GreenCache};

/// A scalar function with a caller-supplied gradient, shared by handle.
#[derive(Clone)]
pub struct ScalarField {
    f: Rc<dyn Fn(P2) -> f64>,
    grad: Rc<dyn Fn(P2) -> P2>,
}

impl ScalarField {
    pub fn new(
        f: impl Fn(P2) -> f64 + 'static,
        grad: impl Fn(P2) -> P2 + 'static,
    ) -> Self {
        Self { f: Rc::new(f), grad: Rc::new(grad) }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(move |_| c, |_| [0.0, 0.0])
    }

    pub fn eval(&self, x: P2) -> f64 {
        (self.f)(x)
    }

    pub fn grad(&self, x: P2) -> P2 {
        (self.grad)(x)
    }
}

/// Weight data before the singular transform: a positive base and the
/// prescribed zeros with their multiplicities.
pub struct Weight {
    pub base: ScalarField,
    pub singular: Vec<(P2, u32)>,
}

/// The effective weight V = Ṽ·exp(−Σ (ϱ(qₘ)/2)·nₘ·G(·,qₘ)) with an
/// evaluable gradient. With no singular points it is just the base.
#[derive(Clone)]
pub struct EffectiveV {
    base: ScalarField,
    /// (cache at qₘ, (ϱ(qₘ)/2)·nₘ)
    terms: Vec<(GreenCache, f64)>,
}

impl EffectiveV {
    pub fn plain(base: ScalarField) -> Self {
        Self { base, terms: Vec::new() }
    }

    /// Zeros of the effective weight (the prescribed singular points).
    pub fn zeros(&self) -> Vec<P2> {
        self.terms.iter().map(|(c, _)| c.source).collect()
    }

    /// V(x); exactly 0 at the prescribed zeros, where the exponent
    /// diverges to −∞.
    pub fn eval(&self, x: P2) -> Result<f64> {
        let mut expo = 0.0;
        for (cache, factor) in &self.terms {
            if dist(x, cache.source) <= 1e-14 {
                return Ok(0.0);
            }
            expo -= factor * green_value(cache, x)?;
        }
        Ok(self.base.eval(x) * expo.exp())
    }

    /// ∇log V(x); finite away from the zeros.
    pub fn log_grad(&self, x: P2) -> Result<P2> {
        let v = self.base.eval(x);
        let gv = self.base.grad(x);
        let mut g = [gv[0] / v, gv[1] / v];
        for (cache, factor) in &self.terms {
            let (_, gg) = green_read(cache, x)?;
            g[0] -= factor * gg[0];
            g[1] -= factor * gg[1];
        }
        Ok(g)
    }
}

/// Build the effective weight from a base and Green caches at the
/// singular points, pairing each cache with the matching multiplicity.
pub fn build_singular_weight(w: &Weight, greens: &[GreenCache]) -> Result<EffectiveV> {
    if w.singular.len() != greens.len() {
        return Err(Error::Solve(format!(
            "{} singular points but {} Green caches",
            w.singular.len(),
            greens.len()
        )));
    }
    let mut terms = Vec::with_capacity(greens.len());
    for ((q, n), cache) in w.singular.iter().zip(greens) {
        if dist(*q, cache.source) > 1e-9 {
            return Err(Error::Solve(format!(
                "Green cache at ({:.4}, {:.4}) does not match singular point ({:.4}, {:.4})",
                cache.source[0], cache.source[1], q[0], q[1]
            )));
        }
        for (other, _) in &w.singular {
            if !std::ptr::eq(other, q) && dist(*other, *q) <= 1e-12 {
                return Err(Error::Solve("singular points must be distinct".into()));
            }
        }
        terms.push((cache.clone(), 0.5 * cache.rho * f64::from(*n)));
    }
    Ok(EffectiveV { base: w.base.clone(), terms })
}

/// G(x, source) read off a cache, smooth in x (see
/// `green::smooth_green_read`).
fn green_value(cache: &GreenCache, x: P2) -> Result<f64> {
    Ok(green_read(cache, x)?.0)
}

/// (G, ∇ₓG) at x from the smooth read.
fn green_read(cache: &GreenCache, x: P2) -> Result<(f64, P2)> {
    smooth_green_read(cache, x)
}

/// k interior points, l boundary arclengths, and the margin δ that the
/// admissible set enforces.
#[derive(Debug, Clone)]
pub struct Configuration {
    pub interior: Vec<P2>,
    pub boundary_s: Vec<f64>,
    pub delta_guard: f64,
}

impl Configuration {
    pub fn new(interior: Vec<P2>, boundary_s: Vec<f64>, delta_guard: f64) -> Self {
        Self { interior, boundary_s, delta_guard }
    }

    /// Number of search directions: two per interior point, one per
    /// boundary point.
    pub fn dim(&self) -> usize {
        2 * self.interior.len() + self.boundary_s.len()
    }

    /// All configuration points in listed order, interior first.
    pub fn points(&self, mesh: &Mesh) -> Vec<(P2, bool)> {
        let mut pts: Vec<(P2, bool)> =
            self.interior.iter().map(|&p| (p, false)).collect();
        for &s in &self.boundary_s {
            pts.push((mesh.boundary.point_at(s), true));
        }
        pts
    }

    fn pack(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        for p in &self.interior {
            v.extend_from_slice(p);
        }
        v.extend_from_slice(&self.boundary_s);
        v
    }

    fn unpack(&self, theta: &[f64], mesh: &Mesh) -> Configuration {
        let k = self.interior.len();
        let mut interior = Vec::with_capacity(k);
        for i in 0..k {
            interior.push([theta[2 * i], theta[2 * i + 1]]);
        }
        let boundary_s: Vec<f64> = theta[2 * k..]
            .iter()
            .map(|&s| s.rem_euclid(mesh.boundary.total_len))
            .collect();
        Configuration { interior, boundary_s, delta_guard: self.delta_guard }
    }
}

/// Membership in the admissible set: pairwise separations, interior
/// depth, and the weight floor all at least `delta_guard`. The error
/// names the violated constraint.
pub fn membership(mesh: &Mesh, cfg: &Configuration, v: &EffectiveV) -> Result<()> {
    let delta = cfg.delta_guard;
    if !(delta > 0.0) {
        return Err(Error::AdmissibleBoundary(format!(
            "margin delta = {delta} must be positive"
        )));
    }
    let pts = cfg.points(mesh);
    let shape = &mesh.domain.shape;
    for (i, &(p, on_b)) in pts.iter().enumerate() {
        if !on_b {
            let d = shape.signed_dist(p);
            if d < delta {
                return Err(Error::AdmissibleBoundary(format!(
                    "interior point ({:.4}, {:.4}) is {d:.4} from the boundary, \
                     inside the margin {delta:.4}",
                    p[0], p[1]
                )));
            }
        }
        for &(q, _) in pts.iter().take(i) {
            let d = dist(p, q);
            if d < delta {
                return Err(Error::AdmissibleBoundary(format!(
                    "points ({:.4}, {:.4}) and ({:.4}, {:.4}) are {d:.4} apart, \
                     inside the margin {delta:.4}",
                    p[0], p[1], q[0], q[1]
                )));
            }
        }
        let vx = v.eval(p)?;
        if vx < delta {
            return Err(Error::AdmissibleBoundary(format!(
                "weight V({:.4}, {:.4}) = {vx:.4e} is below the floor {delta:.4}",
                p[0], p[1]
            )));
        }
    }
    Ok(())
}

/// One full evaluation: the functional, its gradient in the packed
/// direction layout, and the per-point caches for downstream reuse.
pub struct ConfigEval {
    pub f: f64,
    pub grad: Vec<f64>,
    pub points: Vec<P2>,
    pub on_boundary: Vec<bool>,
    pub caches: Vec<GreenCache>,
}

impl ConfigEval {
    pub fn grad_norm(&self) -> f64 {
        grad_norm_of(&self.grad)
    }
}

/// A functional-only evaluation: the value and the per-point caches
/// (rebuilt on every call; nothing is interpolated between source
/// positions). The gradient is a separate, much costlier pass.
struct FEval {
    f: f64,
    points: Vec<P2>,
    on_boundary: Vec<bool>,
    caches: Vec<GreenCache>,
}

/// Sum in a label-independent order so relabeling the points permutes
/// the summands but not the result.
fn sorted_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

fn eval_f(op: &EllipticOperator, cfg: &Configuration, v: &EffectiveV) -> Result<FEval> {
    let mesh = &op.mesh;
    let pts = cfg.points(mesh);
    let m = pts.len();
    let mut caches = Vec::with_capacity(m);
    for &(p, _) in &pts {
        caches.push(regular_part(op, p)?);
    }

    // self terms, symmetrized cross terms over unordered pairs, and the
    // weight terms, summed in a canonical order
    let mut terms = Vec::with_capacity(m * (m + 1) / 2 + m);
    for c in &caches {
        let lv = v.eval(c.source)?.ln();
        terms.push(c.rho * c.rho * c.robin + 2.0 * c.rho * lv);
    }
    for i in 0..m {
        for j in i + 1..m {
            let g = 0.5
                * (green_value(&caches[j], caches[i].source)?
                    + green_value(&caches[i], caches[j].source)?);
            terms.push(2.0 * caches[i].rho * caches[j].rho * g);
        }
    }
    let f = sorted_sum(terms);

    let (points, on_boundary) = pts.into_iter().unzip();
    Ok(FEval { f, points, on_boundary, caches })
}

/// The gradient in the packed direction layout. Each point's self and
/// source-side cross derivatives come from one Richardson stencil of
/// re-solved caches (`grad_green`), which differentiates exactly the
/// reads the functional is built from; the remaining half of each
/// symmetrized cross term and the weight term are smooth in the
/// evaluation position and are differentiated in place.
fn eval_grad(op: &EllipticOperator, eval: &FEval, v: &EffectiveV) -> Result<Vec<f64>> {
    let mesh = &op.mesh;
    let m = eval.caches.len();
    let mut grad = Vec::new();
    for (i, c) in eval.caches.iter().enumerate() {
        let rho = c.rho;
        let others: Vec<usize> = (0..m).filter(|&j| j != i).collect();
        let probes: Vec<P2> = others.iter().map(|&j| eval.caches[j].source).collect();
        let stencil = grad_green(op, c.source, &probes)?;
        let n_dirs = stencil.grad_robin.len();

        // source-side self + cross halves, in stencil directions
        let mut g = vec![0.0; n_dirs];
        for d in 0..n_dirs {
            g[d] = rho * rho * stencil.grad_robin[d];
        }
        for (pi, &j) in others.iter().enumerate() {
            let oj = &eval.caches[j];
            for d in 0..n_dirs {
                g[d] += rho * oj.rho * stencil.grad_g_at[pi][d];
            }
        }

        // evaluation-side cross halves and the weight term, as a plane
        // gradient at the point
        let mut gx = [0.0, 0.0];
        for (j, other) in eval.caches.iter().enumerate() {
            if j != i {
                let (_, gg) = green_read(other, c.source)?;
                gx[0] += rho * other.rho * gg[0];
                gx[1] += rho * other.rho * gg[1];
            }
        }
        let lg = v.log_grad(c.source)?;
        gx[0] += 2.0 * rho * lg[0];
        gx[1] += 2.0 * rho * lg[1];

        if c.on_boundary {
            let s = mesh.boundary.project(c.source);
            let t = mesh.boundary.tangent_at(s);
            grad.push(g[0] + dot(gx, t));
        } else {
            grad.push(g[0] + gx[0]);
            grad.push(g[1] + gx[1]);
        }
    }
    Ok(grad)
}

fn grad_norm_of(grad: &[f64]) -> f64 {
    grad.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// The functional alone, gated on admissibility.
pub fn reduced_functional(
    op: &EllipticOperator,
    cfg: &Configuration,
    v: &EffectiveV,
) -> Result<f64> {
    membership(&op.mesh, cfg, v)?;
    Ok(eval_f(op, cfg, v)?.f)
}

/// The gradient alone (two entries per interior point, then one
/// arclength derivative per boundary point), gated on admissibility.
pub fn reduced_gradient(
    op: &EllipticOperator,
    cfg: &Configuration,
    v: &EffectiveV,
) -> Result<Vec<f64>> {
    membership(&op.mesh, cfg, v)?;
    let e = eval_f(op, cfg, v)?;
    eval_grad(op, &e, v)
}

/// Functional, gradient, and caches in one pass (one cache build).
pub fn evaluate(
    op: &EllipticOperator,
    cfg: &Configuration,
    v: &EffectiveV,
) -> Result<ConfigEval> {
    membership(&op.mesh, cfg, v)?;
    let e = eval_f(op, cfg, v)?;
    let grad = eval_grad(op, &e, v)?;
    Ok(ConfigEval {
        f: e.f,
        grad,
        points: e.points,
        on_boundary: e.on_boundary,
        caches: e.caches,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Minimize,
    Stationary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stability {
    Min,
    Nondegenerate,
    Degenerate,
}

impl Stability {
    pub fn label(self) -> &'static str {
        match self {
            Stability::Min => "min",
            Stability::Nondegenerate => "nondegenerate",
            Stability::Degenerate => "degenerate",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CriticalReport {
    pub cfg: Configuration,
    pub f: f64,
    pub grad_norm: f64,
    pub hessian_eigs: Vec<f64>,
    pub stability: Stability,
    pub descent_steps: usize,
    pub newton_steps: usize,
}

#[derive(Debug, Clone)]
pub struct SearchParams {
    /// Gradient-norm target; `None` means 1e−6 · max(1, |F|).
    pub tol_g: Option<f64>,
    pub max_descent: usize,
    pub max_newton: usize,
    /// Step for the differenced Hessian, relative to the domain diameter.
    pub hessian_step: f64,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self { tol_g: None, max_descent: 200, max_newton: 12, hessian_step: 2e-3 }
    }
}

/// Central second differences of the functional itself (symmetric by
/// construction; one cheap evaluation per stencil point).
fn fd_hessian(
    op: &EllipticOperator,
    cfg: &Configuration,
    v: &EffectiveV,
    theta: &[f64],
    step: f64,
) -> Result<Vec<Vec<f64>>> {
    let mesh = &op.mesh;
    let n = theta.len();
    let f_at = |offsets: &[(usize, f64)]| -> Result<f64> {
        let mut t = theta.to_vec();
        for &(d, off) in offsets {
            t[d] += off;
        }
        Ok(eval_f(op, &cfg.unpack(&t, mesh), v)?.f)
    };
    let f0 = f_at(&[])?;
    let mut h = vec![vec![0.0; n]; n];
    for a in 0..n {
        let fp = f_at(&[(a, step)])?;
        let fm = f_at(&[(a, -step)])?;
        h[a][a] = (fp - 2.0 * f0 + fm) / (step * step);
        for b in a + 1..n {
            let fpp = f_at(&[(a, step), (b, step)])?;
            let fpm = f_at(&[(a, step), (b, -step)])?;
            let fmp = f_at(&[(a, -step), (b, step)])?;
            let fmm = f_at(&[(a, -step), (b, -step)])?;
            let mixed = (fpp - fpm - fmp + fmm) / (4.0 * step * step);
            h[a][b] = mixed;
            h[b][a] = mixed;
        }
    }
    Ok(h)
}

fn symmetric_eigs(h: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = h.len();
    let m = Mat::from_fn(n, n, |i, j| h[i][j]);
    let eig = SelfAdjointEigen::new(m.as_ref(), Side::Lower)
        .map_err(|e| Error::Solve(format!("Hessian eigendecomposition failed: {e:?}")))?;
    let mut eigs: Vec<f64> = (0..n).map(|i| eig.S()[i]).collect();
    eigs.sort_by(f64::total_cmp);
    Ok(eigs)
}

fn solve_damped(h: &[Vec<f64>], g: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let n = g.len();
    let m = Mat::from_fn(n, n, |i, j| h[i][j] + if i == j { lambda } else { 0.0 });
    let rhs = Mat::from_fn(n, 1, |i, _| -g[i]);
    let lu = PartialPivLu::new(m.as_ref());
    let sol = lu.solve(rhs.as_ref());
    Ok((0..n).map(|i| sol[(i, 0)]).collect())
}

/// Search for a critical point of the functional inside the admissible
/// set: projected descent with backtracking, then a damped Newton polish
/// on the differenced Hessian. `Minimize` descends on F; `Stationary`
/// drives the gradient norm down from the start. Boundary points move in
/// arclength only, and every accepted iterate is admissible.
pub fn find_critical(
    op: &EllipticOperator,
    initial: &Configuration,
    v: &EffectiveV,
    mode: Mode,
) -> Result<CriticalReport> {
    find_critical_with(op, initial, v, mode, &SearchParams::default())
}

pub fn find_critical_with(
    op: &EllipticOperator,
    initial: &Configuration,
    v: &EffectiveV,
    mode: Mode,
    params: &SearchParams,
) -> Result<CriticalReport> {
    let mesh = &op.mesh;
    let diam = mesh.domain.shape.diameter();
    membership(mesh, initial, v)?;

    let mut theta = initial.pack();
    let mut cur = eval_f(op, &initial.unpack(&theta, mesh), v)?;
    let mut cur_grad = eval_grad(op, &cur, v)?;
    let tol = params.tol_g.unwrap_or_else(|| 1e-6 * cur.f.abs().max(1.0));

    let mut descent_steps = 0;
    let mut t = f64::NAN;
    if mode == Mode::Minimize {
        while descent_steps < params.max_descent && grad_norm_of(&cur_grad) > tol {
            let g = cur_grad.clone();
            let gn2: f64 = g.iter().map(|x| x * x).sum();
            if t.is_nan() {
                t = 0.05 * diam / gn2.sqrt();
            } else {
                t *= 2.0;
            }
            let mut accepted = false;
            let mut last_violation = None;
            while t * gn2.sqrt() > 1e-14 * diam {
                let cand: Vec<f64> =
                    theta.iter().zip(&g).map(|(th, gi)| th - t * gi).collect();
                let cfg = initial.unpack(&cand, mesh);
                match membership(mesh, &cfg, v) {
                    Err(e) => {
                        last_violation = Some(e);
                        t *= 0.5;
                        continue;
                    }
                    Ok(()) => {}
                }
                let cand_eval = eval_f(op, &cfg, v)?;
                if cand_eval.f <= cur.f - 1e-4 * t * gn2 {
                    theta = cand;
                    cur = cand_eval;
                    cur_grad = eval_grad(op, &cur, v)?;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            descent_steps += 1;
            if !accepted {
                if let Some(e) = last_violation {
                    return Err(e);
                }
                break; // line search exhausted with no constraint in play
            }
        }
    }

    // Damped Newton polish on the differenced Hessian; in Stationary
    // mode this is the whole search.
    let step = params.hessian_step * diam;
    let mut newton_steps = 0;
    let mut hess = fd_hessian(op, initial, v, &theta, step)?;
    while newton_steps < params.max_newton && grad_norm_of(&cur_grad) > tol {
        let mut lambda = 0.0;
        let mut lambda_next = {
            let diag_scale = (0..theta.len())
                .map(|i| hess[i][i].abs())
                .fold(0.0f64, f64::max)
                .max(1e-12);
            1e-3 * diag_scale
        };
        let mut advanced = false;
        for _ in 0..22 {
            let delta = solve_damped(&hess, &cur_grad, lambda)?;
            let cand: Vec<f64> =
                theta.iter().zip(&delta).map(|(th, d)| th + d).collect();
            let cfg = initial.unpack(&cand, mesh);
            if membership(mesh, &cfg, v).is_ok() {
                let cand_eval = eval_f(op, &cfg, v)?;
                // the candidate gradient is costly, so test F first and
                // only fall back to the gradient-shrink acceptance when
                // F alone does not admit the step
                let mut cand_grad = None;
                let better = match mode {
                    Mode::Minimize => {
                        if cand_eval.f <= cur.f {
                            true
                        } else {
                            let cg = eval_grad(op, &cand_eval, v)?;
                            let ok =
                                grad_norm_of(&cg) < 0.5 * grad_norm_of(&cur_grad);
                            cand_grad = Some(cg);
                            ok
                        }
                    }
                    Mode::Stationary => {
                        let cg = eval_grad(op, &cand_eval, v)?;
                        let ok = grad_norm_of(&cg) < grad_norm_of(&cur_grad);
                        cand_grad = Some(cg);
                        ok
                    }
                };
                if better {
                    theta = cand;
                    cur_grad = match cand_grad {
                        Some(cg) => cg,
                        None => eval_grad(op, &cand_eval, v)?,
                    };
                    cur = cand_eval;
                    advanced = true;
                    break;
                }
            }
            lambda = lambda_next;
            lambda_next *= 8.0;
        }
        newton_steps += 1;
        if !advanced {
            break;
        }
        hess = fd_hessian(op, initial, v, &theta, step)?;
    }

    let grad_norm = grad_norm_of(&cur_grad);
    if grad_norm > tol {
        return Err(Error::NoConvergence(grad_norm, descent_steps + newton_steps));
    }

    let cfg = initial.unpack(&theta, mesh);
    membership(mesh, &cfg, v)?;
    let eigs = symmetric_eigs(&hess)?;
    let h_tol = 1e-4 * cur.f.abs().max(1.0) / (cfg.delta_guard * cfg.delta_guard);
    let stability = if eigs.iter().all(|&e| e > h_tol) {
        Stability::Min
    } else if eigs.iter().all(|&e| e.abs() > h_tol) {
        Stability::Nondegenerate
    } else {
        Stability::Degenerate
    };

    Ok(CriticalReport {
        cfg,
        f: cur.f,
        grad_norm,
        hessian_eigs: eigs,
        stability,
        descent_steps,
        newton_steps,
    })
}

/// CSV rows `k,l,F,gradnorm,stability,xi_coords...` for a batch of
/// critical-point reports (interior coordinate pairs first, then
/// boundary arclengths).
pub fn critical_csv(reports: &[CriticalReport]) -> String {
    let mut out = String::from("k,l,F,gradnorm,stability,xi_coords\n");
    for r in reports {
        let mut coords = String::new();
        for p in &r.cfg.interior {
            let _ = write!(coords, "{:.12e},{:.12e},", p[0], p[1]);
        }
        for s in &r.cfg.boundary_s {
            let _ = write!(coords, "{:.12e},", s);
        }
        let coords = coords.trim_end_matches(',');
        let _ = writeln!(
            out,
            "{},{},{:.12e},{:.12e},{},{}",
            r.cfg.interior.len(),
            r.cfg.boundary_s.len(),
            r.f,
            r.grad_norm,
            r.stability.label(),
            coords
        );
    }
    out
}

/// F over an n×n lattice of single interior points covering the bounding
/// box; only admissible sites are returned. One cache per site.
pub fn scan_interior(
    op: &EllipticOperator,
    v: &EffectiveV,
    n: usize,
    delta_guard: f64,
) -> Result<Vec<(P2, f64)>> {
    let mesh = &op.mesh;
    let shape = &mesh.domain.shape;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for &p in &mesh.nodes {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let fx = (i as f64 + 0.5) / n as f64;
            let fy = (j as f64 + 0.5) / n as f64;
            let p = [lo[0] + fx * (hi[0] - lo[0]), lo[1] + fy * (hi[1] - lo[1])];
            if shape.signed_dist(p) < delta_guard || v.eval(p)? < delta_guard {
                continue;
            }
            let cfg = Configuration::new(vec![p], vec![], delta_guard);
            out.push((p, eval_f(op, &cfg, v)?.f));
        }
    }
    Ok(out)
}

/// F over all admissible pairs of boundary points on an n-point
/// arclength lattice, as (s₁, s₂, F). Caches are built once per site.
pub fn scan_boundary_pairs(
    op: &EllipticOperator,
    v: &EffectiveV,
    n: usize,
    delta_guard: f64,
) -> Result<Vec<[f64; 3]>> {
    let mesh = &op.mesh;
    let total = mesh.boundary.total_len;
    let sites: Vec<f64> = (0..n).map(|i| total * i as f64 / n as f64).collect();
    let mut caches = Vec::with_capacity(n);
    for &s in &sites {
        caches.push(regular_part(op, mesh.boundary.point_at(s))?);
    }
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let (ci, cj) = (&caches[i], &caches[j]);
            if dist(ci.source, cj.source) < delta_guard {
                continue;
            }
            let vi = v.eval(ci.source)?;
            let vj = v.eval(cj.source)?;
            if vi < delta_guard || vj < delta_guard {
                continue;
            }
            let g = 0.5
                * (green_value(ci, cj.source)? + green_value(cj, ci.source)?);
            let f = ci.rho * ci.rho * ci.robin
                + cj.rho * cj.rho * cj.robin
                + 2.0 * ci.rho * cj.rho * g
                + 2.0 * ci.rho * vi.ln()
                + 2.0 * cj.rho * vj.ln();
            out.push([sites[i], sites[j], f]);
        }
    }
    Ok(out)
}

/// CSV dump of a scan: one `x,y,F` or `s1,s2,F` row per site.
pub fn scan_csv(header: &str, rows: &[[f64; 3]]) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{:.12e},{:.12e},{:.12e}", r[0], r[1], r[2]);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProbeVerdict {
    /// F grows along the path; `threshold` is the largest parameter from
    /// which the growth is strictly monotone, `slope_vs_neglog` the
    /// fitted slope of F against −log t over that tail.
    Diverging { threshold: f64, slope_vs_neglog: f64 },
    /// The weight degenerates along the path; no monotonicity claim.
    Indeterminate,
    /// No strictly increasing tail was observed.
    Inconclusive,
}

#[derive(Debug, Clone)]
pub struct ProbeReport {
    /// Path parameters, sorted decreasing toward 0.
    pub ts: Vec<f64>,
    pub f: Vec<f64>,
    /// min over the configuration points of V at each parameter.
    pub min_weight: Vec<f64>,
    pub verdict: ProbeVerdict,
}

/// Evaluate F along a path of configurations leaving the admissible set
/// (collisions, boundary approach, or drift into a zero of the weight)
/// and report how it behaves. Membership is deliberately not enforced:
/// the probe exists to watch F blow up at the admissible boundary.
pub fn boundary_divergence_probe(
    op: &EllipticOperator,
    path: &dyn Fn(f64) -> Configuration,
    ts: &[f64],
    v: &EffectiveV,
) -> Result<ProbeReport> {
    if ts.len() < 3 {
        return Err(Error::Solve("divergence probe needs at least 3 parameters".into()));
    }
    let mut ts: Vec<f64> = ts.to_vec();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();

    let mut f = Vec::with_capacity(ts.len());
    let mut min_weight = Vec::with_capacity(ts.len());
    let mut delta_last = 0.0;
    for &t in &ts {
        let cfg = path(t);
        delta_last = cfg.delta_guard;
        let eval = eval_f(op, &cfg, v)?;
        let mut mw = f64::INFINITY;
        for &p in &eval.points {
            mw = mw.min(v.eval(p)?);
        }
        f.push(eval.f);
        min_weight.push(mw);
    }

    let verdict = if *min_weight.last().unwrap() < delta_last {
        ProbeVerdict::Indeterminate
    } else {
        // largest starting index from which F strictly increases as t
        // falls; the tail must cover at least the last two parameters
        let mut start = f.len() - 1;
        while start > 0 && f[start] > f[start - 1] {
            start -= 1;
        }
        if start + 1 >= f.len() {
            ProbeVerdict::Inconclusive
        } else {
            let xs: Vec<f64> = ts[start..].iter().map(|t| -t.ln()).collect();
            let ys = &f[start..];
            let n = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let mut num = 0.0;
            let mut den = 0.0;
            for (x, y) in xs.iter().zip(ys) {
                num += (x - mx) * (y - my);
                den += (x - mx) * (x - mx);
            }
            ProbeVerdict::Diverging { threshold: ts[start], slope_vs_neglog: num / den }
        }
    };

    Ok(ProbeReport { ts, f, min_weight, verdict })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::assemble;
    use std::f64::consts::PI;
    use crate::geometry::{generate_mesh, norm, Domain, RefinementPlan, Shape};
    use crate::green::{disk_oracle_robin, regular_part_with};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn disk_op(h: f64, plan: RefinementPlan) -> EllipticOperator {
        let dom = Domain::new(Shape::UnitDisk, h).unwrap();
        let mesh = Arc::new(generate_mesh(&dom, &plan).unwrap());
        assemble(&mesh, 0.0).unwrap()
    }

    fn const_v(c: f64) -> EffectiveV {
        EffectiveV::plain(ScalarField::constant(c))
    }

    #[test]
    fn single_point_formulas_match_the_assembled_pieces() {
        let op = disk_op(0.07, RefinementPlan::none());
        let v = const_v(2.5);

        // one interior point: F = (8π)²R + 2·8π·log V
        let xi = [0.2, -0.1];
        let cfg = Configuration::new(vec![xi], vec![], 0.1);
        let f = reduced_functional(&op, &cfg, &v).unwrap();
        let cache = regular_part(&op, xi).unwrap();
        let rho = 8.0 * PI;
        let direct = rho * rho * cache.robin + 2.0 * rho * 2.5f64.ln();
        assert!((f - direct).abs() <= 1e-10 * direct.abs(), "{f} vs {direct}");

        // and the Robin value itself is anchored by the disk oracle
        let oracle = rho * rho * disk_oracle_robin(xi) + 2.0 * rho * 2.5f64.ln();
        assert!((f - oracle).abs() <= 0.02 * oracle.abs(), "{f} vs oracle {oracle}");

        // one boundary point: F = (4π)²R + 2·4π·log V
        let cfgb = Configuration::new(vec![], vec![1.3], 0.1);
        let fb = reduced_functional(&op, &cfgb, &v).unwrap();
        let pb = op.mesh.boundary.point_at(1.3);
        let cb = regular_part(&op, pb).unwrap();
        let rb = 4.0 * PI;
        let directb = rb * rb * cb.robin + 2.0 * rb * 2.5f64.ln();
        assert!((fb - directb).abs() <= 1e-10 * directb.abs(), "{fb} vs {directb}");
    }

    #[test]
    fn relabeling_the_points_leaves_f_unchanged() {
        let op = disk_op(0.08, RefinementPlan::none());
        let v = const_v(1.0);
        let a = [0.35, 0.1];
        let b = [-0.3, -0.2];
        let f1 = reduced_functional(
            &op,
            &Configuration::new(vec![a, b], vec![0.7, 3.0], 0.1),
            &v,
        )
        .unwrap();
        let f2 = reduced_functional(
            &op,
            &Configuration::new(vec![b, a], vec![3.0, 0.7], 0.1),
            &v,
        )
        .unwrap();
        assert!((f1 - f2).abs() <= 1e-14 * f1.abs(), "{f1} vs {f2}");
    }

    #[test]
    fn weight_scaling_shifts_f_and_fixes_the_gradient() {
        let op = disk_op(0.08, RefinementPlan::none());
        let v1 = const_v(1.7);
        let c = 3.9;
        let v2 = const_v(1.7 * c);
        let cfg = Configuration::new(vec![[0.3, 0.25]], vec![4.0], 0.1);

        let e1 = evaluate(&op, &cfg, &v1).unwrap();
        let e2 = evaluate(&op, &cfg, &v2).unwrap();
        let rho_sum = 8.0 * PI + 4.0 * PI;
        let shift = 2.0 * c.ln() * rho_sum;
        assert!(
            ((e2.f - e1.f) - shift).abs() <= 1e-12 * e1.f.abs(),
            "shift {} vs {shift}",
            e2.f - e1.f
        );
        for (g1, g2) in e1.grad.iter().zip(&e2.grad) {
            assert!((g1 - g2).abs() <= 1e-12 * (1.0 + g1.abs()), "{g1} vs {g2}");
        }
    }

    #[test]
    fn log_weight_term_contributes_exactly_its_gradient() {
        let op = disk_op(0.08, RefinementPlan::none());
        let flat = const_v(1.0);
        let tilted = EffectiveV::plain(ScalarField::new(
            |x: P2| x[0].exp(),
            |x: P2| [x[0].exp(), 0.0],
        ));
        let cfg = Configuration::new(vec![[0.25, -0.3]], vec![], 0.1);
        let g_flat = reduced_gradient(&op, &cfg, &flat).unwrap();
        let g_tilt = reduced_gradient(&op, &cfg, &tilted).unwrap();
        let rho = 8.0 * PI;
        assert!(((g_tilt[0] - g_flat[0]) - 2.0 * rho).abs() <= 1e-10);
        assert!((g_tilt[1] - g_flat[1]).abs() <= 1e-10);
    }

    #[test]
    fn inadmissible_configurations_are_refused_with_the_constraint_named() {
        let op = disk_op(0.1, RefinementPlan::none());
        let v = const_v(1.0);
        let close = Configuration::new(vec![[0.0, 0.0], [0.05, 0.0]], vec![], 0.1);
        match reduced_functional(&op, &close, &v) {
            Err(Error::AdmissibleBoundary(msg)) => assert!(msg.contains("apart")),
            other => panic!("expected pair refusal, got {:?}", other.map(|_| ())),
        }
        let shallow = Configuration::new(vec![[0.95, 0.0]], vec![], 0.1);
        match reduced_functional(&op, &shallow, &v) {
            Err(Error::AdmissibleBoundary(msg)) => assert!(msg.contains("boundary")),
            other => panic!("expected depth refusal, got {:?}", other.map(|_| ())),
        }
        let low = const_v(0.01);
        let ok_pts = Configuration::new(vec![[0.0, 0.0]], vec![], 0.1);
        match reduced_functional(&op, &ok_pts, &low) {
            Err(Error::AdmissibleBoundary(msg)) => assert!(msg.contains("floor")),
            other => panic!("expected weight refusal, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn gradient_matches_finite_differences_at_random_configurations() {
        let op = disk_op(0.02, RefinementPlan::none());
        let mesh = &op.mesh;
        let total = mesh.boundary.total_len;
        let v = EffectiveV::plain(ScalarField::new(
            |x: P2| (0.8 * x[0] - 0.5 * x[1] + 0.3 * x[0] * x[1]).exp(),
            |x: P2| {
                let e = (0.8 * x[0] - 0.5 * x[1] + 0.3 * x[0] * x[1]).exp();
                [e * (0.8 + 0.3 * x[1]), e * (-0.5 + 0.3 * x[0])]
            },
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let delta = 0.1;
        // interior samples stay at moderate depth: the source-motion
        // stencil loses accuracy where the regular part steepens toward
        // the boundary, and this test probes consistency, not that edge
        let shapes = [(1usize, 0usize), (0, 1), (1, 1), (2, 0), (0, 2)];
        let mut checked = 0;
        'outer: while checked < 10 {
            let (k, l) = shapes[checked % shapes.len()];
            let mut interior: Vec<P2> = Vec::new();
            for _ in 0..k {
                for _ in 0..200 {
                    let p = [rng.gen_range(-0.55..0.55), rng.gen_range(-0.55..0.55)];
                    if norm(p) <= 0.55
                        && interior.iter().all(|&q| dist(p, q) >= 0.25)
                    {
                        interior.push(p);
                        break;
                    }
                }
            }
            let mut boundary_s = Vec::new();
            for _ in 0..l {
                for _ in 0..200 {
                    let s = rng.gen_range(0.0..total);
                    let p = mesh.boundary.point_at(s);
                    let clear = interior.iter().all(|&q| dist(p, q) >= 0.25)
                        && boundary_s
                            .iter()
                            .all(|&so| dist(p, mesh.boundary.point_at(so)) >= 0.25);
                    if clear {
                        boundary_s.push(s);
                        break;
                    }
                }
            }
            if interior.len() != k || boundary_s.len() != l {
                continue 'outer;
            }
            let cfg = Configuration::new(interior, boundary_s, delta);
            let e = evaluate(&op, &cfg, &v).unwrap();

            let s = 0.02;
            let theta = cfg.pack();
            let mut fd = Vec::with_capacity(theta.len());
            for d in 0..theta.len() {
                let mut tp = theta.clone();
                tp[d] += s;
                let mut tm = theta.clone();
                tm[d] -= s;
                let fp = eval_f(&op, &cfg.unpack(&tp, mesh), &v).unwrap().f;
                let fm = eval_f(&op, &cfg.unpack(&tm, mesh), &v).unwrap().f;
                fd.push((fp - fm) / (2.0 * s));
            }
            let err: f64 = fd
                .iter()
                .zip(&e.grad)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let scale: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(
                err <= 1e-3 * scale,
                "config {checked} (k={k}, l={l}): FD mismatch {err:.3e} vs scale {scale:.3e}"
            );
            checked += 1;
        }
    }

    #[test]
    #[ignore]
    fn probe_center_bias() {
        use crate::green::grad_green;
        for (h, mh) in [(0.03, 0.006), (0.02, 0.004), (0.015, 0.003)] {
            let t0 = std::time::Instant::now();
            let op = disk_op(h, RefinementPlan::single([0.0, 0.0], mh, 0.12));
            let n = op.mesh.n_nodes();
            let cache = regular_part(&op, [0.0, 0.0]).unwrap();
            let doubled = [2.0 * cache.grad_h_at_source[0], 2.0 * cache.grad_h_at_source[1]];
            let t1 = std::time::Instant::now();
            let gg = grad_green(&op, [0.0, 0.0], &[]).unwrap();
            let t2 = std::time::Instant::now();
            println!(
                "h={h} min_h={mh} nodes={n}: |2grad_h|={:.3e} |grad_green|={:.3e} \
                 agree={:.1e} build+cache={:?} grad_green={:?}",
                norm(doubled),
                norm([gg.grad_robin[0], gg.grad_robin[1]]),
                gg.step_agreement,
                t1 - t0,
                t2 - t1
            );
        }
    }

    #[test]
    fn critical_search_finds_the_disk_center() {
        let op = disk_op(0.02, RefinementPlan::single([0.0, 0.0], 0.004, 0.12));
        let v = const_v(1.0);

        // rotational symmetry puts the critical point at the origin;
        // the gradient there is pure discretization bias
        let center = Configuration::new(vec![[0.0, 0.0]], vec![], 0.1);
        let g0 = reduced_gradient(&op, &center, &v).unwrap();
        let gn0 = (g0[0] * g0[0] + g0[1] * g0[1]).sqrt();
        assert!(gn0 <= 0.05, "center gradient bias {gn0}");

        let start = Configuration::new(vec![[0.3, 0.2]], vec![], 0.1);
        let report = find_critical(&op, &start, &v, Mode::Minimize).unwrap();
        let end = report.cfg.interior[0];
        assert!(
            norm(end) <= 1e-4,
            "converged to ({:.2e}, {:.2e}), |ξ| = {:.2e}",
            end[0],
            end[1],
            norm(end)
        );
        assert_eq!(report.stability, Stability::Min);
        assert!(report.hessian_eigs.iter().all(|&e| e > 0.0));
        membership(&op.mesh, &report.cfg, &v).unwrap();
    }

    #[test]
    fn antipodal_boundary_pair_minimizes_after_a_grid_scan_confirms_it() {
        let op = disk_op(0.05, RefinementPlan::none());
        let v = const_v(1.0);
        let total = op.mesh.boundary.total_len;

        // oracle first: a brute scan over boundary pairs must already
        // put the minimizer at (close to) antipodal separation
        let scan = scan_boundary_pairs(&op, &v, 24, 0.1).unwrap();
        let best = scan
            .iter()
            .min_by(|a, b| a[2].total_cmp(&b[2]))
            .unwrap();
        let sep = (best[1] - best[0]).rem_euclid(total);
        let sep = sep.min(total - sep);
        assert!(
            (sep - 0.5 * total).abs() <= total / 24.0 + 1e-12,
            "scan minimizer separation {sep} vs {}",
            0.5 * total
        );

        let start = Configuration::new(vec![], vec![0.4, 2.6], 0.1);
        let report = find_critical(&op, &start, &v, Mode::Minimize).unwrap();
        let s = &report.cfg.boundary_s;
        let sep = (s[1] - s[0]).rem_euclid(total);
        let sep = sep.min(total - sep);
        assert!(
            (sep - 0.5 * total).abs() <= 1e-3 * total,
            "separation {sep} vs {} ± {}",
            0.5 * total,
            1e-3 * total
        );
    }

    #[test]
    fn strong_weighting_pulls_the_minimizer_to_the_weight_maximum() {
        let op = disk_op(0.05, RefinementPlan::none());
        let p0 = [0.3, 0.0];
        let powered = |m: f64| {
            EffectiveV::plain(ScalarField::new(
                move |x: P2| (-m * ((x[0] - p0[0]).powi(2) + (x[1] - p0[1]).powi(2))).exp(),
                move |x: P2| {
                    let e =
                        (-m * ((x[0] - p0[0]).powi(2) + (x[1] - p0[1]).powi(2))).exp();
                    [-2.0 * m * (x[0] - p0[0]) * e, -2.0 * m * (x[1] - p0[1]) * e]
                },
            ))
        };

        // coarse-lattice oracle: the scan minimizer already sits next
        // to the weight maximum at strong weighting
        let v_strong = powered(40.0);
        let scan = scan_interior(&op, &v_strong, 12, 0.02).unwrap();
        let best = scan.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        assert!(dist(best.0, p0) <= 0.2, "scan minimizer {:?}", best.0);

        let start = Configuration::new(vec![[-0.2, -0.3]], vec![], 0.02);
        let r40 = find_critical(&op, &start, &v_strong, Mode::Minimize).unwrap();
        let d40 = dist(r40.cfg.interior[0], p0);
        assert!(d40 <= 0.05, "M=40 landed {d40} from the maximum");

        let r160 = find_critical(&op, &start, &powered(160.0), Mode::Minimize).unwrap();
        let d160 = dist(r160.cfg.interior[0], p0);
        assert!(d160 <= 0.015, "M=160 landed {d160} from the maximum");
        assert!(d160 < d40, "stronger weighting should pull closer: {d160} vs {d40}");
    }

    #[test]
    fn singular_weight_vanishes_quadratically_at_its_zeros() {
        let op = disk_op(0.05, RefinementPlan::none());
        let qi = [-0.2, 0.1];
        let w = Weight { base: ScalarField::constant(1.0), singular: vec![(qi, 1)] };
        let cache = regular_part(&op, qi).unwrap();
        let v = build_singular_weight(&w, std::slice::from_ref(&cache)).unwrap();

        assert_eq!(v.eval(qi).unwrap(), 0.0);
        assert!(v.eval([0.5, 0.2]).unwrap() > 0.0);

        let fit_exponent = |v: &EffectiveV, q: P2, dir: P2| {
            let radii = [0.03, 0.045, 0.07, 0.1, 0.15];
            let pts: Vec<(f64, f64)> = radii
                .iter()
                .map(|&r| {
                    let x = [q[0] + r * dir[0], q[1] + r * dir[1]];
                    (r.ln(), v.eval(x).unwrap().ln())
                })
                .collect();
            let n = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
            let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let den: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
            num / den
        };
        let expo = fit_exponent(&v, qi, [0.6, 0.8]);
        assert!((expo - 2.0).abs() <= 0.1, "interior exponent {expo}");

        // a boundary zero has the doubled log core but half the mass
        // normalization, so the local exponent is the same
        let qb = op.mesh.boundary.point_at(2.0);
        let wb = Weight { base: ScalarField::constant(1.0), singular: vec![(qb, 1)] };
        let cb = regular_part(&op, qb).unwrap();
        let vb = build_singular_weight(&wb, std::slice::from_ref(&cb)).unwrap();
        let inward = {
            let nrm = op.mesh.boundary.normal_at(2.0);
            [-nrm[0], -nrm[1]]
        };
        let expob = fit_exponent(&vb, qb, inward);
        assert!((expob - 2.0).abs() <= 0.1, "boundary exponent {expob}");
    }

    #[test]
    fn colliding_interior_points_make_f_diverge_at_the_documented_rate() {
        let op = disk_op(0.06, RefinementPlan::none());
        let v = const_v(1.0);
        let path = |t: f64| {
            Configuration::new(vec![[-0.5 * t, 0.0], [0.5 * t, 0.0]], vec![], 0.1)
        };
        let ts = [0.45, 0.3, 0.2, 0.12, 0.07, 0.04];
        let report = boundary_divergence_probe(&op, &path, &ts, &v).unwrap();
        match report.verdict {
            ProbeVerdict::Diverging { slope_vs_neglog, .. } => {
                let expected = 64.0 * PI;
                assert!(
                    (slope_vs_neglog - expected).abs() <= 0.3 * expected,
                    "collision slope {slope_vs_neglog} vs {expected}"
                );
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn drifting_into_the_boundary_makes_f_diverge() {
        let op = disk_op(
            0.06,
            RefinementPlan::single([1.0, 0.0], 0.008, 0.3),
        );
        let v = const_v(1.0);
        let path = |t: f64| Configuration::new(vec![[1.0 - t, 0.0]], vec![], 0.1);
        let ts = [0.4, 0.3, 0.22, 0.16, 0.11, 0.08];
        let report = boundary_divergence_probe(&op, &path, &ts, &v).unwrap();
        match report.verdict {
            ProbeVerdict::Diverging { slope_vs_neglog, .. } => {
                assert!(slope_vs_neglog > 0.0);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
        // F must actually have grown along the tail
        assert!(report.f.last().unwrap() > report.f.first().unwrap());
    }

    #[test]
    fn drifting_into_a_weight_zero_is_reported_indeterminate() {
        let op = disk_op(0.06, RefinementPlan::none());
        let q = [0.4, 0.0];
        let w = Weight { base: ScalarField::constant(1.0), singular: vec![(q, 1)] };
        let cache = regular_part(&op, q).unwrap();
        let v = build_singular_weight(&w, std::slice::from_ref(&cache)).unwrap();
        let path = |t: f64| Configuration::new(vec![[0.4 - t, 0.0]], vec![], 0.1);
        let ts = [0.5, 0.35, 0.22, 0.12, 0.05];
        let report = boundary_divergence_probe(&op, &path, &ts, &v).unwrap();
        assert_eq!(report.verdict, ProbeVerdict::Indeterminate);
    }

    #[test]
    fn critical_reports_serialize_to_the_documented_csv_layout() {
        let op = disk_op(0.07, RefinementPlan::single([0.0, 0.0], 0.012, 0.15));
        let v = const_v(1.0);
        let start = Configuration::new(vec![[0.2, 0.1]], vec![], 0.1);
        let report = find_critical(&op, &start, &v, Mode::Minimize).unwrap();
        let csv = critical_csv(std::slice::from_ref(&report));
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "k,l,F,gradnorm,stability,xi_coords");
        let row = lines.next().unwrap();
        assert!(row.starts_with("1,0,"), "row {row}");
        assert!(row.contains(report.stability.label()));
    }
}
