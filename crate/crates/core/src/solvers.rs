//! Primal walk-on-spheres estimators.
//!
//! All three PDE kinds share one walk loop per family: [`walk_screened`]
//! handles the Poisson and screened Poisson equations (Poisson is the
//! `sigma = 0` case and runs through exactly the same code), and
//! [`walk_elliptic`] handles the variable-coefficient equation
//! `div(alpha grad u) - sigma u = -f` by delta tracking against a constant
//! fictitious screening `sigma_bar`. The loops report every event to an
//! [`Observer`]; the primal solvers pass a no-op observer and the adjoint
//! passes use the same loops with an observer that accumulates gradients, so
//! a replayed walk consumes random numbers in exactly the primal order.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{BoundaryCondition, Field, FieldJet};
use crate::geometry::{Domain, EpsilonShell, Vec3};
use crate::kernels::{BallKernel, DEFAULT_RADIAL_TOL};
use crate::rng::{PathSeed, Sampler};

pub const DEFAULT_MAX_STEPS: u32 = 10_000;

/// Largest tolerated fraction of walks that hit the step limit.
pub const MAX_ABORT_FRACTION: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdeKind {
    Poisson,
    ScreenedPoisson,
    Elliptic,
}

/// A boundary value problem `div(alpha grad u) - sigma u = -f` on `domain`
/// with `u = g` on the boundary.
#[derive(Debug, Clone)]
pub struct Problem {
    pub kind: PdeKind,
    pub domain: Domain,
    pub source: Field,
    pub boundary: BoundaryCondition,
    /// `sigma`. Must be a non-negative constant for the screened kind.
    pub screening: Field,
    /// `alpha`. Only used by the elliptic kind.
    pub diffusion: Field,
    /// Fictitious screening for delta tracking. Only used by the elliptic kind.
    pub sigma_bar: f64,
    pub epsilon: EpsilonShell,
    pub max_steps: u32,
    /// Tolerance of the radial inverse CDF in Green's function sampling.
    pub radial_tol: f64,
}

impl Problem {
    fn base(kind: PdeKind, domain: Domain, source: Field, boundary: BoundaryCondition) -> Self {
        let epsilon = EpsilonShell::default_for(&domain);
        Self {
            kind,
            domain,
            source,
            boundary,
            screening: Field::Constant(0.0),
            diffusion: Field::Constant(1.0),
            sigma_bar: 0.0,
            epsilon,
            max_steps: DEFAULT_MAX_STEPS,
            radial_tol: DEFAULT_RADIAL_TOL,
        }
    }

    pub fn poisson(domain: Domain, source: Field, boundary: BoundaryCondition) -> Self {
        Self::base(PdeKind::Poisson, domain, source, boundary)
    }

    pub fn screened(domain: Domain, source: Field, boundary: BoundaryCondition, sigma: f64) -> Self {
        let mut p = Self::base(PdeKind::ScreenedPoisson, domain, source, boundary);
        p.screening = Field::Constant(sigma);
        p
    }

    /// Elliptic problem with `sigma_bar` chosen by [`Problem::auto_sigma_bar`].
    pub fn elliptic(
        domain: Domain,
        source: Field,
        boundary: BoundaryCondition,
        screening: Field,
        diffusion: Field,
    ) -> Result<Self> {
        let mut p = Self::base(PdeKind::Elliptic, domain, source, boundary);
        p.screening = screening;
        p.diffusion = diffusion;
        p.sigma_bar = p.auto_sigma_bar()?;
        Ok(p)
    }

    pub fn with_epsilon(mut self, eps: f64) -> Result<Self> {
        self.epsilon = EpsilonShell::new(eps, &self.domain)?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// Scalar screening for the screened kind.
    pub fn scalar_sigma(&self) -> Option<f64> {
        match self.screening {
            Field::Constant(s) => Some(s),
            Field::Texture(_) => None,
        }
    }

    /// Regular probe lattice (`n` per axis, `z = 0` slice in 3D) restricted
    /// to the domain.
    pub fn probe_points(&self, n: usize) -> Vec<Vec3> {
        let (lo, hi) = self.domain.bounds();
        let mut out = Vec::new();
        for j in 0..n {
            for i in 0..n {
                let p = Vec3::new2(
                    lo.x + (hi.x - lo.x) * (i as f64 + 0.5) / n as f64,
                    lo.y + (hi.y - lo.y) * (j as f64 + 0.5) / n as f64,
                );
                if self.domain.contains(p) {
                    out.push(p);
                }
            }
        }
        out
    }

    /// `1.5 * max sigma'` over a dense probe grid, floored at a small
    /// positive constant.
    pub fn auto_sigma_bar(&self) -> Result<f64> {
        let mut m = f64::NEG_INFINITY;
        for p in self.probe_points(64) {
            m = m.max(sigma_prime(self, p)?);
        }
        Ok((1.5 * m).max(SIGMA_BAR_FLOOR))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidProblem(m));
        if !(self.max_steps >= 1) {
            return bad("max_steps must be at least 1".into());
        }
        if !(self.radial_tol > 0.0) {
            return bad(format!("radial_tol must be positive, got {}", self.radial_tol));
        }
        match self.kind {
            PdeKind::Poisson => {}
            PdeKind::ScreenedPoisson => match self.screening {
                Field::Constant(s) if s >= 0.0 && s.is_finite() => {}
                Field::Constant(s) => return bad(format!("screening must be non-negative, got {s}")),
                Field::Texture(_) => {
                    return bad("screened Poisson takes a scalar screening; use the elliptic kind".into())
                }
            },
            PdeKind::Elliptic => {
                if !(self.sigma_bar > 0.0) || !self.sigma_bar.is_finite() {
                    return bad(format!("sigma_bar must be positive, got {}", self.sigma_bar));
                }
                for p in self.probe_points(64) {
                    let a = self.diffusion.eval(p);
                    if !(a > 0.0) {
                        return Err(Error::NonpositiveAlpha { at: p, value: a });
                    }
                }
            }
        }
        Ok(())
    }
}

pub const SIGMA_BAR_FLOOR: f64 = 1e-2;

/// `sigma' = sigma / alpha + (lap alpha / alpha - |grad alpha|^2 / (2 alpha^2)) / 2`.
pub fn sigma_prime(p: &Problem, x: Vec3) -> Result<f64> {
    let jet = p.diffusion.eval_jet(x);
    if !(jet.value > 0.0) {
        return Err(Error::NonpositiveAlpha { at: x, value: jet.value });
    }
    Ok(sigma_prime_from(p.screening.eval(x), &jet))
}

#[inline]
pub fn sigma_prime_from(sigma: f64, alpha: &FieldJet) -> f64 {
    let a = alpha.value;
    let g2 = alpha.gradient[0] * alpha.gradient[0] + alpha.gradient[1] * alpha.gradient[1];
    sigma / a + 0.5 * (alpha.laplacian / a - 0.5 * g2 / (a * a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Entered the epsilon shell and collected the boundary value.
    Boundary,
    /// Throughput became exactly zero.
    Absorbed,
    /// Hit the step limit; the value holds the source terms collected so far.
    Aborted,
}

/// Result of one walk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WalkOutcome {
    pub value: f64,
    pub steps: u32,
    pub termination: Termination,
    /// The vertex after the start point, used to check replays.
    pub first_vertex: Option<Vec3>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct SourceEvent {
    pub x: Vec3,
    pub y: Vec3,
    pub beta: f64,
    pub kernel: BallKernel,
    pub f_y: f64,
    pub alpha_x: f64,
    pub alpha_y: f64,
    /// `beta * S`, the amount added to the estimate.
    pub contribution: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum EventKind {
    Surface,
    Volume,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct TransitionEvent {
    pub step: u32,
    pub x: Vec3,
    pub next: Vec3,
    pub kind: EventKind,
    /// Throughput before the update.
    pub beta: f64,
    pub mu: f64,
    pub kernel: BallKernel,
    pub alpha_x: f64,
    /// Diffusion at `next`; only the value is filled for surface events.
    pub alpha_next: FieldJet,
    pub sigma_next: f64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BoundaryEvent {
    pub point: Vec3,
    pub primitive: usize,
    pub beta: f64,
}

pub(crate) trait Observer {
    #[inline]
    fn vertex(&mut self, _x: Vec3) {}
    #[inline]
    fn source(&mut self, _e: &SourceEvent) {}
    #[inline]
    fn transition(&mut self, _e: &TransitionEvent) -> Result<()> {
        Ok(())
    }
    #[inline]
    fn boundary(&mut self, _e: &BoundaryEvent) {}
}

pub(crate) struct Silent;

impl Observer for Silent {}

/// Records every vertex of a walk, start point included.
#[derive(Debug, Default)]
pub(crate) struct Tracer(pub Vec<Vec3>);

impl Observer for Tracer {
    fn vertex(&mut self, x: Vec3) {
        self.0.push(x);
    }
}

#[inline]
fn has_source(f: &Field) -> bool {
    !matches!(f, Field::Constant(c) if *c == 0.0)
}

struct Progress {
    beta: f64,
    value: f64,
    steps: u32,
    first: Option<Vec3>,
}

impl Progress {
    fn new() -> Self {
        Self {
            beta: 1.0,
            value: 0.0,
            steps: 0,
            first: None,
        }
    }

    fn finish(&self, termination: Termination) -> WalkOutcome {
        WalkOutcome {
            value: self.value,
            steps: self.steps,
            termination,
            first_vertex: self.first,
        }
    }

    fn advance(&mut self, next: Vec3) {
        if self.steps == 0 {
            self.first = Some(next);
        }
        self.steps += 1;
    }
}

/// Checks the shell; on a hit adds the boundary term and returns true.
#[inline]
fn try_boundary<O: Observer>(p: &Problem, x: Vec3, st: &mut Progress, obs: &mut O) -> Option<f64> {
    let bd = p.domain.signed_distance(x);
    if bd.distance < p.epsilon.value() {
        let hit = p.domain.project(x, bd);
        st.value += st.beta * p.boundary.eval(hit.point, hit.primitive);
        obs.boundary(&BoundaryEvent {
            point: hit.point,
            primitive: hit.primitive,
            beta: st.beta,
        });
        None
    } else {
        Some(bd.distance)
    }
}

fn check_start(p: &Problem, x0: Vec3) -> Result<()> {
    if p.domain.signed_distance(x0).distance < 0.0 {
        return Err(Error::ExteriorPoint(x0));
    }
    Ok(())
}

/// Walk for the Poisson (`sigma = 0`) and screened Poisson equations.
pub(crate) fn walk_screened<O: Observer>(
    p: &Problem,
    x0: Vec3,
    seed: PathSeed,
    obs: &mut O,
) -> Result<WalkOutcome> {
    check_start(p, x0)?;
    let sigma = if p.kind == PdeKind::Poisson {
        0.0
    } else {
        p.scalar_sigma()
            .ok_or_else(|| Error::InvalidProblem("screening must be a scalar".into()))?
    };
    let dim = p.dim();
    let source = has_source(&p.source);
    let mut s = Sampler::new(seed);
    let mut st = Progress::new();
    let mut x = x0;
    obs.vertex(x);
    loop {
        let Some(radius) = try_boundary(p, x, &mut st, obs) else {
            return Ok(st.finish(Termination::Boundary));
        };
        if st.steps >= p.max_steps {
            return Ok(st.finish(Termination::Aborted));
        }
        let k = BallKernel::new(dim, x, radius, sigma);
        if source {
            let y = k.sample_green_point(&mut s, p.radial_tol);
            let f_y = p.source.eval(y);
            let contribution = st.beta * f_y * k.green_norm();
            st.value += contribution;
            obs.source(&SourceEvent {
                x,
                y,
                beta: st.beta,
                kernel: k,
                f_y,
                alpha_x: 1.0,
                alpha_y: 1.0,
                contribution,
            });
        }
        let (z, _) = k.sample_sphere(&mut s);
        let mu = k.throughput();
        obs.transition(&TransitionEvent {
            step: st.steps,
            x,
            next: z,
            kind: EventKind::Surface,
            beta: st.beta,
            mu,
            kernel: k,
            alpha_x: 1.0,
            alpha_next: FieldJet::default(),
            sigma_next: sigma,
        })?;
        st.beta *= mu;
        st.advance(z);
        x = z;
        obs.vertex(x);
        if st.beta == 0.0 {
            return Ok(st.finish(Termination::Absorbed));
        }
    }
}

#[inline]
fn positive_alpha(value: f64, at: Vec3) -> Result<f64> {
    if value > 0.0 {
        Ok(value)
    } else {
        Err(Error::NonpositiveAlpha { at, value })
    }
}

/// Delta-tracking walk for the variable-coefficient equation.
pub(crate) fn walk_elliptic<O: Observer>(
    p: &Problem,
    x0: Vec3,
    seed: PathSeed,
    obs: &mut O,
) -> Result<WalkOutcome> {
    check_start(p, x0)?;
    let dim = p.dim();
    let sigma_bar = p.sigma_bar;
    let source = has_source(&p.source);
    let mut s = Sampler::new(seed);
    let mut st = Progress::new();
    let mut x = x0;
    let mut alpha_x = positive_alpha(p.diffusion.eval(x), x)?;
    obs.vertex(x);
    loop {
        let Some(radius) = try_boundary(p, x, &mut st, obs) else {
            return Ok(st.finish(Termination::Boundary));
        };
        if st.steps >= p.max_steps {
            return Ok(st.finish(Termination::Aborted));
        }
        let k = BallKernel::new(dim, x, radius, sigma_bar);
        let norm = k.green_norm();
        if source {
            let y = k.sample_green_point(&mut s, p.radial_tol);
            let f_y = p.source.eval(y);
            let alpha_y = positive_alpha(p.diffusion.eval(y), y)?;
            let contribution = st.beta * f_y * norm / (alpha_x * alpha_y).sqrt();
            st.value += contribution;
            obs.source(&SourceEvent {
                x,
                y,
                beta: st.beta,
                kernel: k,
                f_y,
                alpha_x,
                alpha_y,
                contribution,
            });
        }
        let volume = s.next_uniform() < norm * sigma_bar;
        let (next, kind, alpha_next, sigma_next, mu) = if volume {
            let next = k.sample_green_point(&mut s, p.radial_tol);
            let jet = p.diffusion.eval_jet(next);
            positive_alpha(jet.value, next)?;
            let sigma_next = p.screening.eval(next);
            let sp = sigma_prime_from(sigma_next, &jet);
            let mu = (sigma_bar - sp) / sigma_bar * (jet.value / alpha_x).sqrt();
            (next, EventKind::Volume, jet, sigma_next, mu)
        } else {
            let (next, _) = k.sample_sphere(&mut s);
            let a = positive_alpha(p.diffusion.eval(next), next)?;
            let jet = FieldJet {
                value: a,
                ..FieldJet::default()
            };
            (next, EventKind::Surface, jet, 0.0, (a / alpha_x).sqrt())
        };
        obs.transition(&TransitionEvent {
            step: st.steps,
            x,
            next,
            kind,
            beta: st.beta,
            mu,
            kernel: k,
            alpha_x,
            alpha_next,
            sigma_next,
        })?;
        st.beta *= mu;
        st.advance(next);
        x = next;
        alpha_x = alpha_next.value;
        obs.vertex(x);
        if st.beta == 0.0 {
            return Ok(st.finish(Termination::Absorbed));
        }
    }
}

pub(crate) fn walk<O: Observer>(p: &Problem, x0: Vec3, seed: PathSeed, obs: &mut O) -> Result<WalkOutcome> {
    match p.kind {
        PdeKind::Poisson | PdeKind::ScreenedPoisson => walk_screened(p, x0, seed, obs),
        PdeKind::Elliptic => walk_elliptic(p, x0, seed, obs),
    }
}

fn expect_kind(p: &Problem, kind: PdeKind) -> Result<()> {
    if p.kind != kind {
        return Err(Error::InvalidProblem(format!(
            "expected a {kind:?} problem, got {:?}",
            p.kind
        )));
    }
    Ok(())
}

/// One walk-on-spheres sample of the Poisson equation.
pub fn solve_poisson(p: &Problem, x0: Vec3, seed: PathSeed) -> Result<WalkOutcome> {
    expect_kind(p, PdeKind::Poisson)?;
    walk_screened(p, x0, seed, &mut Silent)
}

/// One sample of the screened Poisson equation with scalar screening.
pub fn solve_screened(p: &Problem, x0: Vec3, seed: PathSeed) -> Result<WalkOutcome> {
    expect_kind(p, PdeKind::ScreenedPoisson)?;
    walk_screened(p, x0, seed, &mut Silent)
}

/// One delta-tracking sample of the variable-coefficient equation.
pub fn solve_elliptic(p: &Problem, x0: Vec3, seed: PathSeed) -> Result<WalkOutcome> {
    expect_kind(p, PdeKind::Elliptic)?;
    walk_elliptic(p, x0, seed, &mut Silent)
}

/// One sample of whichever kind `p` is.
pub fn solve(p: &Problem, x0: Vec3, seed: PathSeed) -> Result<WalkOutcome> {
    walk(p, x0, seed, &mut Silent)
}

/// Runs one walk and records its vertices, start point included.
pub fn trace_walk(p: &Problem, x0: Vec3, seed: PathSeed) -> Result<(WalkOutcome, Vec<Vec3>)> {
    let mut t = Tracer::default();
    let out = walk(p, x0, seed, &mut t)?;
    Ok((out, t.0))
}

/// Seed of walk `j` at measurement point `i`.
#[inline]
pub fn walk_seed(seed: u64, point: usize, n_walks: usize, j: usize) -> PathSeed {
    PathSeed::new(seed, (point * n_walks + j) as u64)
}

/// Mean and variance of the mean of a set of walks.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Estimate {
    pub mean: f64,
    pub variance_of_mean: f64,
    pub n_walks: u64,
}

impl Estimate {
    pub fn standard_error(&self) -> f64 {
        self.variance_of_mean.sqrt()
    }
}

/// Welford accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    #[inline]
    pub fn push(&mut self, v: f64) {
        self.n += 1;
        let d = v - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (v - self.mean);
    }

    pub fn estimate(&self) -> Estimate {
        let var = if self.n > 1 {
            self.m2 / (self.n - 1) as f64 / self.n as f64
        } else {
            0.0
        };
        Estimate {
            mean: self.mean,
            variance_of_mean: var,
            n_walks: self.n,
        }
    }
}

/// Per-walk outcomes of a primal pass, kept for the paired adjoint pass.
#[derive(Debug, Clone)]
pub struct PrimalPass {
    pub estimates: Vec<Estimate>,
    /// `outcomes[i * n_walks + j]` is walk `j` at point `i`.
    pub outcomes: Vec<WalkOutcome>,
    pub n_walks: usize,
    pub seed: u64,
    pub aborted: u64,
}

impl PrimalPass {
    pub fn means(&self) -> Vec<f64> {
        self.estimates.iter().map(|e| e.mean).collect()
    }

    pub fn mean_steps(&self) -> f64 {
        let total: u64 = self.outcomes.iter().map(|o| o.steps as u64).sum();
        total as f64 / self.outcomes.len().max(1) as f64
    }
}

fn check_aborts(aborted: u64, total: u64) -> Result<()> {
    if total > 0 && aborted as f64 > MAX_ABORT_FRACTION * total as f64 {
        return Err(Error::MaxStepsExceeded { aborted, total });
    }
    Ok(())
}

/// Runs `n_walks` walks at every point and keeps the per-walk outcomes.
pub fn primal_pass(p: &Problem, points: &[Vec3], n_walks: usize, seed: u64) -> Result<PrimalPass> {
    p.validate()?;
    let per_point: Vec<Vec<WalkOutcome>> = points
        .par_iter()
        .enumerate()
        .map(|(i, &x)| {
            (0..n_walks)
                .map(|j| solve(p, x, walk_seed(seed, i, n_walks, j)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut estimates = Vec::with_capacity(points.len());
    let mut outcomes = Vec::with_capacity(points.len() * n_walks);
    let mut aborted = 0;
    for walks in per_point {
        let mut w = Welford::default();
        for o in &walks {
            w.push(o.value);
            aborted += (o.termination == Termination::Aborted) as u64;
        }
        estimates.push(w.estimate());
        outcomes.extend(walks);
    }
    check_aborts(aborted, (points.len() * n_walks) as u64)?;
    Ok(PrimalPass {
        estimates,
        outcomes,
        n_walks,
        seed,
        aborted,
    })
}

/// Per-point Monte Carlo estimates of the solution.
pub fn estimate_solution(p: &Problem, points: &[Vec3], n_walks: usize, seed: u64) -> Result<Vec<Estimate>> {
    p.validate()?;
    let per_point: Vec<(Estimate, u64)> = points
        .par_iter()
        .enumerate()
        .map(|(i, &x)| {
            let mut w = Welford::default();
            let mut aborted = 0;
            for j in 0..n_walks {
                let o = solve(p, x, walk_seed(seed, i, n_walks, j))?;
                w.push(o.value);
                aborted += (o.termination == Termination::Aborted) as u64;
            }
            Ok((w.estimate(), aborted))
        })
        .collect::<Result<Vec<_>>>()?;
    let aborted = per_point.iter().map(|e| e.1).sum();
    check_aborts(aborted, (points.len() * n_walks) as u64)?;
    Ok(per_point.into_iter().map(|e| e.0).collect())
}
