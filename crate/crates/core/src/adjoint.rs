//! Reverse-mode derivatives by path replay.
//!
//! A primal walk estimates `u = sum_k beta_k S_k + beta_N g` with
//! `beta_k = mu_0 ... mu_{k-1}`. Its derivative is
//!
//! ```text
//! du = sum_k beta_k dS_k + sum_k (dmu_k / mu_k) U_k + beta_N dg
//! ```
//!
//! where `U_k` is the part of `u` collected after the source term of step
//! `k`. The replay reruns the walk from the same seed, starts with
//! `U = u_primal` and subtracts each source contribution as it goes, so every
//! term is available locally and the pass needs constant memory. Sampling is
//! detached: only integrands and throughput factors are differentiated.
//!
//! When a factor `mu_k` is exactly zero (a null collision in delta tracking)
//! the ratio `U_k / mu_k` is undefined and the walk ends. The replay then
//! estimates the tail with a fresh walk from the next vertex on a derived
//! seed.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{FieldJet, GradientBuffer};
use crate::geometry::Vec3;
use crate::rng::PathSeed;
use crate::solvers::{
    self, walk_seed, BoundaryEvent, EventKind, Observer, PdeKind, PrimalPass, Problem, Silent, SourceEvent,
    TransitionEvent, WalkOutcome,
};

/// A differentiable parameter of a [`Problem`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamId {
    /// Texels of the source texture `f`.
    Source,
    /// Texels of the screening texture `sigma` (elliptic kind).
    Screening,
    /// A constant screening coefficient.
    ScreeningScalar,
    /// Texels of the diffusion texture `alpha` (elliptic kind).
    Diffusion,
    /// Texels of a boundary texture `g`.
    Boundary,
}

impl ParamId {
    pub const ALL: [ParamId; 5] = [
        ParamId::Source,
        ParamId::Screening,
        ParamId::ScreeningScalar,
        ParamId::Diffusion,
        ParamId::Boundary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::Source => "source",
            ParamId::Screening => "screening",
            ParamId::ScreeningScalar => "screening_scalar",
            ParamId::Diffusion => "diffusion",
            ParamId::Boundary => "boundary",
        }
    }
}

/// Which parameters to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamSet {
    pub source: bool,
    pub screening: bool,
    pub screening_scalar: bool,
    pub diffusion: bool,
    pub boundary: bool,
}

impl ParamSet {
    pub fn only(id: ParamId) -> Self {
        let mut s = Self::default();
        s.insert(id);
        s
    }

    pub fn insert(&mut self, id: ParamId) {
        match id {
            ParamId::Source => self.source = true,
            ParamId::Screening => self.screening = true,
            ParamId::ScreeningScalar => self.screening_scalar = true,
            ParamId::Diffusion => self.diffusion = true,
            ParamId::Boundary => self.boundary = true,
        }
    }

    pub fn contains(&self, id: ParamId) -> bool {
        match id {
            ParamId::Source => self.source,
            ParamId::Screening => self.screening,
            ParamId::ScreeningScalar => self.screening_scalar,
            ParamId::Diffusion => self.diffusion,
            ParamId::Boundary => self.boundary,
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        ParamId::ALL.into_iter().filter(|id| self.contains(*id))
    }
}

/// Gradient accumulators, one per differentiated parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub source: Option<GradientBuffer>,
    pub screening: Option<GradientBuffer>,
    pub screening_scalar: Option<f64>,
    pub diffusion: Option<GradientBuffer>,
    pub boundary: Option<GradientBuffer>,
}

impl ParamGradients {
    /// Zeroed buffers for `set`, shaped after the problem's textures.
    pub fn new(p: &Problem, set: &ParamSet) -> Result<Self> {
        let missing = |what: &str| Error::InvalidProblem(format!("{what} is not a texture and cannot be differentiated"));
        let elliptic = p.kind == PdeKind::Elliptic;
        let source = if set.source {
            Some(p.source.texture().ok_or_else(|| missing("source"))?.zeroed_gradient())
        } else {
            None
        };
        let screening = if set.screening {
            if !elliptic {
                return Err(Error::InvalidProblem("screening textures need the elliptic kind".into()));
            }
            Some(p.screening.texture().ok_or_else(|| missing("screening"))?.zeroed_gradient())
        } else {
            None
        };
        let screening_scalar = if set.screening_scalar {
            if p.kind == PdeKind::Poisson || p.scalar_sigma().is_none() {
                return Err(Error::InvalidProblem(
                    "scalar screening gradients need a constant screening coefficient".into(),
                ));
            }
            Some(0.0)
        } else {
            None
        };
        let diffusion = if set.diffusion {
            if !elliptic {
                return Err(Error::InvalidProblem("diffusion gradients need the elliptic kind".into()));
            }
            Some(p.diffusion.texture().ok_or_else(|| missing("diffusion"))?.zeroed_gradient())
        } else {
            None
        };
        let boundary = if set.boundary {
            Some(p.boundary.texture().ok_or_else(|| missing("boundary"))?.zeroed_gradient())
        } else {
            None
        };
        Ok(Self {
            source,
            screening,
            screening_scalar,
            diffusion,
            boundary,
        })
    }

    pub fn set(&self) -> ParamSet {
        ParamSet {
            source: self.source.is_some(),
            screening: self.screening.is_some(),
            screening_scalar: self.screening_scalar.is_some(),
            diffusion: self.diffusion.is_some(),
            boundary: self.boundary.is_some(),
        }
    }

    /// Gradient entries of one parameter (a single entry for the scalar).
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        match id {
            ParamId::Source => self.source.as_ref().map(|b| b.values()),
            ParamId::Screening => self.screening.as_ref().map(|b| b.values()),
            ParamId::ScreeningScalar => self.screening_scalar.as_ref().map(std::slice::from_ref),
            ParamId::Diffusion => self.diffusion.as_ref().map(|b| b.values()),
            ParamId::Boundary => self.boundary.as_ref().map(|b| b.values()),
        }
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut [f64]> {
        match id {
            ParamId::Source => self.source.as_mut().map(|b| b.values_mut()),
            ParamId::Screening => self.screening.as_mut().map(|b| b.values_mut()),
            ParamId::ScreeningScalar => self.screening_scalar.as_mut().map(std::slice::from_mut),
            ParamId::Diffusion => self.diffusion.as_mut().map(|b| b.values_mut()),
            ParamId::Boundary => self.boundary.as_mut().map(|b| b.values_mut()),
        }
    }

    pub fn clear(&mut self) {
        for id in ParamId::ALL {
            if let Some(v) = self.get_mut(id) {
                v.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for id in ParamId::ALL {
            if let Some(v) = self.get_mut(id) {
                v.iter_mut().for_each(|x| *x *= s);
            }
        }
    }

    /// Adds `other` entry by entry. Both must cover the same parameters.
    pub fn accumulate(&mut self, other: &ParamGradients) -> Result<()> {
        for id in ParamId::ALL {
            match (self.get_mut(id), other.get(id)) {
                (Some(a), Some(b)) if a.len() == b.len() => {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                }
                (None, None) => {}
                (a, b) => {
                    return Err(Error::LengthMismatch {
                        left: a.map_or(0, |v| v.len()),
                        right: b.map_or(0, |v| v.len()),
                    })
                }
            }
        }
        Ok(())
    }

    /// Root mean square over all entries.
    pub fn rms(&self) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for id in ParamId::ALL {
            if let Some(v) = self.get(id) {
                s += v.iter().map(|x| x * x).sum::<f64>();
                n += v.len();
            }
        }
        if n == 0 {
            0.0
        } else {
            (s / n as f64).sqrt()
        }
    }

    pub fn is_zero(&self) -> bool {
        ParamId::ALL
            .into_iter()
            .all(|id| self.get(id).is_none_or(|v| v.iter().all(|x| *x == 0.0)))
    }
}

/// Shape of the primal walk, checked against the replay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayCheck {
    pub first_vertex: Option<Vec3>,
    pub steps: u32,
}

impl From<&WalkOutcome> for ReplayCheck {
    fn from(o: &WalkOutcome) -> Self {
        Self {
            first_vertex: o.first_vertex,
            steps: o.steps,
        }
    }
}

/// Inputs of one replayed walk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjointInput {
    pub x0: Vec3,
    /// Value returned by the primal walk with the same seed.
    pub u_primal: f64,
    /// Derivative of the loss with respect to this walk's value.
    pub delta_u: f64,
    pub seed: PathSeed,
    pub replay: Option<ReplayCheck>,
}

impl AdjointInput {
    pub fn from_primal(x0: Vec3, seed: PathSeed, primal: &WalkOutcome, delta_u: f64) -> Self {
        Self {
            x0,
            u_primal: primal.value,
            delta_u,
            seed,
            replay: Some(primal.into()),
        }
    }
}

struct Replay<'a> {
    p: &'a Problem,
    g: &'a mut ParamGradients,
    seed: PathSeed,
    delta_u: f64,
    remaining: f64,
    screened: bool,
    throughput_params: bool,
    trace: Option<&'a mut Vec<Vec3>>,
}

impl<'a> Replay<'a> {
    fn new(p: &'a Problem, a: &AdjointInput, g: &'a mut ParamGradients) -> Self {
        let screened = p.kind == PdeKind::ScreenedPoisson;
        let throughput_params = g.screening_scalar.is_some()
            || (p.kind == PdeKind::Elliptic && (g.screening.is_some() || g.diffusion.is_some()));
        Self {
            p,
            g,
            seed: a.seed,
            delta_u: a.delta_u,
            remaining: a.u_primal,
            screened,
            throughput_params,
            trace: None,
        }
    }

    /// `U_k / mu_k`, the unweighted tail value times the throughput before
    /// the update.
    fn carry(&self, e: &TransitionEvent) -> Result<f64> {
        if e.mu != 0.0 {
            return Ok(self.remaining / e.mu);
        }
        if e.beta == 0.0 {
            return Ok(0.0);
        }
        let tail = solvers::walk(self.p, e.next, self.seed.derive(e.step as u64), &mut Silent)?;
        Ok(e.beta * tail.value)
    }
}

impl Observer for Replay<'_> {
    #[inline]
    fn vertex(&mut self, x: Vec3) {
        if let Some(t) = self.trace.as_deref_mut() {
            t.push(x);
        }
    }

    #[inline]
    fn source(&mut self, e: &SourceEvent) {
        let du = self.delta_u;
        if let (Some(buf), Some(tex)) = (self.g.source.as_mut(), self.p.source.texture()) {
            let w = e.beta * e.kernel.green_norm() / (e.alpha_x * e.alpha_y).sqrt();
            tex.backward(buf, e.y, du * w);
        }
        if self.screened {
            if let Some(s) = self.g.screening_scalar.as_mut() {
                *s += du * e.beta * e.f_y * e.kernel.sigma_derivatives().d_green_norm;
            }
        } else if let (Some(buf), Some(tex)) = (self.g.diffusion.as_mut(), self.p.diffusion.texture()) {
            // S ~ (alpha_x alpha_y)^{-1/2}
            tex.backward(buf, e.x, -0.5 * du * e.contribution / e.alpha_x);
            tex.backward(buf, e.y, -0.5 * du * e.contribution / e.alpha_y);
        }
        self.remaining -= e.contribution;
    }

    fn transition(&mut self, e: &TransitionEvent) -> Result<()> {
        if !self.throughput_params {
            return Ok(());
        }
        let c = self.delta_u * self.carry(e)?;
        if c == 0.0 {
            return Ok(());
        }
        if self.screened {
            if let Some(s) = self.g.screening_scalar.as_mut() {
                *s += c * e.kernel.sigma_derivatives().d_throughput;
            }
            return Ok(());
        }
        let a = e.alpha_next.value;
        let ratio = (a / e.alpha_x).sqrt();
        // d mu / d alpha at the current vertex and (directly) at the next one.
        let d_alpha_x = -0.5 * e.mu / e.alpha_x;
        let mut d_alpha_next = 0.5 * e.mu / a;
        if let (Some(buf), Some(tex)) = (self.g.diffusion.as_mut(), self.p.diffusion.texture()) {
            tex.backward(buf, e.x, c * d_alpha_x);
        }
        match e.kind {
            EventKind::Surface => {
                if let (Some(buf), Some(tex)) = (self.g.diffusion.as_mut(), self.p.diffusion.texture()) {
                    tex.backward(buf, e.next, c * d_alpha_next);
                }
            }
            EventKind::Volume => {
                let sigma_bar = self.p.sigma_bar;
                let d_sp = -ratio / sigma_bar;
                let j = &e.alpha_next;
                let (gx, gy) = (j.gradient[0], j.gradient[1]);
                let g2 = gx * gx + gy * gy;
                let d_sigma = d_sp / a;
                if let (Some(buf), Some(tex)) = (self.g.screening.as_mut(), self.p.screening.texture()) {
                    tex.backward(buf, e.next, c * d_sigma);
                }
                if let Some(s) = self.g.screening_scalar.as_mut() {
                    *s += c * d_sigma;
                }
                if let (Some(buf), Some(tex)) = (self.g.diffusion.as_mut(), self.p.diffusion.texture()) {
                    let a2 = a * a;
                    d_alpha_next += d_sp * (-e.sigma_next / a2 - 0.5 * j.laplacian / a2 + 0.5 * g2 / (a2 * a));
                    let adj = FieldJet {
                        value: c * d_alpha_next,
                        gradient: [c * d_sp * (-0.5 * gx / a2), c * d_sp * (-0.5 * gy / a2)],
                        laplacian: c * d_sp * 0.5 / a,
                    };
                    tex.backward_jet(buf, e.next, &adj);
                }
            }
        }
        Ok(())
    }

    #[inline]
    fn boundary(&mut self, e: &BoundaryEvent) {
        if let (Some(buf), Some(tex)) = (self.g.boundary.as_mut(), self.p.boundary.texture()) {
            tex.backward(buf, e.point, self.delta_u * e.beta);
        }
        self.remaining -= e.beta * self.p.boundary.eval(e.point, e.primitive);
    }
}

fn check_replay(a: &AdjointInput, out: &WalkOutcome) -> Result<()> {
    let Some(expected) = a.replay else {
        return Ok(());
    };
    let same_vertex = match (expected.first_vertex, out.first_vertex) {
        (Some(u), Some(v)) => u.bits_eq(v),
        (None, None) => true,
        _ => false,
    };
    if !same_vertex || expected.steps != out.steps {
        return Err(Error::ReplayDivergence(format!(
            "walk {:?}: primal took {} steps to reach {:?}, replay took {} to reach {:?}",
            a.seed, expected.steps, expected.first_vertex, out.steps, out.first_vertex
        )));
    }
    Ok(())
}

fn replay(p: &Problem, a: &AdjointInput, g: &mut ParamGradients, trace: Option<&mut Vec<Vec3>>) -> Result<WalkOutcome> {
    if a.delta_u == 0.0 && trace.is_none() && a.replay.is_none() {
        return Ok(WalkOutcome {
            value: a.u_primal,
            steps: 0,
            termination: solvers::Termination::Boundary,
            first_vertex: None,
        });
    }
    let mut obs = Replay::new(p, a, g);
    obs.trace = trace;
    let out = solvers::walk(p, a.x0, a.seed, &mut obs)?;
    check_replay(a, &out)?;
    Ok(out)
}

fn expect_kind(p: &Problem, kind: PdeKind) -> Result<()> {
    if p.kind != kind {
        return Err(Error::InvalidProblem(format!("expected a {kind:?} problem, got {:?}", p.kind)));
    }
    Ok(())
}

/// Differential walk for the Poisson equation. The throughput is constant,
/// so `u_primal` is not used.
pub fn grad_poisson(p: &Problem, a: &AdjointInput, g: &mut ParamGradients) -> Result<WalkOutcome> {
    expect_kind(p, PdeKind::Poisson)?;
    replay(p, a, g, None)
}

/// Path-replay walk for the screened Poisson equation.
pub fn grad_screened(p: &Problem, a: &AdjointInput, g: &mut ParamGradients) -> Result<WalkOutcome> {
    expect_kind(p, PdeKind::ScreenedPoisson)?;
    replay(p, a, g, None)
}

/// Path-replay delta-tracking walk for the variable-coefficient equation.
pub fn grad_elliptic(p: &Problem, a: &AdjointInput, g: &mut ParamGradients) -> Result<WalkOutcome> {
    expect_kind(p, PdeKind::Elliptic)?;
    replay(p, a, g, None)
}

/// Replay of whichever kind `p` is.
pub fn grad_walk(p: &Problem, a: &AdjointInput, g: &mut ParamGradients) -> Result<WalkOutcome> {
    replay(p, a, g, None)
}

/// Replay that also records the visited vertices, start point included.
pub fn grad_walk_traced(p: &Problem, a: &AdjointInput, g: &mut ParamGradients) -> Result<(WalkOutcome, Vec<Vec3>)> {
    let mut t = Vec::new();
    let out = replay(p, a, g, Some(&mut t))?;
    Ok((out, t))
}

/// Points per private gradient buffer. Fixed, so the reduction order does
/// not depend on the thread count.
const CHUNK: usize = 4;

/// Replays every walk of `primal` with per-point loss derivatives
/// `delta_u[i]` (each walk gets `delta_u[i] / n_walks`) and returns the
/// summed gradients.
pub fn adjoint_pass(
    p: &Problem,
    set: &ParamSet,
    points: &[Vec3],
    primal: &PrimalPass,
    delta_u: &[f64],
) -> Result<ParamGradients> {
    if delta_u.len() != points.len() {
        return Err(Error::LengthMismatch {
            left: delta_u.len(),
            right: points.len(),
        });
    }
    let n = primal.n_walks;
    if primal.outcomes.len() != points.len() * n {
        return Err(Error::LengthMismatch {
            left: primal.outcomes.len(),
            right: points.len() * n,
        });
    }
    let zero = ParamGradients::new(p, set)?;
    let chunks: Vec<ParamGradients> = points
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, pts)| {
            let mut g = zero.clone();
            for (k, &x) in pts.iter().enumerate() {
                let i = c * CHUNK + k;
                let du = delta_u[i] / n as f64;
                if du == 0.0 {
                    continue;
                }
                for j in 0..n {
                    let seed = walk_seed(primal.seed, i, n, j);
                    let a = AdjointInput::from_primal(x, seed, &primal.outcomes[i * n + j], du);
                    replay(p, &a, &mut g, None)?;
                }
            }
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = zero;
    for g in &chunks {
        total.accumulate(g)?;
    }
    Ok(total)
}

/// Central difference `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::InvalidProblem(format!("step must be positive, got {h}")));
    }
    Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
}

/// Copy of `p` with entry `index` of parameter `id` shifted by `delta`.
pub fn perturbed(p: &Problem, id: ParamId, index: usize, delta: f64) -> Result<Problem> {
    let mut q = p.clone();
    let values = match id {
        ParamId::Source => q.source.texture_mut().map(|t| t.values_mut()),
        ParamId::Screening => q.screening.texture_mut().map(|t| t.values_mut()),
        ParamId::Diffusion => q.diffusion.texture_mut().map(|t| t.values_mut()),
        ParamId::Boundary => match &mut q.boundary {
            crate::fields::BoundaryCondition::Texture(t) => Some(t.values_mut()),
            _ => None,
        },
        ParamId::ScreeningScalar => match &mut q.screening {
            crate::fields::Field::Constant(s) => {
                *s += delta;
                return Ok(q);
            }
            _ => None,
        },
    };
    let values = values.ok_or_else(|| Error::InvalidProblem(format!("{} is not a texture", id.name())))?;
    let n = values.len();
    let v = values
        .get_mut(index)
        .ok_or(Error::LengthMismatch { left: index, right: n })?;
    *v += delta;
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{BoundaryCondition, Field, GridTexture};
    use crate::geometry::Domain;
    use crate::solvers::{estimate_solution, primal_pass, solve};

    fn tex(f: impl Fn(f64, f64) -> f64) -> GridTexture {
        GridTexture::from_fn(8, 8, [-1.0, -1.0], [1.0, 1.0], f)
    }

    fn source_problem() -> Problem {
        Problem::poisson(
            Domain::unit_disk(),
            Field::Texture(tex(|x, y| 1.0 + 0.5 * x - 0.3 * y)),
            BoundaryCondition::Constant(0.0),
        )
    }

    fn elliptic_problem() -> Problem {
        Problem::elliptic(
            Domain::unit_disk(),
            Field::Texture(tex(|x, _| 1.0 + 0.3 * x)),
            BoundaryCondition::Constant(0.2),
            Field::Texture(tex(|x, y| 2.0 + x * y)),
            Field::Texture(tex(|x, y| 1.0 + 0.2 * x + 0.1 * y * y)),
        )
        .unwrap()
    }

    fn replay_one(p: &Problem, set: ParamSet, x: Vec3, seed: PathSeed, du: f64) -> ParamGradients {
        let mut g = ParamGradients::new(p, &set).unwrap();
        let o = solve(p, x, seed).unwrap();
        grad_walk(p, &AdjointInput::from_primal(x, seed, &o, du), &mut g).unwrap();
        g
    }

    #[test]
    fn zero_delta_leaves_buffers_untouched() {
        let p = source_problem();
        let g = replay_one(&p, ParamSet::only(ParamId::Source), Vec3::ZERO, PathSeed::new(1, 1), 0.0);
        assert!(g.is_zero());
    }

    #[test]
    fn source_footprints_sum_to_green_norms() {
        let p = source_problem();
        struct Norms(f64);
        impl Observer for Norms {
            fn source(&mut self, e: &SourceEvent) {
                self.0 += e.kernel.green_norm();
            }
        }
        for j in 0..50 {
            let seed = PathSeed::new(3, j);
            let mut n = Norms(0.0);
            solvers::walk(&p, Vec3::new2(0.1, 0.2), seed, &mut n).unwrap();
            let g = replay_one(&p, ParamSet::only(ParamId::Source), Vec3::new2(0.1, 0.2), seed, 1.0);
            let total = g.source.unwrap().sum();
            assert!((total - n.0).abs() < 1e-12 * n.0.max(1.0));
        }
    }

    #[test]
    fn gradients_are_linear_in_delta_u() {
        let p = elliptic_problem();
        let mut set = ParamSet::only(ParamId::Source);
        set.insert(ParamId::Screening);
        set.insert(ParamId::Diffusion);
        for j in 0..20 {
            let seed = PathSeed::new(5, j);
            let x = Vec3::new2(0.3, -0.2);
            let g1 = replay_one(&p, set, x, seed, 1.0);
            let g4 = replay_one(&p, set, x, seed, 0.25);
            for id in set.ids() {
                for (a, b) in g1.get(id).unwrap().iter().zip(g4.get(id).unwrap()) {
                    assert_eq!((a * 0.25).to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn screened_at_zero_matches_poisson_bitwise() {
        let a = source_problem();
        let mut b = a.clone();
        b.kind = PdeKind::ScreenedPoisson;
        b.screening = Field::Constant(0.0);
        let set = ParamSet::only(ParamId::Source);
        for j in 0..100 {
            let seed = PathSeed::new(8, j);
            let x = Vec3::new2(-0.2, 0.4);
            let ga = replay_one(&a, set, x, seed, 0.7);
            let gb = replay_one(&b, set, x, seed, 0.7);
            let (va, vb) = (ga.source.unwrap(), gb.source.unwrap());
            assert!(va.values().iter().zip(vb.values()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn zero_solution_has_zero_sigma_gradient() {
        let p = Problem::screened(Domain::unit_disk(), Field::Constant(0.0), BoundaryCondition::Constant(0.0), 3.0);
        for j in 0..100 {
            let g = replay_one(&p, ParamSet::only(ParamId::ScreeningScalar), Vec3::ZERO, PathSeed::new(2, j), 1.0);
            assert_eq!(g.screening_scalar, Some(0.0));
        }
    }

    #[test]
    fn replay_matches_primal_trace() {
        for p in [source_problem(), elliptic_problem()] {
            let set = if p.kind == PdeKind::Elliptic {
                ParamSet::only(ParamId::Diffusion)
            } else {
                ParamSet::only(ParamId::Source)
            };
            for j in 0..100 {
                let seed = PathSeed::new(4, j);
                let x = Vec3::new2(0.5, 0.1);
                let (o, trace) = solvers::trace_walk(&p, x, seed).unwrap();
                let mut g = ParamGradients::new(&p, &set).unwrap();
                let a = AdjointInput::from_primal(x, seed, &o, 1.0);
                let (r, replayed) = grad_walk_traced(&p, &a, &mut g).unwrap();
                assert_eq!(r.value.to_bits(), o.value.to_bits());
                assert_eq!(trace.len(), replayed.len());
                assert!(trace.iter().zip(&replayed).all(|(u, v)| u.bits_eq(*v)));
            }
        }
    }

    #[test]
    fn mismatched_replay_is_an_error() {
        let p = source_problem();
        let x = Vec3::ZERO;
        let o = solve(&p, x, PathSeed::new(1, 1)).unwrap();
        let mut g = ParamGradients::new(&p, &ParamSet::only(ParamId::Source)).unwrap();
        let a = AdjointInput::from_primal(x, PathSeed::new(1, 2), &o, 1.0);
        assert!(matches!(grad_poisson(&p, &a, &mut g), Err(Error::ReplayDivergence(_))));
    }

    #[test]
    fn wrong_kinds_and_parameters_are_rejected() {
        let p = source_problem();
        assert!(ParamGradients::new(&p, &ParamSet::only(ParamId::Diffusion)).is_err());
        assert!(ParamGradients::new(&p, &ParamSet::only(ParamId::ScreeningScalar)).is_err());
        assert!(ParamGradients::new(&p, &ParamSet::only(ParamId::Boundary)).is_err());
        let mut g = ParamGradients::new(&p, &ParamSet::only(ParamId::Source)).unwrap();
        let a = AdjointInput {
            x0: Vec3::ZERO,
            u_primal: 0.0,
            delta_u: 1.0,
            seed: PathSeed::new(0, 0),
            replay: None,
        };
        assert!(grad_screened(&p, &a, &mut g).is_err());
    }

    #[test]
    fn central_difference_of_a_quadratic() {
        let d = central_difference(|t| Ok(t * t), 3.0, 1e-4).unwrap();
        assert!((d - 6.0).abs() < 1e-6);
        assert!(central_difference(Ok, 0.0, 0.0).is_err());
    }

    /// Loss `sum_i u_i` over a few points; FD with common random numbers.
    fn fd_vs_adjoint(p: &Problem, id: ParamId, indices: &[usize], h: f64, n: usize) {
        let pts = [Vec3::new2(0.1, 0.1), Vec3::new2(-0.3, 0.2), Vec3::new2(0.2, -0.4)];
        let set = ParamSet::only(id);
        let primal = primal_pass(p, &pts, n, 99).unwrap();
        let g = adjoint_pass(p, &set, &pts, &primal, &[1.0; 3]).unwrap();
        let grad = g.get(id).unwrap();
        let max = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for &i in indices {
            let loss = |q: &Problem| -> Result<f64> {
                Ok(estimate_solution(q, &pts, n, 99)?.iter().map(|e| e.mean).sum())
            };
            let fd = (loss(&perturbed(p, id, i, h).unwrap()).unwrap() - loss(&perturbed(p, id, i, -h).unwrap()).unwrap())
                / (2.0 * h);
            let err = (fd - grad[i]).abs();
            assert!(err < 1e-4 * max + 1e-3 * fd.abs(), "{id:?}[{i}]: adjoint {} fd {fd}", grad[i]);
        }
    }

    #[test]
    fn source_gradient_matches_finite_differences() {
        fd_vs_adjoint(&source_problem(), ParamId::Source, &[18, 27, 36, 45], 1e-3, 200);
    }

    #[test]
    fn scalar_screening_gradient_matches_finite_differences() {
        let p = Problem::screened(Domain::unit_disk(), Field::Constant(1.0), BoundaryCondition::Constant(0.3), 4.0);
        fd_vs_adjoint(&p, ParamId::ScreeningScalar, &[0], 1e-4, 200);
    }

    #[test]
    fn elliptic_gradients_match_finite_differences() {
        let p = elliptic_problem();
        fd_vs_adjoint(&p, ParamId::Screening, &[19, 27, 36, 44], 1e-4, 100);
        fd_vs_adjoint(&p, ParamId::Diffusion, &[19, 27, 36, 44], 1e-5, 100);
        fd_vs_adjoint(&p, ParamId::Source, &[27, 36], 1e-4, 100);
        let mut q = p.clone();
        q.screening = Field::Constant(1.5);
        fd_vs_adjoint(&q, ParamId::ScreeningScalar, &[0], 1e-4, 100);
    }

    #[test]
    fn null_collision_tail_keeps_sigma_gradient_unbiased() {
        // sigma' = sigma_bar: every volume event has mu = 0 and the replay
        // needs the nested tail walk. du/dsigma at sigma_bar is compared with
        // a smooth FD of independent estimates.
        let mut p = Problem::elliptic(
            Domain::unit_disk(),
            Field::Constant(1.0),
            BoundaryCondition::Constant(0.0),
            Field::Constant(4.0),
            Field::Constant(1.0),
        )
        .unwrap();
        p.sigma_bar = 4.0;
        let pts = [Vec3::ZERO];
        let n = 40_000;
        let primal = primal_pass(&p, &pts, n, 5).unwrap();
        let set = ParamSet::only(ParamId::ScreeningScalar);
        let g = adjoint_pass(&p, &set, &pts, &primal, &[1.0]).unwrap();
        // u(0) = (1 - 1/I0(sqrt s)) / s, differentiated analytically.
        let u = |s: f64| (1.0 - 1.0 / crate::bessel::i0(s.sqrt())) / s;
        let exact = (u(4.0 + 1e-5) - u(4.0 - 1e-5)) / 2e-5;
        let got = g.screening_scalar.unwrap();
        assert!((got - exact).abs() < 0.1 * exact.abs(), "{got} vs {exact}");
    }
}
