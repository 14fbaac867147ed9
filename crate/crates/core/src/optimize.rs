//! L2 inverse problems: loss on a measurement grid, Adam, and the
//! optimization loop that alternates primal and adjoint passes.

use crate::adjoint::{adjoint_pass, ParamGradients, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::fields::{softplus, softplus_grad, softplus_inverse, BoundaryCondition, Field};
use crate::geometry::{Domain, Vec3};
use crate::rng::mix64;
use crate::solvers::{estimate_solution, primal_pass, Estimate, PdeKind, Problem};

/// Regular `n x n` lattice over the domain bounds (the `z = 0` slice in 3D),
/// keeping points farther than `margin` from the boundary. Each point comes
/// with its cell index `j * n + i`.
pub fn measurement_lattice(domain: &Domain, n: usize, margin: f64) -> Vec<(usize, Vec3)> {
    let (lo, hi) = domain.bounds();
    let mut out = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let p = Vec3::new2(
                lo.x + (hi.x - lo.x) * (i as f64 + 0.5) / n as f64,
                lo.y + (hi.y - lo.y) * (j as f64 + 0.5) / n as f64,
            );
            if domain.signed_distance(p).distance > margin {
                out.push((j * n + i, p));
            }
        }
    }
    out
}

pub fn measurement_grid(domain: &Domain, n: usize, margin: f64) -> Vec<Vec3> {
    measurement_lattice(domain, n, margin).into_iter().map(|(_, p)| p).collect()
}

/// Mean squared error against reference values at fixed points.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub points: Vec<Vec3>,
    pub reference: Vec<f64>,
}

impl LossSpec {
    pub fn new(points: Vec<Vec3>, reference: Vec<f64>) -> Result<Self> {
        if points.len() != reference.len() {
            return Err(Error::LengthMismatch {
                left: points.len(),
                right: reference.len(),
            });
        }
        Ok(Self { points, reference })
    }

    /// Reference values from `target` at ten times `n_walks`, on a seed
    /// stream disjoint from the optimization seeds.
    pub fn synthetic(target: &Problem, points: Vec<Vec3>, n_walks: usize, seed: u64) -> Result<Self> {
        let est = estimate_solution(target, &points, 10 * n_walks, reference_seed(seed))?;
        let reference = est.iter().map(|e| e.mean).collect();
        Self::new(points, reference)
    }

    pub fn evaluate(&self, values: &[f64]) -> Result<(f64, Vec<f64>)> {
        loss_and_delta(values, &self.reference)
    }
}

/// `(1/N) sum (u_i - r_i)^2` and its derivatives `2 (u_i - r_i) / N`.
pub fn loss_and_delta(values: &[f64], reference: &[f64]) -> Result<(f64, Vec<f64>)> {
    if values.len() != reference.len() {
        return Err(Error::LengthMismatch {
            left: values.len(),
            right: reference.len(),
        });
    }
    let n = values.len().max(1) as f64;
    let mut loss = 0.0;
    let delta = values
        .iter()
        .zip(reference)
        .map(|(u, r)| {
            let d = u - r;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, delta))
}

/// Same as [`loss_and_delta`] on estimate means.
pub fn loss_of_estimates(est: &[Estimate], reference: &[f64]) -> Result<(f64, Vec<f64>)> {
    let u: Vec<f64> = est.iter().map(|e| e.mean).collect();
    loss_and_delta(&u, reference)
}

pub fn reference_seed(seed: u64) -> u64 {
    mix64(seed ^ 0x5EED_0F7A_26E7_u64)
}

pub fn iteration_seed(seed: u64, iteration: usize) -> u64 {
    mix64(seed.wrapping_add(mix64(iteration as u64 + 1)))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One Adam update with bias correction.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, step_size: f64) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters, {} gradients, state of {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= step_size * mh / (vh.sqrt() + ADAM_EPS);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Adam,
    GradientDescent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub method: Method,
    pub step_size: f64,
    pub iterations: usize,
    pub walks_per_point: usize,
    pub params: ParamSet,
    /// Recompute `sigma_bar` from the current coefficients every iteration
    /// (elliptic kind only).
    pub refresh_sigma_bar: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: Method::Adam,
            step_size: 2e-2,
            iterations: 100,
            walks_per_point: 32,
            params: ParamSet::only(ParamId::Source),
            refresh_sigma_bar: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidProblem(format!("step size must be positive, got {}", self.step_size)));
        }
        if self.iterations < 1 || self.walks_per_point < 1 {
            return Err(Error::InvalidProblem("iterations and walks per point must be at least 1".into()));
        }
        if self.params == ParamSet::default() {
            return Err(Error::InvalidProblem("no parameters to optimize".into()));
        }
        Ok(())
    }
}

/// Whether `id` is optimized through the softplus map to stay positive.
pub fn is_positive(id: ParamId) -> bool {
    matches!(id, ParamId::Screening | ParamId::ScreeningScalar | ParamId::Diffusion)
}

/// Current values of one parameter of `p`.
pub fn parameter_values(p: &Problem, id: ParamId) -> Result<Vec<f64>> {
    let v = match id {
        ParamId::Source => p.source.texture().map(|t| t.values().to_vec()),
        ParamId::Screening => p.screening.texture().map(|t| t.values().to_vec()),
        ParamId::Diffusion => p.diffusion.texture().map(|t| t.values().to_vec()),
        ParamId::Boundary => p.boundary.texture().map(|t| t.values().to_vec()),
        ParamId::ScreeningScalar => p.scalar_sigma().map(|s| vec![s]),
    };
    v.ok_or_else(|| Error::InvalidProblem(format!("{} cannot be optimized in this problem", id.name())))
}

/// Overwrites one parameter of `p`.
pub fn set_parameter_values(p: &mut Problem, id: ParamId, values: &[f64]) -> Result<()> {
    let dst: &mut [f64] = match id {
        ParamId::Source => p.source.texture_mut().map(|t| t.values_mut()),
        ParamId::Screening => p.screening.texture_mut().map(|t| t.values_mut()),
        ParamId::Diffusion => p.diffusion.texture_mut().map(|t| t.values_mut()),
        ParamId::Boundary => match &mut p.boundary {
            BoundaryCondition::Texture(t) => Some(t.values_mut()),
            _ => None,
        },
        ParamId::ScreeningScalar => match &mut p.screening {
            Field::Constant(s) => Some(std::slice::from_mut(s)),
            Field::Texture(_) => None,
        },
    }
    .ok_or_else(|| Error::InvalidProblem(format!("{} cannot be optimized in this problem", id.name())))?;
    if dst.len() != values.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} has {} entries, got {}",
            id.name(),
            dst.len(),
            values.len()
        )));
    }
    dst.copy_from_slice(values);
    Ok(())
}

/// Smallest value a positive parameter is mapped from at initialization.
const POSITIVE_FLOOR: f64 = 1e-6;

/// Loss and parameter gradients at the current parameters.
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub loss: f64,
    pub estimates: Vec<Estimate>,
    pub gradients: ParamGradients,
}

/// Primal pass, loss, and the paired adjoint pass on the same seeds.
pub fn loss_gradient(p: &Problem, loss: &LossSpec, set: &ParamSet, n_walks: usize, seed: u64) -> Result<LossGradient> {
    let primal = primal_pass(p, &loss.points, n_walks, seed)?;
    let (l, delta) = loss_of_estimates(&primal.estimates, &loss.reference)?;
    let gradients = adjoint_pass(p, set, &loss.points, &primal, &delta)?;
    Ok(LossGradient {
        loss: l,
        estimates: primal.estimates,
        gradients,
    })
}

/// One row of the optimization history.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Loss at the parameters before this iteration's update.
    pub loss: f64,
    /// Root mean square of the parameter gradients.
    pub grad_rms: f64,
    pub sigma_bar: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub history: Vec<IterationRecord>,
    pub problem: Problem,
}

struct Latent {
    id: ParamId,
    values: Vec<f64>,
    state: AdamState,
}

/// Runs the optimization loop. `on_iteration` sees each record, the
/// problem after the update, and the gradients that produced it.
pub fn optimize_with(
    p: &Problem,
    loss: &LossSpec,
    cfg: &OptimizerConfig,
    seed: u64,
    mut on_iteration: impl FnMut(&IterationRecord, &Problem, &ParamGradients) -> Result<()>,
) -> Result<OptimizeResult> {
    cfg.validate()?;
    let mut p = p.clone();
    // Fail early on parameters the problem cannot provide.
    ParamGradients::new(&p, &cfg.params)?;
    let mut latents: Vec<Latent> = cfg
        .params
        .ids()
        .map(|id| {
            let v = parameter_values(&p, id)?;
            let values: Vec<f64> = if is_positive(id) {
                v.iter().map(|x| softplus_inverse(x.max(POSITIVE_FLOOR))).collect()
            } else {
                v
            };
            let state = AdamState::new(values.len());
            Ok(Latent { id, values, state })
        })
        .collect::<Result<_>>()?;
    for l in &latents {
        apply_latent(&mut p, l)?;
    }
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        if p.kind == PdeKind::Elliptic && cfg.refresh_sigma_bar {
            p.sigma_bar = p.auto_sigma_bar()?;
        }
        let lg = loss_gradient(&p, loss, &cfg.params, cfg.walks_per_point, iteration_seed(seed, it))?;
        let record = IterationRecord {
            iteration: it,
            loss: lg.loss,
            grad_rms: lg.gradients.rms(),
            sigma_bar: p.sigma_bar,
        };
        for l in &mut latents {
            let g = lg.gradients.get(l.id).expect("buffer for every optimized parameter");
            let g: Vec<f64> = if is_positive(l.id) {
                g.iter().zip(&l.values).map(|(g, x)| g * softplus_grad(*x)).collect()
            } else {
                g.to_vec()
            };
            match cfg.method {
                Method::Adam => adam_step(&mut l.values, &g, &mut l.state, cfg.step_size)?,
                Method::GradientDescent => {
                    for (x, g) in l.values.iter_mut().zip(&g) {
                        *x -= cfg.step_size * g;
                    }
                }
            }
            apply_latent(&mut p, l)?;
        }
        on_iteration(&record, &p, &lg.gradients)?;
        history.push(record);
    }
    if p.kind == PdeKind::Elliptic && cfg.refresh_sigma_bar {
        p.sigma_bar = p.auto_sigma_bar()?;
    }
    Ok(OptimizeResult { history, problem: p })
}

pub fn optimize(p: &Problem, loss: &LossSpec, cfg: &OptimizerConfig, seed: u64) -> Result<OptimizeResult> {
    optimize_with(p, loss, cfg, seed, |_, _, _| Ok(()))
}

fn apply_latent(p: &mut Problem, l: &Latent) -> Result<()> {
    if is_positive(l.id) {
        let v: Vec<f64> = l.values.iter().map(|x| softplus(*x)).collect();
        set_parameter_values(p, l.id, &v)
    } else {
        set_parameter_values(p, l.id, &l.values)
    }
}

/// Moving average over a window.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || xs.len() < window {
        return Vec::new();
    }
    xs.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::GridTexture;

    #[test]
    fn loss_examples() {
        let (l, d) = loss_and_delta(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(l, 0.0);
        assert!(d.iter().all(|x| *x == 0.0));
        let (l, d) = loss_and_delta(&[2.0], &[0.0]).unwrap();
        assert_eq!((l, d[0]), (4.0, 4.0));
        assert!(matches!(loss_and_delta(&[1.0], &[]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn loss_delta_is_the_directional_derivative() {
        let u = [0.3, -1.2, 2.5, 0.0];
        let r = [0.1, 0.4, 2.0, -0.7];
        let du = [0.5, -0.25, 1.0, 2.0];
        let (_, delta) = loss_and_delta(&u, &r).unwrap();
        let dot: f64 = delta.iter().zip(&du).map(|(a, b)| a * b).sum();
        let h = 1e-6;
        let shift = |s: f64| -> f64 {
            let v: Vec<f64> = u.iter().zip(&du).map(|(a, b)| a + s * b).collect();
            loss_and_delta(&v, &r).unwrap().0
        };
        let fd = (shift(h) - shift(-h)) / (2.0 * h);
        assert!((fd - dot).abs() < 1e-8);
    }

    #[test]
    fn adam_with_zero_gradient_only_decays_moments() {
        let mut x = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut x, &[0.0, 0.0], &mut s, 0.1).unwrap();
        assert_eq!(x, vec![1.0, -2.0]);
        s.m = vec![1.0, 1.0];
        s.v = vec![1.0, 1.0];
        adam_step(&mut x, &[0.0, 0.0], &mut s, 1e-3).unwrap();
        assert!((s.m[0] - 0.9).abs() < 1e-15 && (s.v[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn adam_step_size_approaches_the_learning_rate() {
        let mut x = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        let mut last = [0.0; 2];
        for _ in 0..2000 {
            let before = x.clone();
            adam_step(&mut x, &[3.0, -3.0], &mut s, 0.01).unwrap();
            last = [x[0] - before[0], x[1] - before[1]];
        }
        assert!((last[0] + 0.01).abs() < 1e-6, "{last:?}");
        assert_eq!(last[0], -last[1]);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut s = AdamState::new(2);
        assert!(matches!(
            adam_step(&mut [0.0; 3], &[0.0; 3], &mut s, 0.1),
            Err(Error::ShapeMismatch(_))
        ));
    }

    fn small_source_problem(f: impl Fn(f64, f64) -> f64) -> Problem {
        Problem::screened(
            Domain::unit_disk(),
            Field::Texture(GridTexture::from_fn(4, 4, [-1.0, -1.0], [1.0, 1.0], f)),
            BoundaryCondition::Constant(0.0),
            1.0,
        )
    }

    #[test]
    fn parameters_round_trip() {
        let mut p = small_source_problem(|x, _| x);
        let v = parameter_values(&p, ParamId::Source).unwrap();
        let w: Vec<f64> = v.iter().map(|x| x + 1.0).collect();
        set_parameter_values(&mut p, ParamId::Source, &w).unwrap();
        assert_eq!(parameter_values(&p, ParamId::Source).unwrap(), w);
        assert_eq!(parameter_values(&p, ParamId::ScreeningScalar).unwrap(), vec![1.0]);
        assert!(parameter_values(&p, ParamId::Diffusion).is_err());
        assert!(set_parameter_values(&mut p, ParamId::Source, &[1.0]).is_err());
    }

    #[test]
    fn optimization_reduces_the_loss_and_is_deterministic() {
        let target = small_source_problem(|x, y| 2.0 + x - y);
        let start = small_source_problem(|_, _| 1.0);
        let pts = measurement_grid(&target.domain, 6, 0.05);
        let loss = LossSpec::synthetic(&target, pts, 16, 1).unwrap();
        let cfg = OptimizerConfig {
            iterations: 60,
            walks_per_point: 16,
            step_size: 0.1,
            ..OptimizerConfig::default()
        };
        let a = optimize(&start, &loss, &cfg, 2).unwrap();
        let b = optimize(&start, &loss, &cfg, 2).unwrap();
        assert_eq!(a.history.len(), 60);
        assert!(a.history.iter().zip(&b.history).all(|(x, y)| x.loss.to_bits() == y.loss.to_bits()));
        let first = a.history[0].loss;
        let last = a.history.last().unwrap().loss;
        assert!(last < 0.1 * first, "{first} -> {last}");
    }

    #[test]
    fn starting_at_the_reference_barely_moves() {
        let target = small_source_problem(|x, y| 2.0 + x - y);
        let pts = measurement_grid(&target.domain, 6, 0.05);
        let loss = LossSpec::synthetic(&target, pts, 64, 3).unwrap();
        let cfg = OptimizerConfig {
            iterations: 10,
            walks_per_point: 64,
            step_size: 1e-3,
            ..OptimizerConfig::default()
        };
        let r = optimize(&target, &loss, &cfg, 4).unwrap();
        let v0 = parameter_values(&target, ParamId::Source).unwrap();
        let v1 = parameter_values(&r.problem, ParamId::Source).unwrap();
        let drift = v0.iter().zip(&v1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        // Adam moves each texel by at most the step size per iteration.
        assert!(drift <= 10.0 * 1e-3 + 1e-12, "{drift}");
        assert!(r.history[0].loss < 1e-3);
    }

    #[test]
    fn moving_average_windows() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 2).is_empty());
    }
}
