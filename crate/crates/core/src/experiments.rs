//! Preset problems: the gradient-validation configurations and the three
//! synthetic inverse problems (source, screening, diffusion).

use crate::adjoint::{adjoint_pass, perturbed, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::fields::{BoundaryCondition, Field, GridTexture};
use crate::geometry::{Domain, Primitive, Side, Vec3};
use crate::optimize::{measurement_grid, parameter_values, LossSpec, OptimizerConfig};
use crate::rng::mix64;
use crate::solvers::{estimate_solution, primal_pass, Problem};

/// Unit disk with a round and a rectangular hole.
pub fn disk_with_obstacles() -> Domain {
    Domain::new(
        2,
        vec![
            Primitive::ball(Vec3::ZERO, 1.0, Side::Inside),
            Primitive::ball(Vec3::new2(0.35, 0.3), 0.15, Side::Outside),
            Primitive::aabb(Vec3::new2(-0.55, -0.45), Vec3::new2(-0.3, -0.25), Side::Outside),
        ],
    )
    .expect("valid preset domain")
}

fn bump(x: f64, y: f64, cx: f64, cy: f64, w: f64) -> f64 {
    (-((x - cx).powi(2) + (y - cy).powi(2)) / (w * w)).exp()
}

const EXTENT: ([f64; 2], [f64; 2]) = ([-1.0, -1.0], [1.0, 1.0]);

fn texture(n: usize, f: impl Fn(f64, f64) -> f64) -> GridTexture {
    GridTexture::from_fn(n, n, EXTENT.0, EXTENT.1, f)
}

/// Reference source: a positive and a negative bump on a constant.
pub fn source_pattern(x: f64, y: f64) -> f64 {
    1.5 + 1.5 * bump(x, y, 0.3, -0.35, 0.35) - 1.0 * bump(x, y, -0.4, 0.35, 0.3)
}

/// Reference screening.
pub fn screening_pattern(x: f64, y: f64) -> f64 {
    1.0 + 8.0 * bump(x, y, -0.2, 0.3, 0.4) + 4.0 * bump(x, y, 0.45, -0.3, 0.3)
}

/// Reference diffusion.
pub fn diffusion_pattern(x: f64, y: f64) -> f64 {
    1.0 + 1.5 * bump(x, y, 0.2, 0.35, 0.4) + 0.8 * bump(x, y, -0.4, -0.3, 0.35)
}

/// Sizes of a desk-scale inverse problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeskScale {
    /// Measurement lattice is `grid x grid` over the bounding box.
    pub grid: usize,
    /// Parameter textures are `texture x texture`.
    pub texture: usize,
    pub walks_per_point: usize,
    pub iterations: usize,
    pub step_size: f64,
}

impl Default for DeskScale {
    fn default() -> Self {
        Self {
            grid: 32,
            texture: 16,
            walks_per_point: 256,
            iterations: 100,
            step_size: 2e-2,
        }
    }
}

/// A synthetic inverse problem.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub name: &'static str,
    /// Problem that produced the reference measurements.
    pub target: Problem,
    /// Starting point of the optimization.
    pub initial: Problem,
    pub points: Vec<Vec3>,
    pub config: OptimizerConfig,
}

impl Experiment {
    pub fn loss(&self, seed: u64) -> Result<LossSpec> {
        LossSpec::synthetic(&self.target, self.points.clone(), self.config.walks_per_point, seed)
    }
}

fn config(scale: &DeskScale, id: ParamId) -> OptimizerConfig {
    OptimizerConfig {
        step_size: scale.step_size,
        iterations: scale.iterations,
        walks_per_point: scale.walks_per_point,
        params: ParamSet::only(id),
        ..OptimizerConfig::default()
    }
}

fn points(domain: &Domain, scale: &DeskScale) -> Vec<Vec3> {
    measurement_grid(domain, scale.grid, 0.02)
}

/// Recover the source of a screened Poisson problem (`sigma = 1`, zero
/// boundary values) from a constant initial guess.
pub fn source_experiment(scale: &DeskScale) -> Result<Experiment> {
    let domain = disk_with_obstacles();
    let make = |f: GridTexture| Problem::screened(domain.clone(), Field::Texture(f), BoundaryCondition::Constant(0.0), 1.0);
    let target = make(texture(scale.texture, source_pattern));
    let initial = make(texture(scale.texture, |_, _| 0.5));
    Ok(Experiment {
        name: "source",
        points: points(&domain, scale),
        target,
        initial,
        config: config(scale, ParamId::Source),
    })
}

/// Recover a screening texture with `alpha = 1`, `f = 1`, zero boundary values.
pub fn screening_experiment(scale: &DeskScale) -> Result<Experiment> {
    let domain = disk_with_obstacles();
    let make = |s: GridTexture| {
        Problem::elliptic(
            domain.clone(),
            Field::Constant(1.0),
            BoundaryCondition::Constant(0.0),
            Field::Texture(s),
            Field::Constant(1.0),
        )
    };
    Ok(Experiment {
        name: "screening",
        points: points(&domain, scale),
        target: make(texture(scale.texture, screening_pattern))?,
        initial: make(texture(scale.texture, |_, _| 3.0))?,
        config: config(scale, ParamId::Screening),
    })
}

/// Recover a diffusion texture with `sigma = 1`, `f = 1`, zero boundary values.
pub fn diffusion_experiment(scale: &DeskScale) -> Result<Experiment> {
    let domain = disk_with_obstacles();
    let make = |a: GridTexture| {
        Problem::elliptic(
            domain.clone(),
            Field::Constant(1.0),
            BoundaryCondition::Constant(0.0),
            Field::Constant(1.0),
            Field::Texture(a),
        )
    };
    Ok(Experiment {
        name: "diffusion",
        points: points(&domain, scale),
        target: make(texture(scale.texture, diffusion_pattern))?,
        initial: make(texture(scale.texture, |_, _| 1.0))?,
        config: config(scale, ParamId::Diffusion),
    })
}

/// Gradient-validation problem for one parameter: unit disk, 8x8 texture,
/// zero boundary values.
pub fn validation_problem(id: ParamId) -> Result<Problem> {
    let domain = Domain::unit_disk();
    let zero = BoundaryCondition::Constant(0.0);
    let n = 8;
    Ok(match id {
        ParamId::Source => Problem::screened(domain, Field::Texture(texture(n, source_pattern)), zero, 10.0),
        ParamId::ScreeningScalar => Problem::screened(domain, Field::Constant(1.0), zero, 10.0),
        ParamId::Screening => Problem::elliptic(
            domain,
            Field::Constant(1.0),
            zero,
            Field::Texture(texture(n, screening_pattern)),
            Field::Constant(1.0),
        )?,
        ParamId::Diffusion => Problem::elliptic(
            domain,
            Field::Constant(1.0),
            zero,
            Field::Constant(1.0),
            Field::Texture(texture(n, diffusion_pattern)),
        )?,
        ParamId::Boundary => Problem::poisson(
            domain,
            Field::Constant(1.0),
            BoundaryCondition::Texture(texture(n, |x, y| 0.5 + 0.5 * x * y)),
        ),
    })
}

/// 16x16 lattice inside the unit disk.
pub fn validation_points() -> Vec<Vec3> {
    measurement_grid(&Domain::unit_disk(), 16, 0.02)
}

/// Relative-error tolerance used when validating gradients of `id`.
pub fn gradient_tolerance(id: ParamId) -> f64 {
    match id {
        ParamId::Diffusion => 0.05,
        _ => 0.02,
    }
}

/// Texels whose |gradient| is at least this fraction of the largest one are
/// compared against finite differences.
pub const DOMINANT_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSettings {
    pub walks_per_batch: usize,
    /// Independent batches; standard errors come from the spread across batches.
    pub batches: usize,
    /// Finite-difference step relative to `max(|theta|, 1)`.
    pub relative_step: f64,
    pub seed: u64,
}

impl Default for ValidationSettings {
    fn default() -> Self {
        Self {
            walks_per_batch: 50,
            batches: 10,
            relative_step: 1e-3,
            seed: 1,
        }
    }
}

/// Per-texel comparison of the adjoint gradient against common-random-number
/// central differences for the objective `mean_i u(x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub id: ParamId,
    pub tolerance: f64,
    pub adjoint: Vec<f64>,
    /// Standard error of `adjoint`.
    pub adjoint_se: Vec<f64>,
    /// `NaN` on texels that were not compared.
    pub finite_difference: Vec<f64>,
    /// Standard error of `adjoint - finite_difference`.
    pub difference_se: Vec<f64>,
    pub dominant: Vec<bool>,
}

impl GradientCheck {
    pub fn relative_error(&self, k: usize) -> f64 {
        (self.adjoint[k] - self.finite_difference[k]).abs() / self.finite_difference[k].abs()
    }

    fn dominant_max(&self, f: impl Fn(usize) -> f64) -> f64 {
        (0..self.adjoint.len())
            .filter(|&k| self.dominant[k])
            .map(f)
            .fold(0.0, f64::max)
    }

    pub fn max_relative_error(&self) -> f64 {
        self.dominant_max(|k| self.relative_error(k))
    }

    /// Largest standard error of the difference relative to |fd|.
    pub fn max_relative_difference_se(&self) -> f64 {
        self.dominant_max(|k| self.difference_se[k] / self.finite_difference[k].abs())
    }

    /// Largest standard error of the adjoint gradient relative to its value.
    pub fn max_relative_adjoint_se(&self) -> f64 {
        self.dominant_max(|k| self.adjoint_se[k] / self.adjoint[k].abs())
    }

    pub fn passed(&self) -> bool {
        self.dominant.iter().any(|d| *d)
            && self.max_relative_error() < self.tolerance
            && self.max_relative_difference_se() < 0.5 * self.tolerance
    }
}

fn mean_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let m = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (m, f64::NAN);
    }
    let var = samples.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

pub fn batch_seed(seed: u64, batch: usize) -> u64 {
    mix64(seed ^ mix64(0xBA7C_4000 + batch as u64))
}

/// Adjoint gradient of `mean_i u(x_i)` for each batch.
pub fn adjoint_batches(p: &Problem, id: ParamId, points: &[Vec3], s: &ValidationSettings) -> Result<Vec<Vec<f64>>> {
    let set = ParamSet::only(id);
    let delta = vec![1.0 / points.len() as f64; points.len()];
    (0..s.batches)
        .map(|b| {
            let primal = primal_pass(p, points, s.walks_per_batch, batch_seed(s.seed, b))?;
            let g = adjoint_pass(p, &set, points, &primal, &delta)?;
            Ok(g.get(id).expect("requested buffer").to_vec())
        })
        .collect()
}

/// Mean and standard error per texel over batches.
pub fn batch_statistics(batches: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = batches.first().map_or(0, Vec::len);
    (0..n)
        .map(|k| mean_se(&batches.iter().map(|b| b[k]).collect::<Vec<_>>()))
        .unzip()
}

/// Runs the adjoint on every batch, picks the dominant texels, and
/// differentiates those by central differences on the same seeds.
pub fn validate_gradient(p: &Problem, id: ParamId, points: &[Vec3], s: &ValidationSettings) -> Result<GradientCheck> {
    if s.batches < 2 || s.walks_per_batch < 1 || !(s.relative_step > 0.0) {
        return Err(Error::InvalidProblem(
            "validation needs at least 2 batches, 1 walk, and a positive step".into(),
        ));
    }
    let theta = parameter_values(p, id)?;
    let adj = adjoint_batches(p, id, points, s)?;
    let (adjoint, adjoint_se) = batch_statistics(&adj);
    let gmax = adjoint.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let dominant: Vec<bool> = adjoint.iter().map(|g| gmax > 0.0 && g.abs() >= DOMINANT_FRACTION * gmax).collect();
    let mut finite_difference = vec![f64::NAN; theta.len()];
    let mut difference_se = vec![f64::NAN; theta.len()];
    let objective = |q: &Problem, seed: u64| -> Result<f64> {
        let est = estimate_solution(q, points, s.walks_per_batch, seed)?;
        Ok(est.iter().map(|e| e.mean).sum::<f64>() / points.len() as f64)
    };
    for k in (0..theta.len()).filter(|&k| dominant[k]) {
        let h = s.relative_step * theta[k].abs().max(1.0);
        let plus = perturbed(p, id, k, h)?;
        let minus = perturbed(p, id, k, -h)?;
        let mut fd = Vec::with_capacity(s.batches);
        let mut diff = Vec::with_capacity(s.batches);
        for (b, a) in adj.iter().enumerate() {
            let seed = batch_seed(s.seed, b);
            let d = (objective(&plus, seed)? - objective(&minus, seed)?) / (2.0 * h);
            fd.push(d);
            diff.push(a[k] - d);
        }
        finite_difference[k] = mean_se(&fd).0;
        difference_se[k] = mean_se(&diff).1;
    }
    Ok(GradientCheck {
        id,
        tolerance: gradient_tolerance(id),
        adjoint,
        adjoint_se,
        finite_difference,
        difference_se,
        dominant,
    })
}
