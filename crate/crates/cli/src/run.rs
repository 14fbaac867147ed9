//! Command dispatch and output files.

use std::fs;
use std::path::{Path, PathBuf};

use gridfree::adjoint::ParamGradients;
use gridfree::experiments::{validate_gradient, GradientCheck, ValidationSettings};
use gridfree::io::{encode_csv, write_atomic, write_pfm, write_texture_csv, Image};
use gridfree::optimize::{measurement_lattice, optimize_with, LossSpec, Method, OptimizerConfig};
use gridfree::solvers::primal_pass;
use gridfree::{GridTexture, ParamId, ParamSet, PdeKind, Problem, Vec3};

use crate::config::{Command, ExperimentConfig, MethodConfig};
use crate::CliError;

/// Overrides from the command line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub seed: Option<u64>,
    /// Worker threads; all cores when absent.
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

/// What a successful run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub output: PathBuf,
    pub files: Vec<PathBuf>,
}

impl From<gridfree::Error> for CliError {
    fn from(e: gridfree::Error) -> Self {
        match e {
            gridfree::Error::Io(m) => CliError::Io(m),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

/// Loads, validates, and runs the experiment in `config_path`.
pub fn run(config_path: &Path, opts: &RunOptions) -> Result<RunSummary, CliError> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(o) = &opts.out {
        cfg.output = o.clone();
    }
    let base = config_path.parent().map(Path::to_path_buf).unwrap_or_default();
    if cfg.output.is_relative() && opts.out.is_none() {
        cfg.output = base.join(&cfg.output);
    }
    cfg.check()?;
    let problem = cfg.build_problem(&base)?;
    let target = match cfg.command {
        Command::Optimize => Some(cfg.build_target(&base)?),
        _ => None,
    };
    if cfg.command == Command::ValidateGrad {
        ParamGradients::new(&problem, &ParamSet::only(cfg.validate.param.into()))
            .map_err(|e| CliError::Config(format!("validate.param: {e}")))?;
    }
    if cfg.command == Command::Optimize {
        let mut set = ParamSet::default();
        for p in &cfg.optimize.params {
            set.insert((*p).into());
        }
        ParamGradients::new(&problem, &set).map_err(|e| CliError::Config(format!("optimize.params: {e}")))?;
    }

    let threads = opts.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    pool.install(|| {
        fs::create_dir_all(&cfg.output).map_err(|e| CliError::Io(format!("{}: {e}", cfg.output.display())))?;
        let mut out = Outputs {
            dir: cfg.output.clone(),
            files: Vec::new(),
        };
        out.manifest(&cfg, &problem)?;
        let result = match cfg.command {
            Command::Solve => solve(&cfg, &problem, &mut out),
            Command::ValidateGrad => validate(&cfg, &problem, &mut out),
            Command::Optimize => optimize(&cfg, &problem, target.as_ref().expect("built above"), &mut out),
        };
        result.map(|()| RunSummary {
            output: out.dir,
            files: out.files,
        })
    })
}

struct Outputs {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    fn bytes(&mut self, name: &str, data: &[u8]) -> Result<(), CliError> {
        let p = self.path(name);
        Ok(write_atomic(&p, data)?)
    }

    fn pfm(&mut self, name: &str, img: &Image) -> Result<(), CliError> {
        let p = self.path(name);
        Ok(write_pfm(&p, img)?)
    }

    fn texture(&mut self, stem: &str, t: &GridTexture) -> Result<(), CliError> {
        self.pfm(&format!("{stem}.pfm"), &Image::from_texture(t))?;
        let p = self.path(&format!("{stem}.csv"));
        Ok(write_texture_csv(&p, t)?)
    }

    /// The config with every default and derived value spelled out.
    fn manifest(&mut self, cfg: &ExperimentConfig, p: &Problem) -> Result<(), CliError> {
        let mut resolved = cfg.clone();
        resolved.pde.epsilon = Some(p.epsilon.value());
        if p.kind == PdeKind::Elliptic {
            resolved.pde.sigma_bar = Some(p.sigma_bar);
        }
        let text = toml::to_string(&resolved).map_err(|e| CliError::Runtime(format!("manifest: {e}")))?;
        self.bytes("manifest.toml", text.as_bytes())
    }
}

/// Image of per-point values on the measurement lattice; cells outside the
/// domain are zero.
fn lattice_image(n: usize, cells: &[usize], values: &[f64]) -> Image {
    let mut data = vec![0.0; n * n];
    for (c, v) in cells.iter().zip(values) {
        // Lattice row 0 is the bottom; image row 0 is the top.
        let (i, j) = (c % n, c / n);
        data[(n - 1 - j) * n + i] = *v;
    }
    Image {
        width: n,
        height: n,
        data,
    }
}

fn lattice(cfg: &ExperimentConfig, p: &Problem) -> (Vec<usize>, Vec<Vec3>) {
    measurement_lattice(&p.domain, cfg.grid.resolution, cfg.grid.margin)
        .into_iter()
        .unzip()
}

fn solve(cfg: &ExperimentConfig, p: &Problem, out: &mut Outputs) -> Result<(), CliError> {
    let (cells, points) = lattice(cfg, p);
    let n = cfg.grid.walks;
    let pass = primal_pass(p, &points, n, cfg.seed)?;
    let means: Vec<f64> = pass.estimates.iter().map(|e| e.mean).collect();
    let se: Vec<f64> = pass.estimates.iter().map(|e| e.standard_error()).collect();
    let r = cfg.grid.resolution;
    out.pfm("solution.pfm", &lattice_image(r, &cells, &means))?;
    out.pfm("standard_error.pfm", &lattice_image(r, &cells, &se))?;
    let rows: Vec<Vec<f64>> = points
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let steps = pass.outcomes[i * n..(i + 1) * n].iter().map(|o| o.steps as f64).sum::<f64>() / n as f64;
            vec![x.x, x.y, means[i], se[i], steps]
        })
        .collect();
    out.bytes(
        "stats.csv",
        encode_csv(&["x", "y", "mean", "standard_error", "mean_steps"], &rows).as_bytes(),
    )?;
    let summary = format!(
        "points,walks_per_point,mean_steps,aborted_walks\n{},{},{},{}\n",
        points.len(),
        n,
        pass.mean_steps(),
        pass.aborted
    );
    out.bytes("summary.csv", summary.as_bytes())
}

fn gradient_texture(p: &Problem, id: ParamId, values: &[f64]) -> Option<GridTexture> {
    let t = match id {
        ParamId::Source => p.source.texture(),
        ParamId::Screening => p.screening.texture(),
        ParamId::Diffusion => p.diffusion.texture(),
        ParamId::Boundary => p.boundary.texture(),
        ParamId::ScreeningScalar => None,
    }?;
    let (nx, ny) = t.resolution();
    let (min, max) = t.extent();
    GridTexture::new(nx, ny, min, max, values.to_vec()).ok()
}

fn check_rows(c: &GradientCheck, nx: usize) -> Vec<Vec<f64>> {
    (0..c.adjoint.len())
        .map(|k| {
            let rel = if c.dominant[k] { c.relative_error(k) } else { f64::NAN };
            vec![
                k as f64,
                (k % nx) as f64,
                (k / nx) as f64,
                c.adjoint[k],
                c.adjoint_se[k],
                c.finite_difference[k],
                c.difference_se[k],
                if c.dominant[k] { 1.0 } else { 0.0 },
                rel,
            ]
        })
        .collect()
}

fn validate(cfg: &ExperimentConfig, p: &Problem, out: &mut Outputs) -> Result<(), CliError> {
    let (_, points) = lattice(cfg, p);
    let id: ParamId = cfg.validate.param.into();
    let v = &cfg.validate;
    let settings = ValidationSettings {
        walks_per_batch: v.walks_per_batch,
        batches: v.batches,
        relative_step: v.relative_step,
        seed: cfg.seed,
    };
    let c = validate_gradient(p, id, &points, &settings)?;
    let grad = gradient_texture(p, id, &c.adjoint);
    let nx = grad.as_ref().map_or(1, |t| t.resolution().0);
    out.bytes(
        "gradient_check.csv",
        encode_csv(
            &[
                "index",
                "i",
                "j",
                "adjoint",
                "adjoint_se",
                "finite_difference",
                "difference_se",
                "dominant",
                "relative_error",
            ],
            &check_rows(&c, nx),
        )
        .as_bytes(),
    )?;
    if let Some(t) = &grad {
        out.texture(&format!("gradient_{}", id.name()), t)?;
    }
    let passed = c.passed();
    let summary = format!(
        "parameter = {}\nstatus = {}\ndominant_texels = {}\nmax_relative_error = {:e}\nrelative_error_limit = {}\nmax_relative_difference_se = {:e}\ndifference_se_limit = {}\nmax_relative_gradient_se = {:e}\n",
        id.name(),
        if passed { "PASS" } else { "FAIL" },
        c.dominant.iter().filter(|d| **d).count(),
        c.max_relative_error(),
        c.tolerance,
        c.max_relative_difference_se(),
        0.5 * c.tolerance,
        c.max_relative_adjoint_se(),
    );
    out.bytes("summary.txt", summary.as_bytes())?;
    if passed {
        Ok(())
    } else {
        Err(CliError::ValidationFailed(format!(
            "{}: max relative error {:.3e} (limit {}), difference SE {:.3e} (limit {})",
            id.name(),
            c.max_relative_error(),
            c.tolerance,
            c.max_relative_difference_se(),
            0.5 * c.tolerance
        )))
    }
}

fn parameter_snapshot(
    out: &mut Outputs,
    p: &Problem,
    ids: &[ParamId],
    tag: &str,
    grads: Option<&ParamGradients>,
) -> Result<(), CliError> {
    for &id in ids {
        let values = gridfree::optimize::parameter_values(p, id)?;
        match gradient_texture(p, id, &values) {
            Some(t) => out.texture(&format!("{}_{tag}", id.name()), &t)?,
            None => out.bytes(
                &format!("{}_{tag}.csv", id.name()),
                encode_csv(&["value"], std::slice::from_ref(&values)).as_bytes(),
            )?,
        }
        if let Some(g) = grads.and_then(|g| g.get(id)) {
            match gradient_texture(p, id, g) {
                Some(t) => out.pfm(&format!("gradient_{}_{tag}.pfm", id.name()), &Image::from_texture(&t))?,
                None => out.bytes(
                    &format!("gradient_{}_{tag}.csv", id.name()),
                    encode_csv(&["gradient"], &[g.to_vec()]).as_bytes(),
                )?,
            }
        }
    }
    Ok(())
}

fn optimize(cfg: &ExperimentConfig, p: &Problem, target: &Problem, out: &mut Outputs) -> Result<(), CliError> {
    let (cells, points) = lattice(cfg, p);
    let o = &cfg.optimize;
    let mut params = ParamSet::default();
    for id in &o.params {
        params.insert((*id).into());
    }
    let ids: Vec<ParamId> = params.ids().collect();
    let loss = LossSpec::synthetic(target, points, cfg.grid.walks, cfg.seed)?;
    let r = cfg.grid.resolution;
    out.pfm("reference.pfm", &lattice_image(r, &cells, &loss.reference))?;
    parameter_snapshot(out, target, &ids, "target", None)?;
    parameter_snapshot(out, p, &ids, "initial", None)?;
    let oc = OptimizerConfig {
        method: match o.method {
            MethodConfig::Adam => Method::Adam,
            MethodConfig::GradientDescent => Method::GradientDescent,
        },
        step_size: o.step_size,
        iterations: o.iterations,
        walks_per_point: cfg.grid.walks,
        params,
        refresh_sigma_bar: o.refresh_sigma_bar && cfg.pde.sigma_bar.is_none(),
    };
    let every = o.snapshot_every;
    let mut rows = Vec::with_capacity(o.iterations);
    let mut snapshot_error = None;
    let result = optimize_with(p, &loss, &oc, cfg.seed, |rec, q, g| {
        rows.push(vec![rec.iteration as f64, rec.loss, rec.grad_rms, rec.sigma_bar]);
        if (rec.iteration + 1) % every == 0 {
            let tag = format!("{:04}", rec.iteration + 1);
            if let Err(e) = parameter_snapshot(out, q, &ids, &tag, Some(g)) {
                snapshot_error = Some(e);
                return Err(gridfree::Error::Io("snapshot failed".into()));
            }
        }
        Ok(())
    });
    if let Some(e) = snapshot_error {
        return Err(e);
    }
    let result = result?;
    out.bytes(
        "loss.csv",
        encode_csv(&["iteration", "loss", "grad_rms", "sigma_bar"], &rows).as_bytes(),
    )?;
    parameter_snapshot(out, &result.problem, &ids, "final", None)?;
    let (_, points) = lattice(cfg, &result.problem);
    let pass = primal_pass(&result.problem, &points, cfg.grid.walks, cfg.seed)?;
    out.pfm("final_solution.pfm", &lattice_image(r, &cells, &pass.means()))
}
