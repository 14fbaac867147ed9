//! Experiment configuration files (TOML). See the README for the grammar.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gridfree::experiments;
use gridfree::io::read_texture_csv;
use gridfree::{BoundaryCondition, Domain, Field, GridTexture, ParamId, Primitive, Problem, Side, Vec3};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Solve,
    ValidateGrad,
    Optimize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Command,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub pde: PdeConfig,
    pub domain: DomainConfig,
    #[serde(default)]
    pub fields: FieldsConfig,
    #[serde(default)]
    pub boundary: BoundarySpec,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub validate: ValidateConfig,
    #[serde(default)]
    pub optimize: OptimizeConfig,
}

fn default_seed() -> u64 {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PdeKindConfig {
    Poisson,
    Screened,
    Elliptic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeConfig {
    pub kind: PdeKindConfig,
    /// Fictitious screening; derived from the coefficients when absent.
    pub sigma_bar: Option<f64>,
    /// Boundary shell width; `1e-3 x` the domain diameter when absent.
    pub epsilon: Option<f64>,
    #[serde(default = "default_max_steps")]
    pub max_steps: u32,
    #[serde(default = "default_radial_tol")]
    pub radial_tol: f64,
}

fn default_max_steps() -> u32 {
    gridfree::solvers::DEFAULT_MAX_STEPS
}

fn default_radial_tol() -> f64 {
    gridfree::kernels::DEFAULT_RADIAL_TOL
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainPreset {
    UnitDisk,
    UnitBall,
    UnitSquare,
    DiskWithObstacles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub preset: Option<DomainPreset>,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub primitives: Vec<PrimitiveConfig>,
}

fn default_dim() -> usize {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SideConfig {
    #[default]
    Inside,
    Outside,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PrimitiveConfig {
    Ball {
        center: Vec<f64>,
        radius: f64,
        #[serde(default)]
        side: SideConfig,
    },
    Box {
        min: Vec<f64>,
        max: Vec<f64>,
        #[serde(default)]
        side: SideConfig,
    },
    Segment {
        a: Vec<f64>,
        b: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternName {
    Source,
    Screening,
    Diffusion,
}

/// A scalar field. Textures span the bounding box of the domain unless read
/// from a file, which carries its own extent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FieldSpec {
    Constant { value: f64 },
    /// Texture CSV, relative to the config file.
    Texture { file: PathBuf },
    /// Texture filled with one value.
    Uniform { value: f64, resolution: usize },
    /// Texture sampled from a built-in pattern.
    Preset { name: PatternName, resolution: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldsConfig {
    #[serde(default = "one")]
    pub source: FieldSpec,
    #[serde(default = "zero")]
    pub screening: FieldSpec,
    #[serde(default = "one")]
    pub diffusion: FieldSpec,
}

fn one() -> FieldSpec {
    FieldSpec::Constant { value: 1.0 }
}

fn zero() -> FieldSpec {
    FieldSpec::Constant { value: 0.0 }
}

impl Default for FieldsConfig {
    fn default() -> Self {
        Self {
            source: one(),
            screening: zero(),
            diffusion: one(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BoundarySpec {
    Constant { value: f64 },
    /// One value per domain primitive, in order.
    PerPrimitive { values: Vec<f64> },
    /// `g(x) = gradient . x + offset`.
    Linear { gradient: Vec<f64>, offset: f64 },
    Texture { file: PathBuf },
    Uniform { value: f64, resolution: usize },
}

impl Default for BoundarySpec {
    fn default() -> Self {
        BoundarySpec::Constant { value: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Measurement lattice is `resolution x resolution` over the bounding box.
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    /// Lattice points closer than this to the boundary are dropped.
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_walks")]
    pub walks: usize,
}

fn default_resolution() -> usize {
    32
}

fn default_margin() -> f64 {
    0.02
}

fn default_walks() -> usize {
    256
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            resolution: default_resolution(),
            margin: default_margin(),
            walks: default_walks(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamName {
    Source,
    Screening,
    ScreeningScalar,
    Diffusion,
    Boundary,
}

impl From<ParamName> for ParamId {
    fn from(p: ParamName) -> Self {
        match p {
            ParamName::Source => ParamId::Source,
            ParamName::Screening => ParamId::Screening,
            ParamName::ScreeningScalar => ParamId::ScreeningScalar,
            ParamName::Diffusion => ParamId::Diffusion,
            ParamName::Boundary => ParamId::Boundary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    #[serde(default = "default_param")]
    pub param: ParamName,
    #[serde(default = "default_walks_per_batch")]
    pub walks_per_batch: usize,
    #[serde(default = "default_batches")]
    pub batches: usize,
    #[serde(default = "default_relative_step")]
    pub relative_step: f64,
}

fn default_param() -> ParamName {
    ParamName::Source
}

fn default_walks_per_batch() -> usize {
    50
}

fn default_batches() -> usize {
    10
}

fn default_relative_step() -> f64 {
    1e-3
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            param: default_param(),
            walks_per_batch: default_walks_per_batch(),
            batches: default_batches(),
            relative_step: default_relative_step(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodConfig {
    Adam,
    GradientDescent,
}

/// Coefficients that generate the synthetic reference measurements. Fields
/// left out are taken from the problem being optimized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub source: Option<FieldSpec>,
    pub screening: Option<FieldSpec>,
    pub diffusion: Option<FieldSpec>,
    pub boundary: Option<BoundarySpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeConfig {
    #[serde(default = "default_params")]
    pub params: Vec<ParamName>,
    #[serde(default = "default_method")]
    pub method: MethodConfig,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Parameter and gradient images are written every this many iterations.
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: usize,
    #[serde(default = "default_true")]
    pub refresh_sigma_bar: bool,
    #[serde(default)]
    pub target: TargetConfig,
}

fn default_params() -> Vec<ParamName> {
    vec![ParamName::Source]
}

fn default_method() -> MethodConfig {
    MethodConfig::Adam
}

fn default_step_size() -> f64 {
    2e-2
}

fn default_iterations() -> usize {
    100
}

fn default_snapshot_every() -> usize {
    10
}

fn default_true() -> bool {
    true
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            params: default_params(),
            method: default_method(),
            step_size: default_step_size(),
            iterations: default_iterations(),
            snapshot_every: default_snapshot_every(),
            refresh_sigma_bar: true,
            target: TargetConfig::default(),
        }
    }
}

fn config_error(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

fn vec3(field: &str, v: &[f64], dim: usize) -> Result<Vec3, CliError> {
    if v.len() != dim {
        return Err(config_error(field, format!("expected {dim} coordinates, got {}", v.len())));
    }
    Ok(Vec3::new(v[0], v[1], v.get(2).copied().unwrap_or(0.0)))
}

fn side(s: SideConfig) -> Side {
    match s {
        SideConfig::Inside => Side::Inside,
        SideConfig::Outside => Side::Outside,
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Checks every scalar setting, naming the offending field.
    pub fn check(&self) -> Result<(), CliError> {
        if let Some(eps) = self.pde.epsilon {
            if !(eps > 0.0) {
                return Err(config_error("pde.epsilon", format!("must be positive, got {eps}")));
            }
        }
        if let Some(s) = self.pde.sigma_bar {
            if !(s > 0.0) {
                return Err(config_error("pde.sigma_bar", format!("must be positive, got {s}")));
            }
        }
        if self.pde.max_steps == 0 {
            return Err(config_error("pde.max_steps", "must be at least 1"));
        }
        if !(self.pde.radial_tol > 0.0) {
            return Err(config_error("pde.radial_tol", "must be positive"));
        }
        if self.grid.resolution == 0 {
            return Err(config_error("grid.resolution", "must be at least 1"));
        }
        if self.grid.walks == 0 {
            return Err(config_error("grid.walks", "must be at least 1"));
        }
        if !(self.grid.margin >= 0.0) {
            return Err(config_error("grid.margin", "must be non-negative"));
        }
        let v = &self.validate;
        if v.walks_per_batch == 0 {
            return Err(config_error("validate.walks_per_batch", "must be at least 1"));
        }
        if v.batches < 2 {
            return Err(config_error("validate.batches", "must be at least 2"));
        }
        if !(v.relative_step > 0.0) {
            return Err(config_error("validate.relative_step", "must be positive"));
        }
        let o = &self.optimize;
        if o.params.is_empty() {
            return Err(config_error("optimize.params", "must name at least one parameter"));
        }
        if !(o.step_size > 0.0) {
            return Err(config_error("optimize.step_size", "must be positive"));
        }
        if o.iterations == 0 {
            return Err(config_error("optimize.iterations", "must be at least 1"));
        }
        if o.snapshot_every == 0 {
            return Err(config_error("optimize.snapshot_every", "must be at least 1"));
        }
        Ok(())
    }

    pub fn build_domain(&self) -> Result<Domain, CliError> {
        let d = &self.domain;
        match (d.preset, d.primitives.is_empty()) {
            (Some(_), false) => Err(config_error("domain", "give either a preset or primitives, not both")),
            (None, true) => Err(config_error("domain", "needs a preset or at least one primitive")),
            (Some(p), true) => Ok(match p {
                DomainPreset::UnitDisk => Domain::unit_disk(),
                DomainPreset::UnitBall => Domain::unit_ball(),
                DomainPreset::UnitSquare => Domain::unit_square(),
                DomainPreset::DiskWithObstacles => experiments::disk_with_obstacles(),
            }),
            (None, false) => {
                let prims = d
                    .primitives
                    .iter()
                    .enumerate()
                    .map(|(k, p)| {
                        let f = |name: &str| format!("domain.primitives[{k}].{name}");
                        Ok(match p {
                            PrimitiveConfig::Ball { center, radius, side: s } => {
                                if !(*radius > 0.0) {
                                    return Err(config_error(&f("radius"), "must be positive"));
                                }
                                Primitive::ball(vec3(&f("center"), center, d.dim)?, *radius, side(*s))
                            }
                            PrimitiveConfig::Box { min, max, side: s } => {
                                Primitive::aabb(vec3(&f("min"), min, d.dim)?, vec3(&f("max"), max, d.dim)?, side(*s))
                            }
                            PrimitiveConfig::Segment { a, b } => {
                                Primitive::segment(vec3(&f("a"), a, d.dim)?, vec3(&f("b"), b, d.dim)?)
                            }
                        })
                    })
                    .collect::<Result<Vec<_>, CliError>>()?;
                Domain::new(d.dim, prims).map_err(|e| config_error("domain", e))
            }
        }
    }

    /// Directory that relative texture paths are resolved against.
    fn texture(&self, base: &Path, field: &str, file: &Path) -> Result<GridTexture, CliError> {
        let path = if file.is_absolute() { file.to_path_buf() } else { base.join(file) };
        read_texture_csv(&path).map_err(|e| config_error(field, e))
    }

    pub fn build_field(&self, base: &Path, domain: &Domain, field: &str, spec: &FieldSpec) -> Result<Field, CliError> {
        let (lo, hi) = domain.bounds();
        let (min, max) = ([lo.x, lo.y], [hi.x, hi.y]);
        let res = |n: usize| {
            if n == 0 {
                Err(config_error(&format!("{field}.resolution"), "must be at least 1"))
            } else {
                Ok(n)
            }
        };
        Ok(match spec {
            FieldSpec::Constant { value } => Field::Constant(*value),
            FieldSpec::Texture { file } => Field::Texture(self.texture(base, field, file)?),
            FieldSpec::Uniform { value, resolution } => {
                let n = res(*resolution)?;
                Field::Texture(GridTexture::constant(n, n, min, max, *value))
            }
            FieldSpec::Preset { name, resolution } => {
                let n = res(*resolution)?;
                let f = match name {
                    PatternName::Source => experiments::source_pattern,
                    PatternName::Screening => experiments::screening_pattern,
                    PatternName::Diffusion => experiments::diffusion_pattern,
                };
                Field::Texture(GridTexture::from_fn(n, n, min, max, f))
            }
        })
    }

    pub fn build_boundary(&self, base: &Path, domain: &Domain, spec: &BoundarySpec) -> Result<BoundaryCondition, CliError> {
        let (lo, hi) = domain.bounds();
        Ok(match spec {
            BoundarySpec::Constant { value } => BoundaryCondition::Constant(*value),
            BoundarySpec::PerPrimitive { values } => {
                if values.len() != domain.primitives().len() {
                    return Err(config_error(
                        "boundary.values",
                        format!("expected {} values, got {}", domain.primitives().len(), values.len()),
                    ));
                }
                BoundaryCondition::PerPrimitive(values.clone())
            }
            BoundarySpec::Linear { gradient, offset } => BoundaryCondition::Linear {
                gradient: vec3("boundary.gradient", gradient, domain.dim())?,
                offset: *offset,
            },
            BoundarySpec::Texture { file } => BoundaryCondition::Texture(self.texture(base, "boundary", file)?),
            BoundarySpec::Uniform { value, resolution } => {
                if *resolution == 0 {
                    return Err(config_error("boundary.resolution", "must be at least 1"));
                }
                BoundaryCondition::Texture(GridTexture::constant(
                    *resolution,
                    *resolution,
                    [lo.x, lo.y],
                    [hi.x, hi.y],
                    *value,
                ))
            }
        })
    }

    fn assemble(
        &self,
        domain: Domain,
        source: Field,
        boundary: BoundaryCondition,
        screening: Field,
        diffusion: Field,
    ) -> Result<Problem, CliError> {
        if self.pde.kind != PdeKindConfig::Elliptic && !matches!(diffusion, Field::Constant(a) if a == 1.0) {
            return Err(config_error("fields.diffusion", "only the elliptic kind has a diffusion coefficient"));
        }
        let mut p = match self.pde.kind {
            PdeKindConfig::Poisson => {
                if screening.texture().is_some() || screening.eval(Vec3::ZERO) != 0.0 {
                    return Err(config_error("fields.screening", "the poisson kind has no screening"));
                }
                Problem::poisson(domain, source, boundary)
            }
            PdeKindConfig::Screened => match screening {
                Field::Constant(s) if s >= 0.0 => Problem::screened(domain, source, boundary, s),
                _ => {
                    return Err(config_error(
                        "fields.screening",
                        "the screened kind needs a non-negative constant",
                    ))
                }
            },
            PdeKindConfig::Elliptic => Problem::elliptic(domain, source, boundary, screening, diffusion)
                .map_err(|e| config_error("fields", e))?,
        };
        if let Some(eps) = self.pde.epsilon {
            p = p.with_epsilon(eps).map_err(|e| config_error("pde.epsilon", e))?;
        }
        if let Some(s) = self.pde.sigma_bar {
            p.sigma_bar = s;
        }
        p.max_steps = self.pde.max_steps;
        p.radial_tol = self.pde.radial_tol;
        p.validate().map_err(|e| config_error("pde", e))?;
        Ok(p)
    }

    /// The problem described by the config. `base` resolves texture paths.
    pub fn build_problem(&self, base: &Path) -> Result<Problem, CliError> {
        let domain = self.build_domain()?;
        let f = &self.fields;
        let source = self.build_field(base, &domain, "fields.source", &f.source)?;
        let screening = self.build_field(base, &domain, "fields.screening", &f.screening)?;
        let diffusion = self.build_field(base, &domain, "fields.diffusion", &f.diffusion)?;
        let boundary = self.build_boundary(base, &domain, &self.boundary)?;
        self.assemble(domain, source, boundary, screening, diffusion)
    }

    /// The problem that generates the reference measurements of `optimize`.
    pub fn build_target(&self, base: &Path) -> Result<Problem, CliError> {
        let domain = self.build_domain()?;
        let t = &self.optimize.target;
        let f = &self.fields;
        let source = self.build_field(base, &domain, "optimize.target.source", t.source.as_ref().unwrap_or(&f.source))?;
        let screening = self.build_field(
            base,
            &domain,
            "optimize.target.screening",
            t.screening.as_ref().unwrap_or(&f.screening),
        )?;
        let diffusion = self.build_field(
            base,
            &domain,
            "optimize.target.diffusion",
            t.diffusion.as_ref().unwrap_or(&f.diffusion),
        )?;
        let boundary = self.build_boundary(base, &domain, t.boundary.as_ref().unwrap_or(&self.boundary))?;
        let mut p = self.assemble(domain, source, boundary, screening, diffusion)?;
        if self.pde.sigma_bar.is_none() && p.kind == gridfree::PdeKind::Elliptic {
            p.sigma_bar = p.auto_sigma_bar().map_err(|e| config_error("optimize.target", e))?;
        }
        Ok(p)
    }
}
