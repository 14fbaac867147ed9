//! Spatial parameter fields backed by cubic B-spline textures.
//!
//! Texel values are spline coefficients (no prefiltering). Texel `(i, j)` is
//! centered at `min + ((i + 0.5) dx, (j + 0.5) dy)` and stored row-major with
//! `j` as the row. Taps outside the grid clamp to the edge texels, so the
//! interpolant stays C² everywhere, including outside the extent.

use crate::error::{Error, Result};
use crate::geometry::Vec3;

#[derive(Debug, Clone, PartialEq)]
pub struct GridTexture {
    nx: usize,
    ny: usize,
    min: [f64; 2],
    max: [f64; 2],
    values: Vec<f64>,
}

/// Value, spatial gradient and Laplacian of a field at a point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FieldJet {
    pub value: f64,
    pub gradient: [f64; 2],
    pub laplacian: f64,
}

/// Cubic B-spline weights for the four taps around fractional offset `t`.
#[inline]
pub fn bspline_weights(t: f64) -> [f64; 4] {
    let s = 1.0 - t;
    let t2 = t * t;
    let t3 = t2 * t;
    [
        s * s * s / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

#[inline]
fn bspline_d1(t: f64) -> [f64; 4] {
    let s = 1.0 - t;
    [
        -0.5 * s * s,
        1.5 * t * t - 2.0 * t,
        -1.5 * t * t + t + 0.5,
        0.5 * t * t,
    ]
}

#[inline]
fn bspline_d2(t: f64) -> [f64; 4] {
    [1.0 - t, 3.0 * t - 2.0, 1.0 - 3.0 * t, t]
}

/// The 4x4 interpolation footprint of a point.
#[derive(Debug, Clone, Copy)]
struct Footprint {
    ix: [usize; 4],
    iy: [usize; 4],
    wx: [f64; 4],
    wy: [f64; 4],
}

#[derive(Debug, Clone, Copy)]
struct JetFootprint {
    base: Footprint,
    dwx: [f64; 4],
    dwy: [f64; 4],
    d2wx: [f64; 4],
    d2wy: [f64; 4],
}

impl GridTexture {
    pub fn new(nx: usize, ny: usize, min: [f64; 2], max: [f64; 2], values: Vec<f64>) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::ShapeMismatch("texture resolution must be positive".into()));
        }
        if values.len() != nx * ny {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: nx * ny,
            });
        }
        if !(max[0] > min[0] && max[1] > min[1]) {
            return Err(Error::ShapeMismatch("texture extent is empty".into()));
        }
        Ok(Self {
            nx,
            ny,
            min,
            max,
            values,
        })
    }

    pub fn constant(nx: usize, ny: usize, min: [f64; 2], max: [f64; 2], value: f64) -> Self {
        Self::new(nx, ny, min, max, vec![value; nx * ny]).unwrap()
    }

    /// Samples `f` at texel centers.
    pub fn from_fn(nx: usize, ny: usize, min: [f64; 2], max: [f64; 2], f: impl Fn(f64, f64) -> f64) -> Self {
        let mut t = Self::constant(nx, ny, min, max, 0.0);
        for j in 0..ny {
            for i in 0..nx {
                let c = t.texel_center(i, j);
                t.values[j * nx + i] = f(c[0], c[1]);
            }
        }
        t
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn extent(&self) -> ([f64; 2], [f64; 2]) {
        (self.min, self.max)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn texel_size(&self) -> [f64; 2] {
        [
            (self.max[0] - self.min[0]) / self.nx as f64,
            (self.max[1] - self.min[1]) / self.ny as f64,
        ]
    }

    pub fn texel_center(&self, i: usize, j: usize) -> [f64; 2] {
        let d = self.texel_size();
        [
            self.min[0] + (i as f64 + 0.5) * d[0],
            self.min[1] + (j as f64 + 0.5) * d[1],
        ]
    }

    pub fn zeroed_gradient(&self) -> GradientBuffer {
        GradientBuffer::new(self.nx, self.ny)
    }

    #[inline]
    fn axis(coord: f64, min: f64, size: f64, n: usize) -> (usize, f64) {
        let u = (coord - min) / size - 0.5;
        let f = u.floor();
        // Far outside the grid every tap clamps to the same edge texel.
        let base = f.clamp(-4.0, n as f64 + 4.0);
        ((base + 4.0) as usize, u - f)
    }

    #[inline]
    fn taps(start: usize, n: usize) -> [usize; 4] {
        // `start` carries a +4 offset; tap k sits at start - 4 - 1 + k.
        let mut out = [0usize; 4];
        for (k, o) in out.iter_mut().enumerate() {
            let idx = start as isize - 5 + k as isize;
            *o = idx.clamp(0, n as isize - 1) as usize;
        }
        out
    }

    #[inline]
    fn footprint(&self, p: Vec3) -> Footprint {
        let d = self.texel_size();
        let (sx, tx) = Self::axis(p.x, self.min[0], d[0], self.nx);
        let (sy, ty) = Self::axis(p.y, self.min[1], d[1], self.ny);
        Footprint {
            ix: Self::taps(sx, self.nx),
            iy: Self::taps(sy, self.ny),
            wx: bspline_weights(tx),
            wy: bspline_weights(ty),
        }
    }

    #[inline]
    fn jet_footprint(&self, p: Vec3) -> JetFootprint {
        let d = self.texel_size();
        let (sx, tx) = Self::axis(p.x, self.min[0], d[0], self.nx);
        let (sy, ty) = Self::axis(p.y, self.min[1], d[1], self.ny);
        let mut dwx = bspline_d1(tx);
        let mut dwy = bspline_d1(ty);
        let mut d2wx = bspline_d2(tx);
        let mut d2wy = bspline_d2(ty);
        for k in 0..4 {
            dwx[k] /= d[0];
            dwy[k] /= d[1];
            d2wx[k] /= d[0] * d[0];
            d2wy[k] /= d[1] * d[1];
        }
        JetFootprint {
            base: Footprint {
                ix: Self::taps(sx, self.nx),
                iy: Self::taps(sy, self.ny),
                wx: bspline_weights(tx),
                wy: bspline_weights(ty),
            },
            dwx,
            dwy,
            d2wx,
            d2wy,
        }
    }

    /// Interpolated value: the B-spline weighted sum of the 4x4 footprint.
    #[inline]
    pub fn eval(&self, p: Vec3) -> f64 {
        let fp = self.footprint(p);
        let mut acc = 0.0;
        for b in 0..4 {
            let row = fp.iy[b] * self.nx;
            let mut r = 0.0;
            for a in 0..4 {
                r += fp.wx[a] * self.values[row + fp.ix[a]];
            }
            acc += fp.wy[b] * r;
        }
        acc
    }

    /// Value with analytic gradient and Laplacian of the interpolant.
    pub fn eval_jet(&self, p: Vec3) -> FieldJet {
        let fp = self.jet_footprint(p);
        let mut j = FieldJet::default();
        for b in 0..4 {
            let row = fp.base.iy[b] * self.nx;
            let (mut v, mut dv, mut d2v) = (0.0, 0.0, 0.0);
            for a in 0..4 {
                let c = self.values[row + fp.base.ix[a]];
                v += fp.base.wx[a] * c;
                dv += fp.dwx[a] * c;
                d2v += fp.d2wx[a] * c;
            }
            j.value += fp.base.wy[b] * v;
            j.gradient[0] += fp.base.wy[b] * dv;
            j.gradient[1] += fp.dwy[b] * v;
            j.laplacian += fp.base.wy[b] * d2v + fp.d2wy[b] * v;
        }
        j
    }

    /// `grad[ij] += delta * w_ij(p)` over the footprint.
    #[inline]
    pub fn backward(&self, grad: &mut GradientBuffer, p: Vec3, delta: f64) {
        if delta == 0.0 {
            return;
        }
        let fp = self.footprint(p);
        for b in 0..4 {
            let row = fp.iy[b] * self.nx;
            let wb = delta * fp.wy[b];
            for a in 0..4 {
                grad.values[row + fp.ix[a]] += wb * fp.wx[a];
            }
        }
    }

    /// Reverse-mode scatter of adjoints attached to the value, the gradient
    /// and the Laplacian of the interpolant at `p`.
    pub fn backward_jet(&self, grad: &mut GradientBuffer, p: Vec3, adj: &FieldJet) {
        let fp = self.jet_footprint(p);
        for b in 0..4 {
            let row = fp.base.iy[b] * self.nx;
            for a in 0..4 {
                let wx = fp.base.wx[a];
                let wy = fp.base.wy[b];
                let w = adj.value * wx * wy
                    + adj.gradient[0] * fp.dwx[a] * wy
                    + adj.gradient[1] * wx * fp.dwy[b]
                    + adj.laplacian * (fp.d2wx[a] * wy + wx * fp.d2wy[b]);
                grad.values[row + fp.base.ix[a]] += w;
            }
        }
    }
}

/// Per-texel accumulator for reverse-mode derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    nx: usize,
    ny: usize,
    values: Vec<f64>,
}

impl GradientBuffer {
    pub fn new(nx: usize, ny: usize) -> Self {
        Self {
            nx,
            ny,
            values: vec![0.0; nx * ny],
        }
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn accumulate(&mut self, other: &GradientBuffer) -> Result<()> {
        if other.values.len() != self.values.len() {
            return Err(Error::LengthMismatch {
                left: self.values.len(),
                right: other.values.len(),
            });
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// A spatially varying coefficient.
#[derive(Debug, Clone, PartialEq)]
pub enum Field {
    Constant(f64),
    Texture(GridTexture),
}

impl Field {
    #[inline]
    pub fn eval(&self, p: Vec3) -> f64 {
        match self {
            Field::Constant(c) => *c,
            Field::Texture(t) => t.eval(p),
        }
    }

    pub fn eval_jet(&self, p: Vec3) -> FieldJet {
        match self {
            Field::Constant(c) => FieldJet {
                value: *c,
                ..FieldJet::default()
            },
            Field::Texture(t) => t.eval_jet(p),
        }
    }

    pub fn texture(&self) -> Option<&GridTexture> {
        match self {
            Field::Texture(t) => Some(t),
            Field::Constant(_) => None,
        }
    }

    pub fn texture_mut(&mut self) -> Option<&mut GridTexture> {
        match self {
            Field::Texture(t) => Some(t),
            Field::Constant(_) => None,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Field::Constant(_))
    }
}

/// Dirichlet boundary values.
#[derive(Debug, Clone, PartialEq)]
pub enum BoundaryCondition {
    Constant(f64),
    /// One value per domain primitive.
    PerPrimitive(Vec<f64>),
    /// A texture evaluated at the boundary point.
    Texture(GridTexture),
    /// `g(x) = gradient . x + offset`; harmonic, useful as a reference.
    Linear { gradient: Vec3, offset: f64 },
}

impl BoundaryCondition {
    #[inline]
    pub fn eval(&self, p: Vec3, primitive: usize) -> f64 {
        match self {
            BoundaryCondition::Constant(c) => *c,
            BoundaryCondition::PerPrimitive(v) => v.get(primitive).copied().unwrap_or(0.0),
            BoundaryCondition::Texture(t) => t.eval(p),
            BoundaryCondition::Linear { gradient, offset } => gradient.dot(p) + offset,
        }
    }

    pub fn texture(&self) -> Option<&GridTexture> {
        match self {
            BoundaryCondition::Texture(t) => Some(t),
            _ => None,
        }
    }
}

/// Smooth positive map used to keep σ and α positive during optimization.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`softplus`].
#[inline]
pub fn softplus_grad(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}
