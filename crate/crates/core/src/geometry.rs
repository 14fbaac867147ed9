//! Fixed domains built from primitive shapes.
//!
//! A [`Domain`] is the intersection of the regions described by its
//! primitives. Each primitive contributes a signed distance that is positive on
//! the domain side; the domain distance is the minimum over primitives. Two
//! dimensional domains live in the `z = 0` plane.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub const fn new2(x: f64, y: f64) -> Self {
        Self { x, y, z: 0.0 }
    }

    #[inline]
    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn norm2(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.norm2().sqrt()
    }

    pub fn axis(self, i: usize) -> f64 {
        match i {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }

    fn set_axis(&mut self, i: usize, v: f64) {
        match i {
            0 => self.x = v,
            1 => self.y = v,
            _ => self.z = v,
        }
    }

    /// Bitwise equality, used by replay checks.
    pub fn bits_eq(self, o: Vec3) -> bool {
        self.x.to_bits() == o.x.to_bits()
            && self.y.to_bits() == o.y.to_bits()
            && self.z.to_bits() == o.z.to_bits()
    }

    fn lex_lt(self, o: Vec3) -> bool {
        (self.x, self.y, self.z) < (o.x, o.y, o.z)
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Which side of a closed shape belongs to the domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// The domain lies inside the shape (an outer container).
    Inside,
    /// The domain lies outside the shape (an obstacle).
    Outside,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    /// Disk in 2D, sphere in 3D.
    Ball { center: Vec3, radius: f64 },
    /// Axis-aligned box.
    Box { min: Vec3, max: Vec3 },
    /// Two-sided wall segment (2D only). Its side is ignored.
    Segment { a: Vec3, b: Vec3 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub side: Side,
}

impl Primitive {
    pub fn ball(center: Vec3, radius: f64, side: Side) -> Self {
        Self {
            shape: Shape::Ball { center, radius },
            side,
        }
    }

    pub fn aabb(min: Vec3, max: Vec3, side: Side) -> Self {
        Self {
            shape: Shape::Box { min, max },
            side,
        }
    }

    pub fn segment(a: Vec3, b: Vec3) -> Self {
        Self {
            shape: Shape::Segment { a, b },
            side: Side::Outside,
        }
    }

    /// Signed distance, positive on the domain side.
    fn signed_distance(&self, dim: usize, p: Vec3) -> f64 {
        match &self.shape {
            Shape::Ball { center, radius } => {
                let d = (p - *center).norm();
                match self.side {
                    Side::Inside => radius - d,
                    Side::Outside => d - radius,
                }
            }
            Shape::Box { min, max } => {
                let inner = (0..dim)
                    .map(|i| (p.axis(i) - min.axis(i)).min(max.axis(i) - p.axis(i)))
                    .fold(f64::INFINITY, f64::min);
                match self.side {
                    Side::Inside => inner,
                    Side::Outside => {
                        if inner > 0.0 {
                            -inner
                        } else {
                            let mut s = 0.0;
                            for i in 0..dim {
                                let e = (min.axis(i) - p.axis(i))
                                    .max(p.axis(i) - max.axis(i))
                                    .max(0.0);
                                s += e * e;
                            }
                            s.sqrt()
                        }
                    }
                }
            }
            Shape::Segment { a, b } => (p - segment_projection(*a, *b, p)).norm(),
        }
    }

    /// Closest point of the primitive's surface. Ties resolve to the
    /// lexicographically smallest candidate.
    fn closest_point(&self, dim: usize, p: Vec3) -> Vec3 {
        match &self.shape {
            Shape::Ball { center, radius } => {
                let d = p - *center;
                let n = d.norm();
                if n == 0.0 {
                    // Every surface point is equidistant; take the smallest.
                    *center + Vec3::new(-radius, 0.0, 0.0)
                } else {
                    *center + d * (radius / n)
                }
            }
            Shape::Box { min, max } => {
                let inside = (0..dim).all(|i| p.axis(i) >= min.axis(i) && p.axis(i) <= max.axis(i));
                if inside {
                    let mut best = Vec3::ZERO;
                    let mut best_d = f64::INFINITY;
                    for i in 0..dim {
                        for face in [min.axis(i), max.axis(i)] {
                            let d = (p.axis(i) - face).abs();
                            let mut q = p;
                            q.set_axis(i, face);
                            if d < best_d || (d == best_d && q.lex_lt(best)) {
                                best_d = d;
                                best = q;
                            }
                        }
                    }
                    best
                } else {
                    let mut q = p;
                    for i in 0..dim {
                        q.set_axis(i, p.axis(i).clamp(min.axis(i), max.axis(i)));
                    }
                    q
                }
            }
            Shape::Segment { a, b } => segment_projection(*a, *b, p),
        }
    }

    fn bounds(&self) -> (Vec3, Vec3) {
        match &self.shape {
            Shape::Ball { center, radius } => {
                let r = Vec3::new(*radius, *radius, *radius);
                (*center - r, *center + r)
            }
            Shape::Box { min, max } => (*min, *max),
            Shape::Segment { a, b } => (
                Vec3::new(a.x.min(b.x), a.y.min(b.y), a.z.min(b.z)),
                Vec3::new(a.x.max(b.x), a.y.max(b.y), a.z.max(b.z)),
            ),
        }
    }
}

fn segment_projection(a: Vec3, b: Vec3, p: Vec3) -> Vec3 {
    let ab = b - a;
    let l2 = ab.norm2();
    if l2 == 0.0 {
        return a;
    }
    let t = ((p - a).dot(ab) / l2).clamp(0.0, 1.0);
    a + ab * t
}

/// Nearest boundary primitive and its signed distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryDistance {
    pub distance: f64,
    pub primitive: usize,
}

/// Projection of an interior point onto the boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryHit {
    pub point: Vec3,
    pub distance: f64,
    pub primitive: usize,
}

/// Width of the absorbing shell around the boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonShell(f64);

impl EpsilonShell {
    /// `epsilon` must be positive and below 1% of the domain diameter.
    pub fn new(epsilon: f64, domain: &Domain) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidProblem(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if epsilon >= domain.diameter() / 100.0 {
            return Err(Error::InvalidProblem(format!(
                "epsilon {epsilon} must be below diameter/100 = {}",
                domain.diameter() / 100.0
            )));
        }
        Ok(Self(epsilon))
    }

    /// Default width: 1e-3 of the domain diameter.
    pub fn default_for(domain: &Domain) -> Self {
        Self(1e-3 * domain.diameter())
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    dim: usize,
    primitives: Vec<Primitive>,
    diameter: f64,
}

impl Domain {
    pub fn new(dim: usize, primitives: Vec<Primitive>) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::InvalidProblem(format!("dimension must be 2 or 3, got {dim}")));
        }
        if primitives.is_empty() {
            return Err(Error::InvalidProblem("domain has no primitives".into()));
        }
        for p in &primitives {
            let ok = match &p.shape {
                Shape::Ball { radius, .. } => *radius > 0.0,
                Shape::Box { min, max } => (0..dim).all(|i| max.axis(i) > min.axis(i)),
                Shape::Segment { .. } => dim == 2,
            };
            if !ok {
                return Err(Error::InvalidProblem(format!("degenerate primitive {p:?}")));
            }
        }
        let (mut lo, mut hi) = primitives[0].bounds();
        for p in &primitives[1..] {
            let (a, b) = p.bounds();
            lo = Vec3::new(lo.x.min(a.x), lo.y.min(a.y), lo.z.min(a.z));
            hi = Vec3::new(hi.x.max(b.x), hi.y.max(b.y), hi.z.max(b.z));
        }
        let mut ext = hi - lo;
        if dim == 2 {
            ext.z = 0.0;
        }
        Ok(Self {
            dim,
            primitives,
            diameter: ext.norm(),
        })
    }

    /// Unit disk centered at the origin.
    pub fn unit_disk() -> Self {
        Self::new(2, vec![Primitive::ball(Vec3::ZERO, 1.0, Side::Inside)]).unwrap()
    }

    /// Unit ball centered at the origin.
    pub fn unit_ball() -> Self {
        Self::new(3, vec![Primitive::ball(Vec3::ZERO, 1.0, Side::Inside)]).unwrap()
    }

    /// The box [0,1]^2.
    pub fn unit_square() -> Self {
        Self::new(
            2,
            vec![Primitive::aabb(Vec3::ZERO, Vec3::new2(1.0, 1.0), Side::Inside)],
        )
        .unwrap()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    /// Axis-aligned bounds of all primitives.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let (mut lo, mut hi) = self.primitives[0].bounds();
        for p in &self.primitives[1..] {
            let (a, b) = p.bounds();
            lo = Vec3::new(lo.x.min(a.x), lo.y.min(a.y), lo.z.min(a.z));
            hi = Vec3::new(hi.x.max(b.x), hi.y.max(b.y), hi.z.max(b.z));
        }
        (lo, hi)
    }

    /// Minimum signed distance over primitives; the lowest index wins ties.
    /// Negative values mean the point is outside the domain.
    #[inline]
    pub fn signed_distance(&self, p: Vec3) -> BoundaryDistance {
        let mut best = BoundaryDistance {
            distance: f64::INFINITY,
            primitive: 0,
        };
        for (i, prim) in self.primitives.iter().enumerate() {
            let d = prim.signed_distance(self.dim, p);
            if d < best.distance {
                best = BoundaryDistance {
                    distance: d,
                    primitive: i,
                };
            }
        }
        best
    }

    pub fn contains(&self, p: Vec3) -> bool {
        self.signed_distance(p).distance >= 0.0
    }

    /// Radius of the largest ball centered at `p` that stays inside the domain.
    pub fn distance_to_boundary(&self, p: Vec3) -> Result<f64> {
        let d = self.signed_distance(p).distance;
        if d < 0.0 {
            Err(Error::ExteriorPoint(p))
        } else {
            Ok(d)
        }
    }

    pub fn in_epsilon_shell(&self, p: Vec3, eps: EpsilonShell) -> bool {
        self.signed_distance(p).distance < eps.value()
    }

    /// Nearest boundary point. Ties go to the lowest primitive index.
    pub fn closest_boundary_point(&self, p: Vec3) -> Result<BoundaryHit> {
        let bd = self.signed_distance(p);
        if bd.distance < 0.0 {
            return Err(Error::ExteriorPoint(p));
        }
        Ok(self.project(p, bd))
    }

    /// Projection without the exterior check, for points that a walk reached
    /// numerically on (or a hair past) the boundary.
    pub(crate) fn project(&self, p: Vec3, bd: BoundaryDistance) -> BoundaryHit {
        BoundaryHit {
            point: self.primitives[bd.primitive].closest_point(self.dim, p),
            distance: bd.distance.max(0.0),
            primitive: bd.primitive,
        }
    }

    /// Deterministic sample points on every primitive surface (roughly `n`
    /// in total). Used to check the empty-ball property.
    pub fn boundary_samples(&self, n: usize) -> Vec<Vec3> {
        let per = (n / self.primitives.len()).max(4);
        let mut out = Vec::with_capacity(per * self.primitives.len());
        for prim in &self.primitives {
            match (&prim.shape, self.dim) {
                (Shape::Ball { center, radius }, 2) => {
                    for k in 0..per {
                        let a = std::f64::consts::TAU * k as f64 / per as f64;
                        out.push(*center + Vec3::new2(a.cos(), a.sin()) * *radius);
                    }
                }
                (Shape::Ball { center, radius }, _) => {
                    // Fibonacci sphere.
                    let ga = std::f64::consts::PI * (3.0 - 5f64.sqrt());
                    for k in 0..per {
                        let z = 1.0 - 2.0 * (k as f64 + 0.5) / per as f64;
                        let r = (1.0 - z * z).sqrt();
                        let a = ga * k as f64;
                        out.push(*center + Vec3::new(r * a.cos(), r * a.sin(), z) * *radius);
                    }
                }
                (Shape::Box { min, max }, 2) => {
                    let side = per / 4;
                    for k in 0..side {
                        let t = k as f64 / side as f64;
                        let x = min.x + t * (max.x - min.x);
                        let y = min.y + t * (max.y - min.y);
                        out.push(Vec3::new2(x, min.y));
                        out.push(Vec3::new2(x, max.y));
                        out.push(Vec3::new2(min.x, y));
                        out.push(Vec3::new2(max.x, y));
                    }
                }
                (Shape::Box { min, max }, _) => {
                    let side = ((per / 6) as f64).sqrt().ceil() as usize;
                    for i in 0..side {
                        for j in 0..side {
                            let s = (i as f64 + 0.5) / side as f64;
                            let t = (j as f64 + 0.5) / side as f64;
                            for axis in 0..3 {
                                let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                                for face in [min.axis(axis), max.axis(axis)] {
                                    let mut q = Vec3::ZERO;
                                    q.set_axis(axis, face);
                                    q.set_axis(u, min.axis(u) + s * (max.axis(u) - min.axis(u)));
                                    q.set_axis(v, min.axis(v) + t * (max.axis(v) - min.axis(v)));
                                    out.push(q);
                                }
                            }
                        }
                    }
                }
                (Shape::Segment { a, b }, _) => {
                    for k in 0..per {
                        let t = k as f64 / (per - 1) as f64;
                        out.push(*a + (*b - *a) * t);
                    }
                }
            }
        }
        out
    }
}
