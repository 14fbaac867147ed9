//! Screened Green's functions and Poisson kernels of a ball, evaluated at the
//! ball center, with the sampling routines used by the walkers.
//!
//! Everything is expressed through `w = sigma R^2` and `lambda = sqrt(w)`.
//! With `M(w) = P |dB|` (the walk throughput) and `|G| = R^2 A(w)`, the
//! identity `A = (1 - M) / w` holds in both dimensions:
//!
//! * 2D: `M = 1 / I0(lambda)`
//! * 3D: `M = lambda / sinh(lambda)`
//!
//! For small `w` both are evaluated from the reciprocal power series of
//! `1/M`, which is free of the `0/0` in `(1 - M) / w`.

use std::f64::consts::{PI, TAU};
use std::sync::OnceLock;

use crate::bessel;
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::rng::Sampler;

/// Below this value of `sigma R^2` the harmonic (unscreened) formulas are used.
pub const HARMONIC_THRESHOLD: f64 = 1e-12;

/// Default absolute tolerance on the normalized radius when inverting the
/// radial CDF.
pub const DEFAULT_RADIAL_TOL: f64 = 1e-10;

const SERIES_W: f64 = 0.5;
const SERIES_TERMS: usize = 24;

fn reciprocal_coefficients(dim: usize) -> &'static [f64; SERIES_TERMS] {
    static COEFFS: OnceLock<[[f64; SERIES_TERMS]; 2]> = OnceLock::new();
    let all = COEFFS.get_or_init(|| {
        let mut out = [[0.0; SERIES_TERMS]; 2];
        for (slot, d) in [2usize, 3].into_iter().enumerate() {
            // 1/M = sum a_k w^k
            let mut a = [0.0; SERIES_TERMS];
            let mut fact = 1.0;
            for (k, ak) in a.iter_mut().enumerate() {
                if k > 0 {
                    fact *= k as f64;
                }
                *ak = if d == 2 {
                    0.25f64.powi(k as i32) / (fact * fact)
                } else {
                    let mut f = 1.0;
                    for j in 1..=(2 * k + 1) {
                        f *= j as f64;
                    }
                    1.0 / f
                };
            }
            let b = &mut out[slot];
            b[0] = 1.0;
            for k in 1..SERIES_TERMS {
                b[k] = -(1..=k).map(|j| a[j] * b[k - j]).sum::<f64>();
            }
        }
        out
    });
    &all[if dim == 2 { 0 } else { 1 }]
}

/// `(M, A)` and their derivatives with respect to `w`.
#[derive(Debug, Clone, Copy)]
struct Scalars {
    m: f64,
    a: f64,
    dm: f64,
    da: f64,
}

fn scalars(dim: usize, w: f64) -> Scalars {
    if w < SERIES_W {
        let b = reciprocal_coefficients(dim);
        let (mut m, mut a, mut dm, mut da) = (0.0, 0.0, 0.0, 0.0);
        for k in (0..SERIES_TERMS).rev() {
            let kf = k as f64;
            m = m * w + b[k];
            if k >= 1 {
                a = a * w - b[k];
                dm = dm * w + kf * b[k];
            }
            if k >= 2 {
                da = da * w - (kf - 1.0) * b[k];
            }
        }
        return Scalars { m, a, dm, da };
    }
    let lambda = w.sqrt();
    let (m, dm) = if dim == 2 {
        let i0s = bessel::i0_scaled(lambda);
        let i1s = bessel::i1_scaled(lambda);
        let e = (-lambda).exp();
        let m = e / i0s;
        (m, -(i1s / (2.0 * lambda)) * m / i0s)
    } else {
        let e2 = (-2.0 * lambda).exp();
        let inv_sinh = 2.0 * (-lambda).exp() / (1.0 - e2);
        let coth = (1.0 + e2) / (1.0 - e2);
        (lambda * inv_sinh, inv_sinh * (1.0 - lambda * coth) / (2.0 * lambda))
    };
    let a = (1.0 - m) / w;
    Scalars {
        m,
        a,
        dm,
        da: -(dm + a) / w,
    }
}

/// Surface measure of the sphere of radius `r`.
pub fn sphere_measure(dim: usize, r: f64) -> f64 {
    if dim == 2 {
        TAU * r
    } else {
        4.0 * PI * r * r
    }
}

/// Volume of the ball of radius `r`.
pub fn ball_volume(dim: usize, r: f64) -> f64 {
    if dim == 2 {
        PI * r * r
    } else {
        4.0 / 3.0 * PI * r * r * r
    }
}

/// Derivatives of the ball quantities with respect to `sigma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelDerivatives {
    pub d_green_norm: f64,
    pub d_throughput: f64,
}

/// Screened Green's function of the ball `B(center, radius)`, evaluated with
/// the source point at the center.
#[derive(Debug, Clone, Copy)]
pub struct BallKernel {
    dim: usize,
    center: Vec3,
    radius: f64,
    sigma: f64,
    w: f64,
    lambda: f64,
    s: Scalars,
}

impl BallKernel {
    pub fn new(dim: usize, center: Vec3, radius: f64, sigma: f64) -> Self {
        debug_assert!(dim == 2 || dim == 3);
        debug_assert!(radius > 0.0 && sigma >= 0.0);
        let mut w = sigma * radius * radius;
        if w < HARMONIC_THRESHOLD {
            w = 0.0;
        }
        Self {
            dim,
            center,
            radius,
            sigma,
            w,
            lambda: w.sqrt(),
            s: scalars(dim, w),
        }
    }

    pub fn harmonic(dim: usize, center: Vec3, radius: f64) -> Self {
        Self::new(dim, center, radius, 0.0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn is_harmonic(&self) -> bool {
        self.w == 0.0
    }

    /// G(x, y) for `|y - x| = r`.
    pub fn green(&self, r: f64) -> Result<f64> {
        if !(r > 0.0 && r <= self.radius) {
            return Err(Error::KernelDomain {
                r,
                radius: self.radius,
            });
        }
        if r == self.radius {
            return Ok(0.0);
        }
        let t = r / self.radius;
        Ok(if self.dim == 2 {
            self.bracket_2d(t) / TAU
        } else {
            self.ratio_3d(t) / (4.0 * PI * r)
        })
    }

    /// Integral of the Green's function over the ball.
    pub fn green_norm(&self) -> f64 {
        self.radius * self.radius * self.s.a
    }

    /// Poisson kernel `P(x, z)` for any `z` on the sphere.
    pub fn poisson_kernel(&self) -> f64 {
        self.s.m / self.sphere_measure()
    }

    /// `P |dB|`: the factor a walk's throughput picks up when it jumps to a
    /// uniformly sampled point on the sphere.
    pub fn throughput(&self) -> f64 {
        self.s.m
    }

    pub fn sphere_measure(&self) -> f64 {
        sphere_measure(self.dim, self.radius)
    }

    pub fn sigma_derivatives(&self) -> KernelDerivatives {
        let r2 = self.radius * self.radius;
        KernelDerivatives {
            d_green_norm: r2 * r2 * self.s.da,
            d_throughput: r2 * self.s.dm,
        }
    }

    /// `2 pi G(tR)` in 2D.
    fn bracket_2d(&self, t: f64) -> f64 {
        let lambda = self.lambda;
        if lambda == 0.0 {
            return -t.ln();
        }
        let x = t * lambda;
        if lambda <= 2.0 {
            let zl = 0.25 * lambda * lambda;
            let ratio = bessel::harmonic_series(zl) / bessel::i0(lambda);
            let i0x = bessel::i0(x);
            -i0x * t.ln() + bessel::harmonic_series(0.25 * x * x) - i0x * ratio
        } else {
            // K0(x) - c I0(x) with c = K0(lambda) / I0(lambda).
            let c_scaled = bessel::k0_scaled(lambda) / bessel::i0_scaled(lambda);
            bessel::k0(x) - c_scaled * bessel::i0_scaled(x) * (x - 2.0 * lambda).exp()
        }
    }

    /// `sinh(lambda (1 - t)) / sinh(lambda)`, with the `lambda = 0` limit.
    fn ratio_3d(&self, t: f64) -> f64 {
        let lambda = self.lambda;
        if lambda == 0.0 {
            return 1.0 - t;
        }
        if lambda <= 1.0 {
            (lambda * (1.0 - t)).sinh() / lambda.sinh()
        } else {
            let b = lambda * (1.0 - t);
            (-t * lambda).exp() * -(-2.0 * b).exp_m1() / -(-2.0 * lambda).exp_m1()
        }
    }

    /// Density of the normalized radius `t = |y - x| / R` under the Green's
    /// function measure.
    pub fn radial_pdf(&self, t: f64) -> f64 {
        if t <= 0.0 || t >= 1.0 {
            return 0.0;
        }
        if self.dim == 2 {
            t * self.bracket_2d(t) / self.s.a
        } else {
            t * self.ratio_3d(t) / self.s.a
        }
    }

    /// CDF of the normalized radius.
    pub fn radial_cdf(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        if t >= 1.0 {
            return 1.0;
        }
        if self.dim == 2 {
            self.cdf_2d(t)
        } else {
            self.num_3d(t) / self.num_3d(1.0)
        }
    }

    fn cdf_2d(&self, t: f64) -> f64 {
        let lambda = self.lambda;
        if lambda == 0.0 {
            return t * t * (1.0 - 2.0 * t.ln());
        }
        let x = t * lambda;
        if lambda <= 2.0 {
            let zl = 0.25 * lambda * lambda;
            let ratio = bessel::harmonic_series(zl) / bessel::i0(lambda);
            let (s1, s2) = bessel::k1_series_parts(0.25 * x * x);
            let integral =
                0.25 * t * t * (s2 - 2.0 * s1 * (t.ln() - bessel::EULER_GAMMA + ratio));
            integral / self.s.a
        } else {
            let c_scaled = bessel::k0_scaled(lambda) / bessel::i0_scaled(lambda);
            let cxi1 = c_scaled * x * bessel::i1_scaled(x) * (x - 2.0 * lambda).exp();
            (bessel::one_minus_x_k1(x) - cxi1) / (1.0 - self.s.m)
        }
    }

    /// `sinh(l) - sinh(l - x) - x cosh(l - x)` at `x = t l`, scaled by
    /// `e^{-l}` when `l > 1`.
    fn num_3d(&self, t: f64) -> f64 {
        let lambda = self.lambda;
        if lambda == 0.0 {
            return t * t * (3.0 - 2.0 * t);
        }
        let x = t * lambda;
        let b = lambda - x;
        let (sh, ch, s) = if lambda <= 1.0 {
            (b.sinh(), b.cosh(), lambda.sinh())
        } else {
            let e = 0.5 * (-x).exp();
            let e2b = (-2.0 * b).exp();
            (
                -e * (-2.0 * b).exp_m1(),
                e * (1.0 + e2b),
                -0.5 * (-2.0 * lambda).exp_m1(),
            )
        };
        if x <= 1.0 {
            // sinh(b) (cosh x - 1) + cosh(b) (sinh x - x), all terms positive.
            let mut sum = 0.0;
            let mut term = x;
            let mut n = 1.0;
            loop {
                n += 1.0;
                term *= x / n;
                let c = if (n as u64).is_multiple_of(2) { sh * term } else { ch * term };
                sum += c;
                if n >= 3.0 && term * ch <= sum * 1e-17 {
                    return sum;
                }
            }
        } else {
            s - sh - x * ch
        }
    }

    /// Inverts the radial CDF by Newton's method safeguarded with bisection.
    pub fn invert_radial_cdf(&self, u: f64, tol: f64) -> f64 {
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let mut t = u.sqrt().clamp(1e-3, 0.999) * if self.dim == 2 { 0.6 } else { 0.7 };
        for _ in 0..200 {
            let f = self.radial_cdf(t) - u;
            if f == 0.0 {
                return t;
            }
            if f > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let p = self.radial_pdf(t);
            let mut next = t - f / p;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - t).abs() <= tol || hi - lo <= tol {
                return next;
            }
            t = next;
        }
        0.5 * (lo + hi)
    }

    fn sample_direction(&self, s: &mut Sampler) -> Vec3 {
        if self.dim == 2 {
            let phi = TAU * s.next_uniform();
            Vec3::new2(phi.cos(), phi.sin())
        } else {
            let z = 1.0 - 2.0 * s.next_uniform();
            let phi = TAU * s.next_uniform();
            let rho = (1.0 - z * z).max(0.0).sqrt();
            Vec3::new(rho * phi.cos(), rho * phi.sin(), z)
        }
    }

    /// Samples `y` with density proportional to `G(x, y)`; returns only the
    /// point. Consumes one draw for the radius, then the direction draws.
    pub fn sample_green_point(&self, s: &mut Sampler, radial_tol: f64) -> Vec3 {
        let t = self.invert_radial_cdf(s.next_uniform(), radial_tol);
        let dir = self.sample_direction(s);
        self.center + dir * (t * self.radius)
    }

    /// Samples `y` with density `G(x, y) / |G|` and returns it with its density.
    pub fn sample_green(&self, s: &mut Sampler, radial_tol: f64) -> (Vec3, f64) {
        let y = self.sample_green_point(s, radial_tol);
        let r = (y - self.center).norm().clamp(f64::MIN_POSITIVE, self.radius);
        let pdf = self.green(r).unwrap_or(0.0) / self.green_norm();
        (y, pdf)
    }

    /// Uniform point on the sphere and its density `1 / |dB|`.
    pub fn sample_sphere(&self, s: &mut Sampler) -> (Vec3, f64) {
        let dir = self.sample_direction(s);
        (self.center + dir * self.radius, 1.0 / self.sphere_measure())
    }
}
