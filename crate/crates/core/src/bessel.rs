//! Modified Bessel functions of integer order 0 and 1.
//!
//! `I0`, `I1` use their power series (all terms positive) up to x = 30 and
//! the large-argument expansion beyond. `K0`, `K1` use the logarithmic series
//! for x <= 2 and Steed's continued fraction above. The `*_scaled` variants
//! carry the exponential factor separately so that ratios stay finite for
//! large arguments.

/// Euler–Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

const SERIES_LIMIT: f64 = 30.0;

/// `sum_k z^k / (k! (k + nu)!)` for nu in {0, 1}.
#[inline]
fn i_series(z: f64, nu: u32) -> f64 {
    let mut term = 1.0;
    let mut sum = term;
    let mut k = 1.0;
    loop {
        term *= z / (k * (k + nu as f64));
        sum += term;
        if term < sum * 1e-17 {
            return sum;
        }
        k += 1.0;
    }
}

/// Large-argument expansion without the `e^x / sqrt(2 pi x)` prefactor.
fn i_asymptotic(x: f64, nu: u32) -> f64 {
    let mu = 4.0 * (nu * nu) as f64;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..60 {
        let odd = (2 * k - 1) as f64;
        let next = -term * (mu - odd * odd) / (8.0 * k as f64 * x);
        if next.abs() >= term.abs() {
            break;
        }
        term = next;
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    sum
}

/// `e^{-|x|} I0(x)`.
pub fn i0_scaled(x: f64) -> f64 {
    let ax = x.abs();
    if ax <= SERIES_LIMIT {
        i_series(0.25 * ax * ax, 0) * (-ax).exp()
    } else {
        i_asymptotic(ax, 0) / (std::f64::consts::TAU * ax).sqrt()
    }
}

/// `e^{-|x|} I1(x)`.
pub fn i1_scaled(x: f64) -> f64 {
    let ax = x.abs();
    let v = if ax <= SERIES_LIMIT {
        0.5 * ax * i_series(0.25 * ax * ax, 1) * (-ax).exp()
    } else {
        i_asymptotic(ax, 1) / (std::f64::consts::TAU * ax).sqrt()
    };
    if x < 0.0 {
        -v
    } else {
        v
    }
}

pub fn i0(x: f64) -> f64 {
    let ax = x.abs();
    if ax <= SERIES_LIMIT {
        i_series(0.25 * ax * ax, 0)
    } else {
        i0_scaled(ax) * ax.exp()
    }
}

pub fn i1(x: f64) -> f64 {
    let ax = x.abs();
    let v = if ax <= SERIES_LIMIT {
        0.5 * ax * i_series(0.25 * ax * ax, 1)
    } else {
        i1_scaled(ax) * ax.exp()
    };
    if x < 0.0 {
        -v
    } else {
        v
    }
}

/// `sum_{k>=1} H_k z^k / (k!)^2` where `H_k` is the k-th harmonic number.
/// Together with `I0` this gives `K0`:
/// `K0(x) = -(ln(x/2) + gamma) I0(x) + harmonic_series(x^2/4)`.
pub fn harmonic_series(z: f64) -> f64 {
    let mut term = 1.0;
    let mut h = 0.0;
    let mut sum = 0.0;
    let mut k = 1.0;
    loop {
        term *= z / (k * k);
        h += 1.0 / k;
        let c = term * h;
        sum += c;
        if c <= sum * 1e-17 || term == 0.0 {
            return sum;
        }
        k += 1.0;
    }
}

/// `S1 = sum_k z^k / (k!(k+1)!)` and
/// `S2 = sum_k [psi(k+1) + psi(k+2)] z^k / (k!(k+1)!)`.
/// For small x, `x I1(x) = 2 z S1` and `1 - x K1(x) = z (S2 - 2 S1 ln(x/2))`
/// with `z = x^2 / 4`, free of cancellation.
pub fn k1_series_parts(z: f64) -> (f64, f64) {
    let mut term = 1.0;
    // psi(1) = -gamma, psi(2) = 1 - gamma.
    let mut psi_a = -EULER_GAMMA;
    let mut psi_b = 1.0 - EULER_GAMMA;
    let mut s1 = 1.0;
    let mut s2 = psi_a + psi_b;
    let mut k = 1.0;
    loop {
        term *= z / (k * (k + 1.0));
        psi_a += 1.0 / k;
        psi_b += 1.0 / (k + 1.0);
        s1 += term;
        let c = term * (psi_a + psi_b);
        s2 += c;
        if term <= s1 * 1e-17 && c.abs() <= s2.abs() * 1e-17 {
            return (s1, s2);
        }
        if term == 0.0 {
            return (s1, s2);
        }
        k += 1.0;
    }
}

/// `1 - x K1(x)` without cancellation near zero.
pub fn one_minus_x_k1(x: f64) -> f64 {
    if x <= 2.0 {
        let z = 0.25 * x * x;
        let (s1, s2) = k1_series_parts(z);
        z * (s2 - 2.0 * s1 * (0.5 * x).ln())
    } else {
        1.0 - x * k1_scaled(x) * (-x).exp()
    }
}

/// Steed's continued fraction for `(e^x K0(x), e^x K1(x))`, x > 0.
fn k_continued_fraction(x: f64) -> (f64, f64) {
    let mut b = 2.0 * (1.0 + x);
    let mut d = 1.0 / b;
    let mut delh = d;
    let mut h = d;
    let mut q1 = 0.0;
    let mut q2 = 1.0;
    let a1 = 0.25;
    let mut q = a1;
    let mut c = a1;
    let mut a = -a1;
    let mut s = 1.0 + q * delh;
    for i in 1..10_000 {
        let fi = i as f64;
        a -= 2.0 * fi;
        c = -a * c / (fi + 1.0);
        let qnew = (q1 - b * q2) / a;
        q1 = q2;
        q2 = qnew;
        q += c * qnew;
        b += 2.0;
        d = 1.0 / (b + a * d);
        delh *= b * d - 1.0;
        h += delh;
        let dels = q * delh;
        s += dels;
        if (dels / s).abs() < 1e-17 {
            break;
        }
    }
    h *= a1;
    let k0 = (std::f64::consts::PI / (2.0 * x)).sqrt() / s;
    let k1 = k0 * (x + 0.5 - h) / x;
    (k0, k1)
}

/// `e^x K0(x)` for x > 0.
pub fn k0_scaled(x: f64) -> f64 {
    if x <= 2.0 {
        k0(x) * x.exp()
    } else {
        k_continued_fraction(x).0
    }
}

/// `e^x K1(x)` for x > 0.
pub fn k1_scaled(x: f64) -> f64 {
    if x <= 2.0 {
        k1(x) * x.exp()
    } else {
        k_continued_fraction(x).1
    }
}

/// K0(x) for x > 0 (infinite at 0).
pub fn k0(x: f64) -> f64 {
    if x <= 0.0 {
        return f64::INFINITY;
    }
    if x <= 2.0 {
        let z = 0.25 * x * x;
        -((0.5 * x).ln() + EULER_GAMMA) * i_series(z, 0) + harmonic_series(z)
    } else {
        k_continued_fraction(x).0 * (-x).exp()
    }
}

/// K1(x) for x > 0 (infinite at 0).
pub fn k1(x: f64) -> f64 {
    if x <= 0.0 {
        return f64::INFINITY;
    }
    if x <= 2.0 {
        (1.0 - one_minus_x_k1(x)) / x
    } else {
        k_continued_fraction(x).1 * (-x).exp()
    }
}
