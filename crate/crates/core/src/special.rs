//! Digamma, trigamma, and the inverse digamma function.

/// Coefficients `B_{2k}/(2k)` of the asymptotic expansion
/// `psi(x) ~ ln x - 1/(2x) - sum_k B_{2k}/(2k x^{2k})`.
const DIGAMMA_ASYMP: [f64; 7] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
];

/// Coefficients `B_{2k}` of `psi'(x) ~ 1/x + 1/(2x^2) + sum_k B_{2k}/x^{2k+1}`.
const TRIGAMMA_ASYMP: [f64; 6] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
];

/// Digamma function `psi(x) = d/dx ln Gamma(x)` for `x > 0`.
///
/// Shifts the argument into the asymptotic region with the recurrence
/// `psi(x + 1) = psi(x) + 1/x`, then applies the Bernoulli expansion.
pub fn digamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "digamma domain is x > 0 here");
    let mut acc = 0.0;
    let mut xx = x;
    while xx < 10.0 {
        acc -= 1.0 / xx;
        xx += 1.0;
    }
    let mut result = acc + libm::log(xx) - 0.5 / xx;
    let inv_x2 = 1.0 / (xx * xx);
    let mut term = inv_x2;
    for c in DIGAMMA_ASYMP {
        result -= c * term;
        term *= inv_x2;
    }
    result
}

/// Trigamma function `psi'(x)` for `x > 0`.
pub fn trigamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "trigamma domain is x > 0 here");
    let mut acc = 0.0;
    let mut xx = x;
    while xx < 10.0 {
        acc += 1.0 / (xx * xx);
        xx += 1.0;
    }
    let inv = 1.0 / xx;
    let inv2 = inv * inv;
    let mut result = acc + inv + 0.5 * inv2;
    let mut term = inv2 * inv;
    for c in TRIGAMMA_ASYMP {
        result += c * term;
        term *= inv2;
    }
    result
}

const EULER_MASCHERONI: f64 = 0.577_215_664_901_532_9;

/// Inverse digamma: the unique `x > 0` with `psi(x) = y`.
///
/// Newton iteration on `psi`, started from `exp(y) + 0.5` for `y >= -2.22`
/// and `-1/(y + gamma)` otherwise; converges to full precision in a handful
/// of steps since `psi` is smooth and strictly increasing on `(0, inf)`.
pub fn digamma_inverse(y: f64) -> f64 {
    let mut x = if y >= -2.22 {
        libm::exp(y) + 0.5
    } else {
        -1.0 / (y + EULER_MASCHERONI)
    };
    if !(x > 0.0) || !x.is_finite() {
        x = 1e-3;
    }
    for _ in 0..30 {
        let f = digamma(x) - y;
        let step = f / trigamma(x);
        let mut next = x - step;
        // psi is increasing, so the root stays positive; halve overshoots.
        while next <= 0.0 {
            next = 0.5 * (x + next.max(0.0));
        }
        if libm::fabs(next - x) <= 1e-15 * libm::fabs(next) {
            return next;
        }
        x = next;
    }
    x
}
