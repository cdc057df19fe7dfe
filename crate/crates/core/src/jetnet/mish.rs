//! Mish activation `x tanh(softplus(x))` and its first three derivatives.

/// Overflow-safe `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Value and derivatives of Mish at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MishJet {
    pub m: f64,
    pub d1: f64,
    pub d2: f64,
    /// Third derivative, needed to back-propagate through the `zz` lane.
    pub d3: f64,
}

/// Above this `tanh(softplus(x))` equals 1 to double precision.
const SATURATION: f64 = 20.0;

/// Evaluates Mish and its derivatives with a single exponential.
///
/// With `e = e^x`, `tanh(softplus(x)) = n / (n + 2)` where `n = e (e + 2)`,
/// and the softplus derivative is the logistic `e / (1 + e)`.
#[inline]
pub fn mish_jet(x: f64) -> MishJet {
    if x > SATURATION {
        return MishJet {
            m: x,
            d1: 1.0,
            d2: 0.0,
            d3: 0.0,
        };
    }
    let e = x.exp();
    let n = e * (e + 2.0);
    let w = n / (n + 2.0);
    let s = e / (1.0 + e);
    let s1 = s * (1.0 - s);
    let s2 = s1 * (1.0 - 2.0 * s);
    let a = 1.0 - w * w;
    let w1 = a * s;
    let a1 = -2.0 * w * w1;
    let w2 = a1 * s + a * s1;
    let a2 = -2.0 * (w1 * w1 + w * w2);
    let w3 = a2 * s + 2.0 * a1 * s1 + a * s2;
    MishJet {
        m: x * w,
        d1: w + x * w1,
        d2: 2.0 * w1 + x * w2,
        d3: 3.0 * w2 + x * w3,
    }
}

/// `(m, m', m'')` at `x`.
pub fn mish(x: f64) -> (f64, f64, f64) {
    let j = mish_jet(x);
    (j.m, j.d1, j.d2)
}
