//! φ-divergences used as marginal penalties.
//!
//! Each kind is stored with its scale `τ`: the generator is `τ φ(x)` and the
//! conjugate `τ φ*(y/τ)`. The Aprox operator
//!
//! ```text
//! Aprox^η_h(p) = argmin_q  η e^{(p-q)/η} + h(q),   h = (τφ)*
//! ```
//!
//! is closed form for balanced, KL and range constraints. The other kinds solve
//! the stationarity equation `q + η log h'(q) = p` by safeguarded Newton.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Relative tolerance under which two masses count as equal for the hard
/// constraints (balanced and range kinds).
pub const EQUALITY_TOL: f64 = 1e-7;

const APROX_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Divergence {
    /// `ι_{=1}`: the marginal is fixed.
    Balanced,
    /// `τ (x log x − x + 1)`.
    Kl { tau: f64 },
    /// `τ (x − 1)²` on `x ≥ 0`.
    ChiSquared { tau: f64 },
    /// `τ (√x − 1)²`.
    Hellinger { tau: f64 },
    /// `τ (x log x − (1 + x) log((1 + x)/2))`.
    JensenShannon { tau: f64 },
    /// `ι_{[lo, hi]}`.
    Range { lo: f64, hi: f64 },
    /// Amari α-divergence with parameter `a ∈ (−1, 1)`, written with its
    /// affine correction so that `φ(1) = φ'(1) = 0`.
    Alpha { a: f64, tau: f64 },
}

impl Divergence {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Divergence::Balanced => true,
            Divergence::Kl { tau }
            | Divergence::ChiSquared { tau }
            | Divergence::Hellinger { tau }
            | Divergence::JensenShannon { tau } => tau > 0.0 && tau.is_finite(),
            Divergence::Range { lo, hi } => lo >= 0.0 && lo <= 1.0 && hi >= 1.0 && hi.is_finite(),
            Divergence::Alpha { a, tau } => a > -1.0 && a < 1.0 && tau > 0.0 && tau.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            invalid(format!("invalid divergence parameters: {self}"))
        }
    }

    fn tau(&self) -> f64 {
        match *self {
            Divergence::Kl { tau }
            | Divergence::ChiSquared { tau }
            | Divergence::Hellinger { tau }
            | Divergence::JensenShannon { tau }
            | Divergence::Alpha { tau, .. } => tau,
            Divergence::Balanced | Divergence::Range { .. } => 1.0,
        }
    }

    /// True when `φ*` is affine or piecewise affine (no curvature).
    pub fn is_hard_constraint(&self) -> bool {
        matches!(self, Divergence::Balanced | Divergence::Range { .. })
    }

    /// `φ*(y)`, `+∞` outside its domain.
    pub fn conjugate(&self, y: f64) -> f64 {
        let t = self.tau();
        let u = y / t;
        match *self {
            Divergence::Balanced => y,
            Divergence::Range { lo, hi } => (lo * y).max(hi * y),
            Divergence::Kl { .. } => t * u.exp_m1(),
            Divergence::ChiSquared { .. } => {
                if u >= -2.0 {
                    t * (u + 0.25 * u * u)
                } else {
                    -t
                }
            }
            Divergence::Hellinger { .. } => {
                if u < 1.0 {
                    t * u / (1.0 - u)
                } else {
                    f64::INFINITY
                }
            }
            Divergence::JensenShannon { .. } => {
                if u < std::f64::consts::LN_2 {
                    -t * (2.0 - u.exp()).ln()
                } else {
                    f64::INFINITY
                }
            }
            Divergence::Alpha { a, .. } => {
                let k = 2.0 / (1.0 - a);
                if u < k {
                    let x = (1.0 - u / k).powf(2.0 / (a - 1.0));
                    t * (x * u - alpha_phi(a, x))
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// `(φ*)'(y)`; for the range kind the right derivative.
    pub fn conjugate_deriv(&self, y: f64) -> f64 {
        let t = self.tau();
        let u = y / t;
        match *self {
            Divergence::Balanced => 1.0,
            Divergence::Range { lo, hi } => {
                if y < 0.0 {
                    lo
                } else {
                    hi
                }
            }
            Divergence::Kl { .. } => u.exp(),
            Divergence::ChiSquared { .. } => {
                if u >= -2.0 {
                    1.0 + 0.5 * u
                } else {
                    0.0
                }
            }
            Divergence::Hellinger { .. } => {
                if u < 1.0 {
                    1.0 / ((1.0 - u) * (1.0 - u))
                } else {
                    f64::INFINITY
                }
            }
            Divergence::JensenShannon { .. } => {
                if u < std::f64::consts::LN_2 {
                    let e = u.exp();
                    e / (2.0 - e)
                } else {
                    f64::INFINITY
                }
            }
            Divergence::Alpha { a, .. } => {
                let k = 2.0 / (1.0 - a);
                if u < k {
                    (1.0 - u / k).powf(2.0 / (a - 1.0))
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// `(φ*)''(y)`.
    pub fn conjugate_deriv2(&self, y: f64) -> f64 {
        let t = self.tau();
        let u = y / t;
        let unit = match *self {
            Divergence::Balanced | Divergence::Range { .. } => 0.0,
            Divergence::Kl { .. } => u.exp(),
            Divergence::ChiSquared { .. } => {
                if u >= -2.0 {
                    0.5
                } else {
                    0.0
                }
            }
            Divergence::Hellinger { .. } => {
                if u < 1.0 {
                    2.0 / (1.0 - u).powi(3)
                } else {
                    f64::INFINITY
                }
            }
            Divergence::JensenShannon { .. } => {
                if u < std::f64::consts::LN_2 {
                    let e = u.exp();
                    2.0 * e / ((2.0 - e) * (2.0 - e))
                } else {
                    f64::INFINITY
                }
            }
            Divergence::Alpha { a, .. } => {
                let k = 2.0 / (1.0 - a);
                if u < k {
                    (1.0 - u / k).powf((3.0 - a) / (a - 1.0))
                } else {
                    f64::INFINITY
                }
            }
        };
        unit / t
    }

    /// The generator `τ φ(x)`, `+∞` outside `dom φ`.
    pub fn generator(&self, x: f64) -> f64 {
        let t = self.tau();
        if x < 0.0 {
            return f64::INFINITY;
        }
        match *self {
            Divergence::Balanced => {
                if (x - 1.0).abs() <= EQUALITY_TOL {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            Divergence::Range { lo, hi } => {
                if x >= lo - EQUALITY_TOL && x <= hi + EQUALITY_TOL {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            Divergence::Kl { .. } => {
                if x == 0.0 {
                    t
                } else {
                    t * (x * x.ln() - x + 1.0)
                }
            }
            Divergence::ChiSquared { .. } => t * (x - 1.0) * (x - 1.0),
            Divergence::Hellinger { .. } => t * (x.sqrt() - 1.0).powi(2),
            Divergence::JensenShannon { .. } => {
                let xlogx = if x == 0.0 { 0.0 } else { x * x.ln() };
                t * (xlogx - (1.0 + x) * ((1.0 + x) / 2.0).ln())
            }
            Divergence::Alpha { a, .. } => t * alpha_phi(a, x),
        }
    }

    /// Recession slope `τ φ'_∞ = lim τφ(x)/x`, weighting singular mass.
    pub fn recession_slope(&self) -> f64 {
        let t = self.tau();
        match *self {
            Divergence::Balanced
            | Divergence::Range { .. }
            | Divergence::Kl { .. }
            | Divergence::ChiSquared { .. } => f64::INFINITY,
            Divergence::Hellinger { .. } => t,
            Divergence::JensenShannon { .. } => t * std::f64::consts::LN_2,
            Divergence::Alpha { a, .. } => t * 2.0 / (1.0 - a),
        }
    }

    /// `dom φ` as a closed interval (endpoints may be infinite).
    pub fn generator_domain(&self) -> (f64, f64) {
        match *self {
            Divergence::Balanced => (1.0, 1.0),
            Divergence::Range { lo, hi } => (lo, hi),
            _ => (0.0, f64::INFINITY),
        }
    }

    /// `Aprox^η_{φ*}(p)`.
    pub fn aprox(&self, p: f64, eta: f64) -> f64 {
        match *self {
            Divergence::Balanced => p,
            Divergence::Kl { tau } => tau * p / (tau + eta),
            Divergence::Range { lo, hi } => {
                // stationarity e^{(p-q)/η} = lo on q < 0, = hi on q > 0
                let q_hi = p - eta * hi.ln();
                if q_hi > 0.0 {
                    return q_hi;
                }
                if lo > 0.0 {
                    let q_lo = p - eta * lo.ln();
                    if q_lo < 0.0 {
                        return q_lo;
                    }
                }
                0.0
            }
            _ => self.aprox_newton(p, eta),
        }
    }

    fn log_deriv(&self, q: f64) -> (f64, f64) {
        // (log h'(q), h''(q)/h'(q))
        let t = self.tau();
        let u = q / t;
        match *self {
            Divergence::ChiSquared { .. } => {
                let v = 1.0 + 0.5 * u;
                (v.ln(), 0.5 / (t * v))
            }
            Divergence::Hellinger { .. } => {
                let v = 1.0 - u;
                (-2.0 * v.ln(), 2.0 / (t * v))
            }
            Divergence::JensenShannon { .. } => {
                let e = u.exp();
                (u - (2.0 - e).ln(), 2.0 / (t * (2.0 - e)))
            }
            Divergence::Alpha { a, .. } => {
                let k = 2.0 / (1.0 - a);
                let v = 1.0 - u / k;
                ((2.0 / (a - 1.0)) * v.ln(), 1.0 / (t * k * v) * (2.0 / (1.0 - a)))
            }
            Divergence::Kl { .. } => (u, 1.0 / t),
            Divergence::Balanced | Divergence::Range { .. } => (0.0, 0.0),
        }
    }

    /// Open interval on which `h' > 0` and `h` is finite.
    fn aprox_interval(&self) -> (f64, f64) {
        let t = self.tau();
        match *self {
            Divergence::ChiSquared { .. } => (-2.0 * t, f64::INFINITY),
            Divergence::Hellinger { .. } => (f64::NEG_INFINITY, t),
            Divergence::JensenShannon { .. } => (f64::NEG_INFINITY, t * std::f64::consts::LN_2),
            Divergence::Alpha { a, .. } => (f64::NEG_INFINITY, t * 2.0 / (1.0 - a)),
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    fn aprox_newton(&self, p: f64, eta: f64) -> f64 {
        // G(q) = q + η log h'(q) is increasing with G(0) = 0.
        let (lo_dom, hi_dom) = self.aprox_interval();
        let g = |q: f64| -> f64 {
            if q <= lo_dom {
                f64::NEG_INFINITY
            } else if q >= hi_dom {
                f64::INFINITY
            } else {
                q + eta * self.log_deriv(q).0
            }
        };
        let mut lo = p.min(0.0).max(lo_dom);
        let mut hi = p.max(0.0).min(hi_dom);
        if g(lo) > p || g(hi) < p {
            // only reachable through rounding at the bracket ends
            return if g(lo) > p { lo } else { hi };
        }
        let mut q = if lo.is_finite() && hi.is_finite() {
            0.5 * (lo + hi)
        } else {
            0.0
        };
        for _ in 0..300 {
            let gq = g(q);
            let r = gq - p;
            if r == 0.0 {
                return q;
            }
            if r > 0.0 {
                hi = q;
            } else {
                lo = q;
            }
            let (_, curv) = self.log_deriv(q);
            let slope = 1.0 + eta * curv;
            let mut next = q - r / slope;
            if !(next > lo && next < hi) || !next.is_finite() {
                next = 0.5 * (lo + hi);
            }
            if (next - q).abs() <= APROX_TOL * q.abs().max(1.0) {
                return next;
            }
            if (hi - lo) <= APROX_TOL * q.abs().max(1.0) {
                return 0.5 * (lo + hi);
            }
            q = next;
        }
        q
    }

    /// `D_φ(ρ|β)` for two weight vectors on a common support; atoms where
    /// `β` vanishes are singular and charged `φ'_∞` per unit mass.
    pub fn divergence_value(&self, rho: &[f64], base: &[f64]) -> f64 {
        let scale = base.iter().cloned().fold(0.0, f64::max).max(1e-300);
        let mut total = 0.0;
        for (&r, &b) in rho.iter().zip(base) {
            if b > 0.0 {
                let ratio = r / b;
                let v = match *self {
                    Divergence::Balanced => {
                        if (r - b).abs() <= EQUALITY_TOL * scale {
                            0.0
                        } else {
                            f64::INFINITY
                        }
                    }
                    Divergence::Range { lo, hi } => {
                        if r >= lo * b - EQUALITY_TOL * scale && r <= hi * b + EQUALITY_TOL * scale {
                            0.0
                        } else {
                            f64::INFINITY
                        }
                    }
                    _ => b * self.generator(ratio),
                };
                total += v;
            } else if r > EQUALITY_TOL * scale {
                total += self.recession_slope() * r;
            }
            if total == f64::INFINITY {
                return total;
            }
        }
        total
    }

    /// Checks whether masses `(m_α, m_β)` admit witnesses `a, a' ∈ dom φ₁`,
    /// `b, b' ∈ dom φ₂` with `b m_β > a m_α` and `b' m_β < a' m_α`.
    pub fn bounded_mass_condition(d1: &Divergence, d2: &Divergence, m_alpha: f64, m_beta: f64) -> bool {
        let (lo1, hi1) = d1.generator_domain();
        let (lo2, hi2) = d2.generator_domain();
        hi2 * m_beta > lo1 * m_alpha && lo2 * m_beta < hi1 * m_alpha
    }
}

fn alpha_phi(a: f64, x: f64) -> f64 {
    let k = 2.0 / (1.0 - a);
    4.0 / (1.0 - a * a) * (1.0 - x.powf(0.5 * (1.0 + a))) + k * (x - 1.0)
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Divergence::Balanced => write!(f, "balanced"),
            Divergence::Kl { tau } => write!(f, "kl:{tau}"),
            Divergence::ChiSquared { tau } => write!(f, "chi2:{tau}"),
            Divergence::Hellinger { tau } => write!(f, "hellinger:{tau}"),
            Divergence::JensenShannon { tau } => write!(f, "js:{tau}"),
            Divergence::Range { lo, hi } => write!(f, "range:{lo}:{hi}"),
            Divergence::Alpha { a, tau } => write!(f, "alpha:{a}:{tau}"),
        }
    }
}

impl FromStr for Divergence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize| -> Result<f64> {
            parts
                .get(i)
                .ok_or_else(|| Error::InvalidInput(format!("divergence {s:?} is missing a parameter")))?
                .parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("bad number in divergence {s:?}")))
        };
        let arity = |n: usize| -> Result<()> {
            if parts.len() == n + 1 {
                Ok(())
            } else {
                invalid(format!("divergence {s:?} expects {n} parameter(s)"))
            }
        };
        let d = match parts[0].to_ascii_lowercase().as_str() {
            "balanced" => {
                arity(0)?;
                Divergence::Balanced
            }
            "kl" => {
                arity(1)?;
                Divergence::Kl { tau: num(1)? }
            }
            "chi2" => {
                arity(1)?;
                Divergence::ChiSquared { tau: num(1)? }
            }
            "hellinger" => {
                arity(1)?;
                Divergence::Hellinger { tau: num(1)? }
            }
            "js" => {
                arity(1)?;
                Divergence::JensenShannon { tau: num(1)? }
            }
            "range" => {
                arity(2)?;
                Divergence::Range { lo: num(1)?, hi: num(2)? }
            }
            "alpha" => {
                arity(2)?;
                Divergence::Alpha { a: num(1)?, tau: num(2)? }
            }
            other => return invalid(format!("unknown divergence kind {other:?}")),
        };
        d.validate()?;
        Ok(d)
    }
}

impl TryFrom<String> for Divergence {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Divergence> for String {
    fn from(d: Divergence) -> String {
        d.to_string()
    }
}

/// All kinds at unit scale, used by property tests and random instances.
pub fn catalogue() -> Vec<Divergence> {
    vec![
        Divergence::Balanced,
        Divergence::Kl { tau: 1.0 },
        Divergence::ChiSquared { tau: 1.0 },
        Divergence::Hellinger { tau: 1.0 },
        Divergence::JensenShannon { tau: 1.0 },
        Divergence::Range { lo: 0.5, hi: 2.0 },
        Divergence::Alpha { a: 0.5, tau: 1.0 },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(Divergence::Balanced.conjugate(3.0), 3.0);
        assert_eq!(Divergence::Kl { tau: 1.0 }.conjugate(0.0), 0.0);
        assert_eq!(Divergence::Balanced.aprox(1.7, 0.1), 1.7);
        assert!((Divergence::Kl { tau: 1.0 }.aprox(2.0, 1.0) - 1.0).abs() < 1e-15);
        assert!((Divergence::Kl { tau: 3.0 }.aprox(-1.0, 1.0) + 0.75).abs() < 1e-15);
    }

    #[test]
    fn divergence_values() {
        let kl = Divergence::Kl { tau: 1.0 };
        assert_eq!(kl.divergence_value(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        let v = kl.divergence_value(&[2.0], &[1.0]);
        assert!((v - (2.0 * 2f64.ln() - 1.0)).abs() < 1e-15);
        assert_eq!(Divergence::Balanced.divergence_value(&[0.4, 0.6], &[0.5, 0.5]), f64::INFINITY);
        // singular part
        let h = Divergence::Hellinger { tau: 2.0 };
        assert!((h.divergence_value(&[0.0, 0.5], &[1.0, 0.0]) - (2.0 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn generators_vanish_at_one() {
        for d in catalogue() {
            assert!(d.generator(1.0).abs() < 1e-15, "{d}");
            assert!((d.conjugate_deriv(0.0) - 1.0).abs() < 1e-15 || d.is_hard_constraint(), "{d}");
        }
    }

    #[test]
    fn parse_round_trip() {
        for d in catalogue() {
            let s = d.to_string();
            assert_eq!(s.parse::<Divergence>().unwrap(), d);
        }
        assert!("kl".parse::<Divergence>().is_err());
        assert!("kl:-1".parse::<Divergence>().is_err());
        assert!("tv:1".parse::<Divergence>().is_err());
    }

    #[test]
    fn bounded_mass_condition() {
        let kl = Divergence::Kl { tau: 1.0 };
        assert!(Divergence::bounded_mass_condition(&kl, &kl, 2.0, 0.1));
        let chi = Divergence::ChiSquared { tau: 1.0 };
        assert!(Divergence::bounded_mass_condition(&chi, &kl, 1.0, 7.0));
        let b = Divergence::Balanced;
        assert!(!Divergence::bounded_mass_condition(&b, &b, 1.0, 1.0));
        assert!(Divergence::bounded_mass_condition(&b, &kl, 1.0, 3.0));
    }
}
