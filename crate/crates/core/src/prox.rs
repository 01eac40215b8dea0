//! Scalar proximal map `argmin_b (y - b)^2 / (2 theta) + q(b)` and its
//! derivative in `y`.
//!
//! For `Qk` the stationarity condition `(b - y)/theta + q_k'(b) = 0` is solved
//! on `|y|` by Newton's method inside the bracket `[0, |y|]`, falling back to
//! bisection whenever a step leaves the bracket or fails to reduce the residual.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::penalty::{asinh_stable, Penalty};

pub const NEWTON_BUDGET: usize = 100;
const BISECTION_BUDGET: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxResult {
    pub beta_hat: f64,
    /// `d beta_hat / d y = 1 / (1 + theta q''(beta_hat))`.
    pub dy: f64,
    /// `(1/theta + q''(beta_hat))^-1 = theta * dy`.
    pub curvature_s2: f64,
}

fn check_args(y: f64, theta: f64) -> Result<()> {
    if !y.is_finite() {
        return Err(Error::domain("prox", format!("y must be finite, got {y}")));
    }
    if !(theta.is_finite() && theta >= 0.0) {
        return Err(Error::domain("prox", format!("theta must be >= 0, got {theta}")));
    }
    Ok(())
}

pub fn prox(y: f64, penalty: &Penalty, theta: f64) -> Result<ProxResult> {
    prox_from(y, penalty, theta, None)
}

/// As [`prox`], starting Newton from `guess` (e.g. the previous fixed-point
/// iterate) when it is given.
pub fn prox_from(y: f64, penalty: &Penalty, theta: f64, guess: Option<f64>) -> Result<ProxResult> {
    check_args(y, theta)?;
    penalty.validate()?;
    if theta == 0.0 {
        return Ok(ProxResult {
            beta_hat: y,
            dy: 1.0,
            curvature_s2: 0.0,
        });
    }
    match *penalty {
        Penalty::Quadratic { mu } => {
            let dy = 1.0 / (1.0 + 2.0 * theta * mu);
            Ok(ProxResult {
                beta_hat: y * dy,
                dy,
                curvature_s2: theta * dy,
            })
        }
        Penalty::Qk { k } => {
            let a = y.abs();
            let sk = k.sqrt();
            let b = if a == 0.0 {
                0.0
            } else {
                let g = guess.map(f64::abs).filter(|g| g.is_finite() && *g <= a);
                solve_qk(a, k, sk, theta, g).map_err(|residual| Error::ProxNonConvergence {
                    y,
                    penalty: penalty.to_string(),
                    theta,
                    residual,
                })?
            };
            let curv = 1.0 / sk.hypot(2.0 * b);
            let dy = 1.0 / (1.0 + theta * curv);
            Ok(ProxResult {
                beta_hat: b.copysign(y),
                dy,
                curvature_s2: theta * dy,
            })
        }
    }
}

/// Returns the root on `[0, a]`, or the final residual on failure.
fn solve_qk(a: f64, k: f64, sk: f64, theta: f64, guess: Option<f64>) -> std::result::Result<f64, f64> {
    let inv_theta = 1.0 / theta;
    let g = |b: f64| (b - a) * inv_theta + 0.5 * asinh_stable(2.0 * b / sk);
    let dg = |b: f64| inv_theta + 1.0 / sk.hypot(2.0 * b);
    let tol = 1e-12 * (a * inv_theta).max(1.0);

    let (mut lo, mut hi) = (0.0f64, a);
    let mut b = guess.unwrap_or_else(|| a / (1.0 + theta / (k + 4.0 * a * a).sqrt()));
    let mut gb = g(b);
    let mut best = (gb.abs(), b);
    let mut polished = false;

    for _ in 0..NEWTON_BUDGET {
        if gb == 0.0 {
            return Ok(b);
        }
        if gb > 0.0 {
            hi = b;
        } else {
            lo = b;
        }
        let within = gb.abs() <= tol;
        if within && polished {
            return Ok(best.1);
        }
        // Once within tolerance, one more Newton step polishes the root to
        // roughly machine precision.
        polished |= within;
        let step = b - gb / dg(b);
        let newton = if step >= lo && step <= hi && step != b {
            let gs = g(step);
            (gs.abs() < gb.abs()).then_some((step, gs))
        } else {
            None
        };
        let (next, gn) = match newton {
            Some(v) => v,
            None if within => return Ok(best.1),
            None => {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                (mid, g(mid))
            }
        };
        b = next;
        gb = gn;
        if gb.abs() < best.0 {
            best = (gb.abs(), b);
        }
    }
    if best.0 <= tol {
        return Ok(best.1);
    }
    // Bisection on whatever bracket remains.
    for _ in 0..BISECTION_BUDGET {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let gm = g(mid);
        if gm.abs() < best.0 {
            best = (gm.abs(), mid);
        }
        if gm.abs() <= tol {
            return Ok(mid);
        }
        if gm > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    if best.0 <= tol {
        Ok(best.1)
    } else {
        Err(best.0)
    }
}

pub fn prox_dy(y: f64, penalty: &Penalty, theta: f64) -> Result<f64> {
    Ok(prox(y, penalty, theta)?.dy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Independent oracle: dense objective scan for the bracketing cell, then
    /// bisection on the derivative using the standard library's `asinh`.
    pub(crate) fn scan_oracle(y: f64, k: f64, theta: f64) -> f64 {
        let a = y.abs();
        if a == 0.0 {
            return 0.0;
        }
        let f = |b: f64| (a - b).powi(2) / (2.0 * theta)
            + (k.sqrt() / 4.0) * (1.0 - (1.0 + 4.0 * b * b / k).sqrt() + (2.0 * b / k.sqrt()) * (2.0 * b / k.sqrt()).asinh());
        let cells = 20_000;
        let h = a / cells as f64;
        let mut arg = 0;
        let mut fmin = f(0.0);
        for i in 1..=cells {
            let v = f(i as f64 * h);
            if v < fmin {
                fmin = v;
                arg = i;
            }
        }
        let mut lo = (arg as f64 - 1.0).max(0.0) * h;
        let mut hi = ((arg + 1) as f64 * h).min(a);
        let df = |b: f64| (b - a) / theta + 0.5 * (2.0 * b / k.sqrt()).asinh();
        for _ in 0..200 {
            let m = 0.5 * (lo + hi);
            if df(m) > 0.0 {
                hi = m;
            } else {
                lo = m;
            }
        }
        (0.5 * (lo + hi)).copysign(y)
    }

    fn qk(k: f64) -> Penalty {
        Penalty::Qk { k }
    }

    #[test]
    fn zero_input() {
        for &(k, t) in &[(1.0, 1.0), (1e-4, 10.0), (100.0, 0.01)] {
            let r = prox(0.0, &qk(k), t).unwrap();
            assert_eq!(r.beta_hat, 0.0);
            assert_relative_eq!(r.dy, 1.0 / (1.0 + t / k.sqrt()), max_relative = 1e-15);
        }
    }

    #[test]
    fn vanishing_theta() {
        let r = prox(3.0, &qk(1.0), 1e-12).unwrap();
        assert!((r.beta_hat - 3.0).abs() < 1e-6);
        let r = prox(3.0, &qk(1.0), 0.0).unwrap();
        assert_eq!((r.beta_hat, r.dy), (3.0, 1.0));
    }

    #[test]
    fn matches_scan_oracle_example() {
        let r = prox(1.0, &qk(0.01), 0.5).unwrap();
        assert!((r.beta_hat - scan_oracle(1.0, 0.01, 0.5)).abs() < 1e-8);
    }

    #[test]
    fn quadratic_closed_form() {
        let r = prox(1.0, &Penalty::Quadratic { mu: 2.0 }, 0.25).unwrap();
        assert_eq!(r.beta_hat, 0.5);
        assert_eq!(r.dy, 0.5);
        for y in [-3.0, 0.1, 7.0] {
            assert_eq!(prox_dy(y, &Penalty::Quadratic { mu: 2.0 }, 0.25).unwrap(), 0.5);
        }
    }

    #[test]
    fn large_k_is_nearly_identity() {
        let d = prox_dy(0.7, &qk(1e16), 1.0).unwrap();
        assert!((d - 1.0).abs() < 1e-7);
    }

    #[test]
    fn invalid_arguments() {
        assert!(prox(f64::NAN, &qk(1.0), 1.0).is_err());
        assert!(prox(1.0, &qk(1.0), -1.0).is_err());
        assert!(prox(1.0, &qk(0.0), 1.0).is_err());
        assert!(prox(1.0, &Penalty::Quadratic { mu: -1.0 }, 1.0).is_err());
    }

    #[test]
    fn stationarity_residual_is_within_contract() {
        for &(y, k, t) in &[(1.0, 0.01, 0.5), (250.0, 1e-6, 1e-3), (1e-3, 1e6, 1e3), (5.0, 1e-8, 100.0)] {
            let r = prox(y, &qk(k), t).unwrap();
            let g = (r.beta_hat - y) / t + 0.5 * asinh_stable(2.0 * r.beta_hat / k.sqrt());
            assert!(g.abs() <= 1e-12 * (y.abs() / t).max(1.0), "{y} {k} {t}: {g}");
        }
    }

    #[test]
    fn warm_start_gives_same_root() {
        let cold = prox(2.0, &qk(0.3), 0.7).unwrap();
        let warm = prox_from(2.0, &qk(0.3), 0.7, Some(1.9)).unwrap();
        assert!((cold.beta_hat - warm.beta_hat).abs() < 1e-12);
        let bogus = prox_from(2.0, &qk(0.3), 0.7, Some(50.0)).unwrap();
        assert!((cold.beta_hat - bogus.beta_hat).abs() < 1e-12);
    }

    fn log_uniform(u: f64, lo: f64, hi: f64) -> f64 {
        (lo.ln() + u * (hi.ln() - lo.ln())).exp()
    }

    proptest! {
        #[test]
        fn shrinkage_and_sign(uy in 0.0..1.0f64, neg in any::<bool>(), uk in 0.0..1.0f64, ut in 0.0..1.0f64) {
            let y = if neg { -1.0 } else { 1.0 } * log_uniform(uy, 1e-4, 1e2);
            let k = log_uniform(uk, 1e-6, 1e6);
            let t = log_uniform(ut, 1e-4, 1e2);
            let r = prox(y, &qk(k), t).unwrap();
            prop_assert!(r.beta_hat.abs() <= y.abs());
            prop_assert!(r.beta_hat == 0.0 || r.beta_hat.signum() == y.signum());
            prop_assert!(r.dy > 0.0 && r.dy < 1.0);
            let qy = 0.5 * asinh_stable(2.0 * y / k.sqrt());
            prop_assert!((r.beta_hat - y).abs() <= t * qy.abs() * (1.0 + 1e-12) + 1e-300);
            let m = prox(-y, &qk(k), t).unwrap();
            prop_assert_eq!(m.beta_hat, -r.beta_hat);
        }

        #[test]
        fn monotone_in_y(y in -20.0..20.0f64, dy in 0.0..1.0f64, uk in 0.0..1.0f64, ut in 0.0..1.0f64) {
            let k = log_uniform(uk, 1e-6, 1e6);
            let t = log_uniform(ut, 1e-4, 1e2);
            let a = prox(y, &qk(k), t).unwrap().beta_hat;
            let b = prox(y + dy, &qk(k), t).unwrap().beta_hat;
            prop_assert!(b >= a - 1e-12 * (1.0 + y.abs()));
        }
    }
}
