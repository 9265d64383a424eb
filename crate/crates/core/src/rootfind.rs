//! Step-local zero-crossing detection and refinement, shared by the ODE and
//! DAE integrators.
//!
//! The caller supplies the root-function values at the step start and a
//! dense-output evaluator valid on the step interval; crossings are refined
//! by the Illinois-modified secant method. A midpoint probe guards against
//! even-multiplicity grazes at the probe resolution only.

use crate::error::{Error, Result};

/// Which sign changes a root component should report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RootDirection {
    Increasing,
    Decreasing,
    Both,
}

/// Outcome of scanning one step interval: the earliest refined root time and
/// a per-component flag (0 = no root, +1 = rising, −1 = falling at t_star).
#[derive(Debug, Clone, PartialEq)]
pub struct RootScan {
    pub t_star: f64,
    pub flags: Vec<i8>,
}

/// Bracket-width factor: roots are refined to 100·ε·max(|t*|, |t_hi − t_lo|).
pub const ROOT_REFINE_FACTOR: f64 = 100.0;

fn refine_width(t: f64, h: f64) -> f64 {
    ROOT_REFINE_FACTOR * f64::EPSILON * t.abs().max(h.abs())
}

/// Sign-change direction between two endpoint values: +1 rising, −1 falling,
/// 0 none. An exactly-zero right endpoint counts as a crossing; an
/// exactly-zero left endpoint does not (the step start is excluded so a root
/// just reported is not re-reported after reinit).
fn crossing_dir(g_lo: f64, g_hi: f64) -> i8 {
    if g_lo < 0.0 && g_hi >= 0.0 {
        1
    } else if g_lo > 0.0 && g_hi <= 0.0 {
        -1
    } else {
        0
    }
}

fn permitted(dir: RootDirection, d: i8) -> bool {
    match dir {
        RootDirection::Increasing => d > 0,
        RootDirection::Decreasing => d < 0,
        RootDirection::Both => d != 0,
    }
}

fn check_finite(t: f64, g: &[f64]) -> Result<()> {
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Callback(format!("root function returned non-finite value at t={t}")));
    }
    Ok(())
}

fn active_components(g_lo: &[f64], g_hi: &[f64], directions: &[RootDirection]) -> Vec<(usize, i8)> {
    g_lo.iter()
        .zip(g_hi)
        .enumerate()
        .filter_map(|(i, (&lo, &hi))| {
            let d = crossing_dir(lo, hi);
            (d != 0 && permitted(directions[i], d)).then_some((i, d))
        })
        .collect()
}

/// Illinois-modified secant refinement of component `i` on the bracket
/// `[a, b]` (f-values `fa`, `fb` of opposite sign, or `fb == 0`). Returns
/// the endpoint past the crossing.
fn illinois(
    eval: &mut dyn FnMut(f64, &mut [f64]) -> Result<()>,
    gout: &mut [f64],
    i: usize,
    mut a: f64,
    mut fa: f64,
    mut b: f64,
    mut fb: f64,
    h: f64,
) -> Result<f64> {
    if fb == 0.0 {
        return Ok(b);
    }
    let mut last_side = 0i8;
    for _ in 0..200 {
        let tol = refine_width(b, h);
        if (b - a).abs() <= tol {
            break;
        }
        let denom = fb - fa;
        let mut m = if denom != 0.0 { b - fb * (b - a) / denom } else { 0.5 * (a + b) };
        let lo = a.min(b);
        let hi = a.max(b);
        let margin = 0.5 * tol;
        if !m.is_finite() || m <= lo + margin || m >= hi - margin {
            m = 0.5 * (a + b);
        }
        eval(m, gout)?;
        check_finite(m, gout)?;
        let fm = gout[i];
        if fm == 0.0 {
            return Ok(m);
        }
        if (fm > 0.0) == (fa > 0.0) {
            a = m;
            fa = fm;
            if last_side < 0 {
                fb *= 0.5;
            }
            last_side = -1;
        } else {
            b = m;
            fb = fm;
            if last_side > 0 {
                fa *= 0.5;
            }
            last_side = 1;
        }
    }
    Ok(b)
}

/// Scans `[t_lo, t_hi]` for direction-permitted sign changes of the root
/// functions. `g_lo` holds the values at `t_lo`; `eval` evaluates all
/// components at an interior time (via the integrator's dense output).
///
/// Returns the earliest root, refined to width
/// 100·ε·max(|t*|, |t_hi − t_lo|), with every component crossing at that
/// same time flagged.
pub fn scan_step(
    eval: &mut dyn FnMut(f64, &mut [f64]) -> Result<()>,
    t_lo: f64,
    t_hi: f64,
    g_lo: &[f64],
    directions: &[RootDirection],
) -> Result<Option<RootScan>> {
    let n = g_lo.len();
    assert_eq!(directions.len(), n);
    if n == 0 || t_hi == t_lo {
        return Ok(None);
    }
    let h = t_hi - t_lo;
    let mut gout = vec![0.0; n];
    eval(t_hi, &mut gout)?;
    check_finite(t_hi, &gout)?;

    let mut a = t_lo;
    let mut ga = g_lo.to_vec();
    let mut b = t_hi;
    let mut gb = gout.clone();
    let mut active = active_components(&ga, &gb, directions);

    if active.is_empty() {
        // midpoint probe for grazes that recross within the step
        let tm = 0.5 * (a + b);
        if (tm - a).abs() <= refine_width(tm, h) {
            return Ok(None);
        }
        eval(tm, &mut gout)?;
        check_finite(tm, &gout)?;
        let first_half = active_components(&ga, &gout, directions);
        if !first_half.is_empty() {
            b = tm;
            gb = gout.clone();
            active = first_half;
        } else {
            let second_half = active_components(&gout, &gb, directions);
            if second_half.is_empty() {
                return Ok(None);
            }
            a = tm;
            ga = gout.clone();
            active = second_half;
        }
    }

    let mut refined: Vec<(usize, f64, i8)> = Vec::with_capacity(active.len());
    for &(i, d) in &active {
        let t = illinois(eval, &mut gout, i, a, ga[i], b, gb[i], h)?;
        refined.push((i, t, d));
    }
    let t_star = refined.iter().map(|&(_, t, _)| t).fold(f64::INFINITY, f64::min);
    let width = refine_width(t_star, h);
    let mut flags = vec![0i8; n];
    for &(i, t, d) in &refined {
        if (t - t_star).abs() <= width {
            flags[i] = d;
        }
    }
    Ok(Some(RootScan { t_star, flags }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scan1(
        mut f: impl FnMut(f64) -> f64,
        t_lo: f64,
        t_hi: f64,
        dir: RootDirection,
    ) -> Option<RootScan> {
        let g_lo = [f(t_lo)];
        scan_step(
            &mut |t, out| {
                out[0] = f(t);
                Ok(())
            },
            t_lo,
            t_hi,
            &g_lo,
            &[dir],
        )
        .unwrap()
    }

    #[test]
    fn linear_root_at_half() {
        let scan = scan1(|t| t - 0.5, 0.0, 1.0, RootDirection::Both).unwrap();
        assert!((scan.t_star - 0.5).abs() <= 1e-12);
        assert_eq!(scan.flags, vec![1]);
    }

    #[test]
    fn falling_crossing_suppressed_by_increasing_filter() {
        // cos t falls through zero at pi/2 on [0, 3]
        assert!(scan1(|t| t.cos(), 0.0, 3.0, RootDirection::Increasing).is_none());
        let scan = scan1(|t| t.cos(), 0.0, 3.0, RootDirection::Decreasing).unwrap();
        assert!((scan.t_star - std::f64::consts::FRAC_PI_2).abs() <= 1e-9);
        assert_eq!(scan.flags, vec![-1]);
    }

    #[test]
    fn earliest_root_wins_and_later_is_unflagged() {
        let g_lo = [-0.3, -0.6];
        let scan = scan_step(
            &mut |t, out| {
                out[0] = t - 0.3;
                out[1] = t - 0.6;
                Ok(())
            },
            0.0,
            1.0,
            &g_lo,
            &[RootDirection::Both, RootDirection::Both],
        )
        .unwrap()
        .unwrap();
        assert!((scan.t_star - 0.3).abs() <= 1e-12);
        assert_eq!(scan.flags, vec![1, 0]);
    }

    #[test]
    fn simultaneous_roots_both_flagged() {
        let g_lo = [-0.5, 0.5];
        let scan = scan_step(
            &mut |t, out| {
                out[0] = t - 0.5;
                out[1] = 0.5 - t;
                Ok(())
            },
            0.0,
            1.0,
            &g_lo,
            &[RootDirection::Both, RootDirection::Both],
        )
        .unwrap()
        .unwrap();
        assert_eq!(scan.flags, vec![1, -1]);
    }

    #[test]
    fn refinement_width_and_bracket_properties() {
        let cases: [(fn(f64) -> f64, f64, f64); 3] = [
            (|t| (t - 0.123456).powi(3), 0.0, 1.0),
            (|t| t.sin() - 0.7, 0.0, 2.0),
            (|t| (5.0 * t).cos(), 0.0, 0.5),
        ];
        for (f, lo, hi) in cases {
            let scan = scan1(f, lo, hi, RootDirection::Both).unwrap();
            let t = scan.t_star;
            assert!(t > lo && t <= hi);
            let width = ROOT_REFINE_FACTOR * f64::EPSILON * t.abs().max(hi - lo);
            // bracket: g straddles zero within the refinement width
            let (ga, gb) = (f(t - width), f(t + width));
            assert!(ga * gb <= 0.0 || f(t).abs() <= 1e-10, "t*={t}: {ga} vs {gb}");
        }
    }

    #[test]
    fn direction_filter_checked_pointwise() {
        let scan = scan1(|t| t.sin(), 3.0, 7.0, RootDirection::Increasing);
        // sin falls at pi (~3.14) and rises at 2*pi (~6.28): only the rise
        let scan = scan.unwrap();
        assert!((scan.t_star - 2.0 * std::f64::consts::PI).abs() <= 1e-9);
        let d = 1e-8 * scan.t_star.abs().max(1.0);
        assert!((scan.t_star + d).sin() > (scan.t_star - d).sin());
    }

    #[test]
    fn exact_zero_at_step_end_counts() {
        let scan = scan1(|t| t - 1.0, 0.0, 1.0, RootDirection::Both).unwrap();
        assert_eq!(scan.t_star, 1.0);
        assert_eq!(scan.flags, vec![1]);
    }

    #[test]
    fn zero_at_step_start_ignored() {
        assert!(scan1(|t| t, 0.0, 1.0, RootDirection::Both).is_none());
    }

    #[test]
    fn midpoint_probe_catches_recrossing_pair() {
        // two crossings inside one step: endpoint signs are equal
        let scan = scan1(|t| (t - 0.4) * (t - 0.6), 0.0, 1.0, RootDirection::Both).unwrap();
        assert!((scan.t_star - 0.4).abs() <= 1e-9);
        assert_eq!(scan.flags, vec![-1]);
    }

    #[test]
    fn non_finite_root_function_errors() {
        let g_lo = [-1.0];
        let r = scan_step(
            &mut |t, out| {
                out[0] = if t > 0.5 { f64::NAN } else { t - 0.9 };
                Ok(())
            },
            0.0,
            1.0,
            &g_lo,
            &[RootDirection::Both],
        );
        assert!(matches!(r, Err(Error::Callback(_))));
    }
}
