//! Pendulum example programs (polar ODE and Cartesian index-1 DAE), a
//! byte-exact trajectory format, output diffing, and benchmark plumbing.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::path::Path;

use ivpkit::dae::{DaeRootSpec, DaeSession};
use ivpkit::error::CallbackResult;
use ivpkit::linsolver::{AttachToken, DirectSolver};
use ivpkit::matrix::Matrix;
use ivpkit::ode::{Iteration, LmmMethod, NewtonSpec, OdeSession, RootSpec, SolveFlag, Tolerances};
use ivpkit::rootfind::RootDirection;
use ivpkit::vector::Vector;

/// Pendulum model and run parameters shared by both formulations.
#[derive(Debug, Clone)]
pub struct PendulumConfig {
    /// Rod length.
    pub r: f64,
    /// Gravitational acceleration.
    pub g: f64,
    /// Coefficient of restitution applied to the velocity at each impact.
    pub k: f64,
    /// Wall angle measured like theta (from the downward vertical).
    pub wall_angle: f64,
    pub t_end: f64,
    /// Output interval.
    pub dt: f64,
    pub rtol: Option<f64>,
    pub atol: Option<f64>,
}

impl Default for PendulumConfig {
    fn default() -> PendulumConfig {
        PendulumConfig {
            r: 1.0,
            g: 9.8,
            k: -0.5,
            wall_angle: -PI / 6.0,
            t_end: 10.0,
            dt: 0.01,
            rtol: None,
            atol: None,
        }
    }
}

impl PendulumConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        if !(self.r > 0.0) {
            return Err(RunError::Config("rod length must be positive".into()));
        }
        if !(self.k.abs() < 1.0) {
            return Err(RunError::Config("|restitution| must be below 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(RunError::Config("output interval must be positive".into()));
        }
        if !(self.t_end > 0.0) {
            return Err(RunError::Config("end time must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum RunError {
    Config(String),
    Solver(ivpkit::error::Error),
    Io(io::Error),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(m) => write!(f, "invalid configuration: {m}"),
            RunError::Solver(e) => write!(f, "solver failure: {e}"),
            RunError::Io(e) => write!(f, "i/o failure: {e}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<ivpkit::error::Error> for RunError {
    fn from(e: ivpkit::error::Error) -> RunError {
        RunError::Solver(e)
    }
}

impl From<io::Error> for RunError {
    fn from(e: io::Error) -> RunError {
        RunError::Io(e)
    }
}

/// Scientific notation with 17 significant digits, lowercase `e`, at least
/// two exponent digits, and a sign only when negative. Stable across
/// platforms and locales so trajectory files can be compared byte-for-byte.
pub fn format_real(v: f64) -> String {
    let s = format!("{v:.16e}");
    let (mant, exp) = s.split_once('e').expect("float formatting always has an exponent");
    match exp.strip_prefix('-') {
        Some(d) => format!("{mant}e-{d:0>2}"),
        None => {
            let d = exp.strip_prefix('+').unwrap_or(exp);
            format!("{mant}e{d:0>2}")
        }
    }
}

fn write_row(out: &mut dyn Write, t: f64, cols: &[f64]) -> Result<(), RunError> {
    let mut line = format_real(t);
    for c in cols {
        line.push('\t');
        line.push_str(&format_real(*c));
    }
    line.push('\n');
    out.write_all(line.as_bytes())?;
    Ok(())
}

/// Reads component `i` from any backend whose payload is a plain array.
fn vget(v: &Vector, i: usize) -> f64 {
    match v.as_slice() {
        Some(s) => s[i],
        None => v.custom_payload::<Vec<f64>>().expect("example vectors carry Vec<f64>")[i],
    }
}

fn vset(v: &mut Vector, i: usize, val: f64) {
    match v.as_mut_slice() {
        Some(s) => s[i] = val,
        None => {
            v.custom_payload_mut::<Vec<f64>>().expect("example vectors carry Vec<f64>")[i] = val
        }
    }
}

const THETA: usize = 0;
const THETA_D: usize = 1;

fn polar_energy(cfg: &PendulumConfig, theta: f64, omega: f64) -> f64 {
    0.5 * (cfg.r * omega).powi(2) - cfg.g * cfg.r * theta.cos()
}

/// Polar pendulum with the paper-texture loop: Adams + functional iteration
/// by default, bounce handling via rootfinding + reinit, rows every `dt`.
pub fn run_polar(cfg: &PendulumConfig, debug_cols: bool, out: &mut dyn Write) -> Result<(), RunError> {
    run_polar_with(cfg, debug_cols, &|d| Vector::serial(d), None, out)
}

/// Polar pendulum over a caller-chosen vector backend and, optionally, a
/// Newton iteration with the supplied direct solver (analytic Jacobian).
/// With `newton = None` the nonlinear stage is functional iteration.
pub fn run_polar_with(
    cfg: &PendulumConfig,
    debug_cols: bool,
    vecof: &dyn Fn(Vec<f64>) -> Vector,
    newton: Option<AttachToken>,
    out: &mut dyn Write,
) -> Result<(), RunError> {
    cfg.validate()?;
    let g = cfg.g;
    let rhs = move |_t: f64, y: &Vector, yd: &mut Vector| -> CallbackResult {
        vset(yd, THETA, vget(y, THETA_D));
        vset(yd, THETA_D, -g * vget(y, THETA).sin());
        Ok(())
    };
    let iteration = match newton {
        None => Iteration::Functional,
        Some(token) => Iteration::Newton(NewtonSpec::new(token).with_jacobian(
            move |_t, y: &Vector, _fy: &Vector, m: &mut Matrix| -> CallbackResult {
                let d = m.as_dense_mut().expect("polar Newton runs on a dense matrix");
                d.set(THETA, THETA_D, 1.0);
                d.set(THETA_D, THETA, -g * vget(y, THETA).cos());
                Ok(())
            },
        )),
    };
    let tol = match (cfg.rtol, cfg.atol) {
        (None, None) => Tolerances::default_tolerances(),
        (rt, at) => Tolerances::ss(rt.unwrap_or(1e-4), at.unwrap_or(1e-8)),
    };
    let mut s = OdeSession::new(LmmMethod::Adams, iteration, tol, rhs);

    let wall = cfg.wall_angle;
    let roots = RootSpec::new(1, move |_t: f64, y: &Vector, gout: &mut [f64]| {
        gout[0] = wall - vget(y, THETA);
        Ok(())
    });
    s.init(0.0, vecof(vec![PI / 2.0, 0.0]), Some(roots))?;
    s.set_all_root_directions(RootDirection::Increasing)?;
    s.set_stop_time(cfg.t_end)?;

    let emit = |out: &mut dyn Write, t: f64, theta: f64, omega: f64| -> Result<(), RunError> {
        let x = cfg.r * theta.sin();
        let yy = -cfg.r * theta.cos();
        if debug_cols {
            write_row(out, t, &[x, yy, polar_energy(cfg, theta, omega)])
        } else {
            write_row(out, t, &[x, yy])
        }
    };
    emit(out, 0.0, PI / 2.0, 0.0)?;

    let mut y = vecof(vec![0.0, 0.0]);
    let nrows = (cfg.t_end / cfg.dt).round() as usize;
    let mut i = 1usize;
    while i <= nrows {
        let tnext = (i as f64) * cfg.dt;
        let res = s.solve_normal(tnext, &mut y)?;
        match res.flag {
            SolveFlag::Success => {
                emit(out, tnext, vget(&y, THETA), vget(&y, THETA_D))?;
                i += 1;
            }
            SolveFlag::RootsFound(_) => {
                let omega = cfg.k * vget(&y, THETA_D);
                vset(&mut y, THETA_D, omega);
                s.reinit(res.t_ret, &y)?;
                s.set_stop_time(cfg.t_end)?;
                if res.t_ret == tnext {
                    emit(out, tnext, vget(&y, THETA), omega)?;
                    i += 1;
                }
            }
            SolveFlag::StopTimeReached => {
                emit(out, res.t_ret, vget(&y, THETA), vget(&y, THETA_D))?;
                break;
            }
        }
    }
    Ok(())
}

// Cartesian state layout.
pub const X: usize = 0;
pub const Y: usize = 1;
pub const VX: usize = 2;
pub const VY: usize = 3;
pub const P: usize = 4;

/// Cartesian pendulum residual: velocity definitions, Newton's law with rod
/// tension p, and the twice-differentiated length constraint.
pub fn cartesian_residual(g: f64, vars: &Vector, dvars: &Vector, r: &mut Vector) {
    let v = vars.as_slice().unwrap();
    let d = dvars.as_slice().unwrap();
    let rr = r.as_mut_slice().unwrap();
    rr[0] = v[VX] - d[X];
    rr[1] = v[VY] - d[Y];
    rr[2] = d[VX] - v[P] * v[X];
    rr[3] = d[VY] - v[P] * v[Y] + g;
    rr[4] = v[X] * d[VX] + v[Y] * d[VY] + v[VX] * d[X] + v[VY] * d[Y];
}

/// Cartesian pendulum iteration matrix ∂F/∂Y + c·∂F/∂Ẏ.
pub fn cartesian_jacobian(vars: &Vector, dvars: &Vector, c: f64, m: &mut Matrix) {
    let v = vars.as_slice().unwrap();
    let d = dvars.as_slice().unwrap();
    let mm = m.as_dense_mut().expect("cartesian pendulum uses a dense matrix");
    mm.set(0, X, -c);
    mm.set(0, VX, 1.0);
    mm.set(1, Y, -c);
    mm.set(1, VY, 1.0);
    mm.set(2, X, -v[P]);
    mm.set(2, VX, c);
    mm.set(2, P, -v[X]);
    mm.set(3, Y, -v[P]);
    mm.set(3, VY, c);
    mm.set(3, P, -v[Y]);
    mm.set(4, X, c * v[VX] + d[VX]);
    mm.set(4, Y, c * v[VY] + d[VY]);
    mm.set(4, VX, c * v[X] + d[X]);
    mm.set(4, VY, c * v[Y] + d[Y]);
}

/// Cartesian pendulum as an index-1 DAE after differentiating the length
/// constraint twice; p is the rod tension per unit mass over r².
pub fn run_cartesian(
    cfg: &PendulumConfig,
    debug_cols: bool,
    out: &mut dyn Write,
) -> Result<(), RunError> {
    cfg.validate()?;
    let g = cfg.g;
    let res = move |_t: f64, vars: &Vector, dvars: &Vector, r: &mut Vector| -> CallbackResult {
        cartesian_residual(g, vars, dvars, r);
        Ok(())
    };

    let solver = DirectSolver::dense();
    let tol = Tolerances::ss(cfg.rtol.unwrap_or(1e-9), cfg.atol.unwrap_or(1e-9));
    let mut s = DaeSession::new(solver.attach()?, tol, res)?;
    s.set_jacobian(|args, m: &mut Matrix| -> CallbackResult {
        cartesian_jacobian(args.y, args.yp, args.cj, m);
        Ok(())
    });
    s.set_matrix(Matrix::dense(5, 5))?;

    let wall = cfg.wall_angle;
    let slope = wall.sin() / -wall.cos();
    let roots = DaeRootSpec::new(1, move |_t: f64, vars: &Vector, _dv: &Vector, gout: &mut [f64]| {
        let v = vars.as_slice().unwrap();
        gout[0] = v[X] - v[Y] * slope;
        Ok(())
    });
    let x0 = cfg.r * (PI / 2.0).sin();
    let y0 = -cfg.r * (PI / 2.0).cos();
    s.init(
        0.0,
        Vector::serial(vec![x0, y0, 0.0, 0.0, 0.0]),
        Vector::serial(vec![0.0; 5]),
        Some(roots),
    )?;
    s.set_id(&Vector::serial(vec![1.0, 1.0, 1.0, 1.0, 0.0]))?;
    s.set_suppress_alg(true)?;
    s.calc_ic_ya_ydp(cfg.dt)?;
    s.set_stop_time(cfg.t_end)?;

    let emit = |out: &mut dyn Write, t: f64, v: &Vector| -> Result<(), RunError> {
        let vs = v.as_slice().unwrap();
        if debug_cols {
            write_row(out, t, &[vs[X], vs[Y], vs[P]])
        } else {
            write_row(out, t, &[vs[X], vs[Y]])
        }
    };

    let mut y = Vector::serial(vec![0.0; 5]);
    let mut yp = Vector::serial(vec![0.0; 5]);
    s.current_state(&mut y, &mut yp)?;
    emit(out, 0.0, &y)?;

    let nrows = (cfg.t_end / cfg.dt).round() as usize;
    let mut i = 1usize;
    while i <= nrows {
        let tnext = (i as f64) * cfg.dt;
        let res = s.solve_normal(tnext, &mut y, &mut yp)?;
        match res.flag {
            SolveFlag::Success => {
                emit(out, tnext, &y)?;
                i += 1;
            }
            SolveFlag::RootsFound(_) => {
                {
                    let vs = y.as_mut_slice().unwrap();
                    vs[VX] *= cfg.k;
                    vs[VY] *= cfg.k;
                }
                s.reinit(res.t_ret, &y, &yp)?;
                s.calc_ic_ya_ydp(res.t_ret + cfg.dt)?;
                s.set_stop_time(cfg.t_end)?;
                if res.t_ret == tnext {
                    s.current_state(&mut y, &mut yp)?;
                    emit(out, tnext, &y)?;
                    i += 1;
                }
            }
            SolveFlag::StopTimeReached => {
                emit(out, res.t_ret, &y)?;
                break;
            }
        }
    }
    Ok(())
}

/// Outcome of a byte comparison between two output files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffVerdict {
    Identical,
    /// Zero-based offset of the first differing byte; when one file is a
    /// prefix of the other, the offset is the shorter length.
    FirstDifference(u64),
}

pub fn diff_outputs(a: &Path, b: &Path) -> io::Result<DiffVerdict> {
    let mut fa = BufReader::new(File::open(a)?);
    let mut fb = BufReader::new(File::open(b)?);
    let mut ba = [0u8; 8192];
    let mut bb = [0u8; 8192];
    let mut offset = 0u64;
    loop {
        let na = read_full(&mut fa, &mut ba)?;
        let nb = read_full(&mut fb, &mut bb)?;
        let common = na.min(nb);
        for i in 0..common {
            if ba[i] != bb[i] {
                return Ok(DiffVerdict::FirstDifference(offset + i as u64));
            }
        }
        if na != nb {
            return Ok(DiffVerdict::FirstDifference(offset + common as u64));
        }
        if na == 0 {
            return Ok(DiffVerdict::Identical);
        }
        offset += na as u64;
    }
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    Ok(filled)
}

/// In-process benchmark workloads, shortened runs discarding their output.
pub fn builtin_workload(name: &str) -> Option<Box<dyn FnMut()>> {
    let cfg = PendulumConfig { t_end: 2.0, ..PendulumConfig::default() };
    match name {
        "polar" => Some(Box::new(move || {
            run_polar(&cfg, false, &mut io::sink()).expect("polar workload failed");
        })),
        "cartesian" => Some(Box::new(move || {
            run_cartesian(&cfg, false, &mut io::sink()).expect("cartesian workload failed");
        })),
        _ => None,
    }
}
