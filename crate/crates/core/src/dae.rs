//! Variable-step, variable-order BDF integrator for implicit DAE systems
//! F(t, y, y') = 0, with a Newton/direct nonlinear stage, consistent
//! initial-condition calculation, algebraic-variable error suppression, and
//! rootfinding over (t, y, y').

use crate::error::{CallbackError, Error, Result};
use crate::linsolver::{dense_lu_factor, dense_lu_solve, AttachToken, DirectSolver};
use crate::matrix::{Matrix, MatrixFamily};
use crate::multistep::{
    Method, StepCore, CRDOWN, DGMAX, ETACF, ETAMIN, ETAMX, ETAMXF, MSBP, MXNCF, MXNEF, MXNEF1,
    NLS_MAXCOR, RDIV, SMALL_NEF,
};
use crate::ode::{SolveFlag, SolveResult, Stats, Tolerances};
use crate::rootfind::{scan_step, RootDirection, RootScan};
use crate::vector::Vector;

const ADDON: f64 = 1.0e-6;
const BIAS2: f64 = 6.0;
const DEFAULT_MXSTEP: usize = 5000;
const H0_FRACTION: f64 = 0.001;
const CALC_IC_MAX_ITERS: usize = 20;

/// Residual callback: F(t, y, y') written into the output vector.
pub type ResFn<'a> = Box<dyn FnMut(f64, &Vector, &Vector, &mut Vector) -> crate::error::CallbackResult + 'a>;
/// Root-function callback over (t, y, y').
pub type DaeRootFn<'a> = Box<dyn FnMut(f64, &Vector, &Vector, &mut [f64]) -> Result<()> + 'a>;
/// Iteration-matrix callback: fill ∂F/∂y + cj ∂F/∂y' at the given point.
pub type DaeJacFn<'a> = Box<dyn FnMut(JacArgs, &mut Matrix) -> crate::error::CallbackResult + 'a>;

/// Evaluation point handed to the iteration-matrix callback.
pub struct JacArgs<'j> {
    pub t: f64,
    pub y: &'j Vector,
    pub yp: &'j Vector,
    /// Multiplier on ∂F/∂y' in the iteration matrix (the inverse of the
    /// step-scaled leading coefficient).
    pub cj: f64,
    /// Residual at (t, y, y').
    pub res: &'j Vector,
}

/// Root-function specification for DAE sessions.
pub struct DaeRootSpec<'a> {
    pub nroots: usize,
    pub g: DaeRootFn<'a>,
}

impl<'a> DaeRootSpec<'a> {
    pub fn new(
        nroots: usize,
        g: impl FnMut(f64, &Vector, &Vector, &mut [f64]) -> Result<()> + 'a,
    ) -> DaeRootSpec<'a> {
        DaeRootSpec { nroots, g: Box::new(g) }
    }
}

struct Engine {
    core: StepCore,
    ewt: Vector,
    /// Error-test weights: ewt with algebraic components zeroed when
    /// suppression is enabled, otherwise equal to ewt.
    ewt_err: Vector,
    tempv: Vector,
    delta: Vector,
    ybuf: Vector,
    ypbuf: Vector,
    yppred: Vector,
    wbuf: Vector,
    /// Initial derivative, authoritative until the first step.
    yp0: Vector,
    root_buf_y: Vector,
    root_buf_yp: Vector,
    root_g: Vec<f64>,
    root_scan_t: f64,
    dir: f64,
    first: bool,
    prev_fail: bool,
    tretlast: f64,
}

enum Stage {
    Converged(f64),
    Recoverable,
}

struct NlsCtl {
    crate_rate: f64,
    nstlp: usize,
    jcur: bool,
    force_setup: bool,
}

/// One implicit-DAE integration session (BDF, Newton with a direct solver).
pub struct DaeSession<'a> {
    res: ResFn<'a>,
    jac: Option<DaeJacFn<'a>>,
    solver: DirectSolver,
    matrix: Option<Matrix>,
    jmat: Option<Matrix>,
    tol: Tolerances,
    id: Option<Vector>,
    suppress_alg: bool,
    root_fn: Option<DaeRootFn<'a>>,
    root_dirs: Vec<RootDirection>,
    max_order: Option<usize>,
    stop_time: Option<f64>,
    mxstep: usize,
    stats: Stats,
    ctl: NlsCtl,
    eng: Option<Engine>,
}

impl<'a> DaeSession<'a> {
    /// Configures a session around an attached direct linear solver;
    /// [`init`](DaeSession::init) supplies the initial state.
    pub fn new(
        linear: AttachToken,
        tolerances: Tolerances,
        res: impl FnMut(f64, &Vector, &Vector, &mut Vector) -> crate::error::CallbackResult + 'a,
    ) -> Result<DaeSession<'a>> {
        let solver = linear
            .direct()
            .ok_or_else(|| {
                Error::Incompatible {
                    property: "linear solver",
                    detail: "the DAE integrator requires a direct linear solver".into(),
                }
            })?
            .clone();
        Ok(DaeSession {
            res: Box::new(res),
            jac: None,
            solver,
            matrix: None,
            jmat: None,
            tol: tolerances,
            id: None,
            suppress_alg: false,
            root_fn: None,
            root_dirs: Vec::new(),
            max_order: None,
            stop_time: None,
            mxstep: DEFAULT_MXSTEP,
            stats: Stats::default(),
            ctl: NlsCtl { crate_rate: 1.0, nstlp: 0, jcur: false, force_setup: true },
            eng: None,
        })
    }

    /// Analytic iteration matrix ∂F/∂y + cj ∂F/∂y'. Without one a dense
    /// difference quotient is used (serial vectors only).
    pub fn set_jacobian(&mut self, f: impl FnMut(JacArgs, &mut Matrix) -> crate::error::CallbackResult + 'a) {
        self.jac = Some(Box::new(f));
    }

    /// Template for the iteration matrix (defaults to dense n×n).
    pub fn set_matrix(&mut self, m: Matrix) -> Result<()> {
        if self.eng.is_some() {
            return Err(Error::Lifecycle("set_matrix after init".into()));
        }
        self.matrix = Some(m);
        Ok(())
    }

    /// Caps the BDF order; call before [`init`](DaeSession::init).
    pub fn set_max_order(&mut self, q: usize) -> Result<()> {
        if self.eng.is_some() {
            return Err(Error::Lifecycle("set_max_order after init".into()));
        }
        if q < 1 {
            return Err(Error::Domain("maximum order must be at least 1".into()));
        }
        self.max_order = Some(q);
        Ok(())
    }

    /// Caps the number of internal steps per solve call (default 5000).
    pub fn set_max_steps(&mut self, mxstep: usize) {
        self.mxstep = mxstep.max(1);
    }

    /// Marks each component differential (1.0) or algebraic (0.0).
    pub fn set_id(&mut self, id: &Vector) -> Result<()> {
        let eng = self.eng.as_ref().ok_or_else(|| Error::Lifecycle("set_id before init".into()))?;
        if !id.compatible(&eng.core.zn[0]) {
            return Err(Error::Incompatible {
                property: "representation",
                detail: "id vector incompatible with the session's vectors".into(),
            });
        }
        self.id = Some(id.clone());
        Ok(())
    }

    /// Excludes algebraic components from the local error test. Requires a
    /// prior [`set_id`](DaeSession::set_id).
    pub fn set_suppress_alg(&mut self, on: bool) -> Result<()> {
        if on && self.id.is_none() {
            return Err(Error::Domain("suppress_alg requires the id vector to be set first".into()));
        }
        self.suppress_alg = on;
        Ok(())
    }

    /// Loads the initial state (t0, y0, y'0) and optional root functions.
    pub fn init(&mut self, t0: f64, y0: Vector, yp0: Vector, roots: Option<DaeRootSpec<'a>>) -> Result<()> {
        if self.eng.is_some() {
            return Err(Error::Lifecycle("init on an already-initialized session".into()));
        }
        if !t0.is_finite() {
            return Err(Error::Domain("t0 must be finite".into()));
        }
        if y0.is_empty() {
            return Err(Error::Domain("state vector must be non-empty".into()));
        }
        if !y0.compatible(&yp0) {
            return Err(Error::Incompatible {
                property: "representation",
                detail: "y0 and y'0 must share length and backend".into(),
            });
        }
        if !y0.max_norm()?.is_finite() || !yp0.max_norm()?.is_finite() {
            return Err(Error::Domain("initial state contains non-finite components".into()));
        }
        self.tol.validate(&y0)?;
        let n = y0.len();
        if self.solver.needs_serial_repr() && y0.as_slice().is_none() {
            return Err(Error::Incompatible {
                property: "representation",
                detail: "built-in direct solvers require serial-representation state vectors".into(),
            });
        }
        let mmat = match &self.matrix {
            Some(m) => {
                if m.rows() != n || m.cols() != n {
                    return Err(Error::Shape(format!(
                        "iteration matrix is {}x{}, state has {} components",
                        m.rows(),
                        m.cols(),
                        n
                    )));
                }
                m.clone()
            }
            None => Matrix::dense(n, n),
        };
        if self.jac.is_none() {
            if y0.as_slice().is_none() {
                return Err(Error::Incompatible {
                    property: "representation",
                    detail: "difference-quotient iteration matrix requires serial vectors".into(),
                });
            }
            if !matches!(mmat.family(), MatrixFamily::Dense) {
                return Err(Error::MatrixIncompatible(
                    "difference-quotient iteration matrix requires a dense template".into(),
                ));
            }
        }

        let mut core = StepCore::new(Method::Bdf, &y0);
        if let Some(cap) = self.max_order {
            let qmax = core.qmax.min(cap);
            core.qmax = qmax;
            core.zn.truncate(qmax + 1);
        }
        core.reset(t0);
        Vector::scale(1.0, &y0, &mut core.zn[0])?;

        let mut zero = y0.clone();
        zero.const_fill(0.0);
        let mut eng = Engine {
            core,
            ewt: zero.clone(),
            ewt_err: zero.clone(),
            tempv: zero.clone(),
            delta: zero.clone(),
            ybuf: zero.clone(),
            ypbuf: zero.clone(),
            yppred: zero.clone(),
            wbuf: zero.clone(),
            yp0,
            root_buf_y: zero.clone(),
            root_buf_yp: zero,
            root_g: Vec::new(),
            root_scan_t: t0,
            dir: 0.0,
            first: true,
            prev_fail: false,
            tretlast: t0,
        };

        if let Some(rs) = roots {
            let mut g0 = vec![0.0; rs.nroots];
            let mut g = rs.g;
            g(t0, &eng.core.zn[0], &eng.yp0, &mut g0)?;
            if g0.iter().any(|v| !v.is_finite()) {
                return Err(Error::Callback("root function returned non-finite value at t0".into()));
            }
            self.root_fn = Some(g);
            self.root_dirs = vec![RootDirection::Both; rs.nroots];
            eng.root_g = g0;
        }

        self.jmat = Some(mmat);
        self.eng = Some(eng);
        Ok(())
    }

    /// Restarts from (t0, y0, y'0), keeping configuration and statistics.
    pub fn reinit(&mut self, t0: f64, y0: &Vector, yp0: &Vector) -> Result<()> {
        let eng = self
            .eng
            .as_mut()
            .ok_or_else(|| Error::Lifecycle("reinit before init".into()))?;
        if !y0.compatible(&eng.core.zn[0]) || !yp0.compatible(&eng.core.zn[0]) {
            return Err(Error::Incompatible {
                property: "representation",
                detail: "reinit state incompatible with the session's vectors".into(),
            });
        }
        if !t0.is_finite() || !y0.max_norm()?.is_finite() || !yp0.max_norm()?.is_finite() {
            return Err(Error::Domain("reinit state must be finite".into()));
        }
        eng.core.reset(t0);
        Vector::scale(1.0, y0, &mut eng.core.zn[0])?;
        Vector::scale(1.0, yp0, &mut eng.yp0)?;
        eng.first = true;
        eng.prev_fail = false;
        eng.dir = 0.0;
        eng.root_scan_t = t0;
        eng.tretlast = t0;
        if let Some(g) = self.root_fn.as_mut() {
            g(t0, &eng.core.zn[0], &eng.yp0, &mut eng.root_g)?;
        }
        self.ctl.force_setup = true;
        self.ctl.crate_rate = 1.0;
        self.ctl.jcur = false;
        self.stop_time = None;
        Ok(())
    }

    /// Sets a hard stop time the integrator will not step past.
    pub fn set_stop_time(&mut self, tstop: f64) -> Result<()> {
        let eng = self
            .eng
            .as_ref()
            .ok_or_else(|| Error::Lifecycle("set_stop_time before init".into()))?;
        if !tstop.is_finite() {
            return Err(Error::Domain("stop time must be finite".into()));
        }
        if eng.dir != 0.0 && (tstop - eng.core.tn) * eng.dir < 0.0 {
            return Err(Error::Domain(format!(
                "stop time {tstop} is behind the current time {}",
                eng.core.tn
            )));
        }
        self.stop_time = Some(tstop);
        Ok(())
    }

    /// Applies one crossing-direction filter to every root component.
    pub fn set_all_root_directions(&mut self, dir: RootDirection) -> Result<()> {
        if self.eng.is_none() {
            return Err(Error::Lifecycle("set_all_root_directions before init".into()));
        }
        for d in &mut self.root_dirs {
            *d = dir;
        }
        Ok(())
    }

    pub fn stats(&self) -> Stats {
        self.stats
    }

    pub fn current_time(&self) -> Result<f64> {
        Ok(self.engine()?.core.tn)
    }

    pub fn current_order(&self) -> Result<usize> {
        Ok(self.engine()?.core.q)
    }

    fn engine(&self) -> Result<&Engine> {
        self.eng
            .as_ref()
            .ok_or_else(|| Error::Lifecycle("session is not initialized".into()))
    }

    /// Computes consistent initial conditions for the semi-explicit index-1
    /// case: solves F(t0, y, y') = 0 for the algebraic components of y and
    /// the differential components of y', leaving differential y untouched.
    /// `tout_hint` must indicate the upcoming integration direction.
    pub fn calc_ic_ya_ydp(&mut self, tout_hint: f64) -> Result<()> {
        if self.eng.is_none() {
            return Err(Error::Lifecycle("calc_ic before init".into()));
        }
        let id = self
            .id
            .clone()
            .ok_or_else(|| Error::Domain("calc_ic requires the id vector to be set".into()))?;
        self.update_ewt()?;

        let eng = self.eng.as_mut().unwrap();
        if !eng.first {
            return Err(Error::Lifecycle("calc_ic after integration has started".into()));
        }
        let t0 = eng.core.tn;
        if tout_hint == t0 {
            return Err(Error::Domain("tout_hint must differ from the initial time".into()));
        }
        let n = eng.core.zn[0].len();
        let ids = id
            .as_slice()
            .ok_or_else(|| Error::Incompatible {
                property: "representation",
                detail: "calc_ic requires serial-representation vectors".into(),
            })?
            .to_vec();
        if eng.core.zn[0].as_slice().is_none() {
            return Err(Error::Incompatible {
                property: "representation",
                detail: "calc_ic requires serial-representation vectors".into(),
            });
        }

        let srur = f64::EPSILON.sqrt();
        let mut converged = false;
        for _ in 0..CALC_IC_MAX_ITERS {
            // residual at the current candidate
            match (self.res)(t0, &eng.core.zn[0], &eng.yp0, &mut eng.delta) {
                Ok(()) => {}
                Err(CallbackError::Recoverable) => {
                    return Err(Error::InitFailure("residual failed during calc_ic".into()))
                }
                Err(CallbackError::Fatal(m)) => return Err(Error::Callback(m)),
            }
            self.stats.num_init_rhs_evals += 1;
            let fnorm = Vector::wrms_norm(&eng.delta, &eng.ewt)?;
            if fnorm <= 0.01 {
                converged = true;
                break;
            }

            // reduced Jacobian by forward differences on the unknowns
            let f0 = eng.delta.as_slice().unwrap().to_vec();
            let mut jd = crate::matrix::DenseContent::zeros(n, n);
            for j in 0..n {
                let differential = ids[j] != 0.0;
                let (saved, inc) = {
                    let base = if differential {
                        eng.yp0.as_slice().unwrap()[j]
                    } else {
                        eng.core.zn[0].as_slice().unwrap()[j]
                    };
                    (base, srur * base.abs().max(1.0))
                };
                if differential {
                    eng.yp0.as_mut_slice().unwrap()[j] = saved + inc;
                } else {
                    eng.core.zn[0].as_mut_slice().unwrap()[j] = saved + inc;
                }
                match (self.res)(t0, &eng.core.zn[0], &eng.yp0, &mut eng.tempv) {
                    Ok(()) => {}
                    Err(CallbackError::Recoverable) => {
                        return Err(Error::InitFailure("residual failed during calc_ic".into()))
                    }
                    Err(CallbackError::Fatal(m)) => return Err(Error::Callback(m)),
                }
                self.stats.num_init_rhs_evals += 1;
                if differential {
                    eng.yp0.as_mut_slice().unwrap()[j] = saved;
                } else {
                    eng.core.zn[0].as_mut_slice().unwrap()[j] = saved;
                }
                let fp = eng.tempv.as_slice().unwrap();
                let inv = 1.0 / inc;
                for i in 0..n {
                    jd.set(i, j, (fp[i] - f0[i]) * inv);
                }
            }

            let mut piv = vec![0usize; n];
            dense_lu_factor(&mut jd, &mut piv)?;
            let mut step: Vec<f64> = f0.iter().map(|v| -v).collect();
            dense_lu_solve(&jd, &piv, &mut step);

            for j in 0..n {
                if ids[j] != 0.0 {
                    eng.yp0.as_mut_slice().unwrap()[j] += step[j];
                } else {
                    eng.core.zn[0].as_mut_slice().unwrap()[j] += step[j];
                }
            }
        }
        if !converged {
            // final residual check after the last correction
            match (self.res)(t0, &eng.core.zn[0], &eng.yp0, &mut eng.delta) {
                Ok(()) => {}
                Err(CallbackError::Recoverable) | Err(CallbackError::Fatal(_)) => {
                    return Err(Error::InitFailure("residual failed during calc_ic".into()))
                }
            }
            self.stats.num_init_rhs_evals += 1;
            if Vector::wrms_norm(&eng.delta, &eng.ewt)? > 0.01 {
                return Err(Error::InitFailure(
                    "calc_ic failed to converge to consistent initial conditions".into(),
                ));
            }
        }
        Ok(())
    }

    /// Copies the current corrected state into the caller's vectors.
    pub fn current_state(&self, y: &mut Vector, yp: &mut Vector) -> Result<()> {
        let eng = self.engine()?;
        Vector::scale(1.0, &eng.core.zn[0], y)?;
        if eng.core.nst == 0 {
            Vector::scale(1.0, &eng.yp0, yp)?;
        } else {
            eng.core.interpolate_deriv(eng.core.tn, yp)?;
        }
        Ok(())
    }

    /// Integrates toward `tout`; `y` and `yp` receive the solution and its
    /// derivative at the returned time (≤ `tout` in the direction of travel).
    pub fn solve_normal(&mut self, tout: f64, y: &mut Vector, yp: &mut Vector) -> Result<SolveResult> {
        if self.eng.is_none() {
            return Err(Error::Lifecycle("solve_normal before init".into()));
        }
        if !tout.is_finite() {
            return Err(Error::Domain("tout must be finite".into()));
        }
        {
            let eng = self.eng.as_ref().unwrap();
            if !y.compatible(&eng.core.zn[0]) || !yp.compatible(&eng.core.zn[0]) {
                return Err(Error::Incompatible {
                    property: "representation",
                    detail: "output vectors incompatible with the session's vectors".into(),
                });
            }
        }

        if self.eng.as_ref().unwrap().first {
            self.start_integration(tout)?;
        }
        let dir = self.eng.as_ref().unwrap().dir;
        {
            let eng = self.eng.as_ref().unwrap();
            if (tout - eng.tretlast) * dir < 0.0 {
                return Err(Error::Domain(format!(
                    "tout = {tout} is behind the last returned time {}",
                    eng.tretlast
                )));
            }
        }

        let mut nstloc = 0usize;
        loop {
            let tn = self.eng.as_ref().unwrap().core.tn;
            let h = self.eng.as_ref().unwrap().core.h;
            let ts_reached = self.stop_time.map(|ts| {
                let fuzz = 100.0 * f64::EPSILON * (tn.abs() + h.abs());
                (tn - ts) * dir >= -fuzz
            });

            if (tn - tout) * dir >= 0.0 || ts_reached == Some(true) {
                let mut limit = if (tn - tout) * dir >= 0.0 { tout } else { tn };
                let mut stop_hit = false;
                if let Some(ts) = self.stop_time {
                    if (ts - limit) * dir <= 0.0 || (ts_reached == Some(true) && (ts - tout) * dir <= 0.0) {
                        limit = ts;
                        stop_hit = true;
                    }
                }
                if let Some(scan) = self.scan_roots(limit)? {
                    self.emit(scan.t_star, y, yp)?;
                    return Ok(SolveResult { t_ret: scan.t_star, flag: SolveFlag::RootsFound(scan.flags) });
                }
                self.emit(limit, y, yp)?;
                if stop_hit {
                    self.eng.as_mut().unwrap().core.tn = limit;
                    self.stop_time = None;
                    return Ok(SolveResult { t_ret: limit, flag: SolveFlag::StopTimeReached });
                }
                return Ok(SolveResult { t_ret: limit, flag: SolveFlag::Success });
            }

            if nstloc >= self.mxstep {
                return Err(Error::TooMuchWork(format!(
                    "{} internal steps taken before reaching tout = {tout} (at t = {tn})",
                    self.mxstep
                )));
            }

            if self.eng.as_ref().unwrap().core.nst > 0 {
                self.update_ewt()?;
            }

            if let Some(ts) = self.stop_time {
                let core = &mut self.eng.as_mut().unwrap().core;
                if (core.tn + core.hprime - ts) * dir > 0.0 {
                    core.hprime = (ts - core.tn) * (1.0 - 4.0 * f64::EPSILON);
                    core.eta = core.hprime / core.h;
                }
            }

            self.take_step()?;
            nstloc += 1;

            let tn = self.eng.as_ref().unwrap().core.tn;
            let mut limit = tn;
            if (limit - tout) * dir > 0.0 {
                limit = tout;
            }
            if let Some(ts) = self.stop_time {
                if (limit - ts) * dir > 0.0 {
                    limit = ts;
                }
            }
            if let Some(scan) = self.scan_roots(limit)? {
                self.emit(scan.t_star, y, yp)?;
                return Ok(SolveResult { t_ret: scan.t_star, flag: SolveFlag::RootsFound(scan.flags) });
            }
        }
    }

    fn emit(&mut self, t: f64, y: &mut Vector, yp: &mut Vector) -> Result<()> {
        let eng = self.eng.as_mut().unwrap();
        eng.core.interpolate(t, y)?;
        if eng.core.nst == 0 {
            Vector::scale(1.0, &eng.yp0, yp)?;
        } else {
            eng.core.interpolate_deriv(t, yp)?;
        }
        eng.tretlast = t;
        Ok(())
    }

    fn update_ewt(&mut self) -> Result<()> {
        let eng = self.eng.as_mut().unwrap();
        let Engine { core, ewt, ewt_err, tempv, wbuf, .. } = eng;
        Vector::abs(&core.zn[0], tempv)?;
        match &self.tol {
            Tolerances::SS { rtol, atol } => {
                tempv.scale_in_place(*rtol);
                Vector::add_constant(tempv, *atol, wbuf)?;
            }
            Tolerances::SV { rtol, atol } => {
                Vector::linear_sum(*rtol, tempv, 1.0, atol, wbuf)?;
            }
        }
        if !Vector::invert_with_test(wbuf, ewt)? {
            return Err(Error::Domain(
                "zero error weight: a solution component is zero with zero atol".into(),
            ));
        }
        if self.suppress_alg {
            let id = self.id.as_ref().expect("suppress_alg requires id");
            Vector::product(ewt, id, ewt_err)?;
        } else {
            Vector::scale(1.0, ewt, ewt_err)?;
        }
        Ok(())
    }

    /// Loads h0, scales zn[1] = h y'0, and fixes the travel direction.
    fn start_integration(&mut self, tout: f64) -> Result<()> {
        self.update_ewt()?;
        let eng = self.eng.as_mut().unwrap();
        let t0 = eng.core.tn;
        if tout == t0 {
            return Err(Error::Domain("tout must differ from the initial time".into()));
        }
        let sign = if tout > t0 { 1.0 } else { -1.0 };
        let tdist = (tout - t0).abs();
        let tround = f64::EPSILON * t0.abs().max(tout.abs());
        if tdist < 2.0 * tround {
            return Err(Error::Domain("tout is too close to t0 to integrate".into()));
        }
        let mut h0 = H0_FRACTION * tdist;
        let ypnorm = Vector::wrms_norm(&eng.yp0, &eng.ewt_err)?;
        if h0 * ypnorm > 2.0 {
            h0 = 2.0 / ypnorm;
        }
        let mut h0 = sign * h0;
        if let Some(ts) = self.stop_time {
            if (ts - t0) * sign <= 0.0 {
                return Err(Error::Domain(format!("stop time {ts} is behind the initial time {t0}")));
            }
            if (t0 + h0 - ts) * sign > 0.0 {
                h0 = (ts - t0) * (1.0 - 4.0 * f64::EPSILON);
            }
        }
        eng.core.h = h0;
        eng.core.hscale = h0;
        eng.core.hprime = h0;
        Vector::scale(h0, &eng.yp0, &mut eng.core.zn[1])?;
        eng.dir = sign;
        eng.first = false;
        Ok(())
    }

    fn take_step(&mut self) -> Result<()> {
        let saved_t;
        {
            let core = &mut self.eng.as_mut().unwrap().core;
            saved_t = core.tn;
            if core.nst > 0 && core.hprime != core.h {
                core.adjust_params()?;
            }
        }
        let mut ncf = 0usize;
        let mut nef = 0usize;
        let dsm;
        loop {
            {
                let core = &mut self.eng.as_mut().unwrap().core;
                core.predict()?;
                core.set_coeffs();
            }
            match self.nls_newton()? {
                Stage::Converged(acnrm) => {
                    self.eng.as_mut().unwrap().core.acnrm = acnrm;
                }
                Stage::Recoverable => {
                    self.stats.num_nonlin_conv_failures += 1;
                    ncf += 1;
                    let eng = self.eng.as_mut().unwrap();
                    eng.prev_fail = true;
                    let core = &mut eng.core;
                    core.restore(saved_t)?;
                    if core.h.abs() <= core.hmin * 1.000001 || ncf == MXNCF {
                        return Err(Error::NonlinearFailure(format!(
                            "corrector failed to converge repeatedly at t = {}",
                            core.tn
                        )));
                    }
                    core.etamax = 1.0;
                    core.eta = ETACF.max(core.hmin / core.h.abs());
                    core.rescale();
                    continue;
                }
            }

            let d = {
                let core = &self.eng.as_ref().unwrap().core;
                core.acnrm * core.tq[2]
            };
            if d <= 1.0 {
                dsm = d;
                break;
            }
            self.stats.num_error_test_failures += 1;
            nef += 1;
            let eng = self.eng.as_mut().unwrap();
            eng.prev_fail = true;
            let core = &mut eng.core;
            core.restore(saved_t)?;
            core.etamax = 1.0;
            if core.h.abs() <= core.hmin * 1.000001 || nef == MXNEF {
                return Err(Error::ErrFailure(format!(
                    "error test failed repeatedly at t = {} with h = {}",
                    core.tn, core.h
                )));
            }
            if nef <= MXNEF1 {
                let lf = (core.q + 1) as f64;
                let mut eta = 1.0 / ((BIAS2 * d).powf(1.0 / lf) + ADDON);
                eta = eta.max(ETAMIN).max(core.hmin / core.h.abs());
                if nef >= SMALL_NEF {
                    eta = eta.min(ETAMXF);
                }
                core.eta = eta;
                core.rescale();
                continue;
            }
            if core.q > 1 {
                core.eta = ETAMIN.max(core.hmin / core.h.abs());
                core.force_order_decrease()?;
                core.rescale();
                continue;
            }
            core.eta = ETAMIN.max(core.hmin / core.h.abs());
            core.rescale();
        }

        let eng = self.eng.as_mut().unwrap();
        eng.prev_fail = false;
        eng.core.complete_step()?;
        {
            let Engine { core, ewt_err, .. } = eng;
            core.prepare_next_step(dsm, ewt_err)?;
        }
        eng.core.etamax = ETAMX;
        self.stats.num_steps += 1;
        Ok(())
    }

    /// Newton corrector: solve F(t, ypred + e, yppred + cj e) = 0 for e with
    /// the attached direct solver.
    fn nls_newton(&mut self) -> Result<Stage> {
        let DaeSession { res, jac, solver, jmat, stats, ctl, eng, suppress_alg, .. } = self;
        let eng = eng.as_mut().unwrap();
        let Engine {
            core, ewt, ewt_err, tempv, delta, ybuf, ypbuf, yppred, wbuf, prev_fail, ..
        } = eng;
        let jmat = jmat.as_mut().expect("matrix template exists after init");
        let cj = 1.0 / core.gamma;

        // predicted derivative: zn[1]/h after the Pascal update
        Vector::scale(1.0 / core.h, &core.zn[1], yppred)?;

        let mut call_setup = *prev_fail
            || ctl.force_setup
            || core.nst == 0
            || core.nst >= ctl.nstlp + MSBP
            || (core.gamrat - 1.0).abs() > DGMAX;

        'outer: loop {
            core.acor.const_fill(0.0);
            Vector::scale(1.0, &core.zn[0], ybuf)?;
            Vector::scale(1.0, yppred, ypbuf)?;

            // residual at the predictor
            match res(core.tn, ybuf, ypbuf, delta) {
                Ok(()) => {}
                Err(CallbackError::Recoverable) => return Ok(Stage::Recoverable),
                Err(CallbackError::Fatal(m)) => return Err(Error::Callback(m)),
            }
            stats.num_rhs_evals += 1;

            if call_setup {
                let filled = if let Some(jf) = jac {
                    jmat.zero();
                    match jf(JacArgs { t: core.tn, y: ybuf, yp: ypbuf, cj, res: delta }, jmat) {
                        Ok(()) => true,
                        Err(CallbackError::Recoverable) => false,
                        Err(CallbackError::Fatal(m)) => return Err(Error::Callback(m)),
                    }
                } else {
                    dq_iteration_matrix(
                        res,
                        core.tn,
                        core.h,
                        cj,
                        ybuf,
                        ypbuf,
                        delta,
                        ewt,
                        jmat,
                        tempv,
                        &mut stats.num_lin_rhs_evals,
                    )?
                };
                let setup_ok = if filled {
                    match solver.setup(jmat) {
                        Ok(()) => true,
                        Err(Error::SingularMatrix { .. }) => false,
                        Err(e) => return Err(e),
                    }
                } else {
                    false
                };
                stats.num_lin_setups += 1;
                ctl.nstlp = core.nst;
                ctl.force_setup = false;
                if !setup_ok {
                    return Ok(Stage::Recoverable);
                }
                core.gamrat = 1.0;
                core.gammap = core.gamma;
                ctl.crate_rate = 1.0;
                ctl.jcur = true;
            }

            let mut m = 0usize;
            let mut delp = 0.0f64;
            loop {
                // solve J x = -F
                Vector::scale(-1.0, delta, tempv)?;
                solver.solve(wbuf, tempv)?;
                if core.gamrat != 1.0 {
                    // stale-matrix correction for the changed leading coefficient
                    let cjratio = core.gammap / core.gamma;
                    wbuf.scale_in_place(2.0 / (1.0 + cjratio));
                }
                stats.num_nonlin_iters += 1;

                let del = Vector::wrms_norm(wbuf, ewt)?;
                core.acor.linear_sum_in_place(1.0, 1.0, wbuf)?;
                Vector::linear_sum(1.0, &core.zn[0], 1.0, &core.acor, ybuf)?;
                Vector::linear_sum(cj, &core.acor, 1.0, yppred, ypbuf)?;

                if m > 0 {
                    ctl.crate_rate = (CRDOWN * ctl.crate_rate).max(del / delp);
                }
                let dcon = del * ctl.crate_rate.min(1.0) / core.tq[4];
                if dcon <= 1.0 {
                    let w = if *suppress_alg { &*ewt_err } else { &*ewt };
                    let acnrm = Vector::wrms_norm(&core.acor, w)?;
                    ctl.jcur = false;
                    return Ok(Stage::Converged(acnrm));
                }
                m += 1;
                if m == NLS_MAXCOR || (m >= 2 && del > RDIV * delp) {
                    if !ctl.jcur {
                        call_setup = true;
                        continue 'outer;
                    }
                    return Ok(Stage::Recoverable);
                }
                delp = del;
                match res(core.tn, ybuf, ypbuf, delta) {
                    Ok(()) => {}
                    Err(CallbackError::Recoverable) => {
                        if !ctl.jcur {
                            call_setup = true;
                            continue 'outer;
                        }
                        return Ok(Stage::Recoverable);
                    }
                    Err(CallbackError::Fatal(msg)) => return Err(Error::Callback(msg)),
                }
                stats.num_rhs_evals += 1;
            }
        }
    }

    fn scan_roots(&mut self, limit: f64) -> Result<Option<RootScan>> {
        if self.root_dirs.is_empty() {
            return Ok(None);
        }
        let eng = self.eng.as_mut().unwrap();
        let dir = eng.dir;
        let Engine { core, root_buf_y, root_buf_yp, root_g, root_scan_t, yp0, .. } = eng;
        if (limit - *root_scan_t) * dir <= 0.0 {
            return Ok(None);
        }
        let rf = self.root_fn.as_mut().expect("directions imply a root function");

        let res = {
            let core = &*core;
            let yp0 = &*yp0;
            let mut eval = |t: f64, g: &mut [f64]| -> Result<()> {
                core.interpolate(t, root_buf_y)?;
                if core.nst == 0 {
                    Vector::scale(1.0, yp0, root_buf_yp)?;
                } else {
                    core.interpolate_deriv(t, root_buf_yp)?;
                }
                rf(t, root_buf_y, root_buf_yp, g)
            };
            scan_step(&mut eval, *root_scan_t, limit, root_g, &self.root_dirs)?
        };
        let frontier = match &res {
            Some(scan) => scan.t_star,
            None => limit,
        };
        core.interpolate(frontier, root_buf_y)?;
        if core.nst == 0 {
            Vector::scale(1.0, yp0, root_buf_yp)?;
        } else {
            core.interpolate_deriv(frontier, root_buf_yp)?;
        }
        rf(frontier, root_buf_y, root_buf_yp, root_g)?;
        *root_scan_t = frontier;
        Ok(res)
    }
}

/// Dense difference-quotient iteration matrix ∂F/∂y + cj ∂F/∂y': perturb
/// y_j and y'_j together so one residual evaluation yields the combination.
#[allow(clippy::too_many_arguments)]
fn dq_iteration_matrix(
    res: &mut ResFn,
    t: f64,
    h: f64,
    cj: f64,
    y: &mut Vector,
    yp: &mut Vector,
    f0: &Vector,
    ewt: &Vector,
    jmat: &mut Matrix,
    work: &mut Vector,
    nfe: &mut usize,
) -> Result<bool> {
    let n = y.len();
    let srur = f64::EPSILON.sqrt();
    let ew = ewt.as_slice().expect("difference quotients run on serial vectors").to_vec();
    let f0s = f0.as_slice().unwrap().to_vec();
    for j in 0..n {
        let (yj, ypj, inc) = {
            let ys = y.as_slice().unwrap();
            let yps = yp.as_slice().unwrap();
            let inc = srur * ys[j].abs().max((h * yps[j]).abs()).max(1.0 / ew[j]);
            (ys[j], yps[j], inc)
        };
        y.as_mut_slice().unwrap()[j] = yj + inc;
        yp.as_mut_slice().unwrap()[j] = ypj + cj * inc;
        let ok = match res(t, y, yp, work) {
            Ok(()) => true,
            Err(CallbackError::Recoverable) => false,
            Err(CallbackError::Fatal(m)) => return Err(Error::Callback(m)),
        };
        *nfe += 1;
        y.as_mut_slice().unwrap()[j] = yj;
        yp.as_mut_slice().unwrap()[j] = ypj;
        if !ok {
            return Ok(false);
        }
        let ws = work.as_slice().unwrap();
        let d = jmat.as_dense_mut().expect("difference quotients fill a dense matrix");
        let inv = 1.0 / inc;
        for i in 0..n {
            d.set(i, j, (ws[i] - f0s[i]) * inv);
        }
    }
    Ok(true)
}
