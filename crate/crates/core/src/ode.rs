//! Variable-step, variable-order integrator for explicit ODE systems
//! y' = f(t, y), with Adams (nonstiff) and BDF (stiff) method families,
//! functional / Newton / diagonal-approximate nonlinear stages, rootfinding,
//! and a hard stop time.

use crate::error::{CallbackError, Error, Result};
use crate::linsolver::{
    band_lu_factor, band_lu_solve, AttachToken, BandedPrecSpec, DirectFamily, DirectSolver,
    IterativeSolver, PrecSide, Preconditioner,
};
use crate::matrix::{BandedContent, Matrix, MatrixFamily};
use crate::multistep::{
    Method, StepCore, CRDOWN, DGMAX, ETACF, ETAMIN, ETAMX, ETAMXF, MSBP, MXNCF, MXNEF, MXNEF1,
    NLS_MAXCOR, RDIV, SMALL_NEF,
};
use crate::rootfind::{scan_step, RootDirection, RootScan};
use crate::vector::{kernels, Vector};

const ADDON: f64 = 1.0e-6;
const BIAS2: f64 = 6.0;
const HLB_FACTOR: f64 = 100.0;
const HUB_FACTOR: f64 = 0.1;
const H_BIAS: f64 = 0.5;
const MAX_H0_ITERS: usize = 4;
const EPLIFAC: f64 = 0.05; // linear tolerance factor for the iterative stage
const FRACT: f64 = 0.1; // diagonal-approximation perturbation fraction
const DEFAULT_MXSTEP: usize = 5000;

/// Integration tolerances: scalar relative, scalar or per-component absolute.
pub enum Tolerances {
    SS { rtol: f64, atol: f64 },
    SV { rtol: f64, atol: Vector },
}

impl Tolerances {
    pub fn ss(rtol: f64, atol: f64) -> Tolerances {
        Tolerances::SS { rtol, atol }
    }

    pub fn sv(rtol: f64, atol: Vector) -> Tolerances {
        Tolerances::SV { rtol, atol }
    }

    /// The conventional defaults: rtol = 1e-4, atol = 1e-8.
    pub fn default_tolerances() -> Tolerances {
        Tolerances::SS { rtol: 1.0e-4, atol: 1.0e-8 }
    }

    pub(crate) fn validate(&self, y0: &Vector) -> Result<()> {
        match self {
            Tolerances::SS { rtol, atol } => {
                if !rtol.is_finite() || *rtol < 0.0 || !atol.is_finite() || *atol < 0.0 {
                    return Err(Error::Domain("tolerances must be finite and nonnegative".into()));
                }
            }
            Tolerances::SV { rtol, atol } => {
                if !rtol.is_finite() || *rtol < 0.0 {
                    return Err(Error::Domain("rtol must be finite and nonnegative".into()));
                }
                if !atol.compatible(y0) {
                    return Err(Error::Incompatible {
                        property: "representation",
                        detail: "atol vector incompatible with the state vector".into(),
                    });
                }
                if atol.min_element()? < 0.0 {
                    return Err(Error::Domain("atol components must be nonnegative".into()));
                }
            }
        }
        Ok(())
    }
}

/// Right-hand side callback: f(t, y) written into the output vector.
pub type RhsFn<'a> = Box<dyn FnMut(f64, &Vector, &mut Vector) -> crate::error::CallbackResult + 'a>;
/// Root-function callback: g(t, y) written into the output slice.
pub type RootFn<'a> = Box<dyn FnMut(f64, &Vector, &mut [f64]) -> Result<()> + 'a>;
/// Jacobian callback: J = df/dy at (t, y); fy holds f(t, y).
pub type JacFn<'a> = Box<dyn FnMut(f64, &Vector, &Vector, &mut Matrix) -> crate::error::CallbackResult + 'a>;
/// Preconditioner solve callback: z = P⁻¹ r given (t, y, gamma, r, side).
pub type PrecSolveFn<'a> = Box<dyn FnMut(f64, &Vector, f64, &[f64], PrecSide, &mut [f64]) -> Result<()> + 'a>;
/// Preconditioner setup callback, invoked at each linear-solver setup.
pub type PrecSetupFn<'a> = Box<dyn FnMut(f64, &Vector, f64) -> Result<()> + 'a>;

/// Newton-stage configuration: an exclusively attached linear solver plus
/// optional Jacobian, matrix template, and preconditioning.
pub struct NewtonSpec<'a> {
    linear: AttachToken,
    jac: Option<JacFn<'a>>,
    matrix: Option<Matrix>,
    prec_side: PrecSide,
    prec_solve: Option<PrecSolveFn<'a>>,
    prec_setup: Option<PrecSetupFn<'a>>,
    banded_prec: Option<BandedPrecSpec>,
}

impl<'a> NewtonSpec<'a> {
    pub fn new(linear: AttachToken) -> NewtonSpec<'a> {
        NewtonSpec {
            linear,
            jac: None,
            matrix: None,
            prec_side: PrecSide::None,
            prec_solve: None,
            prec_setup: None,
            banded_prec: None,
        }
    }

    /// Analytic Jacobian for direct solvers. Without one, a dense or banded
    /// difference-quotient approximation is used (serial vectors only).
    pub fn with_jacobian(
        mut self,
        f: impl FnMut(f64, &Vector, &Vector, &mut Matrix) -> crate::error::CallbackResult + 'a,
    ) -> NewtonSpec<'a> {
        self.jac = Some(Box::new(f));
        self
    }

    /// Template for the Newton matrix I − γJ (defaults to dense n×n).
    pub fn with_matrix(mut self, m: Matrix) -> NewtonSpec<'a> {
        self.matrix = Some(m);
        self
    }

    /// User preconditioner for the iterative stage.
    pub fn with_preconditioner(
        mut self,
        side: PrecSide,
        solve: impl FnMut(f64, &Vector, f64, &[f64], PrecSide, &mut [f64]) -> Result<()> + 'a,
    ) -> NewtonSpec<'a> {
        self.prec_side = side;
        self.prec_solve = Some(Box::new(solve));
        self
    }

    pub fn with_prec_setup(
        mut self,
        setup: impl FnMut(f64, &Vector, f64) -> Result<()> + 'a,
    ) -> NewtonSpec<'a> {
        self.prec_setup = Some(Box::new(setup));
        self
    }

    /// Difference-quotient banded preconditioner (left) for SPGMR sessions.
    pub fn with_banded_preconditioner(mut self, spec: BandedPrecSpec) -> NewtonSpec<'a> {
        self.banded_prec = Some(spec);
        self
    }
}

/// Nonlinear-stage selection for each step.
pub enum Iteration<'a> {
    /// Fixed-point corrector; never touches a linear solver.
    Functional,
    /// Modified Newton with an attached direct or iterative linear solver.
    Newton(NewtonSpec<'a>),
    /// Diagonal difference-quotient approximation to Newton.
    Diag,
}

/// Root-function specification: component count plus the callback.
pub struct RootSpec<'a> {
    pub nroots: usize,
    pub g: RootFn<'a>,
}

impl<'a> RootSpec<'a> {
    pub fn new(nroots: usize, g: impl FnMut(f64, &Vector, &mut [f64]) -> Result<()> + 'a) -> RootSpec<'a> {
        RootSpec { nroots, g: Box::new(g) }
    }
}

/// How a solve call returned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SolveFlag {
    /// Reached the requested output time.
    Success,
    /// Stopped at a root; per-component crossing flags (+1 rising, −1
    /// falling, 0 not crossing).
    RootsFound(Vec<i8>),
    /// Reached the stop time set by [`OdeSession::set_stop_time`].
    StopTimeReached,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub t_ret: f64,
    pub flag: SolveFlag,
}

/// Cumulative integrator statistics (not reset by reinit).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Stats {
    pub num_steps: usize,
    /// Right-hand-side evaluations made by the step loop.
    pub num_rhs_evals: usize,
    /// Right-hand-side evaluations made during (re)initialization.
    pub num_init_rhs_evals: usize,
    /// Right-hand-side evaluations made by the linear solver interface
    /// (difference-quotient Jacobians and Jacobian-vector products).
    pub num_lin_rhs_evals: usize,
    pub num_lin_setups: usize,
    pub num_error_test_failures: usize,
    pub num_nonlin_iters: usize,
    pub num_nonlin_conv_failures: usize,
}

struct NlsCtl {
    crate_rate: f64,
    nstlp: usize,
    jcur: bool,
    force_setup: bool,
}

impl NlsCtl {
    fn new() -> NlsCtl {
        NlsCtl { crate_rate: 1.0, nstlp: 0, jcur: false, force_setup: true }
    }
}

struct BandPrecState {
    spec: BandedPrecSpec,
    factors: BandedContent,
    piv: Vec<usize>,
    ready: bool,
}

enum LinState<'a> {
    Direct {
        solver: DirectSolver,
        jac: Option<JacFn<'a>>,
        jmat: Matrix,
        mmat: Matrix,
    },
    Iterative {
        solver: IterativeSolver,
        prec_side: PrecSide,
        prec_solve: Option<PrecSolveFn<'a>>,
        prec_setup: Option<PrecSetupFn<'a>>,
        banded: Option<BandPrecState>,
    },
}

struct NewtonState<'a> {
    ctl: NlsCtl,
    lin: LinState<'a>,
}

struct DiagState {
    ctl: NlsCtl,
    /// Stored elementwise inverse of the diagonal approximation to I − γJ.
    minv: Vector,
    bit: Vector,
    bitcomp: Vector,
    gammasv: f64,
    nfe: usize,
}

enum IterState<'a> {
    Functional,
    Newton(NewtonState<'a>),
    Diag(DiagState),
}

impl<'a> IterState<'a> {
    fn ctl_mut(&mut self) -> Option<&mut NlsCtl> {
        match self {
            IterState::Functional => None,
            IterState::Newton(ns) => Some(&mut ns.ctl),
            IterState::Diag(ds) => Some(&mut ds.ctl),
        }
    }
}

struct Engine {
    core: StepCore,
    ewt: Vector,
    tempv: Vector,
    ftemp: Vector,
    ybuf: Vector,
    wbuf: Vector,
    itemp1: Vector,
    itemp2: Vector,
    root_buf: Vector,
    root_g: Vec<f64>,
    root_scan_t: f64,
    /// Integration direction sign; 0 until the first step size is chosen.
    dir: f64,
    first: bool,
    prev_fail: bool,
    tretlast: f64,
}

enum Stage {
    Converged(f64),
    Recoverable,
}

/// One initial-value integration session.
pub struct OdeSession<'a> {
    method: Method,
    rhs: RhsFn<'a>,
    tol: Tolerances,
    iter_spec: Option<Iteration<'a>>,
    iter: Option<IterState<'a>>,
    root_fn: Option<RootFn<'a>>,
    root_dirs: Vec<RootDirection>,
    max_order: Option<usize>,
    fixed_step: Option<f64>,
    stop_time: Option<f64>,
    mxstep: usize,
    stats: Stats,
    eng: Option<Engine>,
}

impl<'a> OdeSession<'a> {
    /// Configures a session; [`init`](OdeSession::init) supplies the initial
    /// condition and makes it usable.
    pub fn new(
        method: Method,
        iteration: Iteration<'a>,
        tolerances: Tolerances,
        rhs: impl FnMut(f64, &Vector, &mut Vector) -> crate::error::CallbackResult + 'a,
    ) -> OdeSession<'a> {
        OdeSession {
            method,
            rhs: Box::new(rhs),
            tol: tolerances,
            iter_spec: Some(iteration),
            iter: None,
            root_fn: None,
            root_dirs: Vec::new(),
            max_order: None,
            fixed_step: None,
            stop_time: None,
            mxstep: DEFAULT_MXSTEP,
            stats: Stats::default(),
            eng: None,
        }
    }

    /// Caps the method order; call before [`init`](OdeSession::init).
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

    /// Disables the step-size controller and integrates with |h| fixed.
    pub fn set_fixed_step(&mut self, h: f64) -> Result<()> {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::Domain("fixed step must be finite and positive".into()));
        }
        self.fixed_step = Some(h);
        Ok(())
    }

    /// Caps the number of internal steps per solve call (default 5000).
    pub fn set_max_steps(&mut self, mxstep: usize) {
        self.mxstep = mxstep.max(1);
    }

    /// Loads the initial condition and the optional root functions, moving
    /// the session to its integrable state.
    pub fn init(&mut self, t0: f64, y0: Vector, roots: Option<RootSpec<'a>>) -> Result<()> {
        if self.eng.is_some() {
            return Err(Error::Lifecycle("init on an already-initialized session".into()));
        }
        if !t0.is_finite() {
            return Err(Error::Domain("t0 must be finite".into()));
        }
        if y0.is_empty() {
            return Err(Error::Domain("state vector must be non-empty".into()));
        }
        if !y0.max_norm()?.is_finite() {
            return Err(Error::Domain("initial state contains non-finite components".into()));
        }
        self.tol.validate(&y0)?;
        let n = y0.len();

        let spec = self.iter_spec.take().expect("iteration spec consumed once");
        let iter = match spec {
            Iteration::Functional => IterState::Functional,
            Iteration::Diag => {
                let mut z = y0.clone();
                z.const_fill(0.0);
                IterState::Diag(DiagState {
                    ctl: NlsCtl::new(),
                    minv: z.clone(),
                    bit: z.clone(),
                    bitcomp: z,
                    gammasv: 1.0,
                    nfe: 0,
                })
            }
            Iteration::Newton(ns) => {
                if let Some(direct) = ns.linear.direct() {
                    if direct.needs_serial_repr() && y0.as_slice().is_none() {
                        self.iter_spec = Some(Iteration::Newton(ns));
                        return Err(Error::Incompatible {
                            property: "representation",
                            detail: "built-in direct solvers require serial-representation state vectors"
                                .into(),
                        });
                    }
                    let mmat = match (&ns.matrix, direct.family()) {
                        (Some(m), _) => {
                            if m.rows() != n || m.cols() != n {
                                return Err(Error::Shape(format!(
                                    "Newton matrix is {}x{}, state has {} components",
                                    m.rows(),
                                    m.cols(),
                                    n
                                )));
                            }
                            m.clone()
                        }
                        (None, DirectFamily::Band) => {
                            return Err(Error::MatrixIncompatible(
                                "band solver needs a banded matrix template".into(),
                            ))
                        }
                        (None, _) => Matrix::dense(n, n),
                    };
                    if ns.jac.is_none() {
                        if y0.as_slice().is_none() {
                            return Err(Error::Incompatible {
                                property: "representation",
                                detail: "difference-quotient Jacobian requires serial vectors".into(),
                            });
                        }
                        if !matches!(mmat.family(), MatrixFamily::Dense | MatrixFamily::Banded) {
                            return Err(Error::MatrixIncompatible(
                                "difference-quotient Jacobian requires a dense or banded matrix".into(),
                            ));
                        }
                    }
                    let solver = direct.clone();
                    IterState::Newton(NewtonState {
                        ctl: NlsCtl::new(),
                        lin: LinState::Direct { solver, jac: ns.jac, jmat: mmat.clone(), mmat },
                    })
                } else {
                    let solver = ns.linear.iterative().expect("token is direct or iterative").clone();
                    if y0.as_slice().is_none() {
                        return Err(Error::Incompatible {
                            property: "representation",
                            detail: "the iterative solver requires serial-representation vectors".into(),
                        });
                    }
                    if ns.prec_solve.is_some() && ns.banded_prec.is_some() {
                        return Err(Error::Domain(
                            "choose either a user preconditioner or the banded preconditioner".into(),
                        ));
                    }
                    let banded = ns.banded_prec.map(|spec| BandPrecState {
                        spec,
                        factors: BandedContent::zeros(0, 0, 0, 0),
                        piv: Vec::new(),
                        ready: false,
                    });
                    IterState::Newton(NewtonState {
                        ctl: NlsCtl::new(),
                        lin: LinState::Iterative {
                            solver,
                            prec_side: ns.prec_side,
                            prec_solve: ns.prec_solve,
                            prec_setup: ns.prec_setup,
                            banded,
                        },
                    })
                }
            }
        };

        let mut core = StepCore::new(self.method, &y0);
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
            tempv: zero.clone(),
            ftemp: zero.clone(),
            ybuf: zero.clone(),
            wbuf: zero.clone(),
            itemp1: zero.clone(),
            itemp2: zero.clone(),
            root_buf: zero,
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
            g(t0, &eng.core.zn[0], &mut g0)?;
            if g0.iter().any(|v| !v.is_finite()) {
                return Err(Error::Callback("root function returned non-finite value at t0".into()));
            }
            self.root_fn = Some(g);
            self.root_dirs = vec![RootDirection::Both; rs.nroots];
            eng.root_g = g0;
        }

        self.iter = Some(iter);
        self.eng = Some(eng);
        Ok(())
    }

    /// Restarts the integration from (t0, y0), keeping solver attachments,
    /// tolerances, root configuration, and cumulative statistics.
    pub fn reinit(&mut self, t0: f64, y0: &Vector) -> Result<()> {
        let eng = self
            .eng
            .as_mut()
            .ok_or_else(|| Error::Lifecycle("reinit before init".into()))?;
        if !y0.compatible(&eng.core.zn[0]) {
            return Err(Error::Incompatible {
                property: "representation",
                detail: "reinit state incompatible with the session's vectors".into(),
            });
        }
        if !t0.is_finite() || !y0.max_norm()?.is_finite() {
            return Err(Error::Domain("reinit state must be finite".into()));
        }
        eng.core.reset(t0);
        Vector::scale(1.0, y0, &mut eng.core.zn[0])?;
        eng.first = true;
        eng.prev_fail = false;
        eng.dir = 0.0;
        eng.root_scan_t = t0;
        eng.tretlast = t0;
        if let Some(g) = self.root_fn.as_mut() {
            g(t0, &eng.core.zn[0], &mut eng.root_g)?;
        }
        if let Some(ctl) = self.iter.as_mut().and_then(|i| i.ctl_mut()) {
            ctl.force_setup = true;
            ctl.crate_rate = 1.0;
            ctl.jcur = false;
        }
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

    /// Sets per-component crossing-direction filters.
    pub fn set_root_directions(&mut self, dirs: &[RootDirection]) -> Result<()> {
        if self.eng.is_none() {
            return Err(Error::Lifecycle("set_root_directions before init".into()));
        }
        if dirs.len() != self.root_dirs.len() {
            return Err(Error::Shape(format!(
                "{} direction filters for {} root components",
                dirs.len(),
                self.root_dirs.len()
            )));
        }
        self.root_dirs.copy_from_slice(dirs);
        Ok(())
    }

    pub fn stats(&self) -> Stats {
        self.stats
    }

    /// Internal integrator time (end of the last step taken).
    pub fn current_time(&self) -> Result<f64> {
        Ok(self.engine()?.core.tn)
    }

    pub fn current_order(&self) -> Result<usize> {
        Ok(self.engine()?.core.q)
    }

    pub fn last_step_size(&self) -> Result<f64> {
        Ok(self.engine()?.core.h)
    }

    /// Approximate real/integer workspace sizes.
    pub fn work_space(&self) -> Result<(usize, usize)> {
        let eng = self.engine()?;
        let n = eng.core.zn[0].len();
        let mut lrw = (eng.core.zn.len() + 8) * n;
        let mut liw = 40;
        if let Some(IterState::Newton(ns)) = &self.iter {
            if let LinState::Direct { solver, .. } = &ns.lin {
                let (r, i) = solver.work_space();
                lrw += r;
                liw += i;
            }
        }
        Ok((lrw, liw))
    }

    /// Right-hand-side evaluations made by the diagonal stage; wrong-solver
    /// error unless the session uses [`Iteration::Diag`].
    pub fn diag_num_rhs_evals(&self) -> Result<usize> {
        match &self.iter {
            Some(IterState::Diag(ds)) => Ok(ds.nfe),
            _ => Err(Error::WrongSolver(
                "diagonal-stage statistics on a session without the diagonal solver".into(),
            )),
        }
    }

    /// Workspace of the diagonal stage; wrong-solver error unless the
    /// session uses [`Iteration::Diag`].
    pub fn diag_work_space(&self) -> Result<(usize, usize)> {
        match &self.iter {
            Some(IterState::Diag(ds)) => Ok((3 * ds.minv.len(), 3)),
            _ => Err(Error::WrongSolver(
                "diagonal-stage statistics on a session without the diagonal solver".into(),
            )),
        }
    }

    fn engine(&self) -> Result<&Engine> {
        self.eng
            .as_ref()
            .ok_or_else(|| Error::Lifecycle("session is not initialized".into()))
    }

    /// Integrates toward `tout` and returns at `tout`, at a root, or at the
    /// stop time, whichever comes first; `yout` receives the solution at the
    /// returned time, always ≤ `tout` in the integration direction.
    pub fn solve_normal(&mut self, tout: f64, yout: &mut Vector) -> Result<SolveResult> {
        if self.eng.is_none() {
            return Err(Error::Lifecycle("solve_normal before init".into()));
        }
        if !tout.is_finite() {
            return Err(Error::Domain("tout must be finite".into()));
        }
        if !yout.compatible(&self.eng.as_ref().unwrap().core.zn[0]) {
            return Err(Error::Incompatible {
                property: "representation",
                detail: "output vector incompatible with the session's vectors".into(),
            });
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
            if let Some(ts) = self.stop_time {
                if (ts - eng.tretlast) * dir < 0.0 {
                    return Err(Error::Domain(format!(
                        "stop time {ts} is behind the last returned time {}",
                        eng.tretlast
                    )));
                }
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

            // the requested time (or stop time) is inside integrated range
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
                    let eng = self.eng.as_mut().unwrap();
                    eng.core.interpolate(scan.t_star, yout)?;
                    eng.tretlast = scan.t_star;
                    return Ok(SolveResult { t_ret: scan.t_star, flag: SolveFlag::RootsFound(scan.flags) });
                }
                let eng = self.eng.as_mut().unwrap();
                eng.core.interpolate(limit, yout)?;
                eng.tretlast = limit;
                if stop_hit {
                    eng.core.tn = limit;
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

            // refresh error weights from the current solution
            {
                let eng = self.eng.as_mut().unwrap();
                if eng.core.nst > 0 {
                    let Engine { core, ewt, tempv, wbuf, .. } = eng;
                    update_ewt(&self.tol, core, tempv, wbuf, ewt)?;
                }
            }

            // do not step past the stop time
            if let Some(ts) = self.stop_time {
                let core = &mut self.eng.as_mut().unwrap().core;
                if (core.tn + core.hprime - ts) * dir > 0.0 {
                    core.hprime = (ts - core.tn) * (1.0 - 4.0 * f64::EPSILON);
                    core.eta = core.hprime / core.h;
                }
            }

            self.take_step()?;
            nstloc += 1;

            // root scan over the newly integrated span
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
                let eng = self.eng.as_mut().unwrap();
                eng.core.interpolate(scan.t_star, yout)?;
                eng.tretlast = scan.t_star;
                return Ok(SolveResult { t_ret: scan.t_star, flag: SolveFlag::RootsFound(scan.flags) });
            }
        }
    }

    /// Loads f(t0, y0), chooses the first step size, and scales the history.
    fn start_integration(&mut self, tout: f64) -> Result<()> {
        {
            let OdeSession { rhs, stats, eng, .. } = self;
            let eng = eng.as_mut().unwrap();
            let Engine { core, ewt, tempv, wbuf, .. } = eng;
            match rhs(core.tn, &core.zn[0], tempv) {
                Ok(()) => {}
                Err(CallbackError::Recoverable) => {
                    return Err(Error::InitFailure(
                        "right-hand side unrecoverable at the initial point".into(),
                    ))
                }
                Err(CallbackError::Fatal(m)) => return Err(Error::Callback(m)),
            }
            stats.num_init_rhs_evals += 1;
            {
                let (zn1, t) = (&mut core.zn[1], &*tempv);
                Vector::scale(1.0, t, zn1)?;
            }
            update_ewt(&self.tol, core, tempv, wbuf, ewt)?;
        }

        let t0 = self.eng.as_ref().unwrap().core.tn;
        if tout == t0 {
            return Err(Error::Domain("tout must differ from the initial time".into()));
        }
        let sign = if tout > t0 { 1.0 } else { -1.0 };
        let mut h0 = match self.fixed_step {
            Some(h) => sign * h,
            None => self.initial_step_size(tout, sign)?,
        };
        if let Some(ts) = self.stop_time {
            if (ts - t0) * sign <= 0.0 {
                return Err(Error::Domain(format!("stop time {ts} is behind the initial time {t0}")));
            }
            if (t0 + h0 - ts) * sign > 0.0 {
                h0 = (ts - t0) * (1.0 - 4.0 * f64::EPSILON);
            }
        }

        let eng = self.eng.as_mut().unwrap();
        eng.core.h = h0;
        eng.core.hscale = h0;
        eng.core.hprime = h0;
        eng.core.zn[1].scale_in_place(h0);
        eng.dir = sign;
        eng.first = false;
        Ok(())
    }

    /// First-step heuristic: geometric mean of lower/upper bounds refined by
    /// up to four estimates of ||y''||.
    fn initial_step_size(&mut self, tout: f64, sign: f64) -> Result<f64> {
        let OdeSession { rhs, stats, eng, tol, .. } = self;
        let eng = eng.as_mut().unwrap();
        let Engine { core, ewt, tempv, ybuf, wbuf, itemp1, .. } = eng;
        let t0 = core.tn;
        let tdist = (tout - t0).abs();
        let tround = f64::EPSILON * t0.abs().max(tout.abs());
        if tdist < 2.0 * tround {
            return Err(Error::Domain("tout is too close to t0 to integrate".into()));
        }
        let hlb = HLB_FACTOR * tround;

        // upper bound: componentwise |f| / (0.1 |y| + atol)
        Vector::abs(&core.zn[0], tempv)?;
        tempv.scale_in_place(HUB_FACTOR);
        match tol {
            Tolerances::SS { atol, .. } => Vector::add_constant(tempv, *atol, wbuf)?,
            Tolerances::SV { atol, .. } => Vector::linear_sum(1.0, tempv, 1.0, atol, wbuf)?,
        }
        Vector::abs(&core.zn[1], tempv)?;
        Vector::quotient(tempv, wbuf, itemp1)?;
        let hub_inv = itemp1.max_norm()?;
        let mut hub = HUB_FACTOR * tdist;
        if hub * hub_inv > 1.0 {
            hub = 1.0 / hub_inv;
        }

        let mut hg = (hlb * hub).sqrt();
        if hub < hlb {
            return Ok(sign * hg);
        }

        let mut hnew = hg;
        for count in 1..=MAX_H0_ITERS {
            let hgs = hg * sign;
            // ydd = (f(t0+hgs, y0 + hgs f0) - f0)/hgs, f0 in zn[1] (unscaled)
            Vector::linear_sum(hgs, &core.zn[1], 1.0, &core.zn[0], ybuf)?;
            match rhs(t0 + hgs, ybuf, tempv) {
                Ok(()) => {}
                Err(CallbackError::Recoverable) => {
                    return Err(Error::InitFailure(
                        "right-hand side failed while choosing the first step".into(),
                    ))
                }
                Err(CallbackError::Fatal(m)) => return Err(Error::Callback(m)),
            }
            stats.num_init_rhs_evals += 1;
            tempv.linear_sum_in_place(1.0, -1.0, &core.zn[1])?;
            tempv.scale_in_place(1.0 / hgs);
            let yddnrm = Vector::wrms_norm(tempv, ewt)?;

            hnew = if yddnrm * hub * hub > 2.0 { (2.0 / yddnrm).sqrt() } else { (hg * hub).sqrt() };
            let hrat = hnew / hg;
            if hrat > 0.5 && hrat < 2.0 {
                break;
            }
            if count >= 2 && hrat > 2.0 {
                hnew = hg;
                break;
            }
            hg = hnew;
        }

        let h0 = (H_BIAS * hnew).clamp(hlb, hub);
        Ok(sign * h0)
    }

    /// One internal step with the full retry ladder: nonlinear convergence
    /// failures shrink h; error-test failures shrink h, then drop the order,
    /// then rebuild the slope at order 1.
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
            let stage = match self.iter.as_ref().unwrap() {
                IterState::Functional => self.nls_functional()?,
                _ => self.nls_matrix()?,
            };
            match stage {
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

            // local error test (skipped when the step size is pinned)
            let d = {
                let core = &self.eng.as_ref().unwrap().core;
                core.acnrm * core.tq[2]
            };
            if self.fixed_step.is_some() || d <= 1.0 {
                dsm = d;
                break;
            }
            self.stats.num_error_test_failures += 1;
            nef += 1;
            let OdeSession { rhs, stats, eng, .. } = self;
            let eng = eng.as_mut().unwrap();
            eng.prev_fail = true;
            let Engine { core, tempv, .. } = eng;
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
            // order 1: shrink hard and rebuild the slope column
            core.eta = ETAMIN.max(core.hmin / core.h.abs());
            core.rescale();
            match rhs(core.tn, &core.zn[0], tempv) {
                Ok(()) => {}
                Err(CallbackError::Recoverable) => {
                    return Err(Error::ErrFailure(
                        "right-hand side failed while recovering from error-test failures".into(),
                    ))
                }
                Err(CallbackError::Fatal(m)) => return Err(Error::Callback(m)),
            }
            stats.num_rhs_evals += 1;
            let h = core.h;
            let (zn1, t) = (&mut core.zn[1], &*tempv);
            Vector::scale(h, t, zn1)?;
        }

        let eng = self.eng.as_mut().unwrap();
        eng.prev_fail = false;
        eng.core.complete_step()?;
        if self.fixed_step.is_some() {
            let core = &mut eng.core;
            core.qwait = core.qwait.max(2);
            core.eta = 1.0;
            core.hprime = core.h;
            core.qprime = core.q;
        } else {
            let Engine { core, ewt, .. } = eng;
            core.prepare_next_step(dsm, ewt)?;
        }
        eng.core.etamax = ETAMX;
        self.stats.num_steps += 1;
        Ok(())
    }

    /// Fixed-point corrector stage.
    fn nls_functional(&mut self) -> Result<Stage> {
        let OdeSession { rhs, stats, eng, .. } = self;
        let eng = eng.as_mut().unwrap();
        let Engine { core, ewt, tempv, ybuf, .. } = eng;

        match rhs(core.tn, &core.zn[0], tempv) {
            Ok(()) => {}
            Err(CallbackError::Recoverable) => return Ok(Stage::Recoverable),
            Err(CallbackError::Fatal(m)) => return Err(Error::Callback(m)),
        }
        stats.num_rhs_evals += 1;
        core.acor.const_fill(0.0);

        let mut crate_rate = 1.0f64;
        let mut m = 0usize;
        let mut delp = 0.0f64;
        loop {
            // correction estimate: rl1 (h f - zn[1])
            tempv.linear_sum_in_place(core.h, -1.0, &core.zn[1])?;
            tempv.scale_in_place(core.rl1);
            Vector::linear_sum(1.0, &core.zn[0], 1.0, tempv, ybuf)?;
            // del = || correction - acor ||, reusing acor as scratch
            core.acor.linear_sum_in_place(-1.0, 1.0, tempv)?;
            let del = Vector::wrms_norm(&core.acor, ewt)?;
            Vector::scale(1.0, tempv, &mut core.acor)?;
            stats.num_nonlin_iters += 1;

            if m > 0 {
                crate_rate = (CRDOWN * crate_rate).max(del / delp);
            }
            let dcon = del * crate_rate.min(1.0) / core.tq[4];
            if dcon <= 1.0 {
                let acnrm = if m == 0 { del } else { Vector::wrms_norm(&core.acor, ewt)? };
                return Ok(Stage::Converged(acnrm));
            }
            m += 1;
            if m == NLS_MAXCOR || (m >= 2 && del > RDIV * delp) {
                return Ok(Stage::Recoverable);
            }
            delp = del;
            match rhs(core.tn, ybuf, tempv) {
                Ok(()) => {}
                Err(CallbackError::Recoverable) => return Ok(Stage::Recoverable),
                Err(CallbackError::Fatal(m)) => return Err(Error::Callback(m)),
            }
            stats.num_rhs_evals += 1;
        }
    }

    /// Modified-Newton / diagonal corrector stage sharing one skeleton: the
    /// setup and solve legs dispatch on the configured solver.
    fn nls_matrix(&mut self) -> Result<Stage> {
        let OdeSession { rhs, stats, iter, eng, method, .. } = self;
        let eng = eng.as_mut().unwrap();
        let Engine { core, ewt, tempv, ftemp, ybuf, wbuf, itemp1, itemp2, prev_fail, .. } = eng;
        let iter = iter.as_mut().unwrap();
        let bdf = *method == Method::Bdf;

        let mut call_setup = {
            let ctl = iter.ctl_mut().expect("matrix stage has controller state");
            *prev_fail
                || ctl.force_setup
                || core.nst == 0
                || core.nst >= ctl.nstlp + MSBP
                || (core.gamrat - 1.0).abs() > DGMAX
        };

        'outer: loop {
            // f at the predicted solution
            match rhs(core.tn, &core.zn[0], ftemp) {
                Ok(()) => {}
                Err(CallbackError::Recoverable) => return Ok(Stage::Recoverable),
                Err(CallbackError::Fatal(m)) => return Err(Error::Callback(m)),
            }
            stats.num_rhs_evals += 1;

            if call_setup {
                let setup_ok = match iter {
                    IterState::Newton(ns) => match &mut ns.lin {
                        LinState::Direct { solver, jac, jmat, mmat } => {
                            let filled = if let Some(jf) = jac {
                                jmat.zero();
                                match jf(core.tn, &core.zn[0], ftemp, jmat) {
                                    Ok(()) => true,
                                    Err(CallbackError::Recoverable) => false,
                                    Err(CallbackError::Fatal(m)) => return Err(Error::Callback(m)),
                                }
                            } else {
                                dq_jacobian(
                                    rhs,
                                    core.tn,
                                    core.h,
                                    &mut core.zn[0],
                                    ftemp,
                                    ewt,
                                    jmat,
                                    wbuf,
                                    &mut stats.num_lin_rhs_evals,
                                )?
                            };
                            if filled {
                                mmat.copy_from(jmat)?;
                                Matrix::scale_add_identity(-core.gamma, mmat)?;
                                match solver.setup(mmat) {
                                    Ok(()) => true,
                                    Err(Error::SingularMatrix { .. }) => false,
                                    Err(e) => return Err(e),
                                }
                            } else {
                                false
                            }
                        }
                        LinState::Iterative { prec_setup, banded, .. } => {
                            if let Some(ps) = prec_setup {
                                ps(core.tn, &core.zn[0], core.gamma)?;
                            }
                            if let Some(bp) = banded {
                                build_band_prec(
                                    rhs,
                                    core.tn,
                                    core.h,
                                    core.gamma,
                                    &mut core.zn[0],
                                    ftemp,
                                    ewt,
                                    wbuf,
                                    bp,
                                    &mut stats.num_lin_rhs_evals,
                                )?
                            } else {
                                true
                            }
                        }
                    },
                    IterState::Diag(ds) => diag_setup(rhs, core, ewt, tempv, ftemp, ybuf, wbuf, ds)?,
                    IterState::Functional => unreachable!("functional stage handled separately"),
                };
                stats.num_lin_setups += 1;
                let ctl = iter.ctl_mut().unwrap();
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

            core.acor.const_fill(0.0);
            Vector::scale(1.0, &core.zn[0], ybuf)?;

            let mut m = 0usize;
            let mut delp = 0.0f64;
            loop {
                // residual b = gamma f(y) - (rl1 zn[1] + acor)
                Vector::linear_sum(core.rl1, &core.zn[1], 1.0, &core.acor, tempv)?;
                tempv.linear_sum_in_place(-1.0, core.gamma, ftemp)?;

                let solved = match iter {
                    IterState::Newton(ns) => match &mut ns.lin {
                        LinState::Direct { solver, .. } => {
                            solver.solve(wbuf, tempv)?;
                            if bdf && core.gamrat != 1.0 {
                                wbuf.scale_in_place(2.0 / (1.0 + core.gamrat));
                            }
                            Vector::scale(1.0, wbuf, tempv)?;
                            true
                        }
                        LinState::Iterative { solver, prec_side, prec_solve, banded, .. } => {
                            let n = tempv.len();
                            let bs = tempv.as_slice().expect("iterative stage is serial").to_vec();
                            let wmax = ewt.max_norm()?;
                            let delta = EPLIFAC * core.tq[4] * (n as f64).sqrt() / wmax;
                            let (t, gamma) = (core.tn, core.gamma);
                            let mut nfe_ls = 0usize;
                            let mut xs = vec![0.0; n];
                            let res = {
                                let ew = ewt.as_slice().unwrap();
                                let yb = &*ybuf;
                                let fy = &*ftemp;
                                let mut atimes = |v: &[f64], out: &mut [f64]| -> Result<()> {
                                    let wrmsv = (kernels::weighted_sum_sq(v, ew) / n as f64).sqrt();
                                    if wrmsv == 0.0 {
                                        // v = 0, so (I - gamma J) v = 0
                                        out.copy_from_slice(v);
                                        return Ok(());
                                    }
                                    let sig = 1.0 / wrmsv;
                                    {
                                        let ys = yb.as_slice().unwrap();
                                        let yt = itemp1.as_mut_slice().unwrap();
                                        kernels::linear_sum(sig, v, 1.0, ys, yt);
                                    }
                                    match rhs(t, itemp1, itemp2) {
                                        Ok(()) => {}
                                        Err(CallbackError::Recoverable) => {
                                            return Err(Error::ConvergenceFailure { residual: f64::NAN })
                                        }
                                        Err(CallbackError::Fatal(m)) => return Err(Error::Callback(m)),
                                    }
                                    nfe_ls += 1;
                                    let fs = itemp2.as_slice().unwrap();
                                    let fys = fy.as_slice().unwrap();
                                    for i in 0..n {
                                        out[i] = v[i] - gamma * (fs[i] - fys[i]) / sig;
                                    }
                                    Ok(())
                                };
                                let mut prec = match (prec_solve.as_mut(), banded.as_ref()) {
                                    (Some(ps), _) => Preconditioner::new(*prec_side, |r, z, side| {
                                        ps(t, yb, gamma, r, side, z)
                                    }),
                                    (None, Some(bp)) if bp.ready => {
                                        Preconditioner::new(PrecSide::Left, |r, z, _| {
                                            z.copy_from_slice(r);
                                            band_lu_solve(&bp.factors, &bp.piv, z);
                                            Ok(())
                                        })
                                    }
                                    _ => Preconditioner::none(),
                                };
                                solver.solve(&mut atimes, &mut prec, &mut xs, &bs, delta)
                            };
                            stats.num_lin_rhs_evals += nfe_ls;
                            match res {
                                Ok(_) => {
                                    if bdf && core.gamrat != 1.0 {
                                        let s = 2.0 / (1.0 + core.gamrat);
                                        for x in &mut xs {
                                            *x *= s;
                                        }
                                    }
                                    tempv.as_mut_slice().unwrap().copy_from_slice(&xs);
                                    true
                                }
                                Err(Error::ConvergenceFailure { .. }) => false,
                                Err(e) => return Err(e),
                            }
                        }
                    },
                    IterState::Diag(ds) => diag_solve(core, tempv, ybuf, wbuf, ds)?,
                    IterState::Functional => unreachable!(),
                };
                if !solved {
                    let jcur = iter.ctl_mut().unwrap().jcur;
                    if !jcur {
                        call_setup = true;
                        continue 'outer;
                    }
                    return Ok(Stage::Recoverable);
                }
                stats.num_nonlin_iters += 1;

                let del = Vector::wrms_norm(tempv, ewt)?;
                core.acor.linear_sum_in_place(1.0, 1.0, tempv)?;
                Vector::linear_sum(1.0, &core.zn[0], 1.0, &core.acor, ybuf)?;

                let ctl = iter.ctl_mut().unwrap();
                if m > 0 {
                    ctl.crate_rate = (CRDOWN * ctl.crate_rate).max(del / delp);
                }
                let dcon = del * ctl.crate_rate.min(1.0) / core.tq[4];
                if dcon <= 1.0 {
                    let acnrm = if m == 0 { del } else { Vector::wrms_norm(&core.acor, ewt)? };
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
                match rhs(core.tn, ybuf, ftemp) {
                    Ok(()) => {}
                    Err(CallbackError::Recoverable) => {
                        let jcur = iter.ctl_mut().unwrap().jcur;
                        if !jcur {
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

    /// Scans for roots on (root_scan_t, limit] using dense output; advances
    /// the scan frontier either to the root or to `limit`.
    fn scan_roots(&mut self, limit: f64) -> Result<Option<RootScan>> {
        if self.root_dirs.is_empty() {
            return Ok(None);
        }
        let eng = self.eng.as_mut().unwrap();
        let dir = eng.dir;
        let Engine { core, root_buf, root_g, root_scan_t, .. } = eng;
        if (limit - *root_scan_t) * dir <= 0.0 {
            return Ok(None);
        }
        let rf = self.root_fn.as_mut().expect("directions imply a root function");

        let res = {
            let core = &*core;
            let mut eval = |t: f64, g: &mut [f64]| -> Result<()> {
                core.interpolate(t, root_buf)?;
                rf(t, root_buf, g)
            };
            scan_step(&mut eval, *root_scan_t, limit, root_g, &self.root_dirs)?
        };
        let frontier = match &res {
            Some(scan) => scan.t_star,
            None => limit,
        };
        core.interpolate(frontier, root_buf)?;
        rf(frontier, root_buf, root_g)?;
        *root_scan_t = frontier;
        Ok(res)
    }
}

/// Error weights 1/(rtol |y| + atol) from the current solution column.
fn update_ewt(
    tol: &Tolerances,
    core: &StepCore,
    tempv: &mut Vector,
    wbuf: &mut Vector,
    ewt: &mut Vector,
) -> Result<()> {
    Vector::abs(&core.zn[0], tempv)?;
    match tol {
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
    Ok(())
}

/// Difference-quotient Jacobian fill for dense or banded templates; returns
/// false when the right-hand side fails recoverably.
#[allow(clippy::too_many_arguments)]
fn dq_jacobian(
    rhs: &mut RhsFn,
    t: f64,
    h: f64,
    y: &mut Vector,
    fy: &Vector,
    ewt: &Vector,
    jmat: &mut Matrix,
    work: &mut Vector,
    nfe: &mut usize,
) -> Result<bool> {
    let n = y.len();
    let srur = f64::EPSILON.sqrt();
    let fnorm = Vector::wrms_norm(fy, ewt)?;
    let min_inc = if fnorm != 0.0 { 1000.0 * h.abs() * f64::EPSILON * n as f64 * fnorm } else { 1.0 };
    let ew = ewt.as_slice().expect("difference quotients run on serial vectors").to_vec();
    let fys = fy.as_slice().unwrap().to_vec();

    match jmat.family() {
        MatrixFamily::Dense => {
            for j in 0..n {
                let (yj, inc) = {
                    let ys = y.as_slice().unwrap();
                    let yj = ys[j];
                    (yj, (srur * yj.abs()).max(min_inc / ew[j]))
                };
                y.as_mut_slice().unwrap()[j] = yj + inc;
                let ok = match rhs(t, y, work) {
                    Ok(()) => true,
                    Err(CallbackError::Recoverable) => false,
                    Err(CallbackError::Fatal(m)) => return Err(Error::Callback(m)),
                };
                *nfe += 1;
                y.as_mut_slice().unwrap()[j] = yj;
                if !ok {
                    return Ok(false);
                }
                let ws = work.as_slice().unwrap();
                let d = jmat.as_dense_mut().unwrap();
                let inc_inv = 1.0 / inc;
                for i in 0..n {
                    d.set(i, j, (ws[i] - fys[i]) * inc_inv);
                }
            }
        }
        MatrixFamily::Banded => {
            let (mu, ml) = {
                let b = jmat.as_banded().unwrap();
                (b.mu, b.ml)
            };
            let width = ml + mu + 1;
            let ngroups = width.min(n);
            for group in 0..ngroups {
                let mut incs = vec![0.0; n];
                {
                    let ys = y.as_mut_slice().unwrap();
                    for j in (group..n).step_by(width) {
                        let inc = (srur * ys[j].abs()).max(min_inc / ew[j]);
                        incs[j] = inc;
                        ys[j] += inc;
                    }
                }
                let ok = match rhs(t, y, work) {
                    Ok(()) => true,
                    Err(CallbackError::Recoverable) => false,
                    Err(CallbackError::Fatal(m)) => return Err(Error::Callback(m)),
                };
                *nfe += 1;
                {
                    let ys = y.as_mut_slice().unwrap();
                    for j in (group..n).step_by(width) {
                        ys[j] -= incs[j];
                    }
                }
                if !ok {
                    return Ok(false);
                }
                let ws = work.as_slice().unwrap();
                let b = jmat.as_banded_mut().unwrap();
                for j in (group..n).step_by(width) {
                    let inc_inv = 1.0 / incs[j];
                    let lo = j.saturating_sub(mu);
                    let hi = (j + ml).min(n - 1);
                    for i in lo..=hi {
                        b.set(i, j, (ws[i] - fys[i]) * inc_inv)?;
                    }
                }
            }
        }
        _ => {
            return Err(Error::MatrixIncompatible(
                "difference-quotient Jacobian requires a dense or banded matrix".into(),
            ))
        }
    }
    Ok(true)
}

/// Builds and factors the banded preconditioner P = I − γJ_band; returns
/// false on a recoverable failure (singular P or recoverable rhs).
#[allow(clippy::too_many_arguments)]
fn build_band_prec(
    rhs: &mut RhsFn,
    t: f64,
    h: f64,
    gamma: f64,
    y: &mut Vector,
    fy: &Vector,
    ewt: &Vector,
    work: &mut Vector,
    bp: &mut BandPrecState,
    nfe: &mut usize,
) -> Result<bool> {
    let n = y.len();
    let (mu, ml) = (bp.spec.mu.min(n - 1), bp.spec.ml.min(n - 1));
    let mut jb = Matrix::banded(n, mu, ml);
    if !dq_jacobian(rhs, t, h, y, fy, ewt, &mut jb, work, nfe)? {
        bp.ready = false;
        return Ok(false);
    }
    let smu = (mu + ml).min(n - 1).max(mu);
    bp.factors = BandedContent::zeros(n, mu, ml, smu);
    let jbc = jb.as_banded().unwrap();
    for j in 0..n {
        let lo = j.saturating_sub(mu);
        let hi = (j + ml).min(n - 1);
        for i in lo..=hi {
            let v = -gamma * jbc.get(i, j) + if i == j { 1.0 } else { 0.0 };
            bp.factors.set(i, j, v)?;
        }
    }
    bp.piv = vec![0; n];
    match band_lu_factor(&mut bp.factors, &mut bp.piv) {
        Ok(()) => {
            bp.ready = true;
            Ok(true)
        }
        Err(Error::SingularMatrix { .. }) => {
            bp.ready = false;
            Ok(false)
        }
        Err(e) => Err(e),
    }
}

/// Diagonal-approximation setup: a one-sided difference along the functional
/// correction direction estimates diag(J); stores (I − γJ)⁻¹ elementwise.
fn diag_setup(
    rhs: &mut RhsFn,
    core: &mut StepCore,
    ewt: &Vector,
    tempv: &mut Vector,
    fpred: &Vector,
    ybuf: &mut Vector,
    wbuf: &mut Vector,
    ds: &mut DiagState,
) -> Result<bool> {
    // tempv = h f_pred - zn[1]: the functional-iteration correction
    Vector::linear_sum(core.h, fpred, -1.0, &core.zn[1], tempv)?;
    // perturbed state y = y_pred + FRACT rl1 tempv
    Vector::linear_sum(FRACT * core.rl1, tempv, 1.0, &core.zn[0], ybuf)?;
    match rhs(core.tn, ybuf, &mut ds.minv) {
        Ok(()) => {}
        Err(CallbackError::Recoverable) => return Ok(false),
        Err(CallbackError::Fatal(m)) => return Err(Error::Callback(m)),
    }
    ds.nfe += 1;
    // minv = FRACT tempv - h (f(y_pert) - f_pred)
    ds.minv.linear_sum_in_place(1.0, -1.0, fpred)?;
    ds.minv.linear_sum_in_place(-core.h, FRACT, tempv)?;
    // guard components whose perturbation is at roundoff level
    Vector::product(tempv, ewt, ybuf)?;
    Vector::compare_threshold(f64::EPSILON, ybuf, &mut ds.bit)?;
    Vector::add_constant(&ds.bit, -1.0, &mut ds.bitcomp)?;
    Vector::product(tempv, &ds.bit, ybuf)?;
    ybuf.linear_sum_in_place(FRACT, -1.0, &ds.bitcomp)?;
    Vector::quotient(&ds.minv, ybuf, wbuf)?;
    Vector::product(wbuf, &ds.bit, &mut ds.minv)?;
    ds.minv.linear_sum_in_place(1.0, -1.0, &ds.bitcomp)?;
    // store the inverse, rejecting zero diagonal entries
    if !Vector::invert_with_test(&ds.minv.clone(), &mut ds.minv)? {
        return Ok(false);
    }
    ds.gammasv = core.gamma;
    Ok(true)
}

/// Diagonal-approximation solve, rebasing the stored diagonal if gamma has
/// drifted since setup.
fn diag_solve(
    core: &StepCore,
    b: &mut Vector,
    scratch1: &mut Vector,
    scratch2: &mut Vector,
    ds: &mut DiagState,
) -> Result<bool> {
    if ds.gammasv != core.gamma {
        // rebuild: minv holds (1 - gammasv J)^-1; rebase to the new gamma
        let r = core.gamma / ds.gammasv;
        Vector::invert(&ds.minv, scratch2)?;
        Vector::add_constant(scratch2, -1.0, scratch1)?;
        scratch1.scale_in_place(r);
        Vector::add_constant(scratch1, 1.0, scratch2)?;
        if !Vector::invert_with_test(scratch2, &mut ds.minv)? {
            return Ok(false);
        }
        ds.gammasv = core.gamma;
    }
    Vector::product(b, &ds.minv, scratch2)?;
    Vector::scale(1.0, scratch2, b)?;
    Ok(true)
}

pub use crate::multistep::Method as LmmMethod;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linsolver::{DirectSolver, IterativeSolver};
    use crate::Matrix;

    fn decay_session<'a>(iter: Iteration<'a>, rtol: f64, atol: f64, method: Method) -> OdeSession<'a> {
        let mut s = OdeSession::new(method, iter, Tolerances::ss(rtol, atol), |_t, y, dy| {
            let ys = y.as_slice().unwrap();
            dy.as_mut_slice().unwrap()[0] = -ys[0];
            Ok(())
        });
        s.init(0.0, Vector::serial(vec![1.0]), None).unwrap();
        s
    }

    #[test]
    fn exponential_decay_adams_functional() {
        let mut s = decay_session(Iteration::Functional, 1e-8, 1e-8, Method::Adams);
        let mut y = Vector::serial(vec![0.0]);
        let r = s.solve_normal(1.0, &mut y).unwrap();
        assert_eq!(r.flag, SolveFlag::Success);
        assert_eq!(r.t_ret, 1.0);
        let err = (y.as_slice().unwrap()[0] - (-1.0f64).exp()).abs();
        assert!(err <= 1e-6, "error {err}");
        let st = s.stats();
        assert!(st.num_steps > 5);
        assert_eq!(st.num_lin_setups, 0, "functional stage must not touch a linear solver");
    }

    #[test]
    fn exponential_decay_bdf_newton_dense() {
        let solver = DirectSolver::dense();
        let spec = NewtonSpec::new(solver.attach().unwrap()).with_jacobian(|_t, _y, _fy, j| {
            j.as_dense_mut().unwrap().set(0, 0, -1.0);
            Ok(())
        });
        let mut s = decay_session(Iteration::Newton(spec), 1e-8, 1e-8, Method::Bdf);
        let mut y = Vector::serial(vec![0.0]);
        s.solve_normal(1.0, &mut y).unwrap();
        let err = (y.as_slice().unwrap()[0] - (-1.0f64).exp()).abs();
        assert!(err <= 1e-6, "error {err}");
        assert!(s.stats().num_lin_setups > 0);
    }

    #[test]
    fn error_scales_with_rtol() {
        // oracle: tightening rtol tightens the achieved error proportionally
        for &rtol in &[1e-4, 1e-6, 1e-8, 1e-10] {
            let mut s = decay_session(Iteration::Functional, rtol, 1e-14, Method::Adams);
            let mut y = Vector::serial(vec![0.0]);
            s.solve_normal(1.0, &mut y).unwrap();
            let err = (y.as_slice().unwrap()[0] - (-1.0f64).exp()).abs();
            assert!(err <= 100.0 * rtol, "rtol {rtol}: error {err}");
        }
    }

    #[test]
    fn bdf_order1_fixed_step_converges_linearly() {
        // backward Euler's global error halves (ratio ~2) when h halves
        let run = |h: f64| {
            let solver = DirectSolver::dense();
            let spec = NewtonSpec::new(solver.attach().unwrap()).with_jacobian(|_t, _y, _fy, j| {
                j.as_dense_mut().unwrap().set(0, 0, -1.0);
                Ok(())
            });
            let mut s = OdeSession::new(
                Method::Bdf,
                Iteration::Newton(spec),
                Tolerances::ss(1e-12, 1e-12),
                |_t, y, dy| {
                    dy.as_mut_slice().unwrap()[0] = -y.as_slice().unwrap()[0];
                    Ok(())
                },
            );
            s.set_max_order(1).unwrap();
            s.set_fixed_step(h).unwrap();
            s.init(0.0, Vector::serial(vec![1.0]), None).unwrap();
            let mut y = Vector::serial(vec![0.0]);
            s.solve_normal(1.0, &mut y).unwrap();
            (y.as_slice().unwrap()[0] - (-1.0f64).exp()).abs()
        };
        let e1 = run(1.0 / 512.0);
        let e2 = run(1.0 / 1024.0);
        let ratio = e1 / e2;
        assert!((1.5..=2.5).contains(&ratio), "order-1 ratio {ratio} (e1={e1}, e2={e2})");
    }

    #[test]
    fn root_direction_filters_select_crossings() {
        // y = sin t crosses 0.5 rising at pi/6 and falling at 5 pi/6
        let mk = || {
            let mut s = OdeSession::new(
                Method::Adams,
                Iteration::Functional,
                Tolerances::ss(1e-10, 1e-12),
                |t: f64, _y: &Vector, dy: &mut Vector| {
                    dy.as_mut_slice().unwrap()[0] = t.cos();
                    Ok(())
                },
            );
            s.init(
                0.0,
                Vector::serial(vec![0.0]),
                Some(RootSpec::new(1, |_t, y, g| {
                    g[0] = y.as_slice().unwrap()[0] - 0.5;
                    Ok(())
                })),
            )
            .unwrap();
            s
        };
        let mut y = Vector::serial(vec![0.0]);

        let mut s = mk();
        s.set_all_root_directions(RootDirection::Increasing).unwrap();
        let r = s.solve_normal(4.0, &mut y).unwrap();
        assert_eq!(r.flag, SolveFlag::RootsFound(vec![1]));
        assert!((r.t_ret - std::f64::consts::FRAC_PI_6).abs() <= 1e-6, "t={}", r.t_ret);

        let mut s = mk();
        s.set_all_root_directions(RootDirection::Decreasing).unwrap();
        let r = s.solve_normal(4.0, &mut y).unwrap();
        assert_eq!(r.flag, SolveFlag::RootsFound(vec![-1]));
        assert!((r.t_ret - 5.0 * std::f64::consts::FRAC_PI_6).abs() <= 1e-6, "t={}", r.t_ret);

        // after a root return the same solve target completes normally
        let r = s.solve_normal(4.0, &mut y).unwrap();
        assert_eq!(r.flag, SolveFlag::Success);
        assert_eq!(r.t_ret, 4.0);
    }

    #[test]
    fn stop_time_halts_before_tout() {
        let mut s = decay_session(Iteration::Functional, 1e-8, 1e-10, Method::Adams);
        s.set_stop_time(0.5).unwrap();
        let mut y = Vector::serial(vec![0.0]);
        let r = s.solve_normal(1.0, &mut y).unwrap();
        assert_eq!(r.flag, SolveFlag::StopTimeReached);
        assert_eq!(r.t_ret, 0.5);
        let err = (y.as_slice().unwrap()[0] - (-0.5f64).exp()).abs();
        assert!(err <= 1e-6);
        assert!(s.current_time().unwrap() <= 0.5 * (1.0 + 1e-12));
        // integration continues past a consumed stop time
        let r = s.solve_normal(1.0, &mut y).unwrap();
        assert_eq!(r.flag, SolveFlag::Success);
    }

    #[test]
    fn reinit_reproduces_a_fresh_session_bitwise() {
        let run = |reinit_first: bool| {
            let mut s = decay_session(Iteration::Functional, 1e-8, 1e-10, Method::Adams);
            if reinit_first {
                // burn some state, then reset to the same initial condition
                let mut y = Vector::serial(vec![0.0]);
                s.solve_normal(0.3, &mut y).unwrap();
                s.reinit(0.0, &Vector::serial(vec![1.0])).unwrap();
            }
            let mut y = Vector::serial(vec![0.0]);
            s.solve_normal(1.0, &mut y).unwrap();
            y.as_slice().unwrap()[0].to_bits()
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn many_small_outputs_match_single_jump() {
        let mut a = decay_session(Iteration::Functional, 1e-10, 1e-12, Method::Adams);
        let mut b = decay_session(Iteration::Functional, 1e-10, 1e-12, Method::Adams);
        let mut ya = Vector::serial(vec![0.0]);
        let mut yb = Vector::serial(vec![0.0]);
        // same first-call tout so the step sequences are identical
        for k in 1..=100 {
            a.solve_normal(k as f64 * 0.01, &mut ya).unwrap();
        }
        b.solve_normal(0.01, &mut yb).unwrap();
        b.solve_normal(1.0, &mut yb).unwrap();
        assert!((ya.as_slice().unwrap()[0] - yb.as_slice().unwrap()[0]).abs() <= 1e-12);
    }

    #[test]
    fn lifecycle_and_wrong_solver_errors() {
        // reinit before init
        let mut s = OdeSession::new(Method::Adams, Iteration::Functional, Tolerances::default_tolerances(), |_t, _y, dy| {
            dy.as_mut_slice().unwrap()[0] = 0.0;
            Ok(())
        });
        assert!(matches!(s.reinit(0.0, &Vector::serial(vec![1.0])), Err(Error::Lifecycle(_))));
        let mut y = Vector::serial(vec![0.0]);
        assert!(matches!(s.solve_normal(1.0, &mut y), Err(Error::Lifecycle(_))));
        assert!(matches!(s.set_stop_time(1.0), Err(Error::Lifecycle(_))));

        s.init(0.0, Vector::serial(vec![1.0]), None).unwrap();
        assert!(matches!(
            s.init(0.0, Vector::serial(vec![1.0]), None),
            Err(Error::Lifecycle(_))
        ));

        // diagonal statistics on a non-diagonal session
        assert!(matches!(s.diag_num_rhs_evals(), Err(Error::WrongSolver(_))));
        assert!(matches!(s.diag_work_space(), Err(Error::WrongSolver(_))));
    }

    #[test]
    fn mixed_backend_init_is_rejected() {
        use crate::vector::VectorOps;
        let solver = DirectSolver::dense();
        let spec = NewtonSpec::new(solver.attach().unwrap());
        let mut s = OdeSession::new(
            Method::Bdf,
            Iteration::Newton(spec),
            Tolerances::default_tolerances(),
            |_t, _y, dy| {
                dy.const_fill(0.0);
                Ok(())
            },
        );
        let y0 = Vector::make_custom(VectorOps::over_f64_vec(), vec![1.0, 2.0]);
        let err = s.init(0.0, y0, None).unwrap_err();
        assert!(matches!(err, Error::Incompatible { .. }), "{err:?}");
    }

    #[test]
    fn stiff_system_bdf_newton_and_spgmr_agree() {
        // decoupled stiff pair with known solution
        let rhs = |_t: f64, y: &Vector, dy: &mut Vector| {
            let ys = y.as_slice().unwrap();
            let d = dy.as_mut_slice().unwrap();
            d[0] = -1000.0 * ys[0];
            d[1] = -0.5 * ys[1];
            Ok(())
        };
        let exact = [(-1000.0f64 * 0.1).exp(), (-0.5f64 * 0.1).exp()];

        let dense = {
            let solver = DirectSolver::dense();
            let spec = NewtonSpec::new(solver.attach().unwrap()).with_jacobian(|_t, _y, _fy, j| {
                let d = j.as_dense_mut().unwrap();
                d.set(0, 0, -1000.0);
                d.set(1, 1, -0.5);
                Ok(())
            });
            let mut s = OdeSession::new(Method::Bdf, Iteration::Newton(spec), Tolerances::ss(1e-8, 1e-12), rhs);
            s.init(0.0, Vector::serial(vec![1.0, 1.0]), None).unwrap();
            let mut y = Vector::serial(vec![0.0, 0.0]);
            s.solve_normal(0.1, &mut y).unwrap();
            y.as_slice().unwrap().to_vec()
        };
        for (a, e) in dense.iter().zip(&exact) {
            assert!((a - e).abs() <= 1e-7, "dense: {a} vs {e}");
        }

        let spgmr = {
            let solver = IterativeSolver::spgmr();
            let spec = NewtonSpec::new(solver.attach().unwrap());
            let mut s = OdeSession::new(Method::Bdf, Iteration::Newton(spec), Tolerances::ss(1e-8, 1e-12), rhs);
            s.init(0.0, Vector::serial(vec![1.0, 1.0]), None).unwrap();
            let mut y = Vector::serial(vec![0.0, 0.0]);
            s.solve_normal(0.1, &mut y).unwrap();
            y.as_slice().unwrap().to_vec()
        };
        for (a, e) in spgmr.iter().zip(&exact) {
            assert!((a - e).abs() <= 1e-6, "spgmr: {a} vs {e}");
        }
    }

    #[test]
    fn dq_jacobian_matches_analytic_path() {
        // without a user Jacobian the dense difference quotient must give
        // nearly the same trajectory
        let rhs = |t: f64, y: &Vector, dy: &mut Vector| {
            let ys = y.as_slice().unwrap();
            let d = dy.as_mut_slice().unwrap();
            d[0] = ys[1];
            d[1] = -9.8 * ys[0].sin() - 0.1 * ys[1] + t.sin();
            Ok(())
        };
        let run = |analytic: bool| {
            let solver = DirectSolver::dense();
            let mut spec = NewtonSpec::new(solver.attach().unwrap());
            if analytic {
                spec = spec.with_jacobian(|_t, y, _fy, j| {
                    let ys = y.as_slice().unwrap();
                    let d = j.as_dense_mut().unwrap();
                    d.set(0, 1, 1.0);
                    d.set(1, 0, -9.8 * ys[0].cos());
                    d.set(1, 1, -0.1);
                    Ok(())
                });
            }
            let mut s = OdeSession::new(Method::Bdf, Iteration::Newton(spec), Tolerances::ss(1e-9, 1e-11), rhs);
            s.init(0.0, Vector::serial(vec![1.0, 0.0]), None).unwrap();
            let mut y = Vector::serial(vec![0.0, 0.0]);
            s.solve_normal(2.0, &mut y).unwrap();
            y.as_slice().unwrap().to_vec()
        };
        let (a, b) = (run(true), run(false));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn band_solver_on_tridiagonal_system() {
        // discrete heat equation; compare against the dense solver
        let n = 20usize;
        let rhs = move |_t: f64, y: &Vector, dy: &mut Vector| {
            let ys = y.as_slice().unwrap();
            let d = dy.as_mut_slice().unwrap();
            for i in 0..n {
                let left = if i > 0 { ys[i - 1] } else { 0.0 };
                let right = if i + 1 < n { ys[i + 1] } else { 0.0 };
                d[i] = left - 2.0 * ys[i] + right;
            }
            Ok(())
        };
        let y0: Vec<f64> = (0..n).map(|i| (i as f64 / (n - 1) as f64 * std::f64::consts::PI).sin()).collect();
        let run = |band: bool| {
            let solver = if band { DirectSolver::band() } else { DirectSolver::dense() };
            let mut spec = NewtonSpec::new(solver.attach().unwrap());
            if band {
                spec = spec.with_matrix(Matrix::banded_for_lu(n, 1, 1));
            }
            let mut s = OdeSession::new(Method::Bdf, Iteration::Newton(spec), Tolerances::ss(1e-8, 1e-10), rhs);
            s.init(0.0, Vector::serial(y0.clone()), None).unwrap();
            let mut y = Vector::serial(vec![0.0; n]);
            s.solve_normal(1.0, &mut y).unwrap();
            y.as_slice().unwrap().to_vec()
        };
        let (d, b) = (run(false), run(true));
        for (x, y) in d.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-7, "{x} vs {y}");
        }
    }

    #[test]
    fn diag_stage_solves_decoupled_stiff_system() {
        let rhs = |_t: f64, y: &Vector, dy: &mut Vector| {
            let ys = y.as_slice().unwrap();
            let d = dy.as_mut_slice().unwrap();
            d[0] = -1.0 * ys[0];
            d[1] = -10.0 * ys[1];
            d[2] = -100.0 * ys[2];
            Ok(())
        };
        let mut s = OdeSession::new(Method::Bdf, Iteration::Diag, Tolerances::ss(1e-7, 1e-10), rhs);
        s.init(0.0, Vector::serial(vec![1.0, 1.0, 1.0]), None).unwrap();
        let mut y = Vector::serial(vec![0.0; 3]);
        s.solve_normal(1.0, &mut y).unwrap();
        let ys = y.as_slice().unwrap();
        for (i, lam) in [1.0f64, 10.0, 100.0].iter().enumerate() {
            let e = (-lam).exp();
            assert!((ys[i] - e).abs() <= 1e-6, "component {i}: {} vs {e}", ys[i]);
        }
        assert!(s.diag_num_rhs_evals().unwrap() > 0);
        // the diagonal stage converges about as fast as Newton here
        let st = s.stats();
        let per_step = st.num_nonlin_iters as f64 / st.num_steps as f64;
        assert!(per_step <= 2.5, "nonlinear iterations per step {per_step}");
    }

    #[test]
    fn banded_preconditioner_speeds_spgmr_session() {
        // stiff advection-diffusion chain; spgmr without preconditioning
        // would need far more iterations per step
        let n = 24usize;
        let rhs = move |_t: f64, y: &Vector, dy: &mut Vector| {
            let ys = y.as_slice().unwrap();
            let d = dy.as_mut_slice().unwrap();
            for i in 0..n {
                let left = if i > 0 { ys[i - 1] } else { 0.0 };
                let right = if i + 1 < n { ys[i + 1] } else { 0.0 };
                d[i] = 50.0 * (left - 2.0 * ys[i] + right) + 2.0 * (right - left);
            }
            Ok(())
        };
        let y0: Vec<f64> = (0..n).map(|i| ((i + 1) as f64 / n as f64).powi(2)).collect();
        let solver = IterativeSolver::spgmr();
        let spec = NewtonSpec::new(solver.attach().unwrap())
            .with_banded_preconditioner(BandedPrecSpec { mu: 1, ml: 1 });
        let mut s = OdeSession::new(Method::Bdf, Iteration::Newton(spec), Tolerances::ss(1e-7, 1e-10), rhs);
        s.init(0.0, Vector::serial(y0.clone()), None).unwrap();
        let mut y = Vector::serial(vec![0.0; n]);
        s.solve_normal(0.5, &mut y).unwrap();

        // oracle: dense-solver run of the same system
        let solver = DirectSolver::dense();
        let spec = NewtonSpec::new(solver.attach().unwrap());
        let mut sd = OdeSession::new(Method::Bdf, Iteration::Newton(spec), Tolerances::ss(1e-9, 1e-12), rhs);
        sd.init(0.0, Vector::serial(y0), None).unwrap();
        let mut yd = Vector::serial(vec![0.0; n]);
        sd.solve_normal(0.5, &mut yd).unwrap();
        for (a, b) in y.as_slice().unwrap().iter().zip(yd.as_slice().unwrap()) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn sv_tolerances_respected() {
        let mut s = OdeSession::new(
            Method::Adams,
            Iteration::Functional,
            Tolerances::sv(1e-9, Vector::serial(vec![1e-10, 1e-6])),
            |_t, y, dy| {
                let ys = y.as_slice().unwrap();
                let d = dy.as_mut_slice().unwrap();
                d[0] = -ys[0];
                d[1] = -2.0 * ys[1];
                Ok(())
            },
        );
        s.init(0.0, Vector::serial(vec![1.0, 1.0]), None).unwrap();
        let mut y = Vector::serial(vec![0.0, 0.0]);
        s.solve_normal(1.0, &mut y).unwrap();
        let ys = y.as_slice().unwrap();
        assert!((ys[0] - (-1.0f64).exp()).abs() <= 1e-7);
        assert!((ys[1] - (-2.0f64).exp()).abs() <= 1e-5);
    }

    #[test]
    fn init_stats_reported_separately() {
        let s = decay_session(Iteration::Functional, 1e-8, 1e-10, Method::Adams);
        let st = s.stats();
        assert_eq!(st.num_rhs_evals, 0);
        assert_eq!(st.num_steps, 0);
        // init evaluations happen lazily at the first solve
        assert_eq!(st.num_init_rhs_evals, 0);
        let mut s = s;
        let mut y = Vector::serial(vec![0.0]);
        s.solve_normal(1.0, &mut y).unwrap();
        let st = s.stats();
        assert!(st.num_init_rhs_evals >= 1);
        assert!(st.num_rhs_evals > 0);
    }
}
