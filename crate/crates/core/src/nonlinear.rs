//! Standalone nonlinear system solvers: Newton iteration (over an attached
//! linear solver) and fixed-point iteration.
//!
//! The integrators use their own specialized variants of these loops; this
//! module is the user-facing solver for algebraic systems F(U) = 0.

use crate::error::{CallbackError, CallbackResult, Error, Result};
use crate::linsolver::{AttachToken, Preconditioner};
use crate::matrix::Matrix;
use crate::vector::Vector;

/// Newton configuration. Holding an attachment token makes it impossible to
/// request Newton iteration without a configured linear solver.
pub struct NewtonConfig {
    pub max_iters: usize,
    /// WRMS-norm convergence threshold.
    pub tol: f64,
    pub linear: AttachToken,
    /// Template for the Jacobian matrix (shape and family). Defaults to a
    /// dense n-by-n matrix.
    pub matrix: Option<Matrix>,
}

impl NewtonConfig {
    pub fn new(linear: AttachToken) -> NewtonConfig {
        NewtonConfig { max_iters: 200, tol: 1e-8, linear, matrix: None }
    }
}

/// Fixed-point (functional) iteration configuration.
#[derive(Debug, Clone, Copy)]
pub struct FixedPointConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        FixedPointConfig { max_iters: 200, tol: 1e-8 }
    }
}

/// Termination status. Fatal failures (singular matrices, fatal callbacks)
/// surface as `Err` instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NonlinearStatus {
    Converged { iters: usize },
    RecoverableDivergence,
}

/// Status plus the norm of the last update (or residual) examined.
#[derive(Debug, Clone, Copy)]
pub struct NonlinearOutcome {
    pub status: NonlinearStatus,
    pub final_norm: f64,
}

/// How Newton obtains Jacobian information.
pub enum Jacobian<'a> {
    /// Fills the matrix with J(u) = ∂F/∂u.
    Dense(Box<dyn FnMut(&Vector, &mut Matrix) -> CallbackResult + 'a>),
    /// Computes J(u)·v for matrix-free (iterative) solves.
    MatVec(Box<dyn FnMut(&Vector, &[f64], &mut [f64]) -> CallbackResult + 'a>),
    /// Forward-difference approximation built from F itself
    /// (serial-representation vectors only).
    FiniteDifference,
}

fn callback_err(e: CallbackError) -> Result<NonlinearOutcome> {
    match e {
        CallbackError::Recoverable => Ok(NonlinearOutcome {
            status: NonlinearStatus::RecoverableDivergence,
            final_norm: f64::INFINITY,
        }),
        CallbackError::Fatal(msg) => Err(Error::Callback(msg)),
    }
}

/// Solves F(u) = 0 by Newton iteration starting from the guess in `u`,
/// which is overwritten with the final iterate. Convergence is declared
/// when the WRMS norm of the residual or of the correction drops to `tol`.
pub fn newton_solve(
    f: &mut dyn FnMut(&Vector, &mut Vector) -> CallbackResult,
    jac: &mut Jacobian,
    u: &mut Vector,
    cfg: &NewtonConfig,
    weights: &Vector,
) -> Result<NonlinearOutcome> {
    let n = u.len();
    let mut fu = u.clone();
    let mut delta = u.clone();

    if let Err(e) = f(u, &mut fu) {
        return callback_err(e);
    }
    let res0 = Vector::wrms_norm(&fu, weights)?;
    if res0 <= cfg.tol {
        return Ok(NonlinearOutcome {
            status: NonlinearStatus::Converged { iters: 0 },
            final_norm: res0,
        });
    }

    enum Engine<'t> {
        Direct { solver: &'t crate::linsolver::DirectSolver, j: Matrix },
        Iterative(&'t crate::linsolver::IterativeSolver),
    }
    let mut engine = if let Some(d) = cfg.linear.direct() {
        let j = cfg.matrix.clone().unwrap_or_else(|| Matrix::dense(n, n));
        Engine::Direct { solver: d, j }
    } else {
        Engine::Iterative(cfg.linear.iterative().expect("token is direct or iterative"))
    };

    for m in 1..=cfg.max_iters {
        // solve J(u) delta = -F(u)
        match &mut engine {
            Engine::Direct { solver, j } => {
                match jac {
                    Jacobian::Dense(cb) => {
                        if let Err(e) = cb(u, j) {
                            return callback_err(e);
                        }
                    }
                    Jacobian::FiniteDifference => fill_fd_jacobian(f, u, &mut fu, j)?,
                    Jacobian::MatVec(_) => {
                        return Err(Error::Variant(
                            "matvec Jacobian requires an iterative linear solver".into(),
                        ))
                    }
                }
                solver.setup(j)?;
                let mut rhs = fu.clone();
                rhs.scale_in_place(-1.0);
                solver.solve(&mut delta, &rhs)?;
            }
            Engine::Iterative(solver) => {
                let lin_tol = 0.05 * cfg.tol * (n as f64).sqrt();
                let b: Vec<f64> = fu
                    .as_slice()
                    .ok_or_else(|| Error::Incompatible {
                        property: "representation",
                        detail: "iterative Newton requires serial-representation vectors".into(),
                    })?
                    .iter()
                    .map(|v| -v)
                    .collect();
                let mut x = vec![0.0; n];
                match jac {
                    Jacobian::MatVec(cb) => {
                        let ucur = &*u;
                        solver.solve(
                            &mut |v, out| {
                                cb(ucur, v, out).map_err(|e| match e {
                                    CallbackError::Recoverable => {
                                        Error::Callback("recoverable matvec failure".into())
                                    }
                                    CallbackError::Fatal(m) => Error::Callback(m),
                                })
                            },
                            &mut Preconditioner::none(),
                            &mut x,
                            &b,
                            lin_tol,
                        )?;
                    }
                    _ => {
                        return Err(Error::Variant(
                            "iterative Newton requires a matvec Jacobian".into(),
                        ))
                    }
                }
                delta.as_mut_slice().unwrap().copy_from_slice(&x);
            }
        }

        u.linear_sum_in_place(1.0, 1.0, &delta)?;
        let del = Vector::wrms_norm(&delta, weights)?;
        if let Err(e) = f(u, &mut fu) {
            return callback_err(e);
        }
        let res = Vector::wrms_norm(&fu, weights)?;
        if del <= cfg.tol || res <= cfg.tol {
            return Ok(NonlinearOutcome {
                status: NonlinearStatus::Converged { iters: m },
                final_norm: del.min(res),
            });
        }
    }
    Ok(NonlinearOutcome {
        status: NonlinearStatus::RecoverableDivergence,
        final_norm: f64::INFINITY,
    })
}

/// Forward-difference dense Jacobian of F at u; `fu` holds F(u) on entry
/// and is restored on exit.
fn fill_fd_jacobian(
    f: &mut dyn FnMut(&Vector, &mut Vector) -> CallbackResult,
    u: &mut Vector,
    fu: &mut Vector,
    j: &mut Matrix,
) -> Result<()> {
    let n = u.len();
    let d = j.as_dense_mut().ok_or_else(|| {
        Error::MatrixIncompatible("finite-difference Jacobian needs dense storage".into())
    })?;
    let base = fu
        .as_slice()
        .ok_or_else(|| Error::Incompatible {
            property: "representation",
            detail: "finite-difference Jacobian requires serial-representation vectors".into(),
        })?
        .to_vec();
    let mut fpert = fu.clone();
    for col in 0..n {
        let uj = u.as_slice().unwrap()[col];
        let sigma = f64::EPSILON.sqrt() * uj.abs().max(1.0);
        u.as_mut_slice().unwrap()[col] = uj + sigma;
        if let Err(e) = f(u, &mut fpert) {
            u.as_mut_slice().unwrap()[col] = uj;
            return match e {
                CallbackError::Recoverable => {
                    Err(Error::Callback("recoverable failure during Jacobian estimate".into()))
                }
                CallbackError::Fatal(m) => Err(Error::Callback(m)),
            };
        }
        u.as_mut_slice().unwrap()[col] = uj;
        let fp = fpert.as_slice().unwrap();
        for row in 0..n {
            d.set(row, col, (fp[row] - base[row]) / sigma);
        }
    }
    Ok(())
}

/// Solves u = G(u) by plain fixed-point iteration starting from `u`, which
/// is overwritten with the final iterate.
pub fn fixed_point_solve(
    g: &mut dyn FnMut(&Vector, &mut Vector) -> CallbackResult,
    u: &mut Vector,
    cfg: &FixedPointConfig,
    weights: &Vector,
) -> Result<NonlinearOutcome> {
    let mut gu = u.clone();
    let mut diff = u.clone();
    for m in 1..=cfg.max_iters {
        if let Err(e) = g(u, &mut gu) {
            return callback_err(e);
        }
        Vector::linear_sum(1.0, &gu, -1.0, u, &mut diff)?;
        let del = Vector::wrms_norm(&diff, weights)?;
        Vector::scale(1.0, &gu, u)?;
        if del <= cfg.tol {
            return Ok(NonlinearOutcome {
                status: NonlinearStatus::Converged { iters: m },
                final_norm: del,
            });
        }
    }
    Ok(NonlinearOutcome {
        status: NonlinearStatus::RecoverableDivergence,
        final_norm: f64::INFINITY,
    })
}
