//! Direct (dense/band LU) and iterative (restarted GMRES) linear solvers
//! behind a uniform setup/solve interface.
//!
//! Every solver instance can be attached to at most one session over its
//! lifetime; [`DirectSolver::attach`]/[`IterativeSolver::attach`] hand out a
//! single token that session initialization consumes.

use std::any::Any;
use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::matrix::{BandedContent, DenseContent, Matrix};
use crate::vector::Vector;

// ---------------------------------------------------------------------------
// LU kernels
//
// Exposed so custom direct solvers can delegate to the exact same arithmetic
// as the built-in ones (needed for byte-identical trajectories).
// ---------------------------------------------------------------------------

/// In-place LU factorization with partial pivoting, column-major dense
/// storage. `piv[k]` records the row swapped into position k.
pub fn dense_lu_factor(a: &mut DenseContent, piv: &mut [usize]) -> Result<()> {
    let n = a.n;
    assert_eq!(a.m, n, "LU factorization requires a square matrix");
    assert_eq!(piv.len(), n);
    for k in 0..n {
        let mut p = k;
        let mut pmax = a.get(k, k).abs();
        for i in k + 1..n {
            let v = a.get(i, k).abs();
            if v > pmax {
                pmax = v;
                p = i;
            }
        }
        if a.get(p, k) == 0.0 {
            return Err(Error::SingularMatrix { column: k });
        }
        piv[k] = p;
        if p != k {
            for j in 0..n {
                let tmp = a.get(k, j);
                a.set(k, j, a.get(p, j));
                a.set(p, j, tmp);
            }
        }
        let pivot = a.get(k, k);
        for i in k + 1..n {
            let m = a.get(i, k) / pivot;
            a.set(i, k, m);
        }
        for j in k + 1..n {
            let u = a.get(k, j);
            if u != 0.0 {
                for i in k + 1..n {
                    let v = a.get(i, j) - a.get(i, k) * u;
                    a.set(i, j, v);
                }
            }
        }
    }
    Ok(())
}

/// Solves the factored system in place: `b` enters as the right-hand side
/// and leaves as the solution.
pub fn dense_lu_solve(a: &DenseContent, piv: &[usize], b: &mut [f64]) {
    let n = a.n;
    for k in 0..n {
        b.swap(k, piv[k]);
    }
    // forward substitution, unit lower triangle
    for k in 0..n {
        let bk = b[k];
        if bk != 0.0 {
            for i in k + 1..n {
                b[i] -= a.get(i, k) * bk;
            }
        }
    }
    // back substitution
    for k in (0..n).rev() {
        b[k] /= a.get(k, k);
        let bk = b[k];
        if bk != 0.0 {
            for i in 0..k {
                b[i] -= a.get(i, k) * bk;
            }
        }
    }
}

#[inline]
fn band_get(b: &BandedContent, i: usize, j: usize) -> f64 {
    b.data[j * b.ldim() + b.smu + i - j]
}

#[inline]
fn band_set(b: &mut BandedContent, i: usize, j: usize, v: f64) {
    let ld = b.ldim();
    b.data[j * ld + b.smu + i - j] = v;
}

/// In-place band LU with partial pivoting. Requires fill space
/// `smu >= min(n-1, mu+ml)`; multipliers overwrite the lower band and U
/// spreads into the fill rows.
pub fn band_lu_factor(a: &mut BandedContent, piv: &mut [usize]) -> Result<()> {
    let n = a.n;
    assert!(a.smu >= (a.mu + a.ml).min(n.saturating_sub(1)));
    assert_eq!(piv.len(), n);
    for c in 0..n {
        let last_row = (c + a.ml).min(n - 1);
        let last_col = (c + a.smu).min(n - 1);
        let mut p = c;
        let mut pmax = band_get(a, c, c).abs();
        for i in c + 1..=last_row {
            let v = band_get(a, i, c).abs();
            if v > pmax {
                pmax = v;
                p = i;
            }
        }
        if band_get(a, p, c) == 0.0 {
            return Err(Error::SingularMatrix { column: c });
        }
        piv[c] = p;
        if p != c {
            for j in c..=last_col {
                let tmp = band_get(a, c, j);
                let v = band_get(a, p, j);
                band_set(a, c, j, v);
                band_set(a, p, j, tmp);
            }
        }
        let pivot = band_get(a, c, c);
        for i in c + 1..=last_row {
            let m = band_get(a, i, c) / pivot;
            band_set(a, i, c, m);
        }
        for j in c + 1..=last_col {
            let u = band_get(a, c, j);
            if u != 0.0 {
                for i in c + 1..=last_row {
                    let v = band_get(a, i, j) - band_get(a, i, c) * u;
                    band_set(a, i, j, v);
                }
            }
        }
    }
    Ok(())
}

/// Solves the band-factored system in place.
pub fn band_lu_solve(a: &BandedContent, piv: &[usize], b: &mut [f64]) {
    let n = a.n;
    for c in 0..n {
        b.swap(c, piv[c]);
        let bc = b[c];
        if bc != 0.0 {
            for i in c + 1..=(c + a.ml).min(n - 1) {
                b[i] -= band_get(a, i, c) * bc;
            }
        }
    }
    for c in (0..n).rev() {
        b[c] /= band_get(a, c, c);
        let bc = b[c];
        if bc != 0.0 {
            let first = c.saturating_sub(a.smu);
            for i in first..c {
                b[i] -= band_get(a, i, c) * bc;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Direct solvers
// ---------------------------------------------------------------------------

/// Operation table for a user-defined direct linear solver over an opaque
/// state `S`. `solve` must only be called after `setup` saw the current
/// matrix values; sessions guarantee that ordering.
pub struct DlsOps<S> {
    pub init: fn(&mut S) -> Result<()>,
    pub setup: fn(&mut S, &Matrix) -> Result<()>,
    pub solve: fn(&mut S, &Matrix, &mut Vector, &Vector) -> Result<()>,
    pub work_space: Option<fn(&S) -> (usize, usize)>,
}

impl<S> Clone for DlsOps<S> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<S> Copy for DlsOps<S> {}

trait DynDls {
    fn setup(&mut self, a: &Matrix) -> Result<()>;
    fn solve(&mut self, a: &Matrix, x: &mut Vector, b: &Vector) -> Result<()>;
    fn work_space(&self) -> Option<(usize, usize)>;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

struct CustomDls<S: 'static> {
    ops: DlsOps<S>,
    state: S,
}

impl<S: 'static> DynDls for CustomDls<S> {
    fn setup(&mut self, a: &Matrix) -> Result<()> {
        (self.ops.setup)(&mut self.state, a)
    }
    fn solve(&mut self, a: &Matrix, x: &mut Vector, b: &Vector) -> Result<()> {
        (self.ops.solve)(&mut self.state, a, x, b)
    }
    fn work_space(&self) -> Option<(usize, usize)> {
        self.ops.work_space.map(|f| f(&self.state))
    }
    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

enum DirectKind {
    Dense { factors: DenseContent, piv: Vec<usize>, ready: bool },
    Band { factors: BandedContent, piv: Vec<usize>, ready: bool },
    Custom { dls: Box<dyn DynDls>, storage: Matrix },
}

struct DirectInner {
    kind: DirectKind,
    attached: bool,
    num_setups: usize,
}

/// A direct linear solver instance: built-in dense LU, built-in band LU, or
/// a user-supplied operation table.
#[derive(Clone)]
pub struct DirectSolver {
    inner: Rc<RefCell<DirectInner>>,
}

/// Which built-in family a direct solver uses (None for custom).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectFamily {
    Dense,
    Band,
    Custom,
}

impl DirectSolver {
    /// Dense LU with partial pivoting over serial-representation vectors.
    pub fn dense() -> DirectSolver {
        DirectSolver {
            inner: Rc::new(RefCell::new(DirectInner {
                kind: DirectKind::Dense {
                    factors: DenseContent::zeros(0, 0),
                    piv: Vec::new(),
                    ready: false,
                },
                attached: false,
                num_setups: 0,
            })),
        }
    }

    /// Band LU with partial pivoting over serial-representation vectors.
    pub fn band() -> DirectSolver {
        DirectSolver {
            inner: Rc::new(RefCell::new(DirectInner {
                kind: DirectKind::Band {
                    factors: BandedContent::zeros(0, 0, 0, 0),
                    piv: Vec::new(),
                    ready: false,
                },
                attached: false,
                num_setups: 0,
            })),
        }
    }

    /// Wraps a user-supplied direct-solver operation table. `storage` is the
    /// matrix the session fills before each setup call.
    pub fn make_custom<S: 'static>(ops: DlsOps<S>, mut state: S, storage: Matrix) -> Result<DirectSolver> {
        (ops.init)(&mut state)?;
        Ok(DirectSolver {
            inner: Rc::new(RefCell::new(DirectInner {
                kind: DirectKind::Custom { dls: Box::new(CustomDls { ops, state }), storage },
                attached: false,
                num_setups: 0,
            })),
        })
    }

    pub fn family(&self) -> DirectFamily {
        match &self.inner.borrow().kind {
            DirectKind::Dense { .. } => DirectFamily::Dense,
            DirectKind::Band { .. } => DirectFamily::Band,
            DirectKind::Custom { .. } => DirectFamily::Custom,
        }
    }

    /// Whether this solver requires raw serial-representation vector access.
    pub fn needs_serial_repr(&self) -> bool {
        !matches!(self.family(), DirectFamily::Custom)
    }

    /// Borrows the opaque state of a custom solver (the unwrap operation).
    /// Variant error on the built-in solvers.
    pub fn with_custom_state<S: 'static, R>(&self, f: impl FnOnce(&mut S) -> R) -> Result<R> {
        let mut inner = self.inner.borrow_mut();
        match &mut inner.kind {
            DirectKind::Custom { dls, .. } => {
                let cd = dls
                    .as_any_mut()
                    .downcast_mut::<CustomDls<S>>()
                    .ok_or_else(|| Error::Variant("custom solver state type mismatch".into()))?;
                Ok(f(&mut cd.state))
            }
            _ => Err(Error::Variant("unwrap on a non-custom direct solver".into())),
        }
    }

    /// Claims this solver for a session. A second call always fails, even
    /// after the first session is gone: attachment is permanent.
    pub fn attach(&self) -> Result<AttachToken> {
        let mut inner = self.inner.borrow_mut();
        if inner.attached {
            return Err(Error::AlreadyAttached);
        }
        inner.attached = true;
        Ok(AttachToken { solver: AttachedSolver::Direct(self.clone()) })
    }

    /// Factors the current matrix values.
    pub fn setup(&self, a: &Matrix) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        inner.num_setups += 1;
        match &mut inner.kind {
            DirectKind::Dense { factors, piv, ready } => {
                let d = a.as_dense().ok_or_else(|| {
                    Error::MatrixIncompatible("dense LU requires dense matrix content".into())
                })?;
                if d.m != d.n {
                    return Err(Error::Shape(format!("dense LU on {}x{} matrix", d.m, d.n)));
                }
                *factors = d.clone();
                piv.resize(d.n, 0);
                *ready = false;
                dense_lu_factor(factors, piv)?;
                *ready = true;
                Ok(())
            }
            DirectKind::Band { factors, piv, ready } => {
                let b = a.as_banded().ok_or_else(|| {
                    Error::MatrixIncompatible("band LU requires banded matrix content".into())
                })?;
                let need_smu = (b.mu + b.ml).min(b.n.saturating_sub(1)).max(b.mu);
                if b.smu >= need_smu {
                    *factors = b.clone();
                } else {
                    // re-embed into storage with LU fill space
                    *factors = BandedContent::zeros(b.n, b.mu, b.ml, need_smu);
                    for j in 0..b.n {
                        let lo = j.saturating_sub(b.mu);
                        let hi = (j + b.ml).min(b.n - 1);
                        for i in lo..=hi {
                            factors.set(i, j, b.get(i, j))?;
                        }
                    }
                }
                piv.resize(b.n, 0);
                *ready = false;
                band_lu_factor(factors, piv)?;
                *ready = true;
                Ok(())
            }
            DirectKind::Custom { dls, storage } => {
                // keep a copy so solve sees the matrix setup was given
                *storage = a.clone();
                dls.setup(storage)
            }
        }
    }

    /// Variant of setup for custom solvers where the session fills the
    /// solver's own storage matrix in place.
    pub fn setup_in_storage(&self, fill: impl FnOnce(&mut Matrix) -> Result<()>) -> Result<()> {
        {
            let mut inner = self.inner.borrow_mut();
            match &mut inner.kind {
                DirectKind::Custom { storage, .. } => fill(storage)?,
                _ => return Err(Error::Variant("setup_in_storage on a built-in solver".into())),
            }
        }
        // split borrow: re-enter to run the setup callback against storage
        let mut inner = self.inner.borrow_mut();
        inner.num_setups += 1;
        match &mut inner.kind {
            DirectKind::Custom { dls, storage } => dls.setup(storage),
            _ => unreachable!(),
        }
    }

    /// Solves A·x = b using the most recent factorization.
    pub fn solve(&self, x: &mut Vector, b: &Vector) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        match &mut inner.kind {
            DirectKind::Dense { factors, piv, ready } => {
                if !*ready {
                    return Err(Error::Lifecycle("solve before setup".into()));
                }
                let bs = serial_slice(b)?.to_vec();
                let xs = serial_slice_mut(x)?;
                xs.copy_from_slice(&bs);
                dense_lu_solve(factors, piv, xs);
                Ok(())
            }
            DirectKind::Band { factors, piv, ready } => {
                if !*ready {
                    return Err(Error::Lifecycle("solve before setup".into()));
                }
                let bs = serial_slice(b)?.to_vec();
                let xs = serial_slice_mut(x)?;
                xs.copy_from_slice(&bs);
                band_lu_solve(factors, piv, xs);
                Ok(())
            }
            DirectKind::Custom { dls, storage } => dls.solve(storage, x, b),
        }
    }

    /// Number of setup (factorization) calls so far.
    pub fn num_setups(&self) -> usize {
        self.inner.borrow().num_setups
    }

    pub fn work_space(&self) -> (usize, usize) {
        let inner = self.inner.borrow();
        match &inner.kind {
            DirectKind::Dense { factors, piv, .. } => (factors.data.len(), piv.len()),
            DirectKind::Band { factors, piv, .. } => (factors.data.len(), piv.len() + 3),
            DirectKind::Custom { dls, .. } => dls.work_space().unwrap_or((0, 0)),
        }
    }
}

fn serial_slice(v: &Vector) -> Result<&[f64]> {
    v.as_slice().ok_or_else(|| Error::Incompatible {
        property: "representation",
        detail: "built-in direct solvers require serial-representation vectors".into(),
    })
}

fn serial_slice_mut(v: &mut Vector) -> Result<&mut [f64]> {
    v.as_mut_slice().ok_or_else(|| Error::Incompatible {
        property: "representation",
        detail: "built-in direct solvers require serial-representation vectors".into(),
    })
}

// ---------------------------------------------------------------------------
// Iterative solver (SPGMR)
// ---------------------------------------------------------------------------

/// Gram-Schmidt orthogonalization variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GsType {
    Classical,
    Modified,
}

/// Preconditioner application side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrecSide {
    None,
    Left,
    Right,
    Both,
}

/// A preconditioner for SPGMR: an application side plus a solve callback
/// computing z = P⁻¹ r for the requested side. A non-None side always has a
/// solve callback, by construction.
pub struct Preconditioner<'a> {
    side: PrecSide,
    solve: Option<Box<dyn FnMut(&[f64], &mut [f64], PrecSide) -> Result<()> + 'a>>,
}

impl<'a> Preconditioner<'a> {
    pub fn none() -> Preconditioner<'a> {
        Preconditioner { side: PrecSide::None, solve: None }
    }

    pub fn new(
        side: PrecSide,
        solve: impl FnMut(&[f64], &mut [f64], PrecSide) -> Result<()> + 'a,
    ) -> Preconditioner<'a> {
        match side {
            PrecSide::None => Preconditioner::none(),
            _ => Preconditioner { side, solve: Some(Box::new(solve)) },
        }
    }

    pub fn side(&self) -> PrecSide {
        self.side
    }

    fn apply(&mut self, r: &[f64], z: &mut [f64], side: PrecSide) -> Result<()> {
        match &mut self.solve {
            Some(f) => f(r, z, side),
            None => {
                z.copy_from_slice(r);
                Ok(())
            }
        }
    }

    fn has_left(&self) -> bool {
        matches!(self.side, PrecSide::Left | PrecSide::Both)
    }

    fn has_right(&self) -> bool {
        matches!(self.side, PrecSide::Right | PrecSide::Both)
    }
}

/// Iteration statistics from one SPGMR solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpgmrStats {
    pub iterations: usize,
    pub restarts: usize,
    pub residual: f64,
}

struct SpgmrInner {
    maxl: usize,
    max_restarts: usize,
    gs_type: GsType,
    attached: bool,
}

/// Restarted, optionally preconditioned GMRES. Scaling vectors are fixed to
/// ones; weighted tolerances enter through `tol`.
#[derive(Clone)]
pub struct IterativeSolver {
    inner: Rc<RefCell<SpgmrInner>>,
}

impl Default for IterativeSolver {
    fn default() -> Self {
        IterativeSolver::spgmr()
    }
}

impl IterativeSolver {
    /// SPGMR with the conventional defaults: maxl=5, max_restarts=0,
    /// modified Gram-Schmidt.
    pub fn spgmr() -> IterativeSolver {
        IterativeSolver {
            inner: Rc::new(RefCell::new(SpgmrInner {
                maxl: 5,
                max_restarts: 0,
                gs_type: GsType::Modified,
                attached: false,
            })),
        }
    }

    pub fn with_maxl(self, maxl: usize) -> IterativeSolver {
        assert!(maxl >= 1, "maxl must be at least 1");
        self.inner.borrow_mut().maxl = maxl;
        self
    }

    pub fn with_max_restarts(self, max_restarts: usize) -> IterativeSolver {
        self.inner.borrow_mut().max_restarts = max_restarts;
        self
    }

    pub fn with_gs_type(self, gs_type: GsType) -> IterativeSolver {
        self.inner.borrow_mut().gs_type = gs_type;
        self
    }

    pub fn maxl(&self) -> usize {
        self.inner.borrow().maxl
    }

    /// Claims this solver for a session; permanent, single-use.
    pub fn attach(&self) -> Result<AttachToken> {
        let mut inner = self.inner.borrow_mut();
        if inner.attached {
            return Err(Error::AlreadyAttached);
        }
        inner.attached = true;
        Ok(AttachToken { solver: AttachedSolver::Iterative(self.clone()) })
    }

    /// Solves A·x = b to preconditioned residual 2-norm ≤ tol, starting from
    /// the initial guess already in `x`. `atimes` computes A·v.
    pub fn solve(
        &self,
        atimes: &mut dyn FnMut(&[f64], &mut [f64]) -> Result<()>,
        prec: &mut Preconditioner,
        x: &mut [f64],
        b: &[f64],
        tol: f64,
    ) -> Result<SpgmrStats> {
        let (maxl, max_restarts, gs_type) = {
            let i = self.inner.borrow();
            (i.maxl, i.max_restarts, i.gs_type)
        };
        spgmr_solve_raw(atimes, prec, x, b, tol, maxl, max_restarts, gs_type)
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One restarted GMRES run. Kept free-standing so tests can drive it with
/// explicit parameters.
#[allow(clippy::too_many_arguments)]
pub fn spgmr_solve_raw(
    atimes: &mut dyn FnMut(&[f64], &mut [f64]) -> Result<()>,
    prec: &mut Preconditioner,
    x: &mut [f64],
    b: &[f64],
    tol: f64,
    maxl: usize,
    max_restarts: usize,
    gs_type: GsType,
) -> Result<SpgmrStats> {
    let n = b.len();
    assert_eq!(x.len(), n);
    let mut iterations = 0usize;

    // r = P_left⁻¹ (b - A x)
    let mut tmp = vec![0.0; n];
    let mut r = vec![0.0; n];
    let residual_of = |atimes: &mut dyn FnMut(&[f64], &mut [f64]) -> Result<()>,
                       prec: &mut Preconditioner,
                       x: &[f64],
                       r: &mut [f64],
                       tmp: &mut [f64]|
     -> Result<()> {
        atimes(x, tmp)?;
        for i in 0..x.len() {
            tmp[i] = b[i] - tmp[i];
        }
        if prec.has_left() {
            prec.apply(tmp, r, PrecSide::Left)?;
        } else {
            r.copy_from_slice(tmp);
        }
        Ok(())
    };

    residual_of(atimes, prec, x, &mut r, &mut tmp)?;
    let mut beta = l2_norm(&r);
    if beta <= tol {
        return Ok(SpgmrStats { iterations: 0, restarts: 0, residual: beta });
    }

    for restart in 0..=max_restarts {
        let restarts_used = restart;
        // Arnoldi basis, Hessenberg column storage, Givens rotations
        let mut v: Vec<Vec<f64>> = Vec::with_capacity(maxl + 1);
        let mut hcols: Vec<Vec<f64>> = Vec::with_capacity(maxl);
        let mut cs = vec![0.0; maxl];
        let mut sn = vec![0.0; maxl];
        let mut g = vec![0.0; maxl + 1];
        g[0] = beta;
        v.push(r.iter().map(|&ri| ri / beta).collect());

        let mut rho = beta;
        let mut k = 0usize;
        while k < maxl {
            // w = P_left⁻¹ A P_right⁻¹ v_k
            let z: Vec<f64> = if prec.has_right() {
                let mut z = vec![0.0; n];
                prec.apply(&v[k], &mut z, PrecSide::Right)?;
                z
            } else {
                v[k].clone()
            };
            atimes(&z, &mut tmp)?;
            let mut w = if prec.has_left() {
                let mut w = vec![0.0; n];
                prec.apply(&tmp, &mut w, PrecSide::Left)?;
                w
            } else {
                tmp.clone()
            };
            iterations += 1;

            // orthogonalize against the basis
            let mut h = vec![0.0; k + 2];
            match gs_type {
                GsType::Modified => {
                    for (j, vj) in v.iter().enumerate() {
                        let hjk = dot(&w, vj);
                        h[j] = hjk;
                        for i in 0..n {
                            w[i] -= hjk * vj[i];
                        }
                    }
                }
                GsType::Classical => {
                    for (j, vj) in v.iter().enumerate() {
                        h[j] = dot(&w, vj);
                    }
                    for (j, vj) in v.iter().enumerate() {
                        let hjk = h[j];
                        for i in 0..n {
                            w[i] -= hjk * vj[i];
                        }
                    }
                }
            }
            let wnorm = l2_norm(&w);
            h[k + 1] = wnorm;
            if wnorm > 0.0 {
                v.push(w.iter().map(|&wi| wi / wnorm).collect());
            } else {
                v.push(vec![0.0; n]);
            }

            // apply accumulated rotations to the new column
            for j in 0..k {
                let t = cs[j] * h[j] + sn[j] * h[j + 1];
                h[j + 1] = -sn[j] * h[j] + cs[j] * h[j + 1];
                h[j] = t;
            }
            let denom = (h[k] * h[k] + h[k + 1] * h[k + 1]).sqrt();
            if denom == 0.0 {
                cs[k] = 1.0;
                sn[k] = 0.0;
            } else {
                cs[k] = h[k] / denom;
                sn[k] = h[k + 1] / denom;
            }
            h[k] = denom;
            h[k + 1] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            hcols.push(h);
            k += 1;
            rho = g[k].abs();
            if rho <= tol {
                break;
            }
        }

        // back-solve the k-by-k triangular system and form the correction
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let mut s = g[i];
            for (j, yj) in y.iter().enumerate().skip(i + 1) {
                s -= hcols[j][i] * yj;
            }
            let hii = hcols[i][i];
            if hii == 0.0 {
                return Err(Error::ConvergenceFailure { residual: rho });
            }
            y[i] = s / hii;
        }
        let mut xcor = vec![0.0; n];
        for (j, yj) in y.iter().enumerate() {
            for i in 0..n {
                xcor[i] += yj * v[j][i];
            }
        }
        if prec.has_right() {
            let mut z = vec![0.0; n];
            prec.apply(&xcor, &mut z, PrecSide::Right)?;
            xcor = z;
        }
        for i in 0..n {
            x[i] += xcor[i];
        }

        if rho <= tol {
            return Ok(SpgmrStats { iterations, restarts: restarts_used, residual: rho });
        }
        // recompute the true residual before restarting
        residual_of(atimes, prec, x, &mut r, &mut tmp)?;
        beta = l2_norm(&r);
        if beta <= tol {
            return Ok(SpgmrStats { iterations, restarts: restarts_used, residual: beta });
        }
    }
    Err(Error::ConvergenceFailure { residual: beta })
}

// ---------------------------------------------------------------------------
// Attachment
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub(crate) enum AttachedSolver {
    Direct(DirectSolver),
    Iterative(IterativeSolver),
}

/// Proof of a successful, exclusive attachment; consumed by session init.
pub struct AttachToken {
    pub(crate) solver: AttachedSolver,
}

impl AttachToken {
    /// The direct solver behind the token, if it is one.
    pub(crate) fn direct(&self) -> Option<&DirectSolver> {
        match &self.solver {
            AttachedSolver::Direct(d) => Some(d),
            AttachedSolver::Iterative(_) => None,
        }
    }

    pub(crate) fn iterative(&self) -> Option<&IterativeSolver> {
        match &self.solver {
            AttachedSolver::Iterative(s) => Some(s),
            AttachedSolver::Direct(_) => None,
        }
    }
}

/// Half-bandwidths for the difference-quotient banded preconditioner used
/// with SPGMR sessions over serial-representation vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BandedPrecSpec {
    pub mu: usize,
    pub ml: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_matrix(rows: &[&[f64]]) -> Matrix {
        let m = rows.len();
        let n = rows[0].len();
        let mut a = Matrix::dense(m, n);
        let d = a.as_dense_mut().unwrap();
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                d.set(i, j, v);
            }
        }
        a
    }

    fn inf_norm(v: &[f64]) -> f64 {
        v.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    fn residual_inf(a: &Matrix, x: &[f64], b: &[f64]) -> f64 {
        let mut ax = vec![0.0; b.len()];
        a.matvec_slices_for_test(x, &mut ax);
        inf_norm(&ax.iter().zip(b).map(|(p, q)| p - q).collect::<Vec<_>>())
    }

    impl Matrix {
        fn matvec_slices_for_test(&self, x: &[f64], y: &mut [f64]) {
            self.matvec_slices(x, y);
        }
    }

    fn solve_dense(a: &Matrix, b: &[f64]) -> Vec<f64> {
        let s = DirectSolver::dense();
        s.setup(a).unwrap();
        let bv = Vector::serial(b.to_vec());
        let mut xv = Vector::serial(vec![0.0; b.len()]);
        s.solve(&mut xv, &bv).unwrap();
        xv.as_slice().unwrap().to_vec()
    }

    #[test]
    fn dense_lu_diagonal() {
        let a = dense_matrix(&[&[2.0, 0.0], &[0.0, 4.0]]);
        assert_eq!(solve_dense(&a, &[2.0, 4.0]), vec![1.0, 1.0]);
    }

    #[test]
    fn dense_lu_permutation() {
        let a = dense_matrix(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(solve_dense(&a, &[1.0, 2.0]), vec![2.0, 1.0]);
    }

    #[test]
    fn dense_lu_random_residual_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 50;
        let mut a = Matrix::dense(n, n);
        {
            let d = a.as_dense_mut().unwrap();
            for j in 0..n {
                for i in 0..n {
                    d.set(i, j, rng.gen_range(-1.0..1.0));
                }
                // diagonal dominance keeps the condition number modest
                d.set(j, j, d.get(j, j) + n as f64);
            }
        }
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = solve_dense(&a, &b);
        let anorm: f64 = (0..n)
            .map(|i| (0..n).map(|j| a.as_dense().unwrap().get(i, j).abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let bound = 1e-10 * (anorm * inf_norm(&x) + inf_norm(&b));
        assert!(residual_inf(&a, &x, &b) <= bound);
    }

    #[test]
    fn dense_lu_singular_reports_column() {
        let a = dense_matrix(&[&[1.0, 2.0], &[2.0, 4.0]]);
        let s = DirectSolver::dense();
        match s.setup(&a) {
            Err(Error::SingularMatrix { column }) => assert_eq!(column, 1),
            other => panic!("expected singular matrix, got {other:?}"),
        }
    }

    #[test]
    fn band_lu_tridiagonal_constructed_rhs() {
        let n = 10;
        let mut a = Matrix::banded_for_lu(n, 1, 1);
        {
            let b = a.as_banded_mut().unwrap();
            for j in 0..n {
                b.set(j, j, 2.0).unwrap();
                if j > 0 {
                    b.set(j, j - 1, -1.0).unwrap();
                    b.set(j - 1, j, -1.0).unwrap();
                }
            }
        }
        let ones = vec![1.0; n];
        let mut rhs = vec![0.0; n];
        a.matvec_slices_for_test(&ones, &mut rhs);
        let s = DirectSolver::band();
        s.setup(&a).unwrap();
        let bv = Vector::serial(rhs);
        let mut xv = Vector::serial(vec![0.0; n]);
        s.solve(&mut xv, &bv).unwrap();
        for &xi in xv.as_slice().unwrap() {
            assert!((xi - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn band_lu_diagonal_is_elementwise_division() {
        let n = 6;
        let mut a = Matrix::banded(n, 0, 0);
        for j in 0..n {
            a.as_banded_mut().unwrap().set(j, j, (j + 1) as f64).unwrap();
        }
        let s = DirectSolver::band();
        s.setup(&a).unwrap();
        let bv = Vector::serial(vec![1.0; n]);
        let mut xv = Vector::serial(vec![0.0; n]);
        s.solve(&mut xv, &bv).unwrap();
        for (j, &xi) in xv.as_slice().unwrap().iter().enumerate() {
            assert_eq!(xi, 1.0 / (j + 1) as f64);
        }
    }

    #[test]
    fn band_lu_matches_dense_lu() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.gen_range(3..20);
            let mu = rng.gen_range(0..n.min(4));
            let ml = rng.gen_range(0..n.min(4));
            let mut ab = Matrix::banded_for_lu(n, mu, ml);
            {
                let bc = ab.as_banded_mut().unwrap();
                for j in 0..n {
                    let lo = j.saturating_sub(mu);
                    let hi = (j + ml).min(n - 1);
                    for i in lo..=hi {
                        bc.set(i, j, rng.gen_range(-1.0..1.0)).unwrap();
                    }
                    bc.set(j, j, bc.get(j, j) + 5.0).unwrap();
                }
            }
            let ad = Matrix::from_dense(ab.to_dense());
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let xd = solve_dense(&ad, &b);
            let s = DirectSolver::band();
            s.setup(&ab).unwrap();
            let bv = Vector::serial(b);
            let mut xv = Vector::serial(vec![0.0; n]);
            s.solve(&mut xv, &bv).unwrap();
            for (p, q) in xv.as_slice().unwrap().iter().zip(&xd) {
                assert!((p - q).abs() <= 1e-10, "band vs dense mismatch: {p} vs {q}");
            }
        }
    }

    fn random_dd_system(n: usize, seed: u64) -> (Matrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Matrix::dense(n, n);
        {
            let d = a.as_dense_mut().unwrap();
            for j in 0..n {
                for i in 0..n {
                    d.set(i, j, rng.gen_range(-1.0..1.0));
                }
            }
            for i in 0..n {
                let rowsum: f64 = (0..n).filter(|&j| j != i).map(|j| d.get(i, j).abs()).sum();
                d.set(i, i, rowsum + 1.0);
            }
        }
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (a, b)
    }

    #[test]
    fn spgmr_identity_one_iteration() {
        let s = IterativeSolver::spgmr();
        let b = vec![3.0, -1.0, 2.5];
        let mut x = vec![0.0; 3];
        let stats = s
            .solve(
                &mut |v, out| {
                    out.copy_from_slice(v);
                    Ok(())
                },
                &mut Preconditioner::none(),
                &mut x,
                &b,
                1e-12,
            )
            .unwrap();
        assert_eq!(stats.iterations, 1);
        for (p, q) in x.iter().zip(&b) {
            assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn spgmr_matches_dense_lu_on_dd_system() {
        let (a, b) = random_dd_system(50, 3);
        let xd = solve_dense(&a, &b);
        let s = IterativeSolver::spgmr().with_maxl(50);
        let mut x = vec![0.0; 50];
        s.solve(
            &mut |v, out| {
                a.matvec_slices_for_test(v, out);
                Ok(())
            },
            &mut Preconditioner::none(),
            &mut x,
            &b,
            1e-10,
        )
        .unwrap();
        for (p, q) in x.iter().zip(&xd) {
            assert!((p - q).abs() <= 1e-8);
        }
    }

    #[test]
    fn spgmr_exact_inverse_preconditioner_one_iteration() {
        let (a, b) = random_dd_system(20, 9);
        let inv_solver = DirectSolver::dense();
        inv_solver.setup(&a).unwrap();
        let s = IterativeSolver::spgmr();
        let mut x = vec![0.0; 20];
        let mut prec = Preconditioner::new(PrecSide::Left, |r, z, _| {
            let rv = Vector::serial(r.to_vec());
            let mut zv = Vector::serial(vec![0.0; r.len()]);
            inv_solver.solve(&mut zv, &rv)?;
            z.copy_from_slice(zv.as_slice().unwrap());
            Ok(())
        });
        let stats = s
            .solve(
                &mut |v, out| {
                    a.matvec_slices_for_test(v, out);
                    Ok(())
                },
                &mut prec,
                &mut x,
                &b,
                1e-9,
            )
            .unwrap();
        assert_eq!(stats.iterations, 1);
        assert!(residual_inf(&a, &x, &b) <= 1e-8);
    }

    #[test]
    fn spgmr_gs_types_agree() {
        let (a, b) = random_dd_system(30, 21);
        let mut sols = Vec::new();
        for gs in [GsType::Modified, GsType::Classical] {
            let s = IterativeSolver::spgmr().with_maxl(30).with_gs_type(gs);
            let mut x = vec![0.0; 30];
            s.solve(
                &mut |v, out| {
                    a.matvec_slices_for_test(v, out);
                    Ok(())
                },
                &mut Preconditioner::none(),
                &mut x,
                &b,
                1e-12,
            )
            .unwrap();
            sols.push(x);
        }
        for (p, q) in sols[0].iter().zip(&sols[1]) {
            assert!((p - q).abs() <= 1e-8);
        }
    }

    #[test]
    fn spgmr_nonconvergence_reports_residual() {
        // hard rotation-like system, tiny Krylov space, no restarts
        let n = 40;
        let mut a = Matrix::dense(n, n);
        {
            let d = a.as_dense_mut().unwrap();
            for i in 0..n {
                d.set(i, (i + 1) % n, 1.0);
            }
        }
        let b = {
            let mut b = vec![0.0; n];
            b[0] = 1.0;
            b
        };
        let s = IterativeSolver::spgmr().with_maxl(2);
        let mut x = vec![0.0; n];
        match s.solve(
            &mut |v, out| {
                a.matvec_slices_for_test(v, out);
                Ok(())
            },
            &mut Preconditioner::none(),
            &mut x,
            &b,
            1e-14,
        ) {
            Err(Error::ConvergenceFailure { residual }) => assert!(residual > 0.0),
            other => panic!("expected convergence failure, got {other:?}"),
        }
    }

    #[test]
    fn attach_twice_errors_and_is_permanent() {
        let s = DirectSolver::dense();
        let token = s.attach().unwrap();
        assert!(matches!(s.attach(), Err(Error::AlreadyAttached)));
        drop(token);
        // attachment survives token teardown
        assert!(matches!(s.attach(), Err(Error::AlreadyAttached)));

        let it = IterativeSolver::spgmr();
        let _t = it.attach().unwrap();
        assert!(matches!(it.attach(), Err(Error::AlreadyAttached)));
    }

    #[test]
    fn custom_dls_round_trip_and_delegation() {
        struct St {
            marker: u64,
            factors: DenseContent,
            piv: Vec<usize>,
            setups: usize,
        }
        let ops: DlsOps<St> = DlsOps {
            init: |_s| Ok(()),
            setup: |s, a| {
                let d = a.as_dense().expect("dense storage");
                s.factors = d.clone();
                s.piv.resize(d.n, 0);
                s.setups += 1;
                dense_lu_factor(&mut s.factors, &mut s.piv)
            },
            solve: |s, _a, x, b| {
                let bs = b.as_slice().unwrap().to_vec();
                let xs = x.as_mut_slice().unwrap();
                xs.copy_from_slice(&bs);
                dense_lu_solve(&s.factors, &s.piv, xs);
                Ok(())
            },
            work_space: Some(|s| (s.factors.data.len(), s.piv.len())),
        };
        let storage = Matrix::dense(2, 2);
        let st = St { marker: 0xC0FFEE, factors: DenseContent::zeros(0, 0), piv: vec![], setups: 0 };
        let solver = DirectSolver::make_custom(ops, st, storage).unwrap();

        // unwrap round trip
        let marker = solver.with_custom_state::<St, _>(|s| s.marker).unwrap();
        assert_eq!(marker, 0xC0FFEE);

        // unwrap on a built-in solver is a variant error
        let builtin = DirectSolver::dense();
        assert!(matches!(
            builtin.with_custom_state::<St, _>(|_| ()),
            Err(Error::Variant(_))
        ));

        // delegated solve matches the built-in result exactly
        let a = dense_matrix(&[&[4.0, 1.0], &[2.0, 3.0]]);
        solver.setup(&a).unwrap();
        let bv = Vector::serial(vec![1.0, 2.0]);
        let mut xv = Vector::serial(vec![0.0; 2]);
        solver.solve(&mut xv, &bv).unwrap();
        let expect = solve_dense(&a, &[1.0, 2.0]);
        assert_eq!(xv.as_slice().unwrap(), &expect[..]);
        assert_eq!(solver.with_custom_state::<St, _>(|s| s.setups).unwrap(), 1);
    }

    #[test]
    fn builtin_solve_rejects_custom_vectors() {
        use crate::vector::VectorOps;
        let a = dense_matrix(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let s = DirectSolver::dense();
        s.setup(&a).unwrap();
        let b = Vector::make_custom(VectorOps::over_f64_vec(), vec![1.0, 2.0]);
        let mut x = Vector::serial(vec![0.0; 2]);
        assert!(matches!(
            s.solve(&mut x, &b),
            Err(Error::Incompatible { property: "representation", .. })
        ));
    }
}
