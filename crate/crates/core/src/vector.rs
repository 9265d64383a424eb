//! Backend-abstracted real vectors.
//!
//! A [`Vector`] couples a contiguous payload of `f64` scalars with a backend
//! tag. The `Serial` and `Threaded` backends share a raw-array
//! representation (`Threaded` is substitutable wherever raw access is
//! required); `Custom` backends carry a user-supplied operation table and an
//! opaque payload, and are never substitutable for `Serial`.
//!
//! Reductions evaluate low-to-high index with a single accumulator so that
//! results are reproducible bit-for-bit across the serial and custom paths.
//! The threaded backend partitions the index range into equal contiguous
//! chunks and combines per-chunk partials in chunk order.

use std::any::{Any, TypeId};
use std::fmt;

use crate::error::{Error, Result};

/// Identifies a vector backend family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendId {
    Serial,
    Threaded,
    Custom(CustomFamily),
}

/// Identity of a custom backend family (one per payload type).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CustomFamily(TypeId);

impl BackendId {
    /// True when the backend exposes the raw contiguous-array
    /// representation (Serial and Threaded).
    pub fn is_serial_repr(&self) -> bool {
        matches!(self, BackendId::Serial | BackendId::Threaded)
    }
}

/// Per-operation callbacks for a custom backend over payload type `P`.
///
/// All fields are mandatory, so a custom vector can never lack a capability
/// at the point of use.
pub struct VectorOps<P> {
    pub len: fn(&P) -> usize,
    pub check: fn(&P, &P) -> bool,
    pub clone: fn(&P) -> P,
    pub linear_sum: fn(f64, &P, f64, &P, &mut P),
    pub const_fill: fn(f64, &mut P),
    pub product: fn(&P, &P, &mut P),
    pub quotient: fn(&P, &P, &mut P),
    pub scale: fn(f64, &P, &mut P),
    pub abs: fn(&P, &mut P),
    pub invert: fn(&P, &mut P),
    pub add_constant: fn(&P, f64, &mut P),
    pub dot_product: fn(&P, &P) -> f64,
    pub max_norm: fn(&P) -> f64,
    pub wrms_norm: fn(&P, &P) -> f64,
    pub weighted_l2_norm: fn(&P, &P) -> f64,
    pub l1_norm: fn(&P) -> f64,
    pub min_element: fn(&P) -> f64,
    pub compare_threshold: fn(f64, &P, &mut P),
    pub invert_with_test: fn(&P, &mut P) -> bool,
    pub constraint_mask: fn(&P, &P, &mut P) -> bool,
    pub min_quotient: fn(&P, &P) -> f64,
}

impl<P> Clone for VectorOps<P> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<P> Copy for VectorOps<P> {}

impl VectorOps<Vec<f64>> {
    /// The standard elementwise formulas over a plain `Vec<f64>`, identical
    /// in evaluation order to the serial backend. Useful as a starting point
    /// for custom backends and in equivalence tests.
    pub fn over_f64_vec() -> VectorOps<Vec<f64>> {
        use kernels as k;
        VectorOps {
            len: |p| p.len(),
            check: |a, b| a.len() == b.len(),
            clone: |p| p.clone(),
            linear_sum: |a, x, b, y, z| k::linear_sum(a, x, b, y, z),
            const_fill: |c, z| k::const_fill(c, z),
            product: |x, y, z| k::product(x, y, z),
            quotient: |x, y, z| k::quotient(x, y, z),
            scale: |c, x, z| k::scale(c, x, z),
            abs: |x, z| k::abs(x, z),
            invert: |x, z| k::invert(x, z),
            add_constant: |x, b, z| k::add_constant(x, b, z),
            dot_product: |x, y| k::dot(x, y),
            max_norm: |x| k::abs_max(x),
            wrms_norm: |x, w| (k::weighted_sum_sq(x, w) / x.len() as f64).sqrt(),
            weighted_l2_norm: |x, w| k::weighted_sum_sq(x, w).sqrt(),
            l1_norm: |x| k::sum_abs(x),
            min_element: |x| k::min(x),
            compare_threshold: |c, x, z| k::compare_threshold(c, x, z),
            invert_with_test: |x, z| k::invert_with_test(x, z),
            constraint_mask: |c, x, m| k::constraint_mask(c, x, m),
            min_quotient: |n, d| k::min_quotient(n, d),
        }
    }
}

/// Elementwise and reduction kernels over raw slices. Single accumulator,
/// low-to-high index.
pub(crate) mod kernels {
    pub fn linear_sum(a: f64, x: &[f64], b: f64, y: &[f64], z: &mut [f64]) {
        for i in 0..z.len() {
            z[i] = a * x[i] + b * y[i];
        }
    }
    pub fn const_fill(c: f64, z: &mut [f64]) {
        for zi in z.iter_mut() {
            *zi = c;
        }
    }
    pub fn product(x: &[f64], y: &[f64], z: &mut [f64]) {
        for i in 0..z.len() {
            z[i] = x[i] * y[i];
        }
    }
    pub fn quotient(x: &[f64], y: &[f64], z: &mut [f64]) {
        for i in 0..z.len() {
            z[i] = x[i] / y[i];
        }
    }
    pub fn scale(c: f64, x: &[f64], z: &mut [f64]) {
        for i in 0..z.len() {
            z[i] = c * x[i];
        }
    }
    pub fn abs(x: &[f64], z: &mut [f64]) {
        for i in 0..z.len() {
            z[i] = x[i].abs();
        }
    }
    pub fn invert(x: &[f64], z: &mut [f64]) {
        for i in 0..z.len() {
            z[i] = 1.0 / x[i];
        }
    }
    pub fn add_constant(x: &[f64], b: f64, z: &mut [f64]) {
        for i in 0..z.len() {
            z[i] = x[i] + b;
        }
    }
    pub fn dot(x: &[f64], y: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..x.len() {
            acc += x[i] * y[i];
        }
        acc
    }
    pub fn abs_max(x: &[f64]) -> f64 {
        let mut acc = 0.0f64;
        for &xi in x {
            let a = xi.abs();
            if a > acc {
                acc = a;
            }
        }
        acc
    }
    pub fn weighted_sum_sq(x: &[f64], w: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..x.len() {
            let t = x[i] * w[i];
            acc += t * t;
        }
        acc
    }
    pub fn sum_abs(x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for &xi in x {
            acc += xi.abs();
        }
        acc
    }
    pub fn min(x: &[f64]) -> f64 {
        let mut acc = x[0];
        for &xi in &x[1..] {
            if xi < acc {
                acc = xi;
            }
        }
        acc
    }
    pub fn compare_threshold(c: f64, x: &[f64], z: &mut [f64]) {
        for i in 0..z.len() {
            z[i] = if x[i].abs() >= c { 1.0 } else { 0.0 };
        }
    }
    pub fn invert_with_test(x: &[f64], z: &mut [f64]) -> bool {
        let mut ok = true;
        for i in 0..x.len() {
            if x[i] == 0.0 {
                ok = false;
            } else {
                z[i] = 1.0 / x[i];
            }
        }
        ok
    }
    pub fn constraint_mask(c: &[f64], x: &[f64], m: &mut [f64]) -> bool {
        let mut ok = true;
        for i in 0..x.len() {
            m[i] = 0.0;
            if c[i] == 0.0 {
                continue;
            }
            let violated = if c[i].abs() > 1.5 {
                x[i] * c[i] <= 0.0
            } else {
                x[i] * c[i] < 0.0
            };
            if violated {
                m[i] = 1.0;
                ok = false;
            }
        }
        ok
    }
    pub fn min_quotient(num: &[f64], den: &[f64]) -> f64 {
        let mut acc = f64::MAX;
        for i in 0..num.len() {
            if den[i] != 0.0 {
                let q = num[i] / den[i];
                if q < acc {
                    acc = q;
                }
            }
        }
        acc
    }
}

/// Object-safe facade over a custom backend instance.
trait DynVec: Send {
    fn len(&self) -> usize;
    fn family(&self) -> CustomFamily;
    fn check_against(&self, other: &dyn DynVec) -> bool;
    fn clone_dyn(&self) -> Box<dyn DynVec>;
    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;

    fn linear_sum(&mut self, a: f64, x: &dyn DynVec, b: f64, y: &dyn DynVec);
    fn linear_sum_in_self(&mut self, a: f64, b: f64, y: &dyn DynVec);
    fn const_fill(&mut self, c: f64);
    fn product(&mut self, x: &dyn DynVec, y: &dyn DynVec);
    fn quotient(&mut self, x: &dyn DynVec, y: &dyn DynVec);
    fn scale(&mut self, c: f64, x: &dyn DynVec);
    fn scale_in_self(&mut self, c: f64);
    fn abs(&mut self, x: &dyn DynVec);
    fn invert(&mut self, x: &dyn DynVec);
    fn add_constant(&mut self, x: &dyn DynVec, b: f64);
    fn dot_product(&self, y: &dyn DynVec) -> f64;
    fn max_norm(&self) -> f64;
    fn wrms_norm(&self, w: &dyn DynVec) -> f64;
    fn weighted_l2_norm(&self, w: &dyn DynVec) -> f64;
    fn l1_norm(&self) -> f64;
    fn min_element(&self) -> f64;
    fn compare_threshold(&mut self, c: f64, x: &dyn DynVec);
    fn invert_with_test(&mut self, x: &dyn DynVec) -> bool;
    fn constraint_mask(&mut self, c: &dyn DynVec, x: &dyn DynVec) -> bool;
    fn min_quotient(&self, den: &dyn DynVec) -> f64;
}

struct CustomVec<P: Send + 'static> {
    ops: VectorOps<P>,
    payload: P,
}

impl<P: Send + 'static> CustomVec<P> {
    fn peer<'a>(&self, other: &'a dyn DynVec) -> &'a P {
        &other
            .as_any()
            .downcast_ref::<CustomVec<P>>()
            .expect("custom vector family mismatch after compatibility check")
            .payload
    }
}

impl<P: Send + 'static> DynVec for CustomVec<P> {
    fn len(&self) -> usize {
        (self.ops.len)(&self.payload)
    }
    fn family(&self) -> CustomFamily {
        CustomFamily(TypeId::of::<P>())
    }
    fn check_against(&self, other: &dyn DynVec) -> bool {
        match other.as_any().downcast_ref::<CustomVec<P>>() {
            Some(o) => (self.ops.check)(&self.payload, &o.payload),
            None => false,
        }
    }
    fn clone_dyn(&self) -> Box<dyn DynVec> {
        Box::new(CustomVec { ops: self.ops, payload: (self.ops.clone)(&self.payload) })
    }
    fn as_any(&self) -> &dyn Any {
        self
    }
    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }

    fn linear_sum(&mut self, a: f64, x: &dyn DynVec, b: f64, y: &dyn DynVec) {
        (self.ops.linear_sum)(a, self.peer(x), b, self.peer(y), &mut self.payload);
    }
    fn linear_sum_in_self(&mut self, a: f64, b: f64, y: &dyn DynVec) {
        let tmp = (self.ops.clone)(&self.payload);
        (self.ops.linear_sum)(a, &tmp, b, self.peer(y), &mut self.payload);
    }
    fn const_fill(&mut self, c: f64) {
        (self.ops.const_fill)(c, &mut self.payload);
    }
    fn product(&mut self, x: &dyn DynVec, y: &dyn DynVec) {
        (self.ops.product)(self.peer(x), self.peer(y), &mut self.payload);
    }
    fn quotient(&mut self, x: &dyn DynVec, y: &dyn DynVec) {
        (self.ops.quotient)(self.peer(x), self.peer(y), &mut self.payload);
    }
    fn scale(&mut self, c: f64, x: &dyn DynVec) {
        (self.ops.scale)(c, self.peer(x), &mut self.payload);
    }
    fn scale_in_self(&mut self, c: f64) {
        let tmp = (self.ops.clone)(&self.payload);
        (self.ops.scale)(c, &tmp, &mut self.payload);
    }
    fn abs(&mut self, x: &dyn DynVec) {
        (self.ops.abs)(self.peer(x), &mut self.payload);
    }
    fn invert(&mut self, x: &dyn DynVec) {
        (self.ops.invert)(self.peer(x), &mut self.payload);
    }
    fn add_constant(&mut self, x: &dyn DynVec, b: f64) {
        (self.ops.add_constant)(self.peer(x), b, &mut self.payload);
    }
    fn dot_product(&self, y: &dyn DynVec) -> f64 {
        (self.ops.dot_product)(&self.payload, self.peer(y))
    }
    fn max_norm(&self) -> f64 {
        (self.ops.max_norm)(&self.payload)
    }
    fn wrms_norm(&self, w: &dyn DynVec) -> f64 {
        (self.ops.wrms_norm)(&self.payload, self.peer(w))
    }
    fn weighted_l2_norm(&self, w: &dyn DynVec) -> f64 {
        (self.ops.weighted_l2_norm)(&self.payload, self.peer(w))
    }
    fn l1_norm(&self) -> f64 {
        (self.ops.l1_norm)(&self.payload)
    }
    fn min_element(&self) -> f64 {
        (self.ops.min_element)(&self.payload)
    }
    fn compare_threshold(&mut self, c: f64, x: &dyn DynVec) {
        (self.ops.compare_threshold)(c, self.peer(x), &mut self.payload);
    }
    fn invert_with_test(&mut self, x: &dyn DynVec) -> bool {
        (self.ops.invert_with_test)(self.peer(x), &mut self.payload)
    }
    fn constraint_mask(&mut self, c: &dyn DynVec, x: &dyn DynVec) -> bool {
        (self.ops.constraint_mask)(self.peer(c), self.peer(x), &mut self.payload)
    }
    fn min_quotient(&self, den: &dyn DynVec) -> f64 {
        (self.ops.min_quotient)(&self.payload, self.peer(den))
    }
}

/// Threaded (chunk-parallel) payload.
struct ThreadedData {
    data: Vec<f64>,
    chunks: usize,
}

// Below this length, chunk work is done on the calling thread (the chunk
// structure of reductions is preserved either way).
const PAR_MIN_LEN: usize = 16 * 1024;

fn chunk_bounds(n: usize, chunks: usize) -> Vec<(usize, usize)> {
    let chunks = chunks.max(1).min(n.max(1));
    let base = n / chunks;
    let rem = n % chunks;
    let mut out = Vec::with_capacity(chunks);
    let mut start = 0;
    for c in 0..chunks {
        let len = base + usize::from(c < rem);
        out.push((start, start + len));
        start += len;
    }
    out
}

fn chunked_fill(z: &mut [f64], chunks: usize, f: impl Fn(&mut [f64]) + Sync + Send + Copy) {
    let bounds = chunk_bounds(z.len(), chunks);
    if z.len() >= PAR_MIN_LEN && bounds.len() > 1 {
        std::thread::scope(|s| {
            let mut rest = z;
            let mut off = 0;
            for &(lo, hi) in &bounds {
                let (head, tail) = rest.split_at_mut(hi - off);
                let _ = lo;
                rest = tail;
                off = hi;
                s.spawn(move || f(head));
            }
        });
    } else {
        for &(lo, hi) in &bounds {
            f(&mut z[lo..hi]);
        }
    }
}

fn chunked_map2(
    x: &[f64],
    y: &[f64],
    z: &mut [f64],
    chunks: usize,
    f: impl Fn(&[f64], &[f64], &mut [f64]) + Sync + Send + Copy,
) {
    let bounds = chunk_bounds(z.len(), chunks);
    if z.len() >= PAR_MIN_LEN && bounds.len() > 1 {
        std::thread::scope(|s| {
            let mut rest = z;
            let mut off = 0;
            for &(lo, hi) in &bounds {
                let (head, tail) = rest.split_at_mut(hi - off);
                rest = tail;
                off = hi;
                let xs = &x[lo..hi];
                let ys = &y[lo..hi];
                s.spawn(move || f(xs, ys, head));
            }
        });
    } else {
        for &(lo, hi) in &bounds {
            f(&x[lo..hi], &y[lo..hi], &mut z[lo..hi]);
        }
    }
}

fn chunked_reduce2(
    x: &[f64],
    y: &[f64],
    chunks: usize,
    map: impl Fn(&[f64], &[f64]) -> f64 + Sync + Send + Copy,
    combine: impl Fn(f64, f64) -> f64,
    init: f64,
) -> f64 {
    let bounds = chunk_bounds(x.len(), chunks);
    let partials: Vec<f64> = if x.len() >= PAR_MIN_LEN && bounds.len() > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = bounds
                .iter()
                .map(|&(lo, hi)| {
                    let xs = &x[lo..hi];
                    let ys = &y[lo..hi];
                    s.spawn(move || map(xs, ys))
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        })
    } else {
        bounds.iter().map(|&(lo, hi)| map(&x[lo..hi], &y[lo..hi])).collect()
    };
    // combine per-chunk partials in chunk order
    partials.into_iter().fold(init, combine)
}

enum Repr {
    Serial(Vec<f64>),
    Threaded(ThreadedData),
    Custom(Box<dyn DynVec>),
}

/// A backend-tagged, length-carrying container of real scalars.
pub struct Vector {
    repr: Repr,
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.repr {
            Repr::Serial(d) => write!(f, "Vector::Serial({:?})", d),
            Repr::Threaded(t) => {
                write!(f, "Vector::Threaded(chunks={}, {:?})", t.chunks, t.data)
            }
            Repr::Custom(c) => write!(f, "Vector::Custom(len={})", c.len()),
        }
    }
}

impl Clone for Vector {
    fn clone(&self) -> Self {
        let repr = match &self.repr {
            Repr::Serial(d) => Repr::Serial(d.clone()),
            Repr::Threaded(t) => {
                Repr::Threaded(ThreadedData { data: t.data.clone(), chunks: t.chunks })
            }
            Repr::Custom(c) => Repr::Custom(c.clone_dyn()),
        };
        Vector { repr }
    }
}

impl Vector {
    pub fn serial(data: impl Into<Vec<f64>>) -> Vector {
        Vector { repr: Repr::Serial(data.into()) }
    }

    /// A serial vector of `n` copies of `c`.
    pub fn filled(n: usize, c: f64) -> Vector {
        Vector::serial(vec![c; n])
    }

    /// A threaded vector over `chunks` contiguous index ranges.
    pub fn threaded(data: impl Into<Vec<f64>>, chunks: usize) -> Vector {
        Vector { repr: Repr::Threaded(ThreadedData { data: data.into(), chunks: chunks.max(1) }) }
    }

    /// Wraps `payload` as a custom-backend vector dispatching to `ops`.
    pub fn make_custom<P: Send + 'static>(ops: VectorOps<P>, payload: P) -> Vector {
        Vector { repr: Repr::Custom(Box::new(CustomVec { ops, payload })) }
    }

    /// Retrieves the payload of a custom vector (the unwrap direction of
    /// `make_custom`).
    pub fn custom_payload<P: Send + 'static>(&self) -> Result<&P> {
        match &self.repr {
            Repr::Custom(c) => c
                .as_any()
                .downcast_ref::<CustomVec<P>>()
                .map(|cv| &cv.payload)
                .ok_or_else(|| Error::Variant("custom payload type mismatch".into())),
            _ => Err(Error::Variant("not a custom vector".into())),
        }
    }

    pub fn custom_payload_mut<P: Send + 'static>(&mut self) -> Result<&mut P> {
        match &mut self.repr {
            Repr::Custom(c) => c
                .as_any_mut()
                .downcast_mut::<CustomVec<P>>()
                .map(|cv| &mut cv.payload)
                .ok_or_else(|| Error::Variant("custom payload type mismatch".into())),
            _ => Err(Error::Variant("not a custom vector".into())),
        }
    }

    pub fn backend(&self) -> BackendId {
        match &self.repr {
            Repr::Serial(_) => BackendId::Serial,
            Repr::Threaded(_) => BackendId::Threaded,
            Repr::Custom(c) => BackendId::Custom(c.family()),
        }
    }

    pub fn len(&self) -> usize {
        match &self.repr {
            Repr::Serial(d) => d.len(),
            Repr::Threaded(t) => t.data.len(),
            Repr::Custom(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Raw element access; available only for serial-representation
    /// backends (Serial and Threaded).
    pub fn as_slice(&self) -> Option<&[f64]> {
        match &self.repr {
            Repr::Serial(d) => Some(d),
            Repr::Threaded(t) => Some(&t.data),
            Repr::Custom(_) => None,
        }
    }

    pub fn as_mut_slice(&mut self) -> Option<&mut [f64]> {
        match &mut self.repr {
            Repr::Serial(d) => Some(d),
            Repr::Threaded(t) => Some(&mut t.data),
            Repr::Custom(_) => None,
        }
    }

    /// True iff the two vectors may appear in the same operation: equal
    /// serial-representation backends (Threaded counts as Serial), equal
    /// lengths, and for custom backends the same family plus an accepting
    /// check callback.
    pub fn compatible(&self, other: &Vector) -> bool {
        match (&self.repr, &other.repr) {
            (Repr::Custom(a), Repr::Custom(b)) => {
                a.family() == b.family() && a.len() == b.len() && a.check_against(b.as_ref())
            }
            (Repr::Custom(_), _) | (_, Repr::Custom(_)) => false,
            _ => self.len() == other.len(),
        }
    }

    fn require_compatible(&self, other: &Vector) -> Result<()> {
        if self.backend().is_serial_repr() != other.backend().is_serial_repr()
            || matches!((&self.repr, &other.repr), (Repr::Custom(a), Repr::Custom(b)) if a.family() != b.family())
        {
            return Err(Error::Incompatible {
                property: "backend",
                detail: format!("{:?} vs {:?}", self.backend(), other.backend()),
            });
        }
        if self.len() != other.len() {
            return Err(Error::Incompatible {
                property: "length",
                detail: format!("{} vs {}", self.len(), other.len()),
            });
        }
        if let (Repr::Custom(a), Repr::Custom(b)) = (&self.repr, &other.repr) {
            if !a.check_against(b.as_ref()) {
                return Err(Error::Incompatible {
                    property: "custom check",
                    detail: "custom check callback rejected the pair".into(),
                });
            }
        }
        Ok(())
    }

    fn require_nonempty(&self, what: &str) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Domain(format!("{what} is undefined on a zero-length vector")));
        }
        Ok(())
    }

    /// z = a*x + b*y.
    pub fn linear_sum(a: f64, x: &Vector, b: f64, y: &Vector, z: &mut Vector) -> Result<()> {
        x.require_compatible(y)?;
        x.require_compatible(z)?;
        match (&x.repr, &y.repr, &mut z.repr) {
            (Repr::Custom(xc), Repr::Custom(yc), Repr::Custom(zc)) => {
                zc.linear_sum(a, xc.as_ref(), b, yc.as_ref());
            }
            _ => {
                let xs = x.as_slice().unwrap();
                let ys = y.as_slice().unwrap();
                match &mut z.repr {
                    Repr::Serial(zs) => kernels::linear_sum(a, xs, b, ys, zs),
                    Repr::Threaded(t) => chunked_map2(xs, ys, &mut t.data, t.chunks, |x, y, z| {
                        kernels::linear_sum(a, x, b, y, z)
                    }),
                    Repr::Custom(_) => unreachable!(),
                }
            }
        }
        Ok(())
    }

    /// self = a*self + b*y (the aliased form of `linear_sum`).
    pub fn linear_sum_in_place(&mut self, a: f64, b: f64, y: &Vector) -> Result<()> {
        self.require_compatible(y)?;
        match (&mut self.repr, &y.repr) {
            (Repr::Custom(zc), Repr::Custom(yc)) => zc.linear_sum_in_self(a, b, yc.as_ref()),
            (Repr::Serial(zs), _) => {
                let ys = y.as_slice().unwrap();
                for i in 0..zs.len() {
                    zs[i] = a * zs[i] + b * ys[i];
                }
            }
            (Repr::Threaded(t), _) => {
                let ys = y.as_slice().unwrap();
                let bounds = chunk_bounds(t.data.len(), t.chunks);
                for &(lo, hi) in &bounds {
                    for i in lo..hi {
                        t.data[i] = a * t.data[i] + b * ys[i];
                    }
                }
            }
            _ => unreachable!(),
        }
        Ok(())
    }

    pub fn const_fill(&mut self, c: f64) {
        match &mut self.repr {
            Repr::Serial(d) => kernels::const_fill(c, d),
            Repr::Threaded(t) => {
                chunked_fill(&mut t.data, t.chunks, |z| kernels::const_fill(c, z))
            }
            Repr::Custom(cv) => cv.const_fill(c),
        }
    }

    pub fn product(x: &Vector, y: &Vector, z: &mut Vector) -> Result<()> {
        x.require_compatible(y)?;
        x.require_compatible(z)?;
        match (&x.repr, &y.repr, &mut z.repr) {
            (Repr::Custom(xc), Repr::Custom(yc), Repr::Custom(zc)) => {
                zc.product(xc.as_ref(), yc.as_ref())
            }
            _ => {
                let (xs, ys) = (x.as_slice().unwrap(), y.as_slice().unwrap());
                match &mut z.repr {
                    Repr::Serial(zs) => kernels::product(xs, ys, zs),
                    Repr::Threaded(t) => chunked_map2(xs, ys, &mut t.data, t.chunks, kernels::product),
                    Repr::Custom(_) => unreachable!(),
                }
            }
        }
        Ok(())
    }

    pub fn quotient(x: &Vector, y: &Vector, z: &mut Vector) -> Result<()> {
        x.require_compatible(y)?;
        x.require_compatible(z)?;
        match (&x.repr, &y.repr, &mut z.repr) {
            (Repr::Custom(xc), Repr::Custom(yc), Repr::Custom(zc)) => {
                zc.quotient(xc.as_ref(), yc.as_ref())
            }
            _ => {
                let (xs, ys) = (x.as_slice().unwrap(), y.as_slice().unwrap());
                match &mut z.repr {
                    Repr::Serial(zs) => kernels::quotient(xs, ys, zs),
                    Repr::Threaded(t) => {
                        chunked_map2(xs, ys, &mut t.data, t.chunks, kernels::quotient)
                    }
                    Repr::Custom(_) => unreachable!(),
                }
            }
        }
        Ok(())
    }

    pub fn scale(c: f64, x: &Vector, z: &mut Vector) -> Result<()> {
        x.require_compatible(z)?;
        match (&x.repr, &mut z.repr) {
            (Repr::Custom(xc), Repr::Custom(zc)) => zc.scale(c, xc.as_ref()),
            _ => {
                let xs = x.as_slice().unwrap();
                match &mut z.repr {
                    Repr::Serial(zs) => kernels::scale(c, xs, zs),
                    Repr::Threaded(t) => chunked_map2(xs, xs, &mut t.data, t.chunks, |x, _, z| {
                        kernels::scale(c, x, z)
                    }),
                    Repr::Custom(_) => unreachable!(),
                }
            }
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, c: f64) {
        match &mut self.repr {
            Repr::Serial(d) => {
                for v in d.iter_mut() {
                    *v *= c;
                }
            }
            Repr::Threaded(t) => chunked_fill(&mut t.data, t.chunks, |z| {
                for v in z.iter_mut() {
                    *v *= c;
                }
            }),
            Repr::Custom(cv) => cv.scale_in_self(c),
        }
    }

    pub fn abs(x: &Vector, z: &mut Vector) -> Result<()> {
        x.require_compatible(z)?;
        match (&x.repr, &mut z.repr) {
            (Repr::Custom(xc), Repr::Custom(zc)) => zc.abs(xc.as_ref()),
            _ => {
                let xs = x.as_slice().unwrap();
                match &mut z.repr {
                    Repr::Serial(zs) => kernels::abs(xs, zs),
                    Repr::Threaded(t) => {
                        chunked_map2(xs, xs, &mut t.data, t.chunks, |x, _, z| kernels::abs(x, z))
                    }
                    Repr::Custom(_) => unreachable!(),
                }
            }
        }
        Ok(())
    }

    pub fn invert(x: &Vector, z: &mut Vector) -> Result<()> {
        x.require_compatible(z)?;
        match (&x.repr, &mut z.repr) {
            (Repr::Custom(xc), Repr::Custom(zc)) => zc.invert(xc.as_ref()),
            _ => {
                let xs = x.as_slice().unwrap();
                match &mut z.repr {
                    Repr::Serial(zs) => kernels::invert(xs, zs),
                    Repr::Threaded(t) => {
                        chunked_map2(xs, xs, &mut t.data, t.chunks, |x, _, z| kernels::invert(x, z))
                    }
                    Repr::Custom(_) => unreachable!(),
                }
            }
        }
        Ok(())
    }

    pub fn add_constant(x: &Vector, b: f64, z: &mut Vector) -> Result<()> {
        x.require_compatible(z)?;
        match (&x.repr, &mut z.repr) {
            (Repr::Custom(xc), Repr::Custom(zc)) => zc.add_constant(xc.as_ref(), b),
            _ => {
                let xs = x.as_slice().unwrap();
                match &mut z.repr {
                    Repr::Serial(zs) => kernels::add_constant(xs, b, zs),
                    Repr::Threaded(t) => chunked_map2(xs, xs, &mut t.data, t.chunks, |x, _, z| {
                        kernels::add_constant(x, b, z)
                    }),
                    Repr::Custom(_) => unreachable!(),
                }
            }
        }
        Ok(())
    }

    pub fn dot_product(x: &Vector, y: &Vector) -> Result<f64> {
        x.require_compatible(y)?;
        Ok(match (&x.repr, &y.repr) {
            (Repr::Custom(xc), Repr::Custom(yc)) => xc.dot_product(yc.as_ref()),
            (Repr::Threaded(t), _) => chunked_reduce2(
                &t.data,
                y.as_slice().unwrap(),
                t.chunks,
                kernels::dot,
                |a, b| a + b,
                0.0,
            ),
            _ => kernels::dot(x.as_slice().unwrap(), y.as_slice().unwrap()),
        })
    }

    pub fn max_norm(&self) -> Result<f64> {
        self.require_nonempty("max_norm")?;
        Ok(match &self.repr {
            Repr::Custom(c) => c.max_norm(),
            Repr::Threaded(t) => chunked_reduce2(
                &t.data,
                &t.data,
                t.chunks,
                |x, _| kernels::abs_max(x),
                f64::max,
                0.0,
            ),
            Repr::Serial(d) => kernels::abs_max(d),
        })
    }

    /// sqrt((1/n) * sum((x_i * w_i)^2)).
    pub fn wrms_norm(x: &Vector, w: &Vector) -> Result<f64> {
        x.require_nonempty("wrms_norm")?;
        x.require_compatible(w)?;
        Ok(match (&x.repr, &w.repr) {
            (Repr::Custom(xc), Repr::Custom(wc)) => xc.wrms_norm(wc.as_ref()),
            (Repr::Threaded(t), _) => {
                let ss = chunked_reduce2(
                    &t.data,
                    w.as_slice().unwrap(),
                    t.chunks,
                    kernels::weighted_sum_sq,
                    |a, b| a + b,
                    0.0,
                );
                (ss / x.len() as f64).sqrt()
            }
            _ => {
                let ss = kernels::weighted_sum_sq(x.as_slice().unwrap(), w.as_slice().unwrap());
                (ss / x.len() as f64).sqrt()
            }
        })
    }

    pub fn weighted_l2_norm(x: &Vector, w: &Vector) -> Result<f64> {
        x.require_nonempty("weighted_l2_norm")?;
        x.require_compatible(w)?;
        Ok(match (&x.repr, &w.repr) {
            (Repr::Custom(xc), Repr::Custom(wc)) => xc.weighted_l2_norm(wc.as_ref()),
            (Repr::Threaded(t), _) => chunked_reduce2(
                &t.data,
                w.as_slice().unwrap(),
                t.chunks,
                kernels::weighted_sum_sq,
                |a, b| a + b,
                0.0,
            )
            .sqrt(),
            _ => kernels::weighted_sum_sq(x.as_slice().unwrap(), w.as_slice().unwrap()).sqrt(),
        })
    }

    pub fn l1_norm(&self) -> Result<f64> {
        self.require_nonempty("l1_norm")?;
        Ok(match &self.repr {
            Repr::Custom(c) => c.l1_norm(),
            Repr::Threaded(t) => chunked_reduce2(
                &t.data,
                &t.data,
                t.chunks,
                |x, _| kernels::sum_abs(x),
                |a, b| a + b,
                0.0,
            ),
            Repr::Serial(d) => kernels::sum_abs(d),
        })
    }

    pub fn min_element(&self) -> Result<f64> {
        self.require_nonempty("min_element")?;
        Ok(match &self.repr {
            Repr::Custom(c) => c.min_element(),
            Repr::Threaded(t) => chunked_reduce2(
                &t.data,
                &t.data,
                t.chunks,
                |x, _| kernels::min(x),
                f64::min,
                f64::INFINITY,
            ),
            Repr::Serial(d) => kernels::min(d),
        })
    }

    /// z_i = 1 if |x_i| >= c else 0.
    pub fn compare_threshold(c: f64, x: &Vector, z: &mut Vector) -> Result<()> {
        x.require_compatible(z)?;
        match (&x.repr, &mut z.repr) {
            (Repr::Custom(xc), Repr::Custom(zc)) => zc.compare_threshold(c, xc.as_ref()),
            _ => {
                let xs = x.as_slice().unwrap();
                match &mut z.repr {
                    Repr::Serial(zs) => kernels::compare_threshold(c, xs, zs),
                    Repr::Threaded(t) => chunked_map2(xs, xs, &mut t.data, t.chunks, |x, _, z| {
                        kernels::compare_threshold(c, x, z)
                    }),
                    Repr::Custom(_) => unreachable!(),
                }
            }
        }
        Ok(())
    }

    /// z_i = 1/x_i where x_i != 0; returns false if any x_i is zero
    /// (entries at zero positions are left untouched).
    pub fn invert_with_test(x: &Vector, z: &mut Vector) -> Result<bool> {
        x.require_compatible(z)?;
        Ok(match (&x.repr, &mut z.repr) {
            (Repr::Custom(xc), Repr::Custom(zc)) => zc.invert_with_test(xc.as_ref()),
            _ => {
                let xs = x.as_slice().unwrap();
                let zs = z.as_mut_slice().unwrap();
                kernels::invert_with_test(xs, zs)
            }
        })
    }

    /// Constraint check: c_i in {-2,-1,0,1,2}; m_i set to 1 where the
    /// constraint on x_i is violated. Returns true iff no violations.
    pub fn constraint_mask(c: &Vector, x: &Vector, m: &mut Vector) -> Result<bool> {
        c.require_compatible(x)?;
        c.require_compatible(m)?;
        Ok(match (&c.repr, &x.repr, &mut m.repr) {
            (Repr::Custom(cc), Repr::Custom(xc), Repr::Custom(mc)) => {
                mc.constraint_mask(cc.as_ref(), xc.as_ref())
            }
            _ => {
                let cs = c.as_slice().unwrap();
                let xs = x.as_slice().unwrap();
                let ms = m.as_mut_slice().unwrap();
                kernels::constraint_mask(cs, xs, ms)
            }
        })
    }

    /// min over i with denom_i != 0 of num_i/denom_i; f64::MAX when the
    /// denominator is identically zero.
    pub fn min_quotient(num: &Vector, denom: &Vector) -> Result<f64> {
        num.require_nonempty("min_quotient")?;
        num.require_compatible(denom)?;
        Ok(match (&num.repr, &denom.repr) {
            (Repr::Custom(nc), Repr::Custom(dc)) => nc.min_quotient(dc.as_ref()),
            _ => kernels::min_quotient(num.as_slice().unwrap(), denom.as_slice().unwrap()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Vector {
        Vector::serial(data.to_vec())
    }

    #[test]
    fn linear_sum_identity_case() {
        let x = v(&[3.0, -1.0]);
        let y = v(&[9.0, 9.0]);
        let mut z = v(&[0.0, 0.0]);
        Vector::linear_sum(1.0, &x, 0.0, &y, &mut z).unwrap();
        assert_eq!(z.as_slice().unwrap(), &[3.0, -1.0]);
    }

    #[test]
    fn linear_sum_direct_formula() {
        let x = v(&[1.0, 0.0]);
        let y = v(&[0.0, 1.0]);
        let mut z = v(&[0.0, 0.0]);
        Vector::linear_sum(2.0, &x, 3.0, &y, &mut z).unwrap();
        assert_eq!(z.as_slice().unwrap(), &[2.0, 3.0]);
    }

    #[test]
    fn linear_sum_matches_elementwise_oracle() {
        // brute-force elementwise oracle, same floating order a*x[i] + b*y[i]
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        let n = 100;
        let xs: Vec<f64> = (0..n).map(|_| next()).collect();
        let ys: Vec<f64> = (0..n).map(|_| next()).collect();
        let (a, b) = (next(), next());
        let x = v(&xs);
        let y = v(&ys);
        let mut z = v(&vec![0.0; n]);
        Vector::linear_sum(a, &x, b, &y, &mut z).unwrap();
        for i in 0..n {
            assert_eq!(z.as_slice().unwrap()[i], a * xs[i] + b * ys[i]);
        }
    }

    #[test]
    fn max_norm_cases() {
        assert_eq!(v(&[1.0, -4.0, 2.0]).max_norm().unwrap(), 4.0);
        assert_eq!(v(&[0.0, 0.0, 0.0]).max_norm().unwrap(), 0.0);
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37 % 101) as f64 - 50.0) / 7.0).collect();
        let scan = xs.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        assert_eq!(v(&xs).max_norm().unwrap(), scan);
    }

    #[test]
    fn max_norm_rejects_empty() {
        assert!(matches!(v(&[]).max_norm(), Err(Error::Domain(_))));
    }

    #[test]
    fn wrms_norm_cases() {
        let x = v(&[1.0, 1.0, 1.0, 1.0]);
        let w = v(&[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(Vector::wrms_norm(&x, &w).unwrap(), 1.0);
        let x = v(&[2.0]);
        let w = v(&[0.5]);
        assert_eq!(Vector::wrms_norm(&x, &w).unwrap(), 1.0);
        // loop oracle within 1e-15 relative
        let xs: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let ws: Vec<f64> = (0..50).map(|i| 1.0 + (i as f64).cos().abs()).collect();
        let mut acc = 0.0;
        for i in 0..50 {
            acc += (xs[i] * ws[i]).powi(2);
        }
        let oracle = (acc / 50.0).sqrt();
        let got = Vector::wrms_norm(&v(&xs), &v(&ws)).unwrap();
        assert!((got - oracle).abs() <= 1e-15 * oracle.abs());
    }

    #[test]
    fn clone_independence() {
        let mut orig = v(&[1.0, 2.0]);
        let copy = orig.clone();
        orig.as_mut_slice().unwrap()[0] = 9.0;
        assert_eq!(copy.as_slice().unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn clone_preserves_threaded_tag() {
        let t = Vector::threaded(vec![1.0, 2.0, 3.0], 2);
        assert_eq!(t.clone().backend(), BackendId::Threaded);
    }

    #[test]
    fn clone_dispatches_custom_callback() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::Arc;

        struct Counted {
            data: Vec<f64>,
            clones: Arc<AtomicUsize>,
        }
        let ops: VectorOps<Counted> = VectorOps {
            len: |p| p.data.len(),
            check: |a, b| a.data.len() == b.data.len(),
            clone: |p| {
                p.clones.fetch_add(1, Ordering::SeqCst);
                Counted { data: p.data.clone(), clones: p.clones.clone() }
            },
            linear_sum: |a, x, b, y, z| kernels::linear_sum(a, &x.data, b, &y.data, &mut z.data),
            const_fill: |c, z| kernels::const_fill(c, &mut z.data),
            product: |x, y, z| kernels::product(&x.data, &y.data, &mut z.data),
            quotient: |x, y, z| kernels::quotient(&x.data, &y.data, &mut z.data),
            scale: |c, x, z| kernels::scale(c, &x.data, &mut z.data),
            abs: |x, z| kernels::abs(&x.data, &mut z.data),
            invert: |x, z| kernels::invert(&x.data, &mut z.data),
            add_constant: |x, b, z| kernels::add_constant(&x.data, b, &mut z.data),
            dot_product: |x, y| kernels::dot(&x.data, &y.data),
            max_norm: |x| kernels::abs_max(&x.data),
            wrms_norm: |x, w| {
                (kernels::weighted_sum_sq(&x.data, &w.data) / x.data.len() as f64).sqrt()
            },
            weighted_l2_norm: |x, w| kernels::weighted_sum_sq(&x.data, &w.data).sqrt(),
            l1_norm: |x| kernels::sum_abs(&x.data),
            min_element: |x| kernels::min(&x.data),
            compare_threshold: |c, x, z| kernels::compare_threshold(c, &x.data, &mut z.data),
            invert_with_test: |x, z| kernels::invert_with_test(&x.data, &mut z.data),
            constraint_mask: |c, x, m| kernels::constraint_mask(&c.data, &x.data, &mut m.data),
            min_quotient: |n, d| kernels::min_quotient(&n.data, &d.data),
        };
        let clones = Arc::new(AtomicUsize::new(0));
        let cv = Vector::make_custom(ops, Counted { data: vec![1.0, 2.0], clones: clones.clone() });
        let copy = cv.clone();
        assert_eq!(clones.load(Ordering::SeqCst), 1);
        assert_eq!(copy.len(), 2);
    }

    #[test]
    fn compatibility_rules() {
        assert!(v(&[0.0; 5]).compatible(&v(&[0.0; 5])));
        assert!(!v(&[0.0; 5]).compatible(&v(&[0.0; 6])));
        let custom = Vector::make_custom(VectorOps::over_f64_vec(), vec![0.0; 5]);
        assert!(!v(&[0.0; 5]).compatible(&custom));
        assert!(!custom.compatible(&v(&[0.0; 5])));
        // threaded substitutes for serial
        assert!(v(&[0.0; 5]).compatible(&Vector::threaded(vec![0.0; 5], 2)));
    }

    #[test]
    fn custom_round_trip() {
        let custom = Vector::make_custom(VectorOps::over_f64_vec(), vec![1.0, 2.0, 3.0]);
        assert_eq!(custom.custom_payload::<Vec<f64>>().unwrap(), &vec![1.0, 2.0, 3.0]);
        assert!(v(&[1.0]).custom_payload::<Vec<f64>>().is_err());
    }

    #[test]
    fn mixed_length_operation_errors() {
        let x = v(&[1.0, 2.0]);
        let y = v(&[1.0, 2.0, 3.0]);
        let mut z = v(&[0.0, 0.0]);
        let err = Vector::linear_sum(1.0, &x, 1.0, &y, &mut z).unwrap_err();
        assert!(matches!(err, Error::Incompatible { property: "length", .. }));
    }

    #[test]
    fn mixed_backend_operation_errors() {
        let x = v(&[1.0, 2.0]);
        let y = Vector::make_custom(VectorOps::over_f64_vec(), vec![1.0, 2.0]);
        let mut z = v(&[0.0, 0.0]);
        let err = Vector::linear_sum(1.0, &x, 1.0, &y, &mut z).unwrap_err();
        assert!(matches!(err, Error::Incompatible { property: "backend", .. }));
    }

    #[test]
    fn invert_with_test_reports_zero() {
        let x = v(&[2.0, 0.0, 4.0]);
        let mut z = v(&[0.0, -7.0, 0.0]);
        let ok = Vector::invert_with_test(&x, &mut z).unwrap();
        assert!(!ok);
        let zs = z.as_slice().unwrap();
        assert_eq!(zs[0], 0.5);
        assert_eq!(zs[1], -7.0); // untouched
        assert_eq!(zs[2], 0.25);
    }

    #[test]
    fn threaded_reductions_combine_in_chunk_order() {
        let data: Vec<f64> = (0..100).map(|i| (i as f64) * 0.25 - 12.0).collect();
        let t = Vector::threaded(data.clone(), 7);
        // per-chunk partials in chunk order
        let bounds = chunk_bounds(100, 7);
        let mut expect = 0.0;
        for (lo, hi) in bounds {
            expect += kernels::sum_abs(&data[lo..hi]);
        }
        assert_eq!(t.l1_norm().unwrap(), expect);
    }

    #[test]
    fn min_quotient_cases() {
        let n = v(&[1.0, 4.0, 9.0]);
        let d = v(&[0.0, 2.0, 3.0]);
        assert_eq!(Vector::min_quotient(&n, &d).unwrap(), 2.0);
        let d0 = v(&[0.0, 0.0, 0.0]);
        assert_eq!(Vector::min_quotient(&n, &d0).unwrap(), f64::MAX);
    }
}
