//! Matrix content types and the abstract matrix operation interface.
//!
//! Four content families: column-major dense, column-major banded (with
//! extra stored rows for LU fill-in), compressed sparse (CSC or CSR, with
//! explicit capacity that grows on pattern union), and custom content behind
//! a table of operation callbacks.

use std::any::Any;
use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::vector::Vector;

/// Compressed-sparse storage orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparseFormat {
    Csc,
    Csr,
}

/// Matrix content family tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFamily {
    Dense,
    Banded,
    Sparse(SparseFormat),
    Custom,
}

/// Column-major dense storage; element (i, j) lives at `data[j*m + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseContent {
    pub m: usize,
    pub n: usize,
    pub data: Vec<f64>,
}

impl DenseContent {
    pub fn zeros(m: usize, n: usize) -> DenseContent {
        DenseContent { m, n, data: vec![0.0; m * n] }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.m + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[j * self.m + i] = v;
    }

    /// One column as a slice (the pre-calculated column pointer view).
    #[inline]
    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.m..(j + 1) * self.m]
    }

    #[inline]
    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.m..(j + 1) * self.m]
    }
}

/// Column-major band storage for a square matrix: entry (i, j) exists iff
/// j - mu <= i <= j + ml and is stored in column block `j` at row offset
/// `smu + i - j`. Rows 0..smu-mu of each block are LU fill-in space.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedContent {
    pub n: usize,
    pub mu: usize,
    pub ml: usize,
    pub smu: usize,
    pub data: Vec<f64>,
}

impl BandedContent {
    pub fn zeros(n: usize, mu: usize, ml: usize, smu: usize) -> BandedContent {
        debug_assert!(smu >= mu);
        BandedContent { n, mu, ml, smu, data: vec![0.0; n * (smu + ml + 1)] }
    }

    #[inline]
    pub fn ldim(&self) -> usize {
        self.smu + self.ml + 1
    }

    #[inline]
    pub fn in_band(&self, i: usize, j: usize) -> bool {
        i + self.mu >= j && i <= j + self.ml
    }

    /// Reads entry (i, j); positions outside the band read as zero.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.in_band(i, j) {
            self.data[j * self.ldim() + self.smu + i - j]
        } else {
            0.0
        }
    }

    /// Writes entry (i, j); positions outside the band are errors.
    pub fn set(&mut self, i: usize, j: usize, v: f64) -> Result<()> {
        if !self.in_band(i, j) {
            return Err(Error::IndexOutOfRange(format!(
                "banded write outside band: ({i}, {j}) with mu={}, ml={}",
                self.mu, self.ml
            )));
        }
        let ld = self.ldim();
        self.data[j * ld + self.smu + i - j] = v;
        Ok(())
    }

    /// Storage column block for column j (length smu+ml+1).
    #[inline]
    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        let ld = self.ldim();
        &mut self.data[j * ld..(j + 1) * ld]
    }

    #[inline]
    pub fn col(&self, j: usize) -> &[f64] {
        let ld = self.ldim();
        &self.data[j * ld..(j + 1) * ld]
    }
}

/// Compressed sparse content. `data.len()` is the storage capacity
/// ("number of non-zero elements that can potentially be stored"); the
/// stored count is `indexptrs[major_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseContent {
    pub format: SparseFormat,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    /// Length major_dim+1; maps column numbers (CSC) or row numbers (CSR)
    /// to positions in `data`.
    pub indexptrs: Vec<usize>,
    /// Length equal to capacity; maps data positions to rows (CSC) or
    /// columns (CSR).
    pub indexvals: Vec<usize>,
}

impl SparseContent {
    fn major_dim(&self) -> usize {
        match self.format {
            SparseFormat::Csc => self.cols,
            SparseFormat::Csr => self.rows,
        }
    }

    fn minor_dim(&self) -> usize {
        match self.format {
            SparseFormat::Csc => self.rows,
            SparseFormat::Csr => self.cols,
        }
    }

    pub fn nnz_capacity(&self) -> usize {
        self.data.len()
    }

    pub fn nnz_stored(&self) -> usize {
        *self.indexptrs.last().unwrap_or(&0)
    }

    /// Checks the structural invariants: ptr length, monotonicity, stored
    /// count within capacity, minor indices in range.
    pub fn validate(&self) -> Result<()> {
        if self.indexptrs.len() != self.major_dim() + 1 {
            return Err(Error::Shape(format!(
                "indexptrs length {} != major dim + 1 = {}",
                self.indexptrs.len(),
                self.major_dim() + 1
            )));
        }
        if self.indexptrs[0] != 0 {
            return Err(Error::Shape("indexptrs[0] != 0".into()));
        }
        for w in self.indexptrs.windows(2) {
            if w[1] < w[0] {
                return Err(Error::Shape("indexptrs not nondecreasing".into()));
            }
        }
        if self.nnz_stored() > self.nnz_capacity() {
            return Err(Error::Shape("stored count exceeds capacity".into()));
        }
        if self.indexvals.len() != self.data.len() {
            return Err(Error::Shape("indexvals length != data length".into()));
        }
        for k in 0..self.nnz_stored() {
            if self.indexvals[k] >= self.minor_dim() {
                return Err(Error::IndexOutOfRange(format!(
                    "indexvals[{k}] = {} out of range",
                    self.indexvals[k]
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (major, minor) = match self.format {
            SparseFormat::Csc => (j, i),
            SparseFormat::Csr => (i, j),
        };
        let mut acc = 0.0;
        for k in self.indexptrs[major]..self.indexptrs[major + 1] {
            if self.indexvals[k] == minor {
                acc += self.data[k];
            }
        }
        acc
    }
}

fn grow_capacity(needed: usize, current: usize) -> usize {
    if needed <= current {
        current
    } else {
        needed.next_power_of_two()
    }
}

/// Callbacks realizing the abstract matrix operation set over an opaque
/// content type `C`. `matvec` sees raw slices because matrix-vector
/// products are restricted to serial-representation vectors.
pub struct MatrixOps<C> {
    pub rows: fn(&C) -> usize,
    pub cols: fn(&C) -> usize,
    pub clone: fn(&C) -> C,
    pub zero: fn(&mut C),
    pub copy: fn(&C, &mut C),
    pub scale_add: fn(f64, &mut C, &C),
    pub scale_add_identity: fn(f64, &mut C),
    pub matvec: fn(&C, &[f64], &mut [f64]),
    pub space: fn(&C) -> (usize, usize),
}

impl<C> Clone for MatrixOps<C> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<C> Copy for MatrixOps<C> {}

trait DynMat: Send {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn clone_dyn(&self) -> Box<dyn DynMat>;
    fn zero(&mut self);
    fn copy_from(&mut self, src: &dyn DynMat) -> Result<()>;
    fn scale_add(&mut self, c: f64, b: &dyn DynMat) -> Result<()>;
    fn scale_add_identity(&mut self, c: f64);
    fn matvec(&self, x: &[f64], y: &mut [f64]);
    fn space(&self) -> (usize, usize);
    fn as_any(&self) -> &dyn Any;
}

struct CustomMat<C: Send + 'static> {
    ops: MatrixOps<C>,
    content: C,
}

impl<C: Send + 'static> DynMat for CustomMat<C> {
    fn rows(&self) -> usize {
        (self.ops.rows)(&self.content)
    }
    fn cols(&self) -> usize {
        (self.ops.cols)(&self.content)
    }
    fn clone_dyn(&self) -> Box<dyn DynMat> {
        Box::new(CustomMat { ops: self.ops, content: (self.ops.clone)(&self.content) })
    }
    fn zero(&mut self) {
        (self.ops.zero)(&mut self.content);
    }
    fn copy_from(&mut self, src: &dyn DynMat) -> Result<()> {
        let src = src
            .as_any()
            .downcast_ref::<CustomMat<C>>()
            .ok_or_else(|| Error::MatrixIncompatible("custom content type mismatch".into()))?;
        (self.ops.copy)(&src.content, &mut self.content);
        Ok(())
    }
    fn scale_add(&mut self, c: f64, b: &dyn DynMat) -> Result<()> {
        let b = b
            .as_any()
            .downcast_ref::<CustomMat<C>>()
            .ok_or_else(|| Error::MatrixIncompatible("custom content type mismatch".into()))?;
        (self.ops.scale_add)(c, &mut self.content, &b.content);
        Ok(())
    }
    fn scale_add_identity(&mut self, c: f64) {
        (self.ops.scale_add_identity)(c, &mut self.content);
    }
    fn matvec(&self, x: &[f64], y: &mut [f64]) {
        (self.ops.matvec)(&self.content, x, y);
    }
    fn space(&self) -> (usize, usize) {
        (self.ops.space)(&self.content)
    }
    fn as_any(&self) -> &dyn Any {
        self
    }
}

enum Content {
    Dense(DenseContent),
    Banded(BandedContent),
    Sparse(SparseContent),
    Custom(Box<dyn DynMat>),
}

/// A matrix: one of the content families plus shape metadata.
pub struct Matrix {
    content: Content,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({:?}, {}x{})", self.family(), self.rows(), self.cols())
    }
}

impl Clone for Matrix {
    fn clone(&self) -> Self {
        let content = match &self.content {
            Content::Dense(d) => Content::Dense(d.clone()),
            Content::Banded(b) => Content::Banded(b.clone()),
            Content::Sparse(s) => Content::Sparse(s.clone()),
            Content::Custom(c) => Content::Custom(c.clone_dyn()),
        };
        Matrix { content }
    }
}

impl Matrix {
    /// m-by-n dense matrix of zeros.
    pub fn dense(m: usize, n: usize) -> Matrix {
        Matrix { content: Content::Dense(DenseContent::zeros(m, n)) }
    }

    pub fn from_dense(content: DenseContent) -> Matrix {
        Matrix { content: Content::Dense(content) }
    }

    /// n-by-n banded matrix; `smu = mu` (no LU fill space).
    pub fn banded(n: usize, mu: usize, ml: usize) -> Matrix {
        Matrix { content: Content::Banded(BandedContent::zeros(n, mu, ml, mu)) }
    }

    /// n-by-n banded matrix with `smu = min(n-1, mu+ml)` working space for
    /// LU fill-in.
    pub fn banded_for_lu(n: usize, mu: usize, ml: usize) -> Matrix {
        let smu = (mu + ml).min(n.saturating_sub(1)).max(mu);
        Matrix { content: Content::Banded(BandedContent::zeros(n, mu, ml, smu)) }
    }

    /// Builds sparse content from (row, col, value) triplets; duplicate
    /// positions are summed.
    pub fn sparse_from_triplets(
        format: SparseFormat,
        rows: usize,
        cols: usize,
        entries: &[(usize, usize, f64)],
    ) -> Result<Matrix> {
        let mut merged: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for &(i, j, v) in entries {
            if i >= rows || j >= cols {
                return Err(Error::IndexOutOfRange(format!(
                    "triplet ({i}, {j}) outside {rows}x{cols}"
                )));
            }
            let key = match format {
                SparseFormat::Csc => (j, i),
                SparseFormat::Csr => (i, j),
            };
            *merged.entry(key).or_insert(0.0) += v;
        }
        let major = match format {
            SparseFormat::Csc => cols,
            SparseFormat::Csr => rows,
        };
        let nnz = merged.len();
        let mut indexptrs = vec![0usize; major + 1];
        let mut indexvals = vec![0usize; nnz];
        let mut data = vec![0.0; nnz];
        for (k, (&(maj, min), &v)) in merged.iter().enumerate() {
            indexptrs[maj + 1] += 1;
            indexvals[k] = min;
            data[k] = v;
        }
        for m in 0..major {
            indexptrs[m + 1] += indexptrs[m];
        }
        let content = SparseContent { format, rows, cols, data, indexptrs, indexvals };
        content.validate()?;
        Ok(Matrix { content: Content::Sparse(content) })
    }

    pub fn make_custom<C: Send + 'static>(ops: MatrixOps<C>, content: C) -> Matrix {
        Matrix { content: Content::Custom(Box::new(CustomMat { ops, content })) }
    }

    pub fn custom_content<C: Send + 'static>(&self) -> Result<&C> {
        match &self.content {
            Content::Custom(c) => c
                .as_any()
                .downcast_ref::<CustomMat<C>>()
                .map(|cm| &cm.content)
                .ok_or_else(|| Error::Variant("custom content type mismatch".into())),
            _ => Err(Error::Variant("not a custom matrix".into())),
        }
    }

    pub fn family(&self) -> MatrixFamily {
        match &self.content {
            Content::Dense(_) => MatrixFamily::Dense,
            Content::Banded(_) => MatrixFamily::Banded,
            Content::Sparse(s) => MatrixFamily::Sparse(s.format),
            Content::Custom(_) => MatrixFamily::Custom,
        }
    }

    pub fn rows(&self) -> usize {
        match &self.content {
            Content::Dense(d) => d.m,
            Content::Banded(b) => b.n,
            Content::Sparse(s) => s.rows,
            Content::Custom(c) => c.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match &self.content {
            Content::Dense(d) => d.n,
            Content::Banded(b) => b.n,
            Content::Sparse(s) => s.cols,
            Content::Custom(c) => c.cols(),
        }
    }

    pub fn is_square(&self) -> bool {
        self.rows() == self.cols()
    }

    pub fn as_dense(&self) -> Option<&DenseContent> {
        match &self.content {
            Content::Dense(d) => Some(d),
            _ => None,
        }
    }

    pub fn as_dense_mut(&mut self) -> Option<&mut DenseContent> {
        match &mut self.content {
            Content::Dense(d) => Some(d),
            _ => None,
        }
    }

    pub fn as_banded(&self) -> Option<&BandedContent> {
        match &self.content {
            Content::Banded(b) => Some(b),
            _ => None,
        }
    }

    pub fn as_banded_mut(&mut self) -> Option<&mut BandedContent> {
        match &mut self.content {
            Content::Banded(b) => Some(b),
            _ => None,
        }
    }

    pub fn as_sparse(&self) -> Option<&SparseContent> {
        match &self.content {
            Content::Sparse(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_sparse_mut(&mut self) -> Option<&mut SparseContent> {
        match &mut self.content {
            Content::Sparse(s) => Some(s),
            _ => None,
        }
    }

    /// Sets every stored entry to zero (sparse patterns are kept).
    pub fn zero(&mut self) {
        match &mut self.content {
            Content::Dense(d) => d.data.iter_mut().for_each(|v| *v = 0.0),
            Content::Banded(b) => b.data.iter_mut().for_each(|v| *v = 0.0),
            Content::Sparse(s) => s.data.iter_mut().for_each(|v| *v = 0.0),
            Content::Custom(c) => c.zero(),
        }
    }

    /// self := copy of `src` (values and, for sparse, pattern).
    pub fn copy_from(&mut self, src: &Matrix) -> Result<()> {
        self.require_same_family_shape(src)?;
        match (&mut self.content, &src.content) {
            (Content::Dense(a), Content::Dense(b)) => a.data.copy_from_slice(&b.data),
            (Content::Banded(a), Content::Banded(b)) => {
                if a.mu != b.mu || a.ml != b.ml || a.smu != b.smu {
                    *a = b.clone();
                } else {
                    a.data.copy_from_slice(&b.data);
                }
            }
            (Content::Sparse(a), Content::Sparse(b)) => *a = b.clone(),
            (Content::Custom(a), Content::Custom(b)) => a.copy_from(b.as_ref())?,
            _ => unreachable!(),
        }
        Ok(())
    }

    fn require_same_family_shape(&self, other: &Matrix) -> Result<()> {
        let fam_ok = match (&self.content, &other.content) {
            (Content::Sparse(a), Content::Sparse(b)) => a.format == b.format,
            (Content::Dense(_), Content::Dense(_))
            | (Content::Banded(_), Content::Banded(_))
            | (Content::Custom(_), Content::Custom(_)) => true,
            _ => false,
        };
        if !fam_ok {
            return Err(Error::MatrixIncompatible(format!(
                "family/format mismatch: {:?} vs {:?}",
                self.family(),
                other.family()
            )));
        }
        if self.rows() != other.rows() || self.cols() != other.cols() {
            return Err(Error::MatrixIncompatible(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.rows(),
                self.cols(),
                other.rows(),
                other.cols()
            )));
        }
        Ok(())
    }

    /// a := c*a + b. For sparse operands the stored pattern becomes the
    /// union pattern, growing capacity when needed.
    pub fn scale_add(c: f64, a: &mut Matrix, b: &Matrix) -> Result<()> {
        a.require_same_family_shape(b)?;
        match (&mut a.content, &b.content) {
            (Content::Dense(a), Content::Dense(b)) => {
                for (av, bv) in a.data.iter_mut().zip(&b.data) {
                    *av = c * *av + bv;
                }
            }
            (Content::Banded(a), Content::Banded(b)) => {
                if b.mu > a.mu || b.ml > a.ml {
                    return Err(Error::MatrixIncompatible(format!(
                        "band of b (mu={}, ml={}) exceeds band of a (mu={}, ml={})",
                        b.mu, b.ml, a.mu, a.ml
                    )));
                }
                for j in 0..a.n {
                    let lo = j.saturating_sub(a.mu);
                    let hi = (j + a.ml).min(a.n - 1);
                    for i in lo..=hi {
                        let v = c * a.get(i, j) + b.get(i, j);
                        a.set(i, j, v)?;
                    }
                }
            }
            (Content::Sparse(a), Content::Sparse(b)) => sparse_scale_add(c, a, b),
            (Content::Custom(a), Content::Custom(b)) => a.scale_add(c, b.as_ref())?,
            _ => unreachable!(),
        }
        Ok(())
    }

    /// a := c*a + I. Sparse patterns gain any missing diagonal entries.
    pub fn scale_add_identity(c: f64, a: &mut Matrix) -> Result<()> {
        if !a.is_square() {
            return Err(Error::Shape(format!(
                "scale_add_identity requires a square matrix, got {}x{}",
                a.rows(),
                a.cols()
            )));
        }
        match &mut a.content {
            Content::Dense(d) => {
                let m = d.m;
                for v in d.data.iter_mut() {
                    *v *= c;
                }
                for i in 0..m {
                    d.data[i * m + i] += 1.0;
                }
            }
            Content::Banded(b) => {
                for v in b.data.iter_mut() {
                    *v *= c;
                }
                for j in 0..b.n {
                    let v = b.get(j, j) + 1.0;
                    b.set(j, j, v)?;
                }
            }
            Content::Sparse(s) => sparse_scale_add_identity(c, s),
            Content::Custom(cm) => cm.scale_add_identity(c),
        }
        Ok(())
    }

    /// y = A*x by the textbook formula. Requires serial-representation
    /// vectors on both sides.
    pub fn matvec(&self, x: &Vector, y: &mut Vector) -> Result<()> {
        if !x.backend().is_serial_repr() || !y.backend().is_serial_repr() {
            return Err(Error::Incompatible {
                property: "representation",
                detail: "matvec requires serial-representation vectors".into(),
            });
        }
        if x.len() != self.cols() || y.len() != self.rows() {
            return Err(Error::Incompatible {
                property: "length",
                detail: format!(
                    "matvec shape {}x{} with x len {} and y len {}",
                    self.rows(),
                    self.cols(),
                    x.len(),
                    y.len()
                ),
            });
        }
        let xs: Vec<f64> = x.as_slice().unwrap().to_vec();
        let ys = y.as_mut_slice().unwrap();
        self.matvec_slices(&xs, ys);
        Ok(())
    }

    pub(crate) fn matvec_slices(&self, xs: &[f64], ys: &mut [f64]) {
        match &self.content {
            Content::Dense(d) => {
                for yi in ys.iter_mut() {
                    *yi = 0.0;
                }
                for j in 0..d.n {
                    let col = d.col(j);
                    let xj = xs[j];
                    for i in 0..d.m {
                        ys[i] += col[i] * xj;
                    }
                }
            }
            Content::Banded(b) => {
                for yi in ys.iter_mut() {
                    *yi = 0.0;
                }
                for j in 0..b.n {
                    let lo = j.saturating_sub(b.mu);
                    let hi = (j + b.ml).min(b.n - 1);
                    for i in lo..=hi {
                        ys[i] += b.get(i, j) * xs[j];
                    }
                }
            }
            Content::Sparse(s) => {
                for yi in ys.iter_mut() {
                    *yi = 0.0;
                }
                match s.format {
                    SparseFormat::Csc => {
                        for j in 0..s.cols {
                            for k in s.indexptrs[j]..s.indexptrs[j + 1] {
                                ys[s.indexvals[k]] += s.data[k] * xs[j];
                            }
                        }
                    }
                    SparseFormat::Csr => {
                        for i in 0..s.rows {
                            let mut acc = 0.0;
                            for k in s.indexptrs[i]..s.indexptrs[i + 1] {
                                acc += s.data[k] * xs[s.indexvals[k]];
                            }
                            ys[i] = acc;
                        }
                    }
                }
            }
            Content::Custom(c) => c.matvec(xs, ys),
        }
    }

    /// Faithful dense expansion (custom content is expanded column by
    /// column through matvec on unit vectors).
    pub fn to_dense(&self) -> DenseContent {
        let (m, n) = (self.rows(), self.cols());
        let mut out = DenseContent::zeros(m, n);
        match &self.content {
            Content::Dense(d) => out.data.copy_from_slice(&d.data),
            Content::Banded(b) => {
                for j in 0..n {
                    for i in 0..m {
                        out.set(i, j, b.get(i, j));
                    }
                }
            }
            Content::Sparse(s) => match s.format {
                SparseFormat::Csc => {
                    for j in 0..s.cols {
                        for k in s.indexptrs[j]..s.indexptrs[j + 1] {
                            let i = s.indexvals[k];
                            out.set(i, j, out.get(i, j) + s.data[k]);
                        }
                    }
                }
                SparseFormat::Csr => {
                    for i in 0..s.rows {
                        for k in s.indexptrs[i]..s.indexptrs[i + 1] {
                            let j = s.indexvals[k];
                            out.set(i, j, out.get(i, j) + s.data[k]);
                        }
                    }
                }
            },
            Content::Custom(c) => {
                let mut e = vec![0.0; n];
                let mut col = vec![0.0; m];
                for j in 0..n {
                    e[j] = 1.0;
                    c.matvec(&e, &mut col);
                    e[j] = 0.0;
                    for i in 0..m {
                        out.set(i, j, col[i]);
                    }
                }
            }
        }
        out
    }

    /// Approximate storage footprint as (real words, integer words).
    pub fn space(&self) -> (usize, usize) {
        match &self.content {
            Content::Dense(d) => (d.data.len(), 3),
            Content::Banded(b) => (b.data.len(), 7),
            Content::Sparse(s) => (s.data.len(), s.indexptrs.len() + s.indexvals.len() + 4),
            Content::Custom(c) => c.space(),
        }
    }
}

/// Union-pattern sparse a := c*a + b with power-of-two capacity growth.
fn sparse_scale_add(c: f64, a: &mut SparseContent, b: &SparseContent) {
    let major = a.major_dim();
    let mut new_ptrs = vec![0usize; major + 1];
    let mut new_vals: Vec<usize> = Vec::new();
    let mut new_data: Vec<f64> = Vec::new();
    for m in 0..major {
        // merge the two sorted-by-construction entry lists; unsorted
        // patterns still merge correctly through the map
        let mut merged: BTreeMap<usize, f64> = BTreeMap::new();
        for k in a.indexptrs[m]..a.indexptrs[m + 1] {
            *merged.entry(a.indexvals[k]).or_insert(0.0) += c * a.data[k];
        }
        for k in b.indexptrs[m]..b.indexptrs[m + 1] {
            *merged.entry(b.indexvals[k]).or_insert(0.0) += b.data[k];
        }
        for (minor, v) in merged {
            new_vals.push(minor);
            new_data.push(v);
        }
        new_ptrs[m + 1] = new_vals.len();
    }
    let cap = grow_capacity(new_vals.len(), a.nnz_capacity());
    new_vals.resize(cap, 0);
    new_data.resize(cap, 0.0);
    a.indexptrs = new_ptrs;
    a.indexvals = new_vals;
    a.data = new_data;
}

fn sparse_scale_add_identity(c: f64, a: &mut SparseContent) {
    let major = a.major_dim();
    let mut new_ptrs = vec![0usize; major + 1];
    let mut new_vals: Vec<usize> = Vec::new();
    let mut new_data: Vec<f64> = Vec::new();
    for m in 0..major {
        let mut merged: BTreeMap<usize, f64> = BTreeMap::new();
        for k in a.indexptrs[m]..a.indexptrs[m + 1] {
            *merged.entry(a.indexvals[k]).or_insert(0.0) += c * a.data[k];
        }
        // diagonal entry: minor index == major index for square content
        *merged.entry(m).or_insert(0.0) += 1.0;
        for (minor, v) in merged {
            new_vals.push(minor);
            new_data.push(v);
        }
        new_ptrs[m + 1] = new_vals.len();
    }
    let cap = grow_capacity(new_vals.len(), a.nnz_capacity());
    new_vals.resize(cap, 0);
    new_data.resize(cap, 0.0);
    a.indexptrs = new_ptrs;
    a.indexvals = new_vals;
    a.data = new_data;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_from_rows(rows: &[&[f64]]) -> Matrix {
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

    #[test]
    fn scale_add_zero_scale_copies_b() {
        let mut a = dense_from_rows(&[&[5.0, 5.0], &[5.0, 5.0]]);
        let b = dense_from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        Matrix::scale_add(0.0, &mut a, &b).unwrap();
        assert_eq!(a.to_dense(), b.to_dense());
    }

    #[test]
    fn scale_add_direct_formula() {
        let mut a = dense_from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = dense_from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        Matrix::scale_add(2.0, &mut a, &b).unwrap();
        let d = a.as_dense().unwrap();
        assert_eq!(d.get(0, 0), 2.0);
        assert_eq!(d.get(0, 1), 1.0);
        assert_eq!(d.get(1, 0), 1.0);
        assert_eq!(d.get(1, 1), 2.0);
    }

    #[test]
    fn sparse_scale_add_disjoint_grows_capacity() {
        let mut a =
            Matrix::sparse_from_triplets(SparseFormat::Csc, 3, 3, &[(0, 0, 1.0), (1, 1, 2.0)])
                .unwrap();
        let b =
            Matrix::sparse_from_triplets(SparseFormat::Csc, 3, 3, &[(2, 0, 3.0), (0, 2, 4.0)])
                .unwrap();
        let c = 2.0;
        let a_dense = a.to_dense();
        Matrix::scale_add(c, &mut a, &b).unwrap();
        let s = a.as_sparse().unwrap();
        s.validate().unwrap();
        assert!(s.nnz_capacity() >= 4);
        // dense-conversion oracle: exact match against c*dense(a)+dense(b)
        let b_dense = b.to_dense();
        let got = a.to_dense();
        for j in 0..3 {
            for i in 0..3 {
                assert_eq!(got.get(i, j), c * a_dense.get(i, j) + b_dense.get(i, j));
            }
        }
    }

    #[test]
    fn scale_add_identity_cases() {
        let mut a = dense_from_rows(&[&[3.0, 7.0], &[-2.0, 5.0]]);
        Matrix::scale_add_identity(0.0, &mut a).unwrap();
        assert_eq!(a.to_dense(), Matrix::dense(2, 2).to_dense_with_identity());

        let mut z = Matrix::dense(3, 3);
        Matrix::scale_add_identity(1.0, &mut z).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(z.to_dense().get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn sparse_scale_add_identity_fills_diagonal() {
        // empty diagonal
        let mut a =
            Matrix::sparse_from_triplets(SparseFormat::Csr, 3, 3, &[(0, 1, 5.0), (2, 0, -1.0)])
                .unwrap();
        let before = a.to_dense();
        let cap_before = a.as_sparse().unwrap().nnz_capacity();
        Matrix::scale_add_identity(2.0, &mut a).unwrap();
        let s = a.as_sparse().unwrap();
        s.validate().unwrap();
        assert!(s.nnz_capacity() > cap_before);
        let got = a.to_dense();
        for i in 0..3 {
            for j in 0..3 {
                let expect = 2.0 * before.get(i, j) + if i == j { 1.0 } else { 0.0 };
                assert_eq!(got.get(i, j), expect);
            }
        }
    }

    #[test]
    fn scale_add_identity_rejects_non_square() {
        let mut a = Matrix::dense(2, 3);
        assert!(matches!(Matrix::scale_add_identity(1.0, &mut a), Err(Error::Shape(_))));
    }

    #[test]
    fn matvec_identity() {
        let mut a = Matrix::dense(3, 3);
        Matrix::scale_add_identity(0.0, &mut a).unwrap();
        let x = Vector::serial(vec![1.0, 2.0, 3.0]);
        let mut y = Vector::serial(vec![0.0; 3]);
        a.matvec(&x, &mut y).unwrap();
        assert_eq!(y.as_slice().unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn matvec_banded_tridiagonal_on_ones() {
        let n = 8;
        let mut a = Matrix::banded(n, 1, 1);
        {
            let b = a.as_banded_mut().unwrap();
            for j in 0..n {
                b.set(j, j, 2.0).unwrap();
                if j > 0 {
                    b.set(j - 1, j, -1.0).unwrap();
                }
                if j + 1 < n {
                    b.set(j + 1, j, -1.0).unwrap();
                }
            }
        }
        let x = Vector::serial(vec![1.0; n]);
        let mut y = Vector::serial(vec![0.0; n]);
        a.matvec(&x, &mut y).unwrap();
        let ys = y.as_slice().unwrap();
        assert_eq!(ys[0], 1.0);
        assert_eq!(ys[n - 1], 1.0);
        for &v in &ys[1..n - 1] {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn matvec_rejects_custom_vectors() {
        use crate::vector::VectorOps;
        let a = Matrix::dense(2, 2);
        let x = Vector::make_custom(VectorOps::over_f64_vec(), vec![1.0, 2.0]);
        let mut y = Vector::serial(vec![0.0; 2]);
        let err = a.matvec(&x, &mut y).unwrap_err();
        assert!(matches!(err, Error::Incompatible { property: "representation", .. }));
    }

    #[test]
    fn csc_csr_matvec_agree() {
        let trips = [
            (0, 0, 2.0),
            (0, 3, -1.0),
            (1, 1, 4.0),
            (2, 0, 1.5),
            (2, 2, -3.0),
            (3, 3, 7.0),
        ];
        let a = Matrix::sparse_from_triplets(SparseFormat::Csc, 4, 4, &trips).unwrap();
        let b = Matrix::sparse_from_triplets(SparseFormat::Csr, 4, 4, &trips).unwrap();
        let x = Vector::serial(vec![1.0, -2.0, 0.5, 3.0]);
        let mut ya = Vector::serial(vec![0.0; 4]);
        let mut yb = Vector::serial(vec![0.0; 4]);
        a.matvec(&x, &mut ya).unwrap();
        b.matvec(&x, &mut yb).unwrap();
        for i in 0..4 {
            let (va, vb) = (ya.as_slice().unwrap()[i], yb.as_slice().unwrap()[i]);
            assert!((va - vb).abs() <= 1e-14 * va.abs().max(vb.abs()).max(1.0));
        }
    }

    #[test]
    fn sparse_from_triplets_layout() {
        // 2x2 identity in CSC: hand expansion of the layout rules
        let a =
            Matrix::sparse_from_triplets(SparseFormat::Csc, 2, 2, &[(0, 0, 1.0), (1, 1, 1.0)])
                .unwrap();
        let s = a.as_sparse().unwrap();
        assert_eq!(&s.data[..2], &[1.0, 1.0]);
        assert_eq!(s.indexptrs, vec![0, 1, 2]);
        assert_eq!(&s.indexvals[..2], &[0, 1]);

        // empty entry list
        let e = Matrix::sparse_from_triplets(SparseFormat::Csc, 2, 2, &[]).unwrap();
        assert!(e.as_sparse().unwrap().indexptrs.iter().all(|&p| p == 0));

        // duplicates summed
        let d =
            Matrix::sparse_from_triplets(SparseFormat::Csc, 2, 2, &[(0, 0, 1.0), (0, 0, 2.0)])
                .unwrap();
        assert_eq!(d.as_sparse().unwrap().data[0], 3.0);
        assert_eq!(d.to_dense().get(0, 0), 3.0);
    }

    #[test]
    fn sparse_from_triplets_rejects_out_of_range() {
        let r = Matrix::sparse_from_triplets(SparseFormat::Csc, 2, 2, &[(2, 0, 1.0)]);
        assert!(matches!(r, Err(Error::IndexOutOfRange(_))));
    }

    #[test]
    fn to_dense_round_trip_and_band_zeros() {
        let a = dense_from_rows(&[&[1.0, 2.0], &[0.0, 3.0]]);
        let d = a.to_dense();
        let mut trips = Vec::new();
        for i in 0..2 {
            for j in 0..2 {
                if d.get(i, j) != 0.0 {
                    trips.push((i, j, d.get(i, j)));
                }
            }
        }
        let s = Matrix::sparse_from_triplets(SparseFormat::Csr, 2, 2, &trips).unwrap();
        assert_eq!(s.to_dense(), d);

        let band = Matrix::banded(4, 0, 1);
        let bd = band.to_dense();
        assert_eq!(bd.get(0, 3), 0.0);
        assert_eq!(bd.get(3, 0), 0.0);
    }

    #[test]
    fn banded_write_outside_band_rejected() {
        let mut a = Matrix::banded(4, 1, 1);
        let b = a.as_banded_mut().unwrap();
        assert!(b.set(0, 3, 1.0).is_err());
        assert_eq!(b.get(0, 3), 0.0);
    }

    #[test]
    fn csr_layout_positions() {
        let trips = [(0, 1, 5.0), (1, 0, 2.0), (1, 2, 3.0)];
        let a = Matrix::sparse_from_triplets(SparseFormat::Csr, 2, 3, &trips).unwrap();
        let s = a.as_sparse().unwrap();
        // row i entries occupy indexptrs[i]..indexptrs[i+1]; indexvals maps
        // positions to column numbers
        for &(i, j, v) in &trips {
            let mut found = false;
            for k in s.indexptrs[i]..s.indexptrs[i + 1] {
                if s.indexvals[k] == j {
                    assert_eq!(s.data[k], v);
                    found = true;
                }
            }
            assert!(found);
        }
    }

    impl Matrix {
        fn to_dense_with_identity(&self) -> DenseContent {
            let mut d = self.to_dense();
            for i in 0..d.m.min(d.n) {
                d.set(i, i, d.get(i, i) + 1.0);
            }
            d
        }
    }
}
