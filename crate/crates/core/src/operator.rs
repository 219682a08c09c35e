//! Finite-dimensional hermitian operators and the site bookkeeping of a chain.
//!
//! Operators are stored either densely or, when every off-diagonal entry is
//! zero, as a real diagonal. Site 1 is the most significant tensor factor.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

use nalgebra::linalg::SymmetricEigen;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;

/// Relative Frobenius deviation tolerated before a matrix is rejected as non-hermitian.
pub const HERMITIAN_TOL: f64 = 1e-12;
/// Eigenvalues at or below this are treated as zero by `logm` and entropies.
pub const EIGEN_FLOOR: f64 = 1e-14;

static MAX_DIM: AtomicUsize = AtomicUsize::new(1 << 14);

/// Largest Hilbert-space dimension any operation may build.
pub fn max_dim() -> usize {
    MAX_DIM.load(Ordering::Relaxed)
}

pub fn set_max_dim(dim: usize) {
    MAX_DIM.store(dim.max(1), Ordering::Relaxed);
}

pub fn check_capacity(dim: usize) -> Result<()> {
    let max = max_dim();
    if dim > max {
        Err(Error::Capacity { dim, max })
    } else {
        Ok(())
    }
}

/// `d^k`, failing with a capacity error instead of overflowing.
pub fn site_dim(d: usize, k: usize) -> Result<usize> {
    let mut dim: usize = 1;
    for _ in 0..k {
        dim = dim.checked_mul(d).ok_or(Error::Capacity {
            dim: usize::MAX,
            max: max_dim(),
        })?;
        check_capacity(dim)?;
    }
    Ok(dim)
}

/// Eigen-decomposition. `vectors == None` means the standard basis.
#[derive(Debug)]
pub struct Spectrum {
    values: Vec<f64>,
    vectors: Option<CMatrix>,
}

impl Spectrum {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn vectors(&self) -> Option<&CMatrix> {
        self.vectors.as_ref()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sorted_values(&self) -> Vec<f64> {
        let mut v = self.values.clone();
        v.sort_by(f64::total_cmp);
        v
    }

    /// Dense eigenvector matrix, materializing the identity for diagonal operators.
    pub fn vector_matrix(&self) -> CMatrix {
        match &self.vectors {
            Some(v) => v.clone(),
            None => CMatrix::identity(self.values.len(), self.values.len()),
        }
    }

    fn reconstruct(&self, f: impl Fn(f64) -> f64) -> HermitianOp {
        let mapped: Vec<f64> = self.values.iter().map(|&x| f(x)).collect();
        match &self.vectors {
            None => HermitianOp::diagonal(mapped),
            Some(v) => {
                let mut scaled = v.clone();
                for (j, &w) in mapped.iter().enumerate() {
                    scaled.column_mut(j).scale_mut(w);
                }
                let out = HermitianOp::symmetrized(scaled * v.adjoint());
                if !out.is_diagonal() {
                    let _ = out.spectrum.set(Arc::new(Spectrum {
                        values: mapped,
                        vectors: Some(v.clone()),
                    }));
                }
                out
            }
        }
    }
}

/// Groups basis indices into the connected components of the nonzero pattern of `m`.
fn sparsity_components(m: &CMatrix) -> Vec<Vec<usize>> {
    let n = m.nrows();
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for j in 0..n {
        for i in 0..j {
            let z = m[(i, j)];
            if z.re != 0.0 || z.im != 0.0 {
                let (a, b) = (root(&mut parent, i), root(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = root(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(i);
    }
    groups
}

/// Eigen-decomposition, block by block when the matrix is reducible in the standard basis.
fn dense_spectrum(m: &CMatrix) -> Spectrum {
    let n = m.nrows();
    let groups = if n >= 16 { sparsity_components(m) } else { vec![(0..n).collect()] };
    if groups.len() == 1 {
        let eig = SymmetricEigen::new(m.clone());
        return Spectrum {
            values: eig.eigenvalues.iter().copied().collect(),
            vectors: Some(eig.eigenvectors),
        };
    }
    let mut values = Vec::with_capacity(n);
    let mut vectors = CMatrix::zeros(n, n);
    for g in &groups {
        let sub = CMatrix::from_fn(g.len(), g.len(), |i, j| m[(g[i], g[j])]);
        let eig = SymmetricEigen::new(sub);
        for k in 0..g.len() {
            let col = values.len();
            values.push(eig.eigenvalues[k]);
            for (i, &gi) in g.iter().enumerate() {
                vectors[(gi, col)] = eig.eigenvectors[(i, k)];
            }
        }
    }
    Spectrum {
        values,
        vectors: Some(vectors),
    }
}

#[derive(Clone, Debug)]
enum Storage {
    Diagonal(Vec<f64>),
    Dense(CMatrix),
}

/// A hermitian matrix with a lazily cached spectrum.
#[derive(Clone, Debug)]
pub struct HermitianOp {
    storage: Storage,
    spectrum: OnceLock<Arc<Spectrum>>,
}

impl PartialEq for HermitianOp {
    fn eq(&self, other: &Self) -> bool {
        self.dim() == other.dim() && self.sub(other).map(|d| d.max_abs_entry() == 0.0).unwrap_or(false)
    }
}

fn relative_antihermitian(m: &CMatrix) -> f64 {
    let scale = m.norm();
    if scale == 0.0 {
        return 0.0;
    }
    (m - m.adjoint()).norm() / scale
}

fn is_offdiag_zero(m: &CMatrix) -> bool {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..n {
            if i != j && m[(i, j)] != C64::new(0.0, 0.0) {
                return false;
            }
        }
    }
    true
}

impl HermitianOp {
    fn from_storage(storage: Storage) -> Self {
        Self {
            storage,
            spectrum: OnceLock::new(),
        }
    }

    /// Validates hermiticity to `HERMITIAN_TOL`, then symmetrizes.
    pub fn from_dense(m: CMatrix) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension(format!(
                "operator must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let dev = relative_antihermitian(&m);
        if dev > HERMITIAN_TOL {
            return Err(Error::NotHermitian(dev));
        }
        Ok(Self::symmetrized(m))
    }

    /// Symmetrizes without the deviation guard. For results hermitian by construction.
    pub(crate) fn symmetrized(m: CMatrix) -> Self {
        if is_offdiag_zero(&m) {
            return Self::diagonal((0..m.nrows()).map(|i| m[(i, i)].re).collect());
        }
        let h = (&m + m.adjoint()) * C64::new(0.5, 0.0);
        Self::from_storage(Storage::Dense(h))
    }

    /// Builds from row-major entries.
    pub fn from_rows(dim: usize, entries: &[C64]) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::Dimension(format!(
                "expected {} entries, got {}",
                dim * dim,
                entries.len()
            )));
        }
        Self::from_dense(CMatrix::from_row_slice(dim, dim, entries))
    }

    pub fn from_real_rows(dim: usize, entries: &[f64]) -> Result<Self> {
        let c: Vec<C64> = entries.iter().map(|&x| C64::new(x, 0.0)).collect();
        Self::from_rows(dim, &c)
    }

    pub fn diagonal(values: Vec<f64>) -> Self {
        Self::from_storage(Storage::Diagonal(values))
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(vec![1.0; dim])
    }

    pub fn zeros(dim: usize) -> Self {
        Self::diagonal(vec![0.0; dim])
    }

    pub fn pauli_x() -> Self {
        Self::from_real_rows(2, &[0.0, 1.0, 1.0, 0.0]).expect("pauli x")
    }

    pub fn pauli_y() -> Self {
        let i = C64::new(0.0, 1.0);
        Self::from_rows(2, &[C64::new(0.0, 0.0), -i, i, C64::new(0.0, 0.0)]).expect("pauli y")
    }

    pub fn pauli_z() -> Self {
        Self::diagonal(vec![1.0, -1.0])
    }

    pub fn dim(&self) -> usize {
        match &self.storage {
            Storage::Diagonal(v) => v.len(),
            Storage::Dense(m) => m.nrows(),
        }
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.storage, Storage::Diagonal(_))
    }

    /// Diagonal values when stored diagonally.
    pub fn diagonal_values(&self) -> Option<&[f64]> {
        match &self.storage {
            Storage::Diagonal(v) => Some(v),
            Storage::Dense(_) => None,
        }
    }

    pub fn dense(&self) -> Option<&CMatrix> {
        match &self.storage {
            Storage::Dense(m) => Some(m),
            Storage::Diagonal(_) => None,
        }
    }

    pub fn to_dense(&self) -> CMatrix {
        match &self.storage {
            Storage::Dense(m) => m.clone(),
            Storage::Diagonal(v) => {
                let mut m = CMatrix::zeros(v.len(), v.len());
                for (i, &x) in v.iter().enumerate() {
                    m[(i, i)] = C64::new(x, 0.0);
                }
                m
            }
        }
    }

    pub fn entry(&self, i: usize, j: usize) -> C64 {
        match &self.storage {
            Storage::Dense(m) => m[(i, j)],
            Storage::Diagonal(v) => {
                if i == j {
                    C64::new(v[i], 0.0)
                } else {
                    C64::new(0.0, 0.0)
                }
            }
        }
    }

    pub fn diag_real(&self) -> Vec<f64> {
        match &self.storage {
            Storage::Diagonal(v) => v.clone(),
            Storage::Dense(m) => (0..m.nrows()).map(|i| m[(i, i)].re).collect(),
        }
    }

    pub fn max_abs_entry(&self) -> f64 {
        match &self.storage {
            Storage::Diagonal(v) => v.iter().fold(0.0, |a, x| a.max(x.abs())),
            Storage::Dense(m) => m.iter().fold(0.0, |a, x| a.max(x.norm())),
        }
    }

    fn check_same_dim(&self, other: &Self) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension(format!(
                "operand dimensions {} and {} differ",
                self.dim(),
                other.dim()
            )));
        }
        Ok(())
    }

    fn combine(&self, other: &Self, a: f64, b: f64) -> Result<Self> {
        self.check_same_dim(other)?;
        Ok(match (&self.storage, &other.storage) {
            (Storage::Diagonal(x), Storage::Diagonal(y)) => {
                Self::diagonal(x.iter().zip(y).map(|(p, q)| a * p + b * q).collect())
            }
            _ => {
                let m = self.to_dense() * C64::new(a, 0.0) + other.to_dense() * C64::new(b, 0.0);
                Self::symmetrized(m)
            }
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.combine(other, 1.0, 1.0)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.combine(other, 1.0, -1.0)
    }

    /// `a * self + b * other`.
    pub fn linear_combination(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        self.combine(other, a, b)
    }

    pub fn scale(&self, c: f64) -> Self {
        match &self.storage {
            Storage::Diagonal(v) => Self::diagonal(v.iter().map(|x| c * x).collect()),
            Storage::Dense(m) => Self::from_storage(Storage::Dense(m * C64::new(c, 0.0))),
        }
    }

    /// `self + c·1`.
    pub fn shift(&self, c: f64) -> Self {
        match &self.storage {
            Storage::Diagonal(v) => Self::diagonal(v.iter().map(|x| x + c).collect()),
            Storage::Dense(m) => {
                let mut m = m.clone();
                for i in 0..m.nrows() {
                    m[(i, i)] += C64::new(c, 0.0);
                }
                Self::from_storage(Storage::Dense(m))
            }
        }
    }

    pub fn trace(&self) -> f64 {
        match &self.storage {
            Storage::Diagonal(v) => v.iter().sum(),
            Storage::Dense(m) => m.trace().re,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        match &self.storage {
            Storage::Diagonal(v) => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Storage::Dense(m) => m.norm(),
        }
    }

    /// Cached eigen-decomposition.
    pub fn spectrum(&self) -> &Spectrum {
        self.spectrum.get_or_init(|| {
            Arc::new(match &self.storage {
                Storage::Diagonal(v) => Spectrum {
                    values: v.clone(),
                    vectors: None,
                },
                Storage::Dense(m) => dense_spectrum(m),
            })
        })
    }

    /// Operator norm.
    pub fn norm(&self) -> f64 {
        match &self.storage {
            Storage::Diagonal(v) => v.iter().fold(0.0, |a, x| a.max(x.abs())),
            Storage::Dense(_) => {
                let s = self.spectrum();
                s.max().abs().max(s.min().abs())
            }
        }
    }

    pub fn trace_norm(&self) -> f64 {
        self.spectrum().values().iter().map(|x| x.abs()).sum()
    }

    /// Functional calculus `f(self)`.
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> Self {
        match &self.storage {
            Storage::Diagonal(v) => Self::diagonal(v.iter().map(|&x| f(x)).collect()),
            Storage::Dense(_) => self.spectrum().reconstruct(f),
        }
    }

    pub fn expm(&self) -> Self {
        self.apply(f64::exp)
    }

    pub fn logm(&self) -> Result<Self> {
        let min = self.spectrum().min();
        if min <= EIGEN_FLOOR {
            return Err(Error::Singular(min));
        }
        Ok(self.apply(f64::ln))
    }

    /// `log Tr exp(self)` without overflow.
    pub fn log_trace_exp(&self) -> f64 {
        let s = self.spectrum();
        let top = s.max();
        top + s.values().iter().map(|x| (x - top).exp()).sum::<f64>().ln()
    }

    /// Projection onto the span of eigenvectors whose eigenvalue satisfies `keep`.
    pub fn spectral_projection(&self, keep: impl Fn(f64) -> bool) -> Self {
        self.apply(|x| if keep(x) { 1.0 } else { 0.0 })
    }

    /// `Re Tr(self · other)`.
    pub fn trace_product(&self, other: &Self) -> Result<f64> {
        self.check_same_dim(other)?;
        Ok(match (&self.storage, &other.storage) {
            (Storage::Diagonal(x), Storage::Diagonal(y)) => x.iter().zip(y).map(|(a, b)| a * b).sum(),
            (Storage::Diagonal(x), Storage::Dense(m)) | (Storage::Dense(m), Storage::Diagonal(x)) => {
                x.iter().enumerate().map(|(i, a)| a * m[(i, i)].re).sum()
            }
            (Storage::Dense(a), Storage::Dense(b)) => {
                // Tr(AB) = sum_ij A_ij B_ji = sum_ij A_ij conj(B_ij) for hermitian B
                a.iter().zip(b.iter()).map(|(x, y)| (x * y.conj()).re).sum()
            }
        })
    }

    pub fn matmul(&self, other: &Self) -> Result<CMatrix> {
        self.check_same_dim(other)?;
        Ok(match (&self.storage, &other.storage) {
            (Storage::Diagonal(x), Storage::Diagonal(y)) => {
                let mut m = CMatrix::zeros(x.len(), x.len());
                for i in 0..x.len() {
                    m[(i, i)] = C64::new(x[i] * y[i], 0.0);
                }
                m
            }
            (Storage::Diagonal(x), Storage::Dense(b)) => {
                let mut m = b.clone();
                for (i, &s) in x.iter().enumerate() {
                    m.row_mut(i).scale_mut(s);
                }
                m
            }
            (Storage::Dense(a), Storage::Diagonal(y)) => {
                let mut m = a.clone();
                for (j, &s) in y.iter().enumerate() {
                    m.column_mut(j).scale_mut(s);
                }
                m
            }
            (Storage::Dense(a), Storage::Dense(b)) => a * b,
        })
    }

    /// Operator norm of `[self, other]`.
    pub fn commutator_norm(&self, other: &Self) -> Result<f64> {
        if self.is_diagonal() && other.is_diagonal() {
            self.check_same_dim(other)?;
            return Ok(0.0);
        }
        let ab = self.matmul(other)?;
        let c = &ab - ab.adjoint();
        // i[A,B] is hermitian
        let h = Self::symmetrized(c * C64::new(0.0, 1.0));
        Ok(h.norm())
    }

    /// `(AB + BA)/2`, equal to `AB` when the operands commute.
    pub fn jordan_product(&self, other: &Self) -> Result<Self> {
        if let (Some(x), Some(y)) = (self.diagonal_values(), other.diagonal_values()) {
            self.check_same_dim(other)?;
            return Ok(Self::diagonal(x.iter().zip(y).map(|(a, b)| a * b).collect()));
        }
        let ab = self.matmul(other)?;
        Ok(Self::symmetrized((&ab + ab.adjoint()) * C64::new(0.5, 0.0)))
    }

    /// `U self U*`.
    pub fn conjugate(&self, u: &CMatrix) -> Result<Self> {
        if u.ncols() != self.dim() {
            return Err(Error::Dimension("conjugating matrix has wrong width".into()));
        }
        let m = match &self.storage {
            Storage::Diagonal(v) => {
                let mut scaled = u.clone();
                for (j, &s) in v.iter().enumerate() {
                    scaled.column_mut(j).scale_mut(s);
                }
                scaled * u.adjoint()
            }
            Storage::Dense(a) => u * a * u.adjoint(),
        };
        Ok(Self::symmetrized(m))
    }

    /// `V* self V` for a matrix `V` whose rows index this operator's space.
    pub fn compress(&self, v: &CMatrix) -> Result<Self> {
        if v.nrows() != self.dim() {
            return Err(Error::Dimension("compressing matrix has wrong height".into()));
        }
        let m = match &self.storage {
            Storage::Diagonal(d) => {
                let mut scaled = v.clone();
                for (i, &s) in d.iter().enumerate() {
                    scaled.row_mut(i).scale_mut(s);
                }
                v.adjoint() * scaled
            }
            Storage::Dense(a) => v.adjoint() * a * v,
        };
        Ok(Self::symmetrized(m))
    }

    /// Conjugation by the permutation sending basis vector `i` to `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.dim() {
            return Err(Error::Dimension("permutation length mismatch".into()));
        }
        Ok(match &self.storage {
            Storage::Diagonal(v) => {
                let mut out = vec![0.0; v.len()];
                for (i, &p) in perm.iter().enumerate() {
                    out[p] = v[i];
                }
                Self::diagonal(out)
            }
            Storage::Dense(a) => {
                let n = a.nrows();
                let mut out = CMatrix::zeros(n, n);
                for j in 0..n {
                    for i in 0..n {
                        out[(perm[i], perm[j])] = a[(i, j)];
                    }
                }
                Self::from_storage(Storage::Dense(out))
            }
        })
    }

    /// Principal submatrix on the listed indices.
    pub fn submatrix(&self, idx: &[usize]) -> Self {
        match &self.storage {
            Storage::Diagonal(v) => Self::diagonal(idx.iter().map(|&i| v[i]).collect()),
            Storage::Dense(a) => {
                let k = idx.len();
                let mut out = CMatrix::zeros(k, k);
                for (q, &j) in idx.iter().enumerate() {
                    for (p, &i) in idx.iter().enumerate() {
                        out[(p, q)] = a[(i, j)];
                    }
                }
                Self::symmetrized(out)
            }
        }
    }
}

impl std::ops::Add for &HermitianOp {
    type Output = HermitianOp;
    fn add(self, rhs: Self) -> HermitianOp {
        HermitianOp::add(self, rhs).expect("dimension mismatch in +")
    }
}

impl std::ops::Sub for &HermitianOp {
    type Output = HermitianOp;
    fn sub(self, rhs: Self) -> HermitianOp {
        HermitianOp::sub(self, rhs).expect("dimension mismatch in -")
    }
}

impl std::ops::Mul<f64> for &HermitianOp {
    type Output = HermitianOp;
    fn mul(self, rhs: f64) -> HermitianOp {
        self.scale(rhs)
    }
}

impl std::ops::Neg for &HermitianOp {
    type Output = HermitianOp;
    fn neg(self) -> HermitianOp {
        self.scale(-1.0)
    }
}

/// Kronecker product `a ⊗ b`.
pub fn tensor(a: &HermitianOp, b: &HermitianOp) -> Result<HermitianOp> {
    let dim = a.dim().checked_mul(b.dim()).ok_or(Error::Capacity {
        dim: usize::MAX,
        max: max_dim(),
    })?;
    check_capacity(dim)?;
    Ok(match (a.diagonal_values(), b.diagonal_values()) {
        (Some(x), Some(y)) => {
            let mut v = Vec::with_capacity(dim);
            for p in x {
                for q in y {
                    v.push(p * q);
                }
            }
            HermitianOp::diagonal(v)
        }
        _ => HermitianOp::symmetrized(a.to_dense().kronecker(&b.to_dense())),
    })
}

pub fn tensor_all(ops: &[HermitianOp]) -> Result<HermitianOp> {
    let mut acc = HermitianOp::identity(1);
    for op in ops {
        acc = tensor(&acc, op)?;
    }
    Ok(acc)
}

pub fn tensor_power(a: &HermitianOp, k: usize) -> Result<HermitianOp> {
    tensor_all(&vec![a.clone(); k])
}

/// Placement of a local operator on a subset of the sites `1..=n`.
#[derive(Clone, Debug)]
pub struct SiteEmbedding {
    n: usize,
    d: usize,
    support: Vec<usize>,
    support_offsets: Vec<usize>,
    rest_offsets: Vec<usize>,
}

fn digit_offsets(positions: &[usize], n: usize, d: usize) -> Vec<usize> {
    let mut offs = vec![0usize];
    for &p in positions {
        let w = d.pow((n - p) as u32);
        offs = offs
            .iter()
            .flat_map(|&o| (0..d).map(move |k| o + k * w))
            .collect();
    }
    offs
}

impl SiteEmbedding {
    pub fn new(n: usize, support: &[usize], d: usize) -> Result<Self> {
        if d == 0 || n == 0 {
            return Err(Error::Domain("chain length and local dimension must be positive".into()));
        }
        let mut sorted = support.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != support.len() || sorted != support {
            return Err(Error::Domain(format!("support {support:?} must be strictly increasing")));
        }
        if let Some(&bad) = support.iter().find(|&&s| s == 0 || s > n) {
            return Err(Error::Domain(format!("site {bad} outside [1, {n}]")));
        }
        site_dim(d, n)?;
        let rest: Vec<usize> = (1..=n).filter(|s| !support.contains(s)).collect();
        Ok(Self {
            n,
            d,
            support: support.to_vec(),
            support_offsets: digit_offsets(support, n, d),
            rest_offsets: digit_offsets(&rest, n, d),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn local_dim(&self) -> usize {
        self.support_offsets.len()
    }

    pub fn full_dim(&self) -> usize {
        self.support_offsets.len() * self.rest_offsets.len()
    }

    pub fn embed(&self, a: &HermitianOp) -> Result<HermitianOp> {
        if a.dim() != self.local_dim() {
            return Err(Error::Dimension(format!(
                "local operator has dimension {}, support needs {}",
                a.dim(),
                self.local_dim()
            )));
        }
        let big = self.full_dim();
        Ok(match a.diagonal_values() {
            Some(v) => {
                let mut out = vec![0.0; big];
                for &r in &self.rest_offsets {
                    for (s, &os) in self.support_offsets.iter().enumerate() {
                        out[os + r] = v[s];
                    }
                }
                HermitianOp::diagonal(out)
            }
            None => {
                let m = a.dense().expect("dense");
                let mut out = CMatrix::zeros(big, big);
                for &r in &self.rest_offsets {
                    for (t, &ot) in self.support_offsets.iter().enumerate() {
                        for (s, &os) in self.support_offsets.iter().enumerate() {
                            out[(os + r, ot + r)] = m[(s, t)];
                        }
                    }
                }
                HermitianOp::from_storage(Storage::Dense(out))
            }
        })
    }

    /// Partial trace over every site outside the support.
    pub fn trace_out(&self, a: &HermitianOp) -> Result<HermitianOp> {
        if a.dim() != self.full_dim() {
            return Err(Error::Dimension(format!(
                "operator has dimension {}, chain needs {}",
                a.dim(),
                self.full_dim()
            )));
        }
        let k = self.local_dim();
        Ok(match a.diagonal_values() {
            Some(v) => {
                let mut out = vec![0.0; k];
                for &r in &self.rest_offsets {
                    for (s, &os) in self.support_offsets.iter().enumerate() {
                        out[s] += v[os + r];
                    }
                }
                HermitianOp::diagonal(out)
            }
            None => {
                let m = a.dense().expect("dense");
                let mut out = CMatrix::zeros(k, k);
                for &r in &self.rest_offsets {
                    for (t, &ot) in self.support_offsets.iter().enumerate() {
                        for (s, &os) in self.support_offsets.iter().enumerate() {
                            out[(s, t)] += m[(os + r, ot + r)];
                        }
                    }
                }
                HermitianOp::symmetrized(out)
            }
        })
    }
}

pub fn embed(a: &HermitianOp, support: &[usize], n: usize, d: usize) -> Result<HermitianOp> {
    SiteEmbedding::new(n, support, d)?.embed(a)
}

pub fn partial_trace(a: &HermitianOp, keep: &[usize], n: usize, d: usize) -> Result<HermitianOp> {
    SiteEmbedding::new(n, keep, d)?.trace_out(a)
}

/// Sample from the Gaussian unitary ensemble.
pub fn random_hermitian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> HermitianOp {
    let mut m = CMatrix::zeros(dim, dim);
    for j in 0..dim {
        for i in 0..dim {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            m[(i, j)] = C64::new(re, im);
        }
    }
    HermitianOp::symmetrized(m)
}

/// Random full-rank density matrix `G G* / Tr`.
pub fn random_density<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> HermitianOp {
    let mut g = CMatrix::zeros(dim, dim);
    for j in 0..dim {
        for i in 0..dim {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            g[(i, j)] = C64::new(re, im);
        }
    }
    let p = HermitianOp::symmetrized(&g * g.adjoint());
    let t = p.trace();
    p.scale(1.0 / t)
}

/// Random unitary from the QR factorization of a complex Gaussian matrix.
pub fn random_unitary<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> CMatrix {
    let mut g = CMatrix::zeros(dim, dim);
    for j in 0..dim {
        for i in 0..dim {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            g[(i, j)] = C64::new(re, im);
        }
    }
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    let mut q = q;
    for j in 0..dim {
        let d = r[(j, j)];
        let phase = if d.norm() > 0.0 { d / d.norm() } else { C64::new(1.0, 0.0) };
        for x in q.column_mut(j).iter_mut() {
            *x *= phase;
        }
    }
    q
}
