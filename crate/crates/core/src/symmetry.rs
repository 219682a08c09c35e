//! Gauge actions on the chain, the isotypic block structure of their
//! fixed-point algebras, and the trace-preserving conditional expectation.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use nalgebra::linalg::SymmetricEigen;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::operator::{random_hermitian, site_dim, CMatrix, HermitianOp, C64};
use crate::series::ThermoSeries;

const CLOSURE_TOL: f64 = 1e-10;
const CLUSTER_TOL: f64 = 1e-8;
const MAX_RETRIES: usize = 5;
const KEY_SCALE: f64 = 1e8;

/// How the group acts on one site.
#[derive(Clone, Debug)]
pub enum Backend {
    /// Unitaries closed under product and inverse.
    FiniteGroup(Vec<CMatrix>),
    /// U(1) acting by `diag(exp(i t c_k))`.
    AbelianCharges(Vec<i64>),
    /// Hermitian generators of a Lie algebra representation.
    LieGenerators(Vec<CMatrix>),
}

#[derive(Clone, Debug)]
pub struct SymmetrySpec {
    d: usize,
    backend: Backend,
}

fn is_close(a: &CMatrix, b: &CMatrix, tol: f64) -> bool {
    (a - b).norm() <= tol
}

impl SymmetrySpec {
    pub fn finite_group(elements: Vec<CMatrix>) -> Result<Self> {
        let d = elements.first().map(|m| m.nrows()).ok_or_else(|| Error::InvalidSymmetry("empty group".into()))?;
        let id = CMatrix::identity(d, d);
        for (k, u) in elements.iter().enumerate() {
            if u.nrows() != d || u.ncols() != d {
                return Err(Error::InvalidSymmetry(format!("element {k} is not {d}x{d}")));
            }
            if !is_close(&(u * u.adjoint()), &id, CLOSURE_TOL) {
                return Err(Error::InvalidSymmetry(format!("element {k} is not unitary")));
            }
        }
        let contains = |m: &CMatrix| elements.iter().any(|e| is_close(e, m, CLOSURE_TOL));
        if !contains(&id) {
            return Err(Error::InvalidSymmetry("identity missing".into()));
        }
        for a in &elements {
            if !contains(&a.adjoint()) {
                return Err(Error::InvalidSymmetry("not closed under inverse".into()));
            }
            for b in &elements {
                if !contains(&(a * b)) {
                    return Err(Error::InvalidSymmetry("not closed under multiplication".into()));
                }
            }
        }
        Ok(Self {
            d,
            backend: Backend::FiniteGroup(elements),
        })
    }

    pub fn abelian_charges(charges: Vec<i64>) -> Result<Self> {
        if charges.is_empty() {
            return Err(Error::InvalidSymmetry("no charges".into()));
        }
        Ok(Self {
            d: charges.len(),
            backend: Backend::AbelianCharges(charges),
        })
    }

    /// `d` is needed because the generator list may be empty.
    pub fn lie_generators(d: usize, generators: Vec<CMatrix>) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidSymmetry("local dimension must be positive".into()));
        }
        for (k, x) in generators.iter().enumerate() {
            if x.nrows() != d || x.ncols() != d {
                return Err(Error::InvalidSymmetry(format!("generator {k} is not {d}x{d}")));
            }
            if HermitianOp::from_dense(x.clone()).is_err() {
                return Err(Error::InvalidSymmetry(format!("generator {k} is not hermitian")));
            }
        }
        Ok(Self {
            d,
            backend: Backend::LieGenerators(generators),
        })
    }

    pub fn trivial(d: usize) -> Self {
        Self {
            d,
            backend: Backend::FiniteGroup(vec![CMatrix::identity(d, d)]),
        }
    }

    /// SU(2) in its two-dimensional representation.
    pub fn su2_fundamental() -> Self {
        let gens = [HermitianOp::pauli_x(), HermitianOp::pauli_y(), HermitianOp::pauli_z()]
            .iter()
            .map(|p| p.to_dense() * C64::new(0.5, 0.0))
            .collect();
        Self {
            d: 2,
            backend: Backend::LieGenerators(gens),
        }
    }

    /// Cyclic group generated by `diag(exp(2πi c_k / order))`.
    pub fn cyclic_charges(charges: &[i64], order: usize) -> Result<Self> {
        let elements = (0..order)
            .map(|g| {
                let diag: Vec<C64> = charges
                    .iter()
                    .map(|&c| C64::from_polar(1.0, 2.0 * std::f64::consts::PI * (g as f64) * (c as f64) / order as f64))
                    .collect();
                CMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag))
            })
            .collect();
        Self::finite_group(elements)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    fn local_rep(&self) -> Rep {
        match &self.backend {
            Backend::FiniteGroup(g) => Rep {
                kind: RepKind::Group,
                mats: g.clone(),
            },
            Backend::AbelianCharges(c) => Rep {
                kind: RepKind::Algebra,
                mats: vec![CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
                    c.len(),
                    c.iter().map(|&x| C64::new(x as f64, 0.0)),
                ))],
            },
            Backend::LieGenerators(g) => Rep {
                kind: RepKind::Algebra,
                mats: g.clone(),
            },
        }
    }

    /// Whether every operator of the one-site action is diagonal.
    fn is_diagonal(&self) -> bool {
        self.local_rep().mats.iter().all(|m| {
            (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == C64::new(0.0, 0.0)))
        })
    }

    /// Per-basis-vector weight keys on `n` sites for a diagonal action.
    fn weight_keys(&self, n: usize) -> Result<Vec<Vec<i64>>> {
        let d = self.d;
        let dim = site_dim(d, n)?;
        let rep = self.local_rep();
        let mut keys = Vec::with_capacity(dim);
        for x in 0..dim {
            let digits: Vec<usize> = (0..n).map(|k| (x / d.pow((n - 1 - k) as u32)) % d).collect();
            let mut key = Vec::new();
            for m in &rep.mats {
                match rep.kind {
                    RepKind::Algebra => {
                        let w: f64 = digits.iter().map(|&s| m[(s, s)].re).sum();
                        key.push((w * KEY_SCALE).round() as i64);
                    }
                    RepKind::Group => {
                        let w = digits.iter().fold(C64::new(1.0, 0.0), |acc, &s| acc * m[(s, s)]);
                        key.push((w.re * KEY_SCALE).round() as i64);
                        key.push((w.im * KEY_SCALE).round() as i64);
                    }
                }
            }
            keys.push(key);
        }
        Ok(keys)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum RepKind {
    Group,
    Algebra,
}

#[derive(Clone, Debug)]
struct Rep {
    kind: RepKind,
    mats: Vec<CMatrix>,
}

impl Rep {
    fn dim(&self) -> usize {
        self.mats.first().map(|m| m.nrows()).unwrap_or(0)
    }

    fn tensor(&self, other: &Rep) -> Rep {
        let (p, q) = (self.dim(), other.dim());
        let mats = self
            .mats
            .iter()
            .zip(&other.mats)
            .map(|(a, b)| match self.kind {
                RepKind::Group => a.kronecker(b),
                RepKind::Algebra => a.kronecker(&CMatrix::identity(q, q)) + CMatrix::identity(p, p).kronecker(b),
            })
            .collect();
        Rep { kind: self.kind, mats }
    }

    fn restrict(&self, u: &CMatrix) -> Rep {
        Rep {
            kind: self.kind,
            mats: self.mats.iter().map(|m| u.adjoint() * m * u).collect(),
        }
    }

    /// Basis-independent label used to order blocks.
    fn key(&self) -> Vec<i64> {
        let k = self.dim() as f64;
        let q = |x: f64| (x * KEY_SCALE).round() as i64;
        let mut key = Vec::new();
        match self.kind {
            RepKind::Group => {
                for m in &self.mats {
                    let t = m.trace();
                    key.push(q(t.re));
                    key.push(q(t.im));
                }
            }
            RepKind::Algebra => {
                for m in &self.mats {
                    key.push(q(m.trace().re / k));
                }
                for (i, a) in self.mats.iter().enumerate() {
                    for b in &self.mats[i..] {
                        key.push(q((a * b).trace().re / k));
                    }
                }
            }
        }
        key
    }
}

/// Orthonormal basis of the null space of `m`, from its singular value decomposition.
fn nullspace(m: &CMatrix, rel_tol: f64) -> CMatrix {
    let cols = m.ncols();
    // pad to at least square so the decomposition returns a full right basis
    let padded = if m.nrows() < cols {
        let mut p = CMatrix::zeros(cols, cols);
        p.view_mut((0, 0), (m.nrows(), cols)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("right singular vectors");
    let top = svd.singular_values.iter().fold(0.0f64, |a, &x| a.max(x)).max(1.0);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] <= rel_tol * top)
        .collect();
    let mut out = CMatrix::zeros(cols, keep.len());
    for (k, &i) in keep.iter().enumerate() {
        out.set_column(k, &vt.row(i).adjoint());
    }
    out
}

/// Groups eigen-indices whose sorted eigenvalues differ by at most `tol`.
fn cluster(values: &[f64], tol: f64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if (values[i] - values[*g.last().unwrap()]).abs() <= tol => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

fn columns(m: &CMatrix, idx: &[usize]) -> CMatrix {
    let mut out = CMatrix::zeros(m.nrows(), idx.len());
    for (k, &i) in idx.iter().enumerate() {
        out.set_column(k, &m.column(i));
    }
    out
}

fn hs_inner(a: &CMatrix, b: &CMatrix) -> C64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

/// Orthogonal projection onto the commutant of a representation.
enum CommutantProjector {
    Average(Vec<CMatrix>),
    Basis(Vec<CMatrix>),
}

impl CommutantProjector {
    fn new(rep: &Rep, rng: &mut ChaCha8Rng) -> Self {
        match rep.kind {
            RepKind::Group => CommutantProjector::Average(rep.mats.clone()),
            RepKind::Algebra => CommutantProjector::Basis(lie_commutant_basis(rep, rng)),
        }
    }

    fn project(&self, a: &CMatrix) -> CMatrix {
        match self {
            CommutantProjector::Average(g) => {
                let mut acc = CMatrix::zeros(a.nrows(), a.ncols());
                for u in g {
                    acc += u * a * u.adjoint();
                }
                acc / C64::new(g.len() as f64, 0.0)
            }
            CommutantProjector::Basis(basis) => {
                let mut acc = CMatrix::zeros(a.nrows(), a.ncols());
                for b in basis {
                    acc += b * hs_inner(b, a);
                }
                acc
            }
        }
    }
}

/// Joint commutant of the generators: the null space of `a ↦ ([X_j, a])_j`,
/// searched inside the eigenspaces of a generic generator combination.
fn lie_commutant_basis(rep: &Rep, rng: &mut ChaCha8Rng) -> Vec<CMatrix> {
    let dim = rep.dim();
    if rep.mats.is_empty() {
        let mut out = Vec::with_capacity(dim * dim);
        for j in 0..dim {
            for i in 0..dim {
                let mut e = CMatrix::zeros(dim, dim);
                e[(i, j)] = C64::new(1.0, 0.0);
                out.push(e);
            }
        }
        return out;
    }
    use rand_distr::{Distribution, StandardNormal};
    let mut k = CMatrix::zeros(dim, dim);
    for x in &rep.mats {
        let c: f64 = StandardNormal.sample(rng);
        k += x * C64::new(c, 0.0);
    }
    let k = (&k + k.adjoint()) * C64::new(0.5, 0.0);
    let eig = SymmetricEigen::new(k);
    let vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let scale = vals.iter().fold(1.0f64, |a, x| a.max(x.abs()));
    let mut elementary = Vec::new();
    for g in cluster(&vals, CLUSTER_TOL * scale) {
        let v = columns(&eig.eigenvectors, &g);
        for q in 0..g.len() {
            for p in 0..g.len() {
                elementary.push(v.column(p) * v.column(q).adjoint());
            }
        }
    }
    let rows = rep.mats.len() * dim * dim;
    let mut m = CMatrix::zeros(rows, elementary.len());
    for (c, e) in elementary.iter().enumerate() {
        for (j, x) in rep.mats.iter().enumerate() {
            let comm = x * e - e * x;
            for (r, v) in comm.iter().enumerate() {
                m[(j * dim * dim + r, c)] = *v;
            }
        }
    }
    let null = nullspace(&m, 1e-8);
    (0..null.ncols())
        .map(|c| {
            let mut b = CMatrix::zeros(dim, dim);
            for (i, e) in elementary.iter().enumerate() {
                b += e * null[(i, c)];
            }
            b
        })
        .collect()
}

/// Splits a representation into irreducible subspaces by the two-probe method.
fn irreducible_subspaces(rep: &Rep, seed: u64) -> Result<Vec<CMatrix>> {
    let dim = rep.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = CommutantProjector::new(rep, &mut rng);
    let mut last = String::new();
    for _ in 0..MAX_RETRIES {
        let a = proj.project(&random_hermitian(dim, &mut rng).to_dense());
        let a = (&a + a.adjoint()) * C64::new(0.5, 0.0);
        let b = proj.project(&random_hermitian(dim, &mut rng).to_dense());
        let eig = SymmetricEigen::new(a);
        let vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        let mut ok = true;
        let mut out = Vec::new();
        for g in cluster(&vals, CLUSTER_TOL) {
            let u = columns(&eig.eigenvectors, &g);
            let c = u.adjoint() * &b * &u;
            let k = g.len() as f64;
            let scalar = c.trace() / C64::new(k, 0.0);
            let dev = (&c - CMatrix::identity(g.len(), g.len()) * scalar).norm();
            if dev > CLUSTER_TOL * (1.0 + b.norm()) {
                ok = false;
                last = format!("eigenspace of dimension {} is reducible (defect {dev:.2e})", g.len());
                break;
            }
            out.push(u);
        }
        if ok {
            return Ok(out);
        }
    }
    Err(Error::Decomposition {
        attempts: MAX_RETRIES,
        reason: last,
    })
}

/// Unitary `Q` with `Q ρ_b Q* = ρ_a`, when the two irreducibles are equivalent.
fn intertwiner(a: &Rep, b: &Rep) -> Option<CMatrix> {
    let k = a.dim();
    if k != b.dim() {
        return None;
    }
    let id = CMatrix::identity(k, k);
    let blocks: Vec<CMatrix> = a
        .mats
        .iter()
        .zip(&b.mats)
        .map(|(x, y)| id.kronecker(x) - y.transpose().kronecker(&id))
        .collect();
    let mut m = CMatrix::zeros(blocks.len() * k * k, k * k);
    for (j, blk) in blocks.iter().enumerate() {
        m.view_mut((j * k * k, 0), (k * k, k * k)).copy_from(blk);
    }
    let null = nullspace(&m, 1e-7);
    if null.ncols() == 0 {
        return None;
    }
    let t = CMatrix::from_column_slice(k, k, null.column(0).as_slice());
    let c = (t.adjoint() * &t).trace().re / k as f64;
    if c <= 0.0 {
        return None;
    }
    let q = t / C64::new(c.sqrt(), 0.0);
    if !is_close(&(&q * q.adjoint()), &id, 1e-6) {
        return None;
    }
    Some(q)
}

#[derive(Clone, Debug)]
struct Irrep {
    rep: Rep,
    key: Vec<i64>,
}

/// Irreducible pieces of `ρ_κ ⊗ σ`: target irrep and aligned isometry.
type Fusion = Vec<(usize, CMatrix)>;

#[derive(Default)]
struct FusionCache {
    catalog: Vec<Irrep>,
    site: Option<Fusion>,
    fusion: BTreeMap<usize, Fusion>,
    levels: Vec<BTreeMap<usize, usize>>,
}

impl FusionCache {
    fn classify(&mut self, whole: &Rep, subspaces: Vec<CMatrix>) -> Fusion {
        let mut out = Vec::new();
        for u in subspaces {
            let r = whole.restrict(&u);
            let found = self
                .catalog
                .iter()
                .enumerate()
                .find_map(|(i, irr)| intertwiner(&irr.rep, &r).map(|q| (i, q)));
            match found {
                Some((i, q)) => out.push((i, &u * q.adjoint())),
                None => {
                    let key = r.key();
                    self.catalog.push(Irrep { rep: r, key });
                    out.push((self.catalog.len() - 1, u));
                }
            }
        }
        out
    }

    fn ensure(&mut self, spec: &SymmetrySpec, seed: u64, n: usize) -> Result<()> {
        let sigma = spec.local_rep();
        if self.site.is_none() {
            let subs = irreducible_subspaces(&sigma, seed)?;
            let f = self.classify(&sigma, subs);
            let mut lvl = BTreeMap::new();
            for (i, _) in &f {
                *lvl.entry(*i).or_insert(0) += 1;
            }
            self.site = Some(f);
            self.levels.push(lvl);
        }
        while self.levels.len() < n {
            let prev = self.levels.last().unwrap().clone();
            let mut next = BTreeMap::new();
            for (&kappa, &m) in &prev {
                if !self.fusion.contains_key(&kappa) {
                    let w = self.catalog[kappa].rep.tensor(&sigma);
                    let subs = irreducible_subspaces(&w, seed.wrapping_add(1 + kappa as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))?;
                    let f = self.classify(&w, subs);
                    self.fusion.insert(kappa, f);
                }
                for (target, _) in &self.fusion[&kappa] {
                    *next.entry(*target).or_insert(0) += m;
                }
            }
            self.levels.push(next);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub multiplicity: usize,
    pub irrep_dim: usize,
    /// First column of this block in the block basis.
    pub offset: usize,
    pub key: Vec<i64>,
}

#[derive(Clone, Debug)]
pub enum BasisChange {
    /// Block-basis column `j` is standard basis vector `perm[j]`.
    Permutation(Vec<usize>),
    Unitary(CMatrix),
}

/// `ℂ^{d^n} ≅ ⊕ᵢ ℂ^{mᵢ} ⊗ ℂ^{dᵢ}` with the fixed-point algebra acting on the first factors.
#[derive(Clone, Debug)]
pub struct BlockDecomposition {
    n: usize,
    d: usize,
    blocks: Vec<Block>,
    basis: BasisChange,
}

impl BlockDecomposition {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.multiplicity * b.irrep_dim).sum()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn structure(&self) -> Vec<(usize, usize)> {
        self.blocks.iter().map(|b| (b.multiplicity, b.irrep_dim)).collect()
    }

    pub fn max_irrep_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.irrep_dim).max().unwrap_or(1)
    }

    pub fn basis_change(&self) -> &BasisChange {
        &self.basis
    }

    /// The unitary whose columns are the block basis.
    pub fn basis_matrix(&self) -> CMatrix {
        match &self.basis {
            BasisChange::Unitary(u) => u.clone(),
            BasisChange::Permutation(p) => {
                let mut u = CMatrix::zeros(p.len(), p.len());
                for (j, &i) in p.iter().enumerate() {
                    u[(i, j)] = C64::new(1.0, 0.0);
                }
                u
            }
        }
    }

    fn block_columns(&self, i: usize) -> std::ops::Range<usize> {
        let b = &self.blocks[i];
        b.offset..b.offset + b.multiplicity * b.irrep_dim
    }

    /// Diagonal block `i` of `a` in the block basis.
    fn block_of(&self, a: &HermitianOp, i: usize) -> Result<HermitianOp> {
        let cols = self.block_columns(i);
        match &self.basis {
            BasisChange::Permutation(p) => Ok(a.submatrix(&p[cols])),
            BasisChange::Unitary(u) => a.compress(&u.columns(cols.start, cols.len()).into_owned()),
        }
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if dim != self.dim() {
            return Err(Error::Dimension(format!("operator has dimension {dim}, decomposition {}", self.dim())));
        }
        Ok(())
    }

    /// Blockwise `Tr_{dᵢ}` of the diagonal blocks. For a density this is its
    /// restriction to the fixed-point algebra relative to the canonical trace.
    pub fn restrict(&self, a: &HermitianOp) -> Result<Vec<HermitianOp>> {
        self.check_dim(a.dim())?;
        (0..self.blocks.len())
            .map(|i| {
                let blk = self.block_of(a, i)?;
                let (m, k) = (self.blocks[i].multiplicity, self.blocks[i].irrep_dim);
                Ok(trace_irrep_factor(&blk, m, k))
            })
            .collect()
    }

    /// Blocks `aᵢ` of an operator `a = ⊕ aᵢ ⊗ 1` of the fixed-point algebra.
    pub fn compress_fixed(&self, a: &HermitianOp) -> Result<Vec<HermitianOp>> {
        let blocks: Vec<HermitianOp> = self
            .restrict(a)?
            .into_iter()
            .zip(&self.blocks)
            .map(|(r, b)| r.scale(1.0 / b.irrep_dim as f64))
            .collect();
        let total = a.frobenius_norm().powi(2);
        let kept: f64 = blocks
            .iter()
            .zip(&self.blocks)
            .map(|(r, b)| b.irrep_dim as f64 * r.frobenius_norm().powi(2))
            .sum();
        let residual = (total - kept).max(0.0).sqrt();
        if residual > 1e-6 * (1.0 + total.sqrt()) {
            return Err(Error::Domain(format!(
                "operator is not in the fixed-point algebra (residual {residual:.3e})"
            )));
        }
        Ok(blocks)
    }

    /// `U (⊕ aᵢ ⊗ 1_{dᵢ}) U*`.
    pub fn lift(&self, blocks: &[HermitianOp]) -> Result<HermitianOp> {
        if blocks.len() != self.blocks.len() {
            return Err(Error::Dimension("wrong number of blocks".into()));
        }
        for (a, b) in blocks.iter().zip(&self.blocks) {
            if a.dim() != b.multiplicity {
                return Err(Error::Dimension(format!("block has dimension {}, expected {}", a.dim(), b.multiplicity)));
            }
        }
        let dim = self.dim();
        match &self.basis {
            BasisChange::Permutation(p) => {
                if blocks.iter().all(|a| a.is_diagonal()) {
                    let mut out = vec![0.0; dim];
                    for (a, b) in blocks.iter().zip(&self.blocks) {
                        let v = a.diagonal_values().unwrap();
                        for (r, &x) in v.iter().enumerate() {
                            out[p[b.offset + r]] = x;
                        }
                    }
                    return Ok(HermitianOp::diagonal(out));
                }
                let inner = self.block_diagonal(blocks);
                let mut out = CMatrix::zeros(dim, dim);
                for j in 0..dim {
                    for i in 0..dim {
                        out[(p[i], p[j])] = inner[(i, j)];
                    }
                }
                Ok(HermitianOp::symmetrized(out))
            }
            BasisChange::Unitary(u) => {
                let inner = self.block_diagonal(blocks);
                Ok(HermitianOp::symmetrized(u * inner * u.adjoint()))
            }
        }
    }

    fn block_diagonal(&self, blocks: &[HermitianOp]) -> CMatrix {
        let dim = self.dim();
        let mut out = CMatrix::zeros(dim, dim);
        for (a, b) in blocks.iter().zip(&self.blocks) {
            let k = b.irrep_dim;
            for q in 0..b.multiplicity {
                for p in 0..b.multiplicity {
                    let v = a.entry(p, q);
                    for s in 0..k {
                        out[(b.offset + p * k + s, b.offset + q * k + s)] = v;
                    }
                }
            }
        }
        out
    }

    /// Trace-preserving conditional expectation onto the fixed-point algebra.
    pub fn conditional_expectation(&self, a: &HermitianOp) -> Result<HermitianOp> {
        let blocks: Vec<HermitianOp> = self
            .restrict(a)?
            .into_iter()
            .zip(&self.blocks)
            .map(|(r, b)| r.scale(1.0 / b.irrep_dim as f64))
            .collect();
        self.lift(&blocks)
    }

    /// Same as [`Self::conditional_expectation`] for an arbitrary complex matrix.
    pub fn conditional_expectation_matrix(&self, a: &CMatrix) -> Result<CMatrix> {
        self.check_dim(a.nrows())?;
        let u = self.basis_matrix();
        let w = u.adjoint() * a * &u;
        let mut inner = CMatrix::zeros(a.nrows(), a.ncols());
        for b in &self.blocks {
            let k = b.irrep_dim;
            for q in 0..b.multiplicity {
                for p in 0..b.multiplicity {
                    let mut t = C64::new(0.0, 0.0);
                    for s in 0..k {
                        t += w[(b.offset + p * k + s, b.offset + q * k + s)];
                    }
                    t /= k as f64;
                    for s in 0..k {
                        inner[(b.offset + p * k + s, b.offset + q * k + s)] = t;
                    }
                }
            }
        }
        Ok(&u * inner * u.adjoint())
    }

    /// Largest deviation of the conjugated one-site action from `⊕ 1_{mᵢ} ⊗ uᵢ`.
    pub fn structure_defect(&self, spec: &SymmetrySpec) -> Result<f64> {
        let rep = spec.local_rep();
        let u = self.basis_matrix();
        let mut worst = 0.0f64;
        for x in &rep.mats {
            let global = match rep.kind {
                RepKind::Group => (1..self.n).fold(x.clone(), |acc, _| acc.kronecker(x)),
                RepKind::Algebra => {
                    let dim = self.dim();
                    let mut acc = CMatrix::zeros(dim, dim);
                    for site in 1..=self.n {
                        acc += apply_site_left(&CMatrix::identity(dim, dim), x, site, self.n, self.d);
                    }
                    acc
                }
            };
            let w = u.adjoint() * global * &u;
            let mut expected = CMatrix::zeros(w.nrows(), w.ncols());
            for b in &self.blocks {
                let k = b.irrep_dim;
                let first = w.view((b.offset, b.offset), (k, k)).into_owned();
                for p in 0..b.multiplicity {
                    expected
                        .view_mut((b.offset + p * k, b.offset + p * k), (k, k))
                        .copy_from(&first);
                }
            }
            worst = worst.max((&w - expected).norm());
        }
        Ok(worst)
    }
}

/// Partial trace over the second factor of `ℂ^m ⊗ ℂ^k`.
fn trace_irrep_factor(a: &HermitianOp, m: usize, k: usize) -> HermitianOp {
    if k == 1 {
        return a.clone();
    }
    if let Some(v) = a.diagonal_values() {
        return HermitianOp::diagonal((0..m).map(|p| (0..k).map(|s| v[p * k + s]).sum()).collect());
    }
    let mut out = CMatrix::zeros(m, m);
    for q in 0..m {
        for p in 0..m {
            let mut t = C64::new(0.0, 0.0);
            for s in 0..k {
                t += a.entry(p * k + s, q * k + s);
            }
            out[(p, q)] = t;
        }
    }
    HermitianOp::symmetrized(out)
}

/// `(1 ⊗ … ⊗ u ⊗ … ⊗ 1) a` with `u` on `site`.
fn apply_site_left(a: &CMatrix, u: &CMatrix, site: usize, n: usize, d: usize) -> CMatrix {
    let w = d.pow((n - site) as u32);
    let rows = a.nrows();
    let mut out = CMatrix::zeros(rows, a.ncols());
    for c in 0..a.ncols() {
        for row in 0..rows {
            let digit = (row / w) % d;
            let base = row - digit * w;
            let mut acc = C64::new(0.0, 0.0);
            for t in 0..d {
                let coef = u[(digit, t)];
                if coef != C64::new(0.0, 0.0) {
                    acc += coef * a[(base + t * w, c)];
                }
            }
            out[(row, c)] = acc;
        }
    }
    out
}

fn apply_product_left(a: &CMatrix, u: &CMatrix, n: usize, d: usize) -> CMatrix {
    (1..=n).fold(a.clone(), |acc, site| apply_site_left(&acc, u, site, n, d))
}

/// A symmetry together with its cached per-volume decompositions.
pub struct GaugeSymmetry {
    spec: SymmetrySpec,
    seed: u64,
    diagonal: bool,
    fusion: Mutex<FusionCache>,
    decompositions: Mutex<BTreeMap<usize, Arc<BlockDecomposition>>>,
}

impl std::fmt::Debug for GaugeSymmetry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GaugeSymmetry").field("spec", &self.spec).field("seed", &self.seed).finish()
    }
}

impl GaugeSymmetry {
    pub fn new(spec: SymmetrySpec, seed: u64) -> Self {
        let diagonal = spec.is_diagonal();
        Self {
            spec,
            seed,
            diagonal,
            fusion: Mutex::new(FusionCache::default()),
            decompositions: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn spec(&self) -> &SymmetrySpec {
        &self.spec
    }

    pub fn d(&self) -> usize {
        self.spec.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Whether the one-site action is diagonal, so every irrep is one-dimensional.
    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    /// `(mᵢ, dᵢ)` sorted as in [`Self::decompose`], without building any basis.
    pub fn block_structure(&self, n: usize) -> Result<Vec<(usize, usize)>> {
        if n == 0 {
            return Ok(vec![(1, 1)]);
        }
        if self.diagonal {
            let keys = self.spec.weight_keys(n)?;
            let mut counts: BTreeMap<Vec<i64>, usize> = BTreeMap::new();
            for k in keys {
                *counts.entry(k).or_insert(0) += 1;
            }
            return Ok(counts.values().map(|&m| (m, 1)).collect());
        }
        let mut cache = self.fusion.lock().unwrap();
        cache.ensure(&self.spec, self.seed, n)?;
        let mut blocks: Vec<(usize, Vec<i64>, usize, usize)> = cache.levels[n - 1]
            .iter()
            .map(|(&k, &m)| (cache.catalog[k].rep.dim(), cache.catalog[k].key.clone(), k, m))
            .collect();
        blocks.sort();
        Ok(blocks.into_iter().map(|(dim, _, _, m)| (m, dim)).collect())
    }

    /// Isotypic decomposition of the `n`-site chain, cached per `n`.
    pub fn decompose(&self, n: usize) -> Result<Arc<BlockDecomposition>> {
        if n == 0 {
            return Err(Error::Domain("chain length must be positive".into()));
        }
        if let Some(dec) = self.decompositions.lock().unwrap().get(&n) {
            return Ok(dec.clone());
        }
        site_dim(self.spec.d, n)?;
        let dec = Arc::new(if self.diagonal {
            self.decompose_diagonal(n)?
        } else {
            self.decompose_general(n)?
        });
        self.decompositions.lock().unwrap().insert(n, dec.clone());
        Ok(dec)
    }

    fn decompose_diagonal(&self, n: usize) -> Result<BlockDecomposition> {
        let keys = self.spec.weight_keys(n)?;
        let mut perm: Vec<usize> = (0..keys.len()).collect();
        perm.sort_by(|&a, &b| keys[a].cmp(&keys[b]).then(a.cmp(&b)));
        let mut blocks: Vec<Block> = Vec::new();
        for (j, &i) in perm.iter().enumerate() {
            match blocks.last_mut() {
                Some(b) if b.key == keys[i] => b.multiplicity += 1,
                _ => blocks.push(Block {
                    multiplicity: 1,
                    irrep_dim: 1,
                    offset: j,
                    key: keys[i].clone(),
                }),
            }
        }
        Ok(BlockDecomposition {
            n,
            d: self.spec.d,
            blocks,
            basis: BasisChange::Permutation(perm),
        })
    }

    fn decompose_general(&self, n: usize) -> Result<BlockDecomposition> {
        let d = self.spec.d;
        let mut cache = self.fusion.lock().unwrap();
        cache.ensure(&self.spec, self.seed, n)?;
        let mut copies: BTreeMap<usize, Vec<CMatrix>> = BTreeMap::new();
        for (k, u) in cache.site.as_ref().unwrap() {
            copies.entry(*k).or_default().push(u.clone());
        }
        for _ in 1..n {
            let mut next: BTreeMap<usize, Vec<CMatrix>> = BTreeMap::new();
            for (kappa, list) in &copies {
                for (target, iso) in &cache.fusion[kappa] {
                    for c in list {
                        next.entry(*target).or_default().push(lift_copy(c, iso, d));
                    }
                }
            }
            copies = next;
        }
        let mut order: Vec<(usize, Vec<i64>, usize)> = copies
            .keys()
            .map(|&k| (cache.catalog[k].rep.dim(), cache.catalog[k].key.clone(), k))
            .collect();
        order.sort();
        let dim = d.pow(n as u32);
        let mut u = CMatrix::zeros(dim, dim);
        let mut blocks = Vec::new();
        let mut col = 0;
        for (k_dim, key, kappa) in order {
            let list = &copies[&kappa];
            blocks.push(Block {
                multiplicity: list.len(),
                irrep_dim: k_dim,
                offset: col,
                key,
            });
            for c in list {
                u.view_mut((0, col), (dim, k_dim)).copy_from(c);
                col += k_dim;
            }
        }
        Ok(BlockDecomposition {
            n,
            d,
            blocks,
            basis: BasisChange::Unitary(u),
        })
    }

    /// Haar average over the gauge group of an arbitrary `d^n × d^n` matrix.
    pub fn gauge_average_matrix(&self, a: &CMatrix, n: usize) -> Result<CMatrix> {
        let dim = site_dim(self.spec.d, n)?;
        if a.nrows() != dim || a.ncols() != dim {
            return Err(Error::Dimension(format!("expected {dim}x{dim} matrix")));
        }
        if self.diagonal {
            let keys = self.spec.weight_keys(n)?;
            let mut out = a.clone();
            for j in 0..dim {
                for i in 0..dim {
                    if keys[i] != keys[j] {
                        out[(i, j)] = C64::new(0.0, 0.0);
                    }
                }
            }
            return Ok(out);
        }
        match &self.spec.backend {
            Backend::FiniteGroup(g) => {
                let mut acc = CMatrix::zeros(dim, dim);
                for u in g {
                    let b = apply_product_left(&a.adjoint(), u, n, self.spec.d);
                    acc += apply_product_left(&b.adjoint(), u, n, self.spec.d);
                }
                Ok(acc / C64::new(g.len() as f64, 0.0))
            }
            _ => self.decompose(n)?.conditional_expectation_matrix(a),
        }
    }

    pub fn gauge_average(&self, a: &HermitianOp, n: usize) -> Result<HermitianOp> {
        if self.diagonal && a.is_diagonal() {
            site_dim(self.spec.d, n)?;
            return Ok(a.clone());
        }
        Ok(HermitianOp::symmetrized(self.gauge_average_matrix(&a.to_dense(), n)?))
    }

    /// `‖E(a) − a‖_F / (1 + ‖a‖_F)`.
    pub fn gauge_residual(&self, a: &HermitianOp, n: usize) -> Result<f64> {
        let avg = self.gauge_average(a, n)?;
        Ok(avg.sub(a)?.frobenius_norm() / (1.0 + a.frobenius_norm()))
    }

    /// `(1/n) log maxᵢ dᵢ` for each `n`.
    pub fn max_irrep_dim_series(&self, ns: &[usize]) -> Result<ThermoSeries> {
        let mut s = ThermoSeries::new("max_irrep_dim_rate");
        for &n in ns {
            let max = self.block_structure(n)?.iter().map(|b| b.1).max().unwrap_or(1);
            s.push(n, (max as f64).ln() / n as f64, None)?;
        }
        s.extrapolate();
        Ok(s)
    }
}

/// `(C ⊗ 1_d) iso`, the basis of a new irreducible copy one site longer.
fn lift_copy(c: &CMatrix, iso: &CMatrix, d: usize) -> CMatrix {
    let rows = c.nrows();
    let k_old = c.ncols();
    let k_new = iso.ncols();
    let mut out = CMatrix::zeros(rows * d, k_new);
    for b2 in 0..k_new {
        for i in 0..rows {
            for e in 0..d {
                let mut acc = C64::new(0.0, 0.0);
                for b in 0..k_old {
                    acc += c[(i, b)] * iso[(b * d + e, b2)];
                }
                out[(i * d + e, b2)] = acc;
            }
        }
    }
    out
}

/// Isotypic decomposition with an explicit probe seed.
pub fn decompose(spec: &SymmetrySpec, n: usize, seed: u64) -> Result<BlockDecomposition> {
    Ok((*GaugeSymmetry::new(spec.clone(), seed).decompose(n)?).clone())
}

pub fn gauge_average(a: &HermitianOp, spec: &SymmetrySpec, n: usize) -> Result<HermitianOp> {
    GaugeSymmetry::new(spec.clone(), 0).gauge_average(a, n)
}
