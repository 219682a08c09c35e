//! Translation-invariant finite-range interactions and their derived operators.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::operator::{site_dim, tensor, CMatrix, HermitianOp, SiteEmbedding, C64};
use crate::symmetry::{Backend, GaugeSymmetry};

pub const GAUGE_TOL: f64 = 1e-10;

/// A finite set of consecutive integer sites `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Interval {
    pub lo: i64,
    pub hi: i64,
}

impl Interval {
    pub fn new(lo: i64, hi: i64) -> Result<Self> {
        if lo > hi {
            return Err(Error::Domain(format!("empty interval [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    /// `[1, n]`.
    pub fn chain(n: usize) -> Self {
        Self { lo: 1, hi: n as i64 }
    }

    pub fn len(&self) -> usize {
        (self.hi - self.lo + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, site: i64) -> bool {
        self.lo <= site && site <= self.hi
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    pub fn widen(&self, left: usize, right: usize) -> Self {
        Self {
            lo: self.lo - left as i64,
            hi: self.hi + right as i64,
        }
    }

    pub fn shift(&self, k: i64) -> Self {
        Self {
            lo: self.lo + k,
            hi: self.hi + k,
        }
    }

    /// 1-based position of `site` inside this interval.
    pub fn position(&self, site: i64) -> usize {
        (site - self.lo + 1) as usize
    }
}

/// Which algebra the terms are known to live in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlgebraFlag {
    /// Gauge invariant: every term lies in the fixed-point algebra.
    Fixed,
    /// Only the full field algebra is guaranteed.
    Field,
}

/// Chemical-potential generator, normalized so `τ₀(e^{−h}) = 1`.
#[derive(Clone, Debug)]
pub struct GeneratorH {
    h: HermitianOp,
    shift: f64,
}

impl GeneratorH {
    /// Adds `log τ₀(e^{−raw})` to `raw`.
    pub fn normalize(raw: HermitianOp) -> Self {
        let d = raw.dim() as f64;
        let shift = (-&raw).log_trace_exp() - d.ln();
        Self {
            h: raw.shift(shift),
            shift,
        }
    }

    pub fn zero(d: usize) -> Self {
        Self {
            h: HermitianOp::zeros(d),
            shift: 0.0,
        }
    }

    pub fn op(&self) -> &HermitianOp {
        &self.h
    }

    /// The constant that was added during normalization.
    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn d(&self) -> usize {
        self.h.dim()
    }

    pub fn is_zero(&self) -> bool {
        self.h.max_abs_entry() == 0.0
    }

    /// `e^{−h}/d`, the one-site density of the product state.
    pub fn site_density(&self) -> HermitianOp {
        (-&self.h).expm().scale(1.0 / self.d() as f64)
    }

    /// `|τ₀(e^{−h}) − 1|`.
    pub fn normalization_defect(&self) -> f64 {
        ((-&self.h).expm().trace() / self.d() as f64 - 1.0).abs()
    }

    /// Whether `h` commutes with the one-site action: it is gauge-averaged to
    /// itself and commutes with every group element or generator.
    pub fn is_central(&self, symmetry: &GaugeSymmetry) -> Result<bool> {
        if symmetry.gauge_residual(&self.h, 1)? > GAUGE_TOL {
            return Ok(false);
        }
        let mats: &[CMatrix] = match symmetry.spec().backend() {
            Backend::FiniteGroup(g) => g,
            Backend::LieGenerators(g) => g,
            Backend::AbelianCharges(_) => return Ok(true),
        };
        let h = self.h.to_dense();
        Ok(mats.iter().all(|x| (&h * x - x * &h).norm() <= GAUGE_TOL * (1.0 + h.norm())))
    }
}

/// Operator norm bound check of the derivation applied to the cyclic shift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DerivationBound {
    pub value: f64,
    pub bound: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Norms {
    /// `Σ_{X∋0} ‖Φ(X)‖/|X|`.
    pub triple: f64,
    /// `Σ_{X∋0} ‖Φ(X)‖ + sup_n ‖W_{[1,n]}‖`.
    pub zero: f64,
}

/// Potential given by one hermitian term per offset set `X ∋ 0`, translated along the chain.
#[derive(Clone, Debug)]
pub struct Interaction {
    symmetry: Arc<GaugeSymmetry>,
    terms: BTreeMap<Vec<usize>, HermitianOp>,
    range: usize,
    algebra: AlgebraFlag,
}

impl Interaction {
    /// Validates every term and, for the fixed-point algebra, its gauge invariance.
    fn build(symmetry: Arc<GaugeSymmetry>, raw: Vec<(Vec<usize>, HermitianOp)>, algebra: AlgebraFlag) -> Result<Self> {
        let d = symmetry.d();
        let mut terms: BTreeMap<Vec<usize>, HermitianOp> = BTreeMap::new();
        for (offsets, op) in raw {
            if offsets.first() != Some(&0) {
                return Err(Error::Domain(format!("offset set {offsets:?} must start at 0")));
            }
            if offsets.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Domain(format!("offset set {offsets:?} must be strictly increasing")));
            }
            let dim = site_dim(d, offsets.len())?;
            if op.dim() != dim {
                return Err(Error::Dimension(format!(
                    "term on {offsets:?} has dimension {}, expected {dim}",
                    op.dim()
                )));
            }
            let merged = match terms.remove(&offsets) {
                Some(prev) => prev.add(&op)?,
                None => op,
            };
            terms.insert(offsets, merged);
        }
        terms.retain(|_, op| op.max_abs_entry() > 0.0);
        if algebra == AlgebraFlag::Fixed {
            for (offsets, op) in &terms {
                let residual = symmetry.gauge_residual(op, offsets.len())?;
                if residual > GAUGE_TOL {
                    return Err(Error::GaugeViolation {
                        offsets: offsets.clone(),
                        residual,
                    });
                }
            }
        }
        let range = terms.keys().map(|k| *k.last().unwrap()).max().unwrap_or(0);
        Ok(Self {
            symmetry,
            terms,
            range,
            algebra,
        })
    }

    pub fn new(symmetry: Arc<GaugeSymmetry>, terms: Vec<(Vec<usize>, HermitianOp)>) -> Result<Self> {
        Self::build(symmetry, terms, AlgebraFlag::Fixed)
    }

    /// Interaction on the field algebra, with no gauge-invariance requirement.
    pub fn new_field(symmetry: Arc<GaugeSymmetry>, terms: Vec<(Vec<usize>, HermitianOp)>) -> Result<Self> {
        Self::build(symmetry, terms, AlgebraFlag::Field)
    }

    pub fn zero(symmetry: Arc<GaugeSymmetry>) -> Self {
        Self {
            symmetry,
            terms: BTreeMap::new(),
            range: 0,
            algebra: AlgebraFlag::Fixed,
        }
    }

    /// `μ Z` on each site plus `J Z⊗Z` on each bond.
    pub fn gauge_ising(symmetry: Arc<GaugeSymmetry>, mu: f64, j: f64) -> Result<Self> {
        let z = HermitianOp::pauli_z();
        Self::new(symmetry, vec![(vec![0], z.scale(mu)), (vec![0, 1], tensor(&z, &z)?.scale(j))])
    }

    pub fn single_site(symmetry: Arc<GaugeSymmetry>, a: HermitianOp) -> Result<Self> {
        Self::new(symmetry, vec![(vec![0], a)])
    }

    /// `J_xy (XX + YY) + Δ ZZ` on bonds and `μ Z` on sites.
    pub fn xxz_charge(symmetry: Arc<GaugeSymmetry>, jxy: f64, delta: f64, mu: f64) -> Result<Self> {
        let (x, y, z) = (HermitianOp::pauli_x(), HermitianOp::pauli_y(), HermitianOp::pauli_z());
        let bond = tensor(&x, &x)?
            .add(&tensor(&y, &y)?)?
            .scale(jxy)
            .add(&tensor(&z, &z)?.scale(delta))?;
        Self::new(symmetry, vec![(vec![0], z.scale(mu)), (vec![0, 1], bond)])
    }

    pub fn symmetry(&self) -> &Arc<GaugeSymmetry> {
        &self.symmetry
    }

    pub fn d(&self) -> usize {
        self.symmetry.d()
    }

    pub fn range(&self) -> usize {
        self.range
    }

    pub fn algebra(&self) -> AlgebraFlag {
        self.algebra
    }

    pub fn terms(&self) -> &BTreeMap<Vec<usize>, HermitianOp> {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Whether every term is diagonal in the product basis.
    pub fn is_classical(&self) -> bool {
        self.terms.values().all(|t| t.is_diagonal())
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for t in out.terms.values_mut() {
            *t = t.scale(c);
        }
        out.terms.retain(|_, op| op.max_abs_entry() > 0.0);
        out
    }

    /// Term-wise sum; the result is gauge invariant only if both operands are.
    pub fn plus(&self, other: &Self) -> Result<Self> {
        if self.d() != other.d() {
            return Err(Error::Dimension("interactions on different local dimensions".into()));
        }
        let raw: Vec<_> = self
            .terms
            .iter()
            .chain(other.terms.iter())
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let algebra = if self.algebra == AlgebraFlag::Fixed && other.algebra == AlgebraFlag::Fixed {
            AlgebraFlag::Fixed
        } else {
            AlgebraFlag::Field
        };
        Self::build(self.symmetry.clone(), raw, algebra)
    }

    /// The interaction with `h` added to its one-site term. Marked gauge
    /// invariant only when `h` is central.
    pub fn perturb(&self, h: &GeneratorH) -> Result<Self> {
        if h.d() != self.d() {
            return Err(Error::Dimension(format!("generator has dimension {}, sites have {}", h.d(), self.d())));
        }
        let central = h.is_central(&self.symmetry)?;
        let mut raw: Vec<_> = self.terms.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        raw.push((vec![0], h.op().clone()));
        let algebra = if central && self.algebra == AlgebraFlag::Fixed {
            AlgebraFlag::Fixed
        } else {
            AlgebraFlag::Field
        };
        Self::build(self.symmetry.clone(), raw, algebra)
    }

    /// Translates `X + k` of every term, visited with their site lists.
    fn translates_where<'a>(
        &'a self,
        k_range: impl Fn(usize) -> (i64, i64) + 'a,
    ) -> impl Iterator<Item = (Vec<i64>, &'a HermitianOp)> + 'a {
        self.terms.iter().flat_map(move |(offsets, op)| {
            let (a, b) = k_range(*offsets.last().unwrap());
            (a..=b).map(move |k| (offsets.iter().map(|&o| o as i64 + k).collect::<Vec<i64>>(), op))
        })
    }

    fn embed_sum<'a>(&self, window: Interval, items: impl Iterator<Item = (Vec<i64>, &'a HermitianOp)>) -> Result<HermitianOp> {
        let dim = site_dim(self.d(), window.len())?;
        let mut acc = HermitianOp::zeros(dim);
        for (sites, op) in items {
            if let Some(&bad) = sites.iter().find(|&&s| !window.contains(s)) {
                return Err(Error::Domain(format!("site {bad} lies outside the window [{}, {}]", window.lo, window.hi)));
            }
            let pos: Vec<usize> = sites.iter().map(|&s| window.position(s)).collect();
            let e = SiteEmbedding::new(window.len(), &pos, self.d())?.embed(op)?;
            acc = acc.add(&e)?;
        }
        Ok(acc)
    }

    /// `H_Λ = Σ_{X ⊆ Λ} Φ(X)` acting on the sites of `window`.
    pub fn local_hamiltonian(&self, lambda: Interval, window: Interval) -> Result<HermitianOp> {
        if !window.contains_interval(&lambda) {
            return Err(Error::Domain("Λ must lie inside the window".into()));
        }
        self.embed_sum(window, self.translates_where(move |r| (lambda.lo, lambda.hi - r as i64)))
    }

    /// `H_{[1,n]}` on the chain `[1,n]`.
    pub fn hamiltonian(&self, n: usize) -> Result<HermitianOp> {
        self.local_hamiltonian(Interval::chain(n), Interval::chain(n))
    }

    /// `W_Λ`: terms meeting both `Λ` and its complement. They must fit inside `window`.
    pub fn surface_energy(&self, lambda: Interval, window: Interval) -> Result<HermitianOp> {
        let items: Vec<(Vec<i64>, &HermitianOp)> = self
            .translates_where(move |r| (lambda.lo - r as i64, lambda.hi))
            .filter(|(sites, _)| {
                let inside = sites.iter().filter(|&&s| lambda.contains(s)).count();
                inside > 0 && inside < sites.len()
            })
            .collect();
        self.embed_sum(window, items.into_iter())
    }

    /// `W_{[1,n]}` on `[1−R, n+R]`.
    pub fn boundary_energy(&self, n: usize) -> Result<HermitianOp> {
        let lambda = Interval::chain(n);
        self.surface_energy(lambda, lambda.widen(self.range, self.range))
    }

    pub fn norms(&self) -> Result<Norms> {
        let mut triple = 0.0;
        let mut local = 0.0;
        for (offsets, op) in &self.terms {
            let nrm = op.norm();
            triple += nrm;
            local += offsets.len() as f64 * nrm;
        }
        let mut sup: f64 = 0.0;
        for n in 1..=(2 * self.range + 1) {
            sup = sup.max(self.boundary_energy(n)?.norm());
        }
        Ok(Norms { triple, zero: local + sup })
    }

    /// `A_Φ = Σ_{X∋0} Φ(X)/|X|` placed at site `R+1` of the chain `[1,n]`.
    pub fn mean_energy(&self, n: usize) -> Result<HermitianOp> {
        if n < 2 * self.range + 1 {
            return Err(Error::Domain(format!("mean energy needs at least {} sites", 2 * self.range + 1)));
        }
        let c = (self.range + 1) as i64;
        let items: Vec<(Vec<i64>, HermitianOp)> = self
            .terms
            .iter()
            .flat_map(|(offsets, op)| {
                let w = 1.0 / offsets.len() as f64;
                offsets.iter().map(move |&o| {
                    let k = c - o as i64;
                    (offsets.iter().map(|&x| x as i64 + k).collect(), op.scale(w))
                })
            })
            .collect();
        self.embed_sum(Interval::chain(n), items.iter().map(|(s, o)| (s.clone(), o)))
    }

    /// Norm of the derivation applied to the cyclic shift of `[−n, n]`, and `4‖Φ‖₀`.
    pub fn cyclic_derivation_bound(&self, n: usize) -> Result<DerivationBound> {
        let core = Interval::new(-(n as i64), n as i64)?;
        let window = core.widen(self.range, self.range);
        let items: Vec<(Vec<i64>, &HermitianOp)> = self
            .translates_where(move |r| (core.lo - r as i64, core.hi))
            .filter(|(sites, _)| sites.iter().any(|&s| core.contains(s)))
            .collect();
        let k = self.embed_sum(window, items.into_iter())?;
        let perm = cyclic_shift_permutation(window.len(), self.range + 1, core.len(), self.d());
        let shifted = k.permute(&perm)?;
        // ‖[K, u]‖ = ‖K − u K u*‖
        let value = k.sub(&shifted)?.norm();
        Ok(DerivationBound {
            value,
            bound: 4.0 * self.norms()?.zero,
        })
    }
}

/// Basis permutation of the unitary moving the content of each site of the
/// block `[start, start+len)` (1-based positions among `total`) one step right, cyclically.
pub fn cyclic_shift_permutation(total: usize, start: usize, len: usize, d: usize) -> Vec<usize> {
    let dim = d.pow(total as u32);
    let digit = |x: usize, p: usize| (x / d.pow((total - p) as u32)) % d;
    (0..dim)
        .map(|x| {
            let mut y = x;
            for p in start..start + len {
                let target = if p + 1 < start + len { p + 1 } else { start };
                let w_t = d.pow((total - target) as u32);
                let old_t = digit(x, target);
                let new_t = digit(x, p);
                y = y - old_t * w_t + new_t * w_t;
            }
            y
        })
        .collect()
}

/// The cyclic shift of a chain of `len` sites as a dense unitary.
pub fn cyclic_shift_matrix(len: usize, d: usize) -> CMatrix {
    let perm = cyclic_shift_permutation(len, 1, len, d);
    let mut u = CMatrix::zeros(perm.len(), perm.len());
    for (i, &p) in perm.iter().enumerate() {
        u[(p, i)] = C64::new(1.0, 0.0);
    }
    u
}
