use std::fmt::Debug;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::interaction::{GeneratorH, Interaction, Interval};
use crate::operator::{
    partial_trace, random_density, site_dim, tensor_power, CMatrix, HermitianOp, EIGEN_FLOOR,
};
use crate::symmetry::{BasisChange, BlockDecomposition};

/// Tolerance on the reference trace of a density.
pub const UNIT_TRACE_TOL: f64 = 1e-12;
/// Most negative eigenvalue tolerated in a density.
pub const POSITIVITY_FLOOR: f64 = -1e-12;
/// Largest commutator allowed between a reference state and `e^{−H}`.
pub const COMMUTATION_TOL: f64 = 1e-8;

/// A trace on a finite-volume algebra, seen through the block layout its densities use.
pub trait TraceReference: Clone + Debug + Send + Sync {
    /// Sizes of the diagonal blocks a density is stored as.
    fn block_dims(&self) -> Vec<usize>;

    /// Number of sites.
    fn volume(&self) -> usize;

    /// Blocks of an element of the algebra; errors if `a` lies outside it.
    fn element_blocks(&self, a: &HermitianOp) -> Result<Vec<HermitianOp>>;

    /// Blocks of an arbitrary field operator as an observable. Off-algebra
    /// parts are dropped by the conditional expectation.
    fn observable_blocks(&self, a: &HermitianOp) -> Result<Vec<HermitianOp>>;

    fn same_algebra(&self, other: &Self) -> bool;

    /// The trace of the identity.
    fn identity_trace(&self) -> f64 {
        self.block_dims().iter().sum::<usize>() as f64
    }
}

/// `Tr` on the full field algebra of `n` sites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FullTrace {
    pub n: usize,
    pub d: usize,
}

impl FullTrace {
    pub fn new(n: usize, d: usize) -> Self {
        Self { n, d }
    }

    pub fn dim(&self) -> usize {
        self.d.pow(self.n as u32)
    }
}

impl TraceReference for FullTrace {
    fn block_dims(&self) -> Vec<usize> {
        vec![self.dim()]
    }

    fn volume(&self) -> usize {
        self.n
    }

    fn element_blocks(&self, a: &HermitianOp) -> Result<Vec<HermitianOp>> {
        if a.dim() != self.dim() {
            return Err(Error::Dimension(format!("operator has dimension {}, expected {}", a.dim(), self.dim())));
        }
        Ok(vec![a.clone()])
    }

    fn observable_blocks(&self, a: &HermitianOp) -> Result<Vec<HermitianOp>> {
        self.element_blocks(a)
    }

    fn same_algebra(&self, other: &Self) -> bool {
        self == other
    }
}

/// Canonical trace of the fixed-point algebra: weight one on every minimal projection.
#[derive(Clone, Debug)]
pub struct FixedAlgebraTrace {
    dec: Arc<BlockDecomposition>,
}

impl FixedAlgebraTrace {
    pub fn new(dec: Arc<BlockDecomposition>) -> Self {
        Self { dec }
    }

    pub fn decomposition(&self) -> &Arc<BlockDecomposition> {
        &self.dec
    }
}

impl TraceReference for FixedAlgebraTrace {
    fn block_dims(&self) -> Vec<usize> {
        self.dec.blocks().iter().map(|b| b.multiplicity).collect()
    }

    fn volume(&self) -> usize {
        self.dec.n()
    }

    fn element_blocks(&self, a: &HermitianOp) -> Result<Vec<HermitianOp>> {
        self.dec.compress_fixed(a)
    }

    fn observable_blocks(&self, a: &HermitianOp) -> Result<Vec<HermitianOp>> {
        Ok(self
            .dec
            .restrict(a)?
            .into_iter()
            .zip(self.dec.blocks())
            .map(|(r, b)| r.scale(1.0 / b.irrep_dim as f64))
            .collect())
    }

    fn same_algebra(&self, other: &Self) -> bool {
        if Arc::ptr_eq(&self.dec, &other.dec) {
            return true;
        }
        let (a, b) = (&self.dec, &other.dec);
        a.n() == b.n()
            && a.blocks() == b.blocks()
            && match (a.basis_change(), b.basis_change()) {
                (BasisChange::Permutation(p), BasisChange::Permutation(q)) => p == q,
                (BasisChange::Unitary(u), BasisChange::Unitary(v)) => u == v,
                _ => false,
            }
    }
}

/// Density of a state with respect to a reference trace, stored blockwise.
#[derive(Clone, Debug)]
pub struct TracedDensity<R: TraceReference> {
    reference: R,
    blocks: Vec<HermitianOp>,
}

/// Weight a Gibbs state or partition function is taken against: a trace, or a state given by its density.
#[derive(Clone, Debug)]
pub enum CanonicalTrace<R: TraceReference> {
    Trace(R),
    State(TracedDensity<R>),
}

impl<R: TraceReference> CanonicalTrace<R> {
    pub fn reference(&self) -> &R {
        match self {
            CanonicalTrace::Trace(r) => r,
            CanonicalTrace::State(s) => &s.reference,
        }
    }
}

impl<R: TraceReference> TracedDensity<R> {
    /// Checks block shapes, unit trace and positivity.
    pub fn new(reference: R, blocks: Vec<HermitianOp>) -> Result<Self> {
        let dims = reference.block_dims();
        if dims.len() != blocks.len() {
            return Err(Error::Dimension(format!("{} blocks given, reference has {}", blocks.len(), dims.len())));
        }
        for (b, &k) in blocks.iter().zip(&dims) {
            if b.dim() != k {
                return Err(Error::Dimension(format!("block has dimension {}, expected {k}", b.dim())));
            }
        }
        let tr: f64 = blocks.iter().map(|b| b.trace()).sum();
        if (tr - 1.0).abs() > UNIT_TRACE_TOL {
            return Err(Error::Domain(format!("density has reference trace {tr}")));
        }
        for b in &blocks {
            let lo = b.spectrum().min();
            if lo < POSITIVITY_FLOOR {
                return Err(Error::Domain(format!("density has eigenvalue {lo:.3e}")));
            }
        }
        Ok(Self { reference, blocks })
    }

    /// Divides by the reference trace first.
    pub fn from_unnormalized(reference: R, blocks: Vec<HermitianOp>) -> Result<Self> {
        let tr: f64 = blocks.iter().map(|b| b.trace()).sum();
        if !(tr > 0.0 && tr.is_finite()) {
            return Err(Error::Domain(format!("cannot normalize a density of trace {tr}")));
        }
        Self::new(reference, blocks.into_iter().map(|b| b.scale(1.0 / tr)).collect())
    }

    /// The tracial state: the identity divided by the trace of the identity.
    pub fn tracial(reference: R) -> Self {
        let w = 1.0 / reference.identity_trace();
        let blocks = reference.block_dims().into_iter().map(|k| HermitianOp::identity(k).scale(w)).collect();
        Self { reference, blocks }
    }

    /// A full-rank random density, each block weighted by a random share.
    pub fn random<G: Rng + ?Sized>(reference: R, rng: &mut G) -> Result<Self> {
        let blocks: Vec<HermitianOp> = reference
            .block_dims()
            .into_iter()
            .map(|k| random_density(k, rng).scale(0.1 + rng.random::<f64>()))
            .collect();
        Self::from_unnormalized(reference, blocks)
    }

    pub fn reference(&self) -> &R {
        &self.reference
    }

    pub fn blocks(&self) -> &[HermitianOp] {
        &self.blocks
    }

    pub fn volume(&self) -> usize {
        self.reference.volume()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.blocks.iter().map(|b| b.spectrum().min()).fold(f64::INFINITY, f64::min)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.blocks.iter().map(|b| b.spectrum().max()).fold(f64::NEG_INFINITY, f64::max)
    }

    /// `ω(a)`, gauge averaging `a` first on the fixed-point algebra.
    pub fn expectation(&self, a: &HermitianOp) -> Result<f64> {
        let ab = self.reference.observable_blocks(a)?;
        self.expectation_blocks(&ab)
    }

    pub fn expectation_blocks(&self, ab: &[HermitianOp]) -> Result<f64> {
        if ab.len() != self.blocks.len() {
            return Err(Error::Dimension("observable has the wrong block layout".into()));
        }
        let mut s = 0.0;
        for (d, a) in self.blocks.iter().zip(ab) {
            s += d.trace_product(a)?;
        }
        Ok(s)
    }

    /// Von Neumann entropy in nats relative to the reference trace.
    pub fn entropy(&self) -> f64 {
        self.blocks.iter().map(|b| entropy_of(b.spectrum().values())).sum()
    }

    /// `S(self, other) = Tr ρ(log ρ − log σ)`; `+∞` when the support of `ρ` is not inside that of `σ`.
    pub fn relative_entropy(&self, other: &Self) -> Result<f64> {
        self.check_same(other)?;
        let mut s = 0.0;
        for (rho, sigma) in self.blocks.iter().zip(&other.blocks) {
            let cross = trace_rho_log_sigma(rho, sigma)?;
            if cross == f64::NEG_INFINITY {
                return Ok(f64::INFINITY);
            }
            s += -entropy_of(rho.spectrum().values()) - cross;
        }
        Ok(s.max(0.0))
    }

    /// `Σᵢ ‖ρᵢ − σᵢ‖₁`, the trace-norm distance of the two functionals.
    pub fn trace_distance(&self, other: &Self) -> Result<f64> {
        self.check_same(other)?;
        let mut s = 0.0;
        for (a, b) in self.blocks.iter().zip(&other.blocks) {
            s += a.sub(b)?.trace_norm();
        }
        Ok(s)
    }

    /// Blocks of `log ρ`; a support error if any eigenvalue reaches the floor.
    pub fn log_blocks(&self) -> Result<Vec<HermitianOp>> {
        self.blocks
            .iter()
            .map(|b| {
                b.logm().map_err(|e| match e {
                    Error::Singular(x) => Error::Support(format!("density is singular (eigenvalue {x:.3e})")),
                    other => other,
                })
            })
            .collect()
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if !self.reference.same_algebra(&other.reference) {
            return Err(Error::Dimension("densities live on different algebras".into()));
        }
        Ok(())
    }
}

impl TracedDensity<FullTrace> {
    pub fn from_density(n: usize, d: usize, density: HermitianOp) -> Result<Self> {
        Self::new(FullTrace::new(n, d), vec![density])
    }

    pub fn density(&self) -> &HermitianOp {
        &self.blocks[0]
    }

    /// Restriction to the fixed-point algebra, relative to its canonical trace.
    pub fn restrict(&self, dec: &Arc<BlockDecomposition>) -> Result<TracedDensity<FixedAlgebraTrace>> {
        if dec.n() != self.reference.n || dec.d() != self.reference.d {
            return Err(Error::Dimension("decomposition does not match the density".into()));
        }
        let blocks = dec.restrict(self.density())?;
        TracedDensity::from_unnormalized(FixedAlgebraTrace::new(dec.clone()), blocks)
    }

    /// Marginal on the 1-based site positions `keep`.
    pub fn partial_trace(&self, keep: &[usize]) -> Result<Self> {
        let FullTrace { n, d } = self.reference;
        let rho = partial_trace(self.density(), keep, n, d)?;
        Self::from_unnormalized(FullTrace::new(keep.len(), d), vec![rho])
    }

    /// `E(D)`, the gauge-averaged density.
    pub fn gauge_average(&self, dec: &BlockDecomposition) -> Result<Self> {
        let e = dec.conditional_expectation(self.density())?;
        Self::from_unnormalized(self.reference, vec![e])
    }
}

impl TracedDensity<FixedAlgebraTrace> {
    pub fn decomposition(&self) -> &Arc<BlockDecomposition> {
        &self.reference.dec
    }

    /// The gauge-invariant extension to the field algebra, `⊕ ωᵢ ⊗ 1/dᵢ`.
    pub fn extend(&self) -> Result<TracedDensity<FullTrace>> {
        let dec = &self.reference.dec;
        let blocks: Vec<HermitianOp> = self
            .blocks
            .iter()
            .zip(dec.blocks())
            .map(|(w, b)| w.scale(1.0 / b.irrep_dim as f64))
            .collect();
        let full = dec.lift(&blocks)?;
        TracedDensity::from_unnormalized(FullTrace::new(dec.n(), dec.d()), vec![full])
    }
}

fn entropy_of(values: &[f64]) -> f64 {
    values.iter().filter(|&&x| x > EIGEN_FLOOR).map(|&x| -x * x.ln()).sum()
}

/// `Tr ρ log σ`, or `−∞` on a support violation.
fn trace_rho_log_sigma(rho: &HermitianOp, sigma: &HermitianOp) -> Result<f64> {
    let spec = sigma.spectrum();
    let weights: Vec<f64> = match spec.vectors() {
        None => rho.diag_real(),
        Some(v) => {
            let r = match rho.dense() {
                Some(m) => m.clone(),
                None => rho.to_dense(),
            };
            let rv: CMatrix = r * v;
            (0..v.ncols())
                .map(|k| v.column(k).dotc(&rv.column(k)).re)
                .collect()
        }
    };
    let mut s = 0.0;
    for (&mu, &w) in spec.values().iter().zip(&weights) {
        if mu <= EIGEN_FLOOR {
            if w > 1e-12 {
                return Ok(f64::NEG_INFINITY);
            }
            continue;
        }
        s += w * mu.ln();
    }
    Ok(s)
}

/// Restriction of a field density to the fixed-point algebra.
pub fn restrict_density(d: &TracedDensity<FullTrace>, dec: &Arc<BlockDecomposition>) -> Result<TracedDensity<FixedAlgebraTrace>> {
    d.restrict(dec)
}

/// `e^{−(K − λ_min)}` blockwise with the common shift `λ_min`.
fn shifted_exp(generator: &[HermitianOp]) -> (Vec<HermitianOp>, f64) {
    let lo = generator
        .iter()
        .filter(|k| k.dim() > 0)
        .map(|k| k.spectrum().min())
        .fold(f64::INFINITY, f64::min);
    let lo = if lo.is_finite() { lo } else { 0.0 };
    let e = generator.iter().map(|k| k.apply(|x| (-(x - lo)).exp())).collect();
    (e, lo)
}

fn weighted_exp<R: TraceReference>(h: &HermitianOp, weight: &CanonicalTrace<R>) -> Result<(Vec<HermitianOp>, f64)> {
    let hb = weight.reference().element_blocks(h)?;
    Ok(shifted_exp(&hb))
}

/// `log w(e^{−H})` for a trace or state weight.
pub fn log_partition<R: TraceReference>(h: &HermitianOp, weight: &CanonicalTrace<R>) -> Result<f64> {
    let (e, lo) = weighted_exp(h, weight)?;
    let z: f64 = match weight {
        CanonicalTrace::Trace(_) => e.iter().map(|b| b.trace()).sum(),
        CanonicalTrace::State(s) => {
            let mut z = 0.0;
            for (w, b) in s.blocks.iter().zip(&e) {
                z += w.trace_product(b)?;
            }
            z
        }
    };
    Ok(z.ln() - lo)
}

/// Gibbs state of `H` against a trace, or against a state `φ` as `φ(e^{−H}·)/φ(e^{−H})`.
pub fn gibbs_state<R: TraceReference>(h: &HermitianOp, weight: &CanonicalTrace<R>) -> Result<TracedDensity<R>> {
    let (e, _) = weighted_exp(h, weight)?;
    match weight {
        CanonicalTrace::Trace(r) => TracedDensity::from_unnormalized(r.clone(), e),
        CanonicalTrace::State(s) => {
            let mut blocks = Vec::with_capacity(e.len());
            for (w, b) in s.blocks.iter().zip(&e) {
                let c = w.commutator_norm(b)?;
                if c > COMMUTATION_TOL {
                    return Err(Error::Model(format!(
                        "reference state does not commute with e^(-H) (defect {c:.3e})"
                    )));
                }
                blocks.push(w.jordan_product(b)?);
            }
            TracedDensity::from_unnormalized(s.reference.clone(), blocks)
        }
    }
}

/// The product state `⊗ τ₀(e^{−h}·)` on `n` sites, density `d^{−n}(e^{−h})^{⊗n}`.
pub fn product_phi_hat(h: &GeneratorH, n: usize) -> Result<TracedDensity<FullTrace>> {
    let site = h.site_density();
    let rho = tensor_power(&site, n)?;
    TracedDensity::from_unnormalized(FullTrace::new(n, h.d()), vec![rho])
}

/// The product state restricted to the fixed-point algebra.
pub fn product_phi(h: &GeneratorH, dec: &Arc<BlockDecomposition>) -> Result<TracedDensity<FixedAlgebraTrace>> {
    product_phi_hat(h, dec.n())?.restrict(dec)
}

/// Density of the tracial product state on the fixed-point algebra: `d^{−n} dᵢ` on block `i`.
pub fn nu_density(dec: &Arc<BlockDecomposition>) -> TracedDensity<FixedAlgebraTrace> {
    let scale = (dec.d() as f64).powi(dec.n() as i32);
    let blocks = dec
        .blocks()
        .iter()
        .map(|b| HermitianOp::identity(b.multiplicity).scale(b.irrep_dim as f64 / scale))
        .collect();
    TracedDensity {
        reference: FixedAlgebraTrace::new(dec.clone()),
        blocks,
    }
}

/// `[ω^Q]`, density `exp(log D − Q)` normalized.
pub fn perturbed_state<R: TraceReference>(omega: &TracedDensity<R>, q: &HermitianOp) -> Result<TracedDensity<R>> {
    let logs = omega.log_blocks()?;
    let qb = omega.reference.element_blocks(q)?;
    let mut k = Vec::with_capacity(logs.len());
    for (l, qi) in logs.iter().zip(&qb) {
        k.push(qi.sub(l)?);
    }
    let (e, _) = shifted_exp(&k);
    TracedDensity::from_unnormalized(omega.reference.clone(), e)
}

/// Gibbs state of `Φ` on `core` widened by `buffer` on both sides, traced down to `core`.
pub fn buffered_gibbs(phi: &Interaction, core: Interval, buffer: usize) -> Result<TracedDensity<FullTrace>> {
    let window = core.widen(buffer, buffer);
    site_dim(phi.d(), window.len())?;
    let h = phi.local_hamiltonian(window, window)?;
    let g = gibbs_state(&h, &CanonicalTrace::Trace(FullTrace::new(window.len(), phi.d())))?;
    if buffer == 0 {
        return Ok(g);
    }
    let keep: Vec<usize> = (core.lo..=core.hi).map(|s| window.position(s)).collect();
    g.partial_trace(&keep)
}

/// Distance between `[ω^{−W_Λ}]` restricted to `Λ`'s fixed-point algebra and the local
/// Gibbs state `φ^G_Λ`. `ω` is approximated on `Λ ± L` by the marginal of the Gibbs
/// state of `Φ^h` on `Λ ± 2L`.
pub fn weak_gibbs_residual(phi: &Interaction, h: &GeneratorH, lambda: Interval, buffer: usize) -> Result<f64> {
    if buffer < phi.range() {
        return Err(Error::Domain(format!("buffer {buffer} is shorter than the range {}", phi.range())));
    }
    let sym = phi.symmetry();
    let phi_h = phi.perturb(h)?;
    let window = lambda.widen(buffer, buffer);
    site_dim(phi.d(), window.len() + 2 * buffer)?;

    let omega_hat = buffered_gibbs(&phi_h, window, buffer)?;
    let dec_w = sym.decompose(window.len())?;
    let omega = omega_hat.restrict(&dec_w)?;
    let w = phi.surface_energy(lambda, window)?;
    let perturbed = perturbed_state(&omega, &-&w)?;

    let keep: Vec<usize> = (lambda.lo..=lambda.hi).map(|s| window.position(s)).collect();
    let dec_l = sym.decompose(lambda.len())?;
    let local = perturbed.extend()?.partial_trace(&keep)?.restrict(&dec_l)?;

    let h_l = phi.local_hamiltonian(lambda, lambda)?;
    let target = gibbs_state(&h_l, &CanonicalTrace::State(product_phi(h, &dec_l)?))?;
    local.trace_distance(&target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::{embed, random_hermitian, tensor};
    use crate::symmetry::{GaugeSymmetry, SymmetrySpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn u1() -> Arc<GaugeSymmetry> {
        Arc::new(GaugeSymmetry::new(SymmetrySpec::abelian_charges(vec![1, -1]).unwrap(), 0))
    }

    fn su2() -> Arc<GaugeSymmetry> {
        Arc::new(GaugeSymmetry::new(SymmetrySpec::su2_fundamental(), 0))
    }

    fn full(n: usize) -> CanonicalTrace<FullTrace> {
        CanonicalTrace::Trace(FullTrace::new(n, 2))
    }

    fn close(a: &HermitianOp, b: &HermitianOp, tol: f64) -> bool {
        a.sub(b).unwrap().max_abs_entry() <= tol
    }

    #[test]
    fn gibbs_of_zero_is_maximally_mixed() {
        let g = gibbs_state(&HermitianOp::zeros(8), &full(3)).unwrap();
        assert!(close(g.density(), &HermitianOp::identity(8).scale(0.125), 1e-15));
    }

    #[test]
    fn gibbs_of_single_site_field_is_product() {
        let z = HermitianOp::pauli_z();
        let n = 3;
        let mut h = HermitianOp::zeros(8);
        for k in 1..=n {
            h = h.add(&embed(&z, &[k], n, 2).unwrap()).unwrap();
        }
        let g = gibbs_state(&h, &full(n)).unwrap();
        let e = 1f64.exp();
        let site = HermitianOp::diagonal(vec![1.0 / e, e]).scale(1.0 / (1.0 / e + e));
        assert!(close(g.density(), &tensor_power(&site, n).unwrap(), 1e-14));
    }

    #[test]
    fn gibbs_scales_with_coupling() {
        let sym = u1();
        let a = Interaction::gauge_ising(sym.clone(), 0.3, -0.7).unwrap();
        let b = Interaction::gauge_ising(sym, 0.6, -1.4).unwrap();
        let ga = gibbs_state(&a.hamiltonian(4).unwrap().scale(2.0), &full(4)).unwrap();
        let gb = gibbs_state(&b.hamiltonian(4).unwrap(), &full(4)).unwrap();
        assert!(ga.trace_distance(&gb).unwrap() < 1e-13);
    }

    #[test]
    fn state_weight_must_commute() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let phi = TracedDensity::random(FullTrace::new(2, 2), &mut rng).unwrap();
        let h = random_hermitian(4, &mut rng);
        assert!(matches!(gibbs_state(&h, &CanonicalTrace::State(phi)), Err(Error::Model(_))));
    }

    #[test]
    fn product_state_examples() {
        let g = product_phi_hat(&GeneratorH::zero(2), 3).unwrap();
        assert!(close(g.density(), &HermitianOp::identity(8).scale(0.125), 1e-15));

        let h = GeneratorH::normalize(HermitianOp::diagonal(vec![1.0, -1.0]));
        let c = 1f64.cosh();
        // e^{-h} = diag(e^{-1}, e)/cosh 1
        let site = HermitianOp::diagonal(vec![(-1f64).exp() / c / 2.0, 1f64.exp() / c / 2.0]);
        let p = product_phi_hat(&h, 2).unwrap();
        assert!(p.density().is_diagonal());
        assert!(close(p.density(), &tensor(&site, &site).unwrap(), 1e-15));
        assert!((p.density().trace() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn restricted_product_matches_on_fixed_elements() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for sym in [u1(), su2()] {
            let n = 3;
            let dec = sym.decompose(n).unwrap();
            let h = GeneratorH::normalize(HermitianOp::diagonal(vec![0.4, -0.9]));
            let h = if sym.is_diagonal() { h } else { GeneratorH::zero(2) };
            let hat = product_phi_hat(&h, n).unwrap();
            let phi = hat.restrict(&dec).unwrap();
            for _ in 0..5 {
                let a = sym.gauge_average(&random_hermitian(8, &mut rng), n).unwrap();
                let lhs = phi.expectation(&a).unwrap();
                let rhs = hat.density().trace_product(&a).unwrap();
                assert!((lhs - rhs).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn entropy_examples() {
        let mut rho = vec![0.0; 8];
        rho[5] = 1.0;
        let pure = TracedDensity::from_density(3, 2, HermitianOp::diagonal(rho)).unwrap();
        assert_eq!(pure.entropy(), 0.0);
        let mixed = TracedDensity::tracial(FullTrace::new(3, 2));
        assert!((mixed.entropy() - 3.0 * 2f64.ln()).abs() < 1e-14);

        let nu = nu_density(&u1().decompose(2).unwrap());
        assert!((nu.entropy() - 4f64.ln()).abs() < 1e-14);

        // S(ν) = n log d − Σ mᵢ dᵢ d^{−n} log dᵢ
        let dec = su2().decompose(3).unwrap();
        let nu = nu_density(&dec);
        let defect: f64 = dec
            .blocks()
            .iter()
            .map(|b| (b.multiplicity * b.irrep_dim) as f64 / 8.0 * (b.irrep_dim as f64).ln())
            .sum();
        assert!((nu.entropy() - (3.0 * 2f64.ln() - defect)).abs() < 1e-14);
        assert!((nu.entropy() - 1.5 * 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn nu_eigenvalue_corridor() {
        for (sym, n) in [(u1(), 4), (su2(), 3), (su2(), 5)] {
            let dec = sym.decompose(n).unwrap();
            let nu = nu_density(&dec);
            let scale = 2f64.powi(n as i32);
            assert!(nu.min_eigenvalue() * scale >= 1.0 - 1e-12);
            assert!(nu.max_eigenvalue() * scale <= dec.max_irrep_dim() as f64 + 1e-12);
            assert!((nu.blocks().iter().map(|b| b.trace()).sum::<f64>() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn relative_entropy_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let psi = TracedDensity::random(FullTrace::new(2, 2), &mut rng).unwrap();
        assert!(psi.relative_entropy(&psi).unwrap().abs() < 1e-12);

        let p = [0.1, 0.2, 0.3, 0.4];
        let q = [0.25, 0.25, 0.4, 0.1];
        let a = TracedDensity::from_density(2, 2, HermitianOp::diagonal(p.to_vec())).unwrap();
        let b = TracedDensity::from_density(2, 2, HermitianOp::diagonal(q.to_vec())).unwrap();
        let kl: f64 = p.iter().zip(&q).map(|(x, y)| x * (x / y).ln()).sum();
        assert!((a.relative_entropy(&b).unwrap() - kl).abs() < 1e-14);

        let c = TracedDensity::from_density(2, 2, HermitianOp::diagonal(vec![0.5, 0.5, 0.0, 0.0])).unwrap();
        assert_eq!(a.relative_entropy(&c).unwrap(), f64::INFINITY);
        assert!(c.relative_entropy(&a).unwrap().is_finite());

        let u = psi.density().spectrum().vector_matrix();
        let rotated = TracedDensity::from_density(2, 2, c.density().conjugate(&u).unwrap()).unwrap();
        assert_eq!(psi.relative_entropy(&rotated).unwrap(), f64::INFINITY);
    }

    #[test]
    fn relative_entropy_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for sym in [u1(), su2()] {
            let dec = sym.decompose(3).unwrap();
            for _ in 0..10 {
                let a = TracedDensity::random(FullTrace::new(3, 2), &mut rng).unwrap();
                let b = TracedDensity::random(FullTrace::new(3, 2), &mut rng).unwrap();
                let s = a.relative_entropy(&b).unwrap();
                assert!(s > 0.0);
                let r = a.restrict(&dec).unwrap().relative_entropy(&b.restrict(&dec).unwrap()).unwrap();
                assert!(r <= s + 1e-12);
                let t = a.partial_trace(&[1, 3]).unwrap().relative_entropy(&b.partial_trace(&[1, 3]).unwrap()).unwrap();
                assert!(t <= s + 1e-12);
            }
        }
    }

    #[test]
    fn perturbation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let omega = TracedDensity::random(FullTrace::new(2, 2), &mut rng).unwrap();
        let same = perturbed_state(&omega, &HermitianOp::zeros(4)).unwrap();
        assert!(same.trace_distance(&omega).unwrap() < 1e-12);

        let h = random_hermitian(4, &mut rng);
        let v = random_hermitian(4, &mut rng);
        let g = gibbs_state(&h, &full(2)).unwrap();
        let lhs = perturbed_state(&g, &v).unwrap();
        let rhs = gibbs_state(&h.add(&v).unwrap(), &full(2)).unwrap();
        assert!(lhs.trace_distance(&rhs).unwrap() < 1e-10);

        let singular = TracedDensity::from_density(2, 2, HermitianOp::diagonal(vec![0.5, 0.5, 0.0, 0.0])).unwrap();
        assert!(matches!(perturbed_state(&singular, &v), Err(Error::Support(_))));
    }

    #[test]
    fn perturbed_state_minimizes_the_functional() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let omega = TracedDensity::random(FullTrace::new(2, 2), &mut rng).unwrap();
        let q = random_hermitian(4, &mut rng);
        let star = perturbed_state(&omega, &q).unwrap();
        let f = |psi: &TracedDensity<FullTrace>| psi.relative_entropy(&omega).unwrap() + psi.expectation(&q).unwrap();
        let best = f(&star);
        for _ in 0..20 {
            let other = TracedDensity::random(FullTrace::new(2, 2), &mut rng).unwrap();
            for t in [1e-3, 1e-2, 0.1, 0.5, 1.0] {
                let mix = star.density().linear_combination(1.0 - t, other.density(), t).unwrap();
                let psi = TracedDensity::from_density(2, 2, mix).unwrap();
                assert!(f(&psi) >= best - 1e-12);
            }
        }
    }

    #[test]
    fn perturbation_moves_relative_entropy_by_at_most_twice_the_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for i in 0..20 {
            let n = 1 + i % 3;
            let r = FullTrace::new(n, 2);
            let psi = TracedDensity::random(r, &mut rng).unwrap();
            let omega = TracedDensity::random(r, &mut rng).unwrap();
            let raw = random_hermitian(r.dim(), &mut rng);
            let q = raw.scale((0.1 + 0.15 * i as f64) / raw.norm());
            let pert = perturbed_state(&omega, &q).unwrap();
            let gap = (psi.relative_entropy(&omega).unwrap() - psi.relative_entropy(&pert).unwrap()).abs();
            assert!(gap <= 2.0 * q.norm() + 1e-12, "{i} {gap} {}", q.norm());
        }
    }

    #[test]
    fn relative_entropy_identity_for_the_tracial_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for (sym, n) in [(u1(), 3), (su2(), 3), (su2(), 4)] {
            let dec = sym.decompose(n).unwrap();
            let nu = nu_density(&dec);
            let log_nu = nu.log_blocks().unwrap();
            for _ in 0..5 {
                let w = TracedDensity::random(FixedAlgebraTrace::new(dec.clone()), &mut rng).unwrap();
                let s = w.entropy() + w.relative_entropy(&nu).unwrap() + w.expectation_blocks(&log_nu).unwrap();
                assert!(s.abs() < 1e-9, "{s}");
            }
        }
    }

    #[test]
    fn relative_entropy_to_product_state_splits() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let sym = u1();
        let h = GeneratorH::normalize(HermitianOp::diagonal(vec![0.7, -0.2]));
        for n in 1..=4 {
            let dec = sym.decompose(n).unwrap();
            let phi = product_phi(&h, &dec).unwrap();
            let log_nu = nu_density(&dec).log_blocks().unwrap();
            let mut hsum = HermitianOp::zeros(1 << n);
            for k in 1..=n {
                hsum = hsum.add(&embed(h.op(), &[k], n, 2).unwrap()).unwrap();
            }
            for _ in 0..3 {
                let w = TracedDensity::random(FixedAlgebraTrace::new(dec.clone()), &mut rng).unwrap();
                let lhs = -w.relative_entropy(&phi).unwrap();
                let rhs = w.entropy() - w.expectation(&hsum).unwrap() + w.expectation_blocks(&log_nu).unwrap();
                assert!((lhs - rhs).abs() < 1e-9);
            }
        }
    }

    /// `⊕ Aᵢ ⊗ Bᵢ` in the block basis, `Aᵢ` on the multiplicity factor.
    fn product_form(dec: &BlockDecomposition, rng: &mut ChaCha8Rng) -> HermitianOp {
        let dim = dec.dim();
        let mut inner = CMatrix::zeros(dim, dim);
        for b in dec.blocks() {
            let a = random_density(b.multiplicity, rng).to_dense();
            let c = random_density(b.irrep_dim, rng).to_dense();
            let w = 0.2 + rng.random::<f64>();
            let k = b.irrep_dim;
            for p in 0..b.multiplicity {
                for q in 0..b.multiplicity {
                    for s in 0..k {
                        for t in 0..k {
                            inner[(b.offset + p * k + s, b.offset + q * k + t)] = a[(p, q)] * c[(s, t)] * w;
                        }
                    }
                }
            }
        }
        let u = dec.basis_matrix();
        let m = &u * inner * u.adjoint();
        let tr: f64 = m.trace().re;
        HermitianOp::from_dense(m / nalgebra::Complex::new(tr, 0.0)).unwrap()
    }

    #[test]
    fn entropy_change_under_restriction_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for (sym, n) in [(su2(), 3), (su2(), 4), (u1(), 4)] {
            let dec = sym.decompose(n).unwrap();
            let bound = (dec.max_irrep_dim() as f64).ln();
            for _ in 0..5 {
                let d = TracedDensity::from_density(n, 2, product_form(&dec, &mut rng)).unwrap();
                let e = d.gauge_average(&dec).unwrap();
                let r = d.restrict(&dec).unwrap();
                let first = e.entropy() - d.entropy();
                let second = e.entropy() - r.entropy();
                assert!((-1e-10..=bound + 1e-10).contains(&first), "{first}");
                assert!((-1e-10..=bound + 1e-10).contains(&second), "{second}");
                assert!((r.entropy() - d.entropy()).abs() <= bound + 1e-10);
            }
        }
    }

    #[test]
    fn field_gibbs_with_generator_matches_weighted_gibbs() {
        let sym = u1();
        let phi = Interaction::gauge_ising(sym, 0.4, -1.0).unwrap();
        let h = GeneratorH::normalize(HermitianOp::diagonal(vec![0.5, -0.5]));
        for n in 1..=5 {
            let lhs = gibbs_state(&phi.perturb(&h).unwrap().hamiltonian(n).unwrap(), &full(n)).unwrap();
            let rhs = gibbs_state(&phi.hamiltonian(n).unwrap(), &CanonicalTrace::State(product_phi_hat(&h, n).unwrap())).unwrap();
            assert!(lhs.trace_distance(&rhs).unwrap() < 1e-10);
        }
    }

    #[test]
    fn weak_gibbs_single_site_is_exact() {
        let sym = u1();
        let phi = Interaction::single_site(sym, HermitianOp::diagonal(vec![0.3, -0.8])).unwrap();
        let h = GeneratorH::normalize(HermitianOp::diagonal(vec![1.0, -1.0]));
        let lambda = Interval::new(1, 2).unwrap();
        for l in 0..=2 {
            assert!(weak_gibbs_residual(&phi, &h, lambda, l).unwrap() < 1e-13);
        }
    }

    #[test]
    fn weak_gibbs_classical_ising_and_translation() {
        let sym = u1();
        let phi = Interaction::gauge_ising(sym, 0.2, -1.0).unwrap();
        let h = GeneratorH::normalize(HermitianOp::diagonal(vec![1.0, -1.0]));
        let lambda = Interval::new(1, 2).unwrap();
        for l in 1..=3 {
            let r = weak_gibbs_residual(&phi, &h, lambda, l).unwrap();
            assert!(r < 1e-12, "L={l}: {r}");
        }
        let a = weak_gibbs_residual(&phi, &h, lambda, 2).unwrap();
        let b = weak_gibbs_residual(&phi, &h, lambda.shift(5), 2).unwrap();
        assert!((a - b).abs() < 1e-14);
        assert!(weak_gibbs_residual(&phi, &h, lambda, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn entropy_lies_in_range(seed in any::<u64>(), n in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dec = su2().decompose(n).unwrap();
            let a = TracedDensity::random(FixedAlgebraTrace::new(dec.clone()), &mut rng).unwrap();
            let s = a.entropy();
            prop_assert!(s >= -1e-14);
            prop_assert!(s <= a.reference().identity_trace().ln() + 1e-12);
            let f = TracedDensity::random(FullTrace::new(n, 2), &mut rng).unwrap();
            prop_assert!(f.entropy() <= n as f64 * 2f64.ln() + 1e-12);
        }

        #[test]
        fn restriction_preserves_fixed_expectations(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sym = su2();
            let dec = sym.decompose(3).unwrap();
            let d = TracedDensity::random(FullTrace::new(3, 2), &mut rng).unwrap();
            let r = d.restrict(&dec).unwrap();
            let a = sym.gauge_average(&random_hermitian(8, &mut rng), 3).unwrap();
            prop_assert!((r.expectation(&a).unwrap() - d.expectation(&a).unwrap()).abs() < 1e-10);
            let back = r.extend().unwrap();
            prop_assert!((back.expectation(&a).unwrap() - d.expectation(&a).unwrap()).abs() < 1e-10);
        }
    }
}
