use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::interaction::{AlgebraFlag, GeneratorH, Interaction, Interval};
use crate::operator::{embed, HermitianOp};
use crate::series::ThermoSeries;
use crate::states::{
    buffered_gibbs, gibbs_state, log_partition, nu_density, product_phi, product_phi_hat, CanonicalTrace,
    FixedAlgebraTrace, FullTrace, TraceReference, TracedDensity,
};
use crate::symmetry::BlockDecomposition;

/// What `e^{−Hₙ}` is weighed against in a pressure.
#[derive(Clone, Debug)]
pub enum PressureWeight {
    /// The product state `φ` given by a generator.
    State(GeneratorH),
    /// The canonical trace of the fixed-point algebra.
    FixedAlgebra,
    /// The full matrix trace.
    Full,
}

impl PressureWeight {
    pub fn label(&self) -> &'static str {
        match self {
            PressureWeight::State(_) => "state",
            PressureWeight::FixedAlgebra => "fixed_trace",
            PressureWeight::Full => "full_trace",
        }
    }
}

/// Evaluates `f` at every `n` in parallel and assembles the results in order.
pub fn collect_series<F>(label: impl Into<String>, ns: &[usize], f: F) -> Result<ThermoSeries>
where
    F: Fn(usize) -> Result<(f64, Option<f64>)> + Sync,
{
    let pts: Vec<(f64, Option<f64>)> = ns.par_iter().map(|&n| f(n)).collect::<Result<_>>()?;
    ThermoSeries::from_points(label, ns.iter().zip(pts).map(|(&n, (v, d))| (n, v, d)))
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Domain("chain length must be positive".into()));
    }
    Ok(())
}

fn require_fixed(phi: &Interaction) -> Result<()> {
    if phi.algebra() != AlgebraFlag::Fixed {
        return Err(Error::Hypothesis("the interaction is not gauge invariant".into()));
    }
    Ok(())
}

/// `Σₖ hₖ` on `n` sites.
pub fn generator_sum(h: &GeneratorH, n: usize) -> Result<HermitianOp> {
    let d = h.d();
    let mut acc = HermitianOp::zeros(crate::operator::site_dim(d, n)?);
    for k in 1..=n {
        acc = acc.add(&embed(h.op(), &[k], n, d)?)?;
    }
    Ok(acc)
}

/// `log w(e^{−Hₙ})` for the chosen weight.
pub fn log_weighted_partition(phi: &Interaction, weight: &PressureWeight, n: usize) -> Result<f64> {
    check_n(n)?;
    let h_n = phi.hamiltonian(n)?;
    let full = FullTrace::new(n, phi.d());
    match weight {
        PressureWeight::Full => log_partition(&h_n, &CanonicalTrace::Trace(full)),
        PressureWeight::FixedAlgebra => {
            require_fixed(phi)?;
            let dec = phi.symmetry().decompose(n)?;
            log_partition(&h_n, &CanonicalTrace::Trace(FixedAlgebraTrace::new(dec)))
        }
        PressureWeight::State(h) => {
            if phi.algebra() == AlgebraFlag::Fixed {
                let dec = phi.symmetry().decompose(n)?;
                log_partition(&h_n, &CanonicalTrace::State(product_phi(h, &dec)?))
            } else {
                log_partition(&h_n, &CanonicalTrace::State(product_phi_hat(h, n)?))
            }
        }
    }
}

/// `|log φ(e^{−Hₙ}) + n log d − log Tr e^{−Hₙ(Φ^h)}|`.
pub fn perturbation_identity_defect(phi: &Interaction, h: &GeneratorH, n: usize) -> Result<f64> {
    let lhs = log_weighted_partition(phi, &PressureWeight::State(h.clone()), n)?;
    let rhs = log_weighted_partition(&phi.perturb(h)?, &PressureWeight::Full, n)?;
    Ok((lhs + n as f64 * (phi.d() as f64).ln() - rhs).abs())
}

/// `(1/n) log w(e^{−Hₙ})`. For a state weight each point carries the defect of
/// `log φ(e^{−Hₙ}) = log Tr e^{−Hₙ(Φ^h)} − n log d`.
pub fn pressure_series(phi: &Interaction, weight: &PressureWeight, ns: &[usize]) -> Result<ThermoSeries> {
    collect_series(format!("pressure_{}", weight.label()), ns, |n| {
        let v = log_weighted_partition(phi, weight, n)? / n as f64;
        let defect = match weight {
            PressureWeight::State(h) => Some(perturbation_identity_defect(phi, h, n)?),
            _ => None,
        };
        Ok((v, defect))
    })
}

/// `(1/n) log φ(e^{−Hₙ}) − (1/n) log Tr_𝒜 e^{−Hₙ(Φ^h)} + log d`, which lies in
/// `[0, (1/n) log max dᵢ]` for central `h`. The defect is the distance outside that corridor.
pub fn pressure_corridor_series(phi: &Interaction, h: &GeneratorH, ns: &[usize]) -> Result<ThermoSeries> {
    require_fixed(phi)?;
    if !h.is_central(phi.symmetry())? {
        return Err(Error::Hypothesis("the generator is not central".into()));
    }
    let phi_h = phi.perturb(h)?;
    collect_series("pressure_corridor", ns, |n| {
        let nf = n as f64;
        let p = log_weighted_partition(phi, &PressureWeight::State(h.clone()), n)? / nf;
        let q = log_weighted_partition(&phi_h, &PressureWeight::FixedAlgebra, n)? / nf;
        let gap = p - q + (phi.d() as f64).ln();
        let bound = (phi.symmetry().decompose(n)?.max_irrep_dim() as f64).ln() / nf;
        Ok((gap, Some(corridor_excess(gap, 0.0, bound))))
    })
}

fn corridor_excess(x: f64, lo: f64, hi: f64) -> f64 {
    (lo - x).max(x - hi).max(0.0)
}

/// `(1/n) S(ωₙ)` for a family of densities.
pub fn mean_entropy_series<R, F>(label: impl Into<String>, family: F, ns: &[usize]) -> Result<ThermoSeries>
where
    R: TraceReference,
    F: Fn(usize) -> Result<TracedDensity<R>> + Sync,
{
    collect_series(label, ns, |n| Ok((family(n)?.entropy() / n as f64, None)))
}

/// `(1/n) S(ωₙ) + (1/n) S(ωₙ, νₙ) − log d`, with the distance outside
/// `[−(1/n) log max dᵢ, (1/n) log max dᵢ]` as defect.
pub fn tracial_identity_series<F>(label: impl Into<String>, family: F, ns: &[usize]) -> Result<ThermoSeries>
where
    F: Fn(usize) -> Result<TracedDensity<FixedAlgebraTrace>> + Sync,
{
    collect_series(label, ns, |n| {
        let w = family(n)?;
        let dec = w.decomposition().clone();
        let nf = n as f64;
        let v = (w.entropy() + w.relative_entropy(&nu_density(&dec))?) / nf - (dec.d() as f64).ln();
        let bound = (dec.max_irrep_dim() as f64).ln() / nf;
        Ok((v, Some(corridor_excess(v, -bound, bound))))
    })
}

/// `(1/n) S(ωₙ, φₙ)` against the product state of `h`.
pub fn mean_relative_entropy_series<F>(label: impl Into<String>, family: F, h: &GeneratorH, ns: &[usize]) -> Result<ThermoSeries>
where
    F: Fn(usize) -> Result<TracedDensity<FixedAlgebraTrace>> + Sync,
{
    collect_series(label, ns, |n| {
        let w = family(n)?;
        let phi = product_phi(h, w.decomposition())?;
        Ok((w.relative_entropy(&phi)? / n as f64, None))
    })
}

/// `φₙ^G = φ(e^{−Hₙ}·)/φ(e^{−Hₙ})` on the fixed-point algebra.
pub fn local_gibbs(phi: &Interaction, h: &GeneratorH, n: usize) -> Result<TracedDensity<FixedAlgebraTrace>> {
    require_fixed(phi)?;
    let dec = phi.symmetry().decompose(n)?;
    gibbs_state(&phi.hamiltonian(n)?, &CanonicalTrace::State(product_phi(h, &dec)?))
}

/// `φ̂ₙ^G`, the field Gibbs state of `Hₙ(Φ^h)`.
pub fn local_gibbs_field(phi: &Interaction, h: &GeneratorH, n: usize) -> Result<TracedDensity<FullTrace>> {
    check_n(n)?;
    let h_n = phi.perturb(h)?.hamiltonian(n)?;
    gibbs_state(&h_n, &CanonicalTrace::Trace(FullTrace::new(n, phi.d())))
}

/// Families of states on the fixed-point algebra tried in the variational principle.
#[derive(Clone, Debug, PartialEq)]
pub enum Candidate {
    /// `φₙ^G`, the local Gibbs state itself.
    LocalGibbs,
    /// Restriction to `[1,n]` of the Gibbs state of `Φ^h` on `[1−L, n+L]`.
    Buffered(usize),
    /// Local Gibbs state of `βHₙ`.
    ScaledGibbs(f64),
    /// The reference state `φₙ`.
    Reference,
}

impl Candidate {
    pub fn label(&self) -> String {
        match self {
            Candidate::LocalGibbs => "local_gibbs".into(),
            Candidate::Buffered(l) => format!("buffered_L{l}"),
            Candidate::ScaledGibbs(b) => format!("scaled_gibbs_{b}"),
            Candidate::Reference => "reference".into(),
        }
    }

    pub fn state(&self, phi: &Interaction, h: &GeneratorH, n: usize) -> Result<TracedDensity<FixedAlgebraTrace>> {
        require_fixed(phi)?;
        let dec = phi.symmetry().decompose(n)?;
        match self {
            Candidate::LocalGibbs => local_gibbs(phi, h, n),
            Candidate::Buffered(l) => buffered_gibbs(&phi.perturb(h)?, Interval::chain(n), *l)?.restrict(&dec),
            Candidate::ScaledGibbs(b) => {
                gibbs_state(&phi.hamiltonian(n)?.scale(*b), &CanonicalTrace::State(product_phi(h, &dec)?))
            }
            Candidate::Reference => product_phi(h, &dec),
        }
    }
}

/// `−(1/n)[log φ(e^{−Hₙ}) + S(ωₙ, φₙ) + ωₙ(Hₙ)] = −(1/n) S(ωₙ, φₙ^G)`. Never positive;
/// zero exactly at the local Gibbs state.
pub fn variational_defect_at(phi: &Interaction, h: &GeneratorH, omega: &TracedDensity<FixedAlgebraTrace>) -> Result<f64> {
    let n = omega.volume();
    let dec = omega.decomposition();
    let phi_n = product_phi(h, dec)?;
    let h_n = phi.hamiltonian(n)?;
    let logz = log_partition(&h_n, &CanonicalTrace::State(phi_n.clone()))?;
    let total = logz + omega.relative_entropy(&phi_n)? + omega.expectation(&h_n)?;
    Ok(-total / n as f64)
}

pub fn variational_defect(phi: &Interaction, h: &GeneratorH, candidate: &Candidate, ns: &[usize]) -> Result<ThermoSeries> {
    collect_series(format!("variational_defect_{}", candidate.label()), ns, |n| {
        let omega = candidate.state(phi, h, n)?;
        Ok((variational_defect_at(phi, h, &omega)?, None))
    })
}

/// `min_Ψ [(1/n) log φ(e^{−Hₙ(Ψ)}) + ωₙ(Hₙ(Ψ))/n] + (1/n) S(ωₙ, φₙ)` over a grid of
/// interactions. Never negative.
pub fn duality_gap(omega: &TracedDensity<FixedAlgebraTrace>, h: &GeneratorH, grid: &[Interaction]) -> Result<f64> {
    let n = omega.volume();
    let dec = omega.decomposition();
    let phi_n = product_phi(h, dec)?;
    let lhs = -omega.relative_entropy(&phi_n)?;
    let mut best = f64::INFINITY;
    for psi in grid {
        let h_n = psi.hamiltonian(n)?;
        let logz = log_partition(&h_n, &CanonicalTrace::State(phi_n.clone()))?;
        best = best.min(logz + omega.expectation(&h_n)?);
    }
    Ok((best - lhs) / n as f64)
}

/// Five finite-volume sequences that share the entropy density as their limit.
#[derive(Clone, Debug, Serialize)]
pub struct EntropyChain {
    /// `(1/n) S(φₙ^G, φₙ)` on the fixed-point algebra.
    pub relative_algebra: ThermoSeries,
    /// `(1/n) S(φ̂ₙ^G, φ̂ₙ)` on the field algebra.
    pub relative_field: ThermoSeries,
    /// `−(1/n) S(ω̂ₙ) + (1/n) φ̂ₙ^G(Σₖ hₖ) + log d` with `ω̂ₙ` the buffered Gibbs proxy.
    pub entropy_identity: ThermoSeries,
    /// `(1/n) S(φ̂ₙ^G)`.
    pub entropy_field: ThermoSeries,
    /// `(1/n) S(φₙ^G)`.
    pub entropy_algebra: ThermoSeries,
    /// Largest gap among the first three and between the last two.
    pub max_gap: ThermoSeries,
    /// `|S(φ̂ₙ^G) − S(φₙ^G)|/n`, with the excess over `(1/n) log max dᵢ` as defect.
    pub entropy_corridor: ThermoSeries,
}

impl EntropyChain {
    pub fn all(&self) -> [&ThermoSeries; 7] {
        [
            &self.relative_algebra,
            &self.relative_field,
            &self.entropy_identity,
            &self.entropy_field,
            &self.entropy_algebra,
            &self.max_gap,
            &self.entropy_corridor,
        ]
    }
}

struct ChainPoint {
    values: [f64; 5],
    bound: f64,
}

fn chain_point(phi: &Interaction, h: &GeneratorH, n: usize, buffer: usize) -> Result<ChainPoint> {
    require_fixed(phi)?;
    let nf = n as f64;
    let dec: Arc<BlockDecomposition> = phi.symmetry().decompose(n)?;
    let h_n = phi.hamiltonian(n)?;
    let phi_n = product_phi(h, &dec)?;
    let phi_hat = product_phi_hat(h, n)?;
    let g_alg = gibbs_state(&h_n, &CanonicalTrace::State(phi_n.clone()))?;
    let g_field = gibbs_state(&h_n, &CanonicalTrace::State(phi_hat.clone()))?;
    let proxy = buffered_gibbs(&phi.perturb(h)?, Interval::chain(n), buffer)?;
    // Cesàro average of the translates of h equals the mean of Σₖ hₖ
    let h_mean = g_field.expectation(&generator_sum(h, n)?)? / nf;
    let values = [
        g_alg.relative_entropy(&phi_n)? / nf,
        g_field.relative_entropy(&phi_hat)? / nf,
        -proxy.entropy() / nf + h_mean + (phi.d() as f64).ln(),
        g_field.entropy() / nf,
        g_alg.entropy() / nf,
    ];
    Ok(ChainPoint {
        values,
        bound: (dec.max_irrep_dim() as f64).ln() / nf,
    })
}

pub fn entropy_density_chain(phi: &Interaction, h: &GeneratorH, ns: &[usize], buffer: usize) -> Result<EntropyChain> {
    let pts: Vec<ChainPoint> = ns.par_iter().map(|&n| chain_point(phi, h, n, buffer)).collect::<Result<_>>()?;
    let series = |label: &str, k: usize| {
        ThermoSeries::from_points(label, ns.iter().zip(&pts).map(|(&n, p)| (n, p.values[k], None)))
    };
    let gap = |v: &[f64; 5]| {
        let rel = [(v[0] - v[1]).abs(), (v[0] - v[2]).abs(), (v[1] - v[2]).abs()];
        rel.into_iter().fold((v[3] - v[4]).abs(), f64::max)
    };
    Ok(EntropyChain {
        relative_algebra: series("chain_relative_algebra", 0)?,
        relative_field: series("chain_relative_field", 1)?,
        entropy_identity: series("chain_entropy_identity", 2)?,
        entropy_field: series("chain_entropy_field", 3)?,
        entropy_algebra: series("chain_entropy_algebra", 4)?,
        max_gap: ThermoSeries::from_points("chain_max_gap", ns.iter().zip(&pts).map(|(&n, p)| (n, gap(&p.values), None)))?,
        entropy_corridor: ThermoSeries::from_points(
            "chain_entropy_corridor",
            ns.iter().zip(&pts).map(|(&n, p)| {
                let g = (p.values[3] - p.values[4]).abs();
                (n, g, Some((g - p.bound).max(0.0)))
            }),
        )?,
    })
}

/// Central difference of `β ↦ (1/n) log φ(e^{−Hₙ(Φ+βΨ)})` at `β = 0`.
pub fn pressure_derivative(phi: &Interaction, h: &GeneratorH, psi: &Interaction, n: usize, step: f64) -> Result<f64> {
    if !(1e-6..=1e-2).contains(&step) {
        return Err(Error::Domain(format!("step {step} outside [1e-6, 1e-2]")));
    }
    let weight = PressureWeight::State(h.clone());
    let f = |b: f64| -> Result<f64> { Ok(log_weighted_partition(&phi.plus(&psi.scaled(b))?, &weight, n)? / n as f64) };
    Ok((f(step)? - f(-step)?) / (2.0 * step))
}

/// `−(1/n) φₙ^G(Hₙ)`.
pub fn gibbs_energy_density(phi: &Interaction, h: &GeneratorH, n: usize) -> Result<f64> {
    let g = local_gibbs(phi, h, n)?;
    Ok(-g.expectation(&phi.hamiltonian(n)?)? / n as f64)
}

/// Mean entropies of the buffered Gibbs proxy on both algebras, and their gap,
/// for a generator that need not be central.
#[derive(Clone, Debug, Serialize)]
pub struct EntropyGap {
    pub algebra: ThermoSeries,
    pub field: ThermoSeries,
    pub gap: ThermoSeries,
}

pub fn restricted_entropy_gap(phi: &Interaction, h: &GeneratorH, ns: &[usize], buffer: usize) -> Result<EntropyGap> {
    require_fixed(phi)?;
    let pts: Vec<(f64, f64)> = ns
        .par_iter()
        .map(|&n| {
            let omega_hat = buffered_gibbs(&phi.perturb(h)?, Interval::chain(n), buffer)?;
            let omega = omega_hat.restrict(&phi.symmetry().decompose(n)?)?;
            Ok((omega.entropy() / n as f64, omega_hat.entropy() / n as f64))
        })
        .collect::<Result<_>>()?;
    let mk = |label: &str, f: &dyn Fn(&(f64, f64)) -> f64| {
        ThermoSeries::from_points(label, ns.iter().zip(&pts).map(|(&n, p)| (n, f(p), None)))
    };
    Ok(EntropyGap {
        algebra: mk("mean_entropy_algebra", &|p| p.0)?,
        field: mk("mean_entropy_field", &|p| p.1)?,
        gap: mk("mean_entropy_gap", &|p| p.0 - p.1)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symmetry::{GaugeSymmetry, SymmetrySpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn u1() -> Arc<GaugeSymmetry> {
        Arc::new(GaugeSymmetry::new(SymmetrySpec::abelian_charges(vec![1, -1]).unwrap(), 0))
    }

    fn su2() -> Arc<GaugeSymmetry> {
        Arc::new(GaugeSymmetry::new(SymmetrySpec::su2_fundamental(), 0))
    }

    fn tilt() -> GeneratorH {
        GeneratorH::normalize(HermitianOp::diagonal(vec![1.0, -1.0]))
    }

    /// Open-chain Ising partition function `Σ exp(−μΣsₖ − JΣsₖsₖ₊₁)` by transfer matrix.
    fn transfer_log_z(mu: f64, j: f64, n: usize) -> f64 {
        let s = [1.0, -1.0];
        let mut v: Vec<f64> = s.iter().map(|&a| (-mu * a).exp()).collect();
        for _ in 1..n {
            v = s
                .iter()
                .map(|&b| s.iter().zip(&v).map(|(&a, &w)| w * (-j * a * b - mu * b).exp()).sum())
                .collect();
        }
        v.iter().sum::<f64>().ln()
    }

    #[test]
    fn zero_interaction_pressures() {
        let phi = Interaction::zero(u1());
        let ns = [1, 2, 3, 4];
        let full = pressure_series(&phi, &PressureWeight::Full, &ns).unwrap();
        assert!(full.values().iter().all(|v| (v - 2f64.ln()).abs() < 1e-14));
        let st = pressure_series(&phi, &PressureWeight::State(tilt()), &ns).unwrap();
        assert!(st.values().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn ising_pressure_matches_transfer_matrix() {
        let phi = Interaction::gauge_ising(u1(), 0.0, 1.0).unwrap();
        let ns: Vec<usize> = (1..=9).collect();
        let s = pressure_series(&phi, &PressureWeight::Full, &ns).unwrap();
        for p in &s.points {
            assert!((p.value * p.n as f64 - transfer_log_z(0.0, 1.0, p.n)).abs() < 1e-10);
        }
        let limit = (2.0 * 1f64.cosh()).ln();
        let e = s.extrapolation.as_ref().unwrap();
        assert!((e.estimate - limit).abs() < 1e-3, "{e:?}");

        let biased = Interaction::gauge_ising(u1(), 0.3, -0.8).unwrap();
        let s = pressure_series(&biased, &PressureWeight::Full, &ns).unwrap();
        for p in &s.points {
            assert!((p.value * p.n as f64 - transfer_log_z(0.3, -0.8, p.n)).abs() < 1e-10);
        }
    }

    #[test]
    fn perturbation_identity_holds_at_every_n() {
        let phi = Interaction::gauge_ising(u1(), 0.5, 1.0).unwrap();
        for h in [GeneratorH::zero(2), tilt()] {
            let s = pressure_series(&phi, &PressureWeight::State(h), &[1, 2, 3, 4, 5, 6]).unwrap();
            assert!(s.max_defect() < 1e-10);
        }
        let q = Interaction::xxz_charge(su2(), 1.0, 1.0, 0.0).unwrap();
        let s = pressure_series(&q, &PressureWeight::State(GeneratorH::zero(2)), &[2, 3, 4]).unwrap();
        assert!(s.max_defect() < 1e-10);
    }

    #[test]
    fn corridor_holds_for_central_generators() {
        let phi = Interaction::gauge_ising(u1(), 0.2, -1.0).unwrap();
        let s = pressure_corridor_series(&phi, &tilt(), &[1, 2, 3, 4, 5]).unwrap();
        assert!(s.max_defect() < 1e-12);
        // abelian: the corridor has width zero
        assert!(s.values().iter().all(|v| v.abs() < 1e-12));

        let q = Interaction::xxz_charge(su2(), 1.0, 1.0, 0.0).unwrap();
        let s = pressure_corridor_series(&q, &GeneratorH::zero(2), &[2, 3, 4, 5]).unwrap();
        assert!(s.max_defect() < 1e-12);
        assert!(s.values().iter().any(|v| *v > 1e-3));
    }

    #[test]
    fn mean_entropy_examples() {
        let triv = Arc::new(GaugeSymmetry::new(SymmetrySpec::trivial(2), 0));
        let site = HermitianOp::diagonal(vec![0.3, 0.7]);
        let s1 = -(0.3f64 * 0.3f64.ln() + 0.7 * 0.7f64.ln());
        let s = mean_entropy_series(
            "product",
            |n| {
                let rho = crate::operator::tensor_power(&site, n)?;
                TracedDensity::from_density(n, 2, rho)?.restrict(&triv.decompose(n)?)
            },
            &[1, 2, 3, 4],
        )
        .unwrap();
        assert!(s.values().iter().all(|v| (v - s1).abs() < 1e-13));

        let sym = su2();
        let s = mean_entropy_series(
            "tracial",
            |n| Ok(nu_density(&sym.decompose(n)?)),
            &[1, 2, 3, 4, 5, 6],
        )
        .unwrap();
        for p in &s.points {
            let gap = 2f64.ln() - p.value;
            assert!(gap >= -1e-14 && gap <= ((p.n + 1) as f64).ln() / p.n as f64 + 1e-14);
        }
    }

    #[test]
    fn tracial_identity_corridor() {
        let sym = su2();
        let s = tracial_identity_series(
            "product",
            |n| product_phi_hat(&GeneratorH::zero(2), n)?.restrict(&sym.decompose(n)?),
            &[1, 2, 3, 4, 5],
        )
        .unwrap();
        assert_eq!(s.max_defect(), 0.0);
        let seeds = std::sync::Mutex::new(ChaCha8Rng::seed_from_u64(3));
        let s = tracial_identity_series(
            "random",
            |n| TracedDensity::random(FixedAlgebraTrace::new(sym.decompose(n)?), &mut *seeds.lock().unwrap()),
            &[1, 2, 3, 4],
        )
        .unwrap();
        assert_eq!(s.max_defect(), 0.0);
    }

    #[test]
    fn variational_defects() {
        let zero = Interaction::zero(u1());
        let s = variational_defect(&zero, &tilt(), &Candidate::LocalGibbs, &[1, 2, 3]).unwrap();
        assert!(s.values().iter().all(|v| v.abs() < 1e-14));

        let phi = Interaction::gauge_ising(u1(), 0.0, -1.0).unwrap();
        let h = tilt();
        let ns = [3, 4, 5, 6];
        let gibbs = variational_defect(&phi, &h, &Candidate::LocalGibbs, &ns).unwrap();
        assert!(gibbs.values().iter().all(|v| v.abs() < 1e-12));
        let proxy = variational_defect(&phi, &h, &Candidate::Buffered(2), &ns).unwrap();
        for c in [Candidate::ScaledGibbs(2.0), Candidate::ScaledGibbs(0.5), Candidate::Reference] {
            let s = variational_defect(&phi, &h, &c, &ns).unwrap();
            for (a, b) in s.points.iter().zip(&proxy.points) {
                assert!(a.value < -1e-6);
                assert!(a.value <= b.value + 1e-9, "{c:?} n={}", a.n);
            }
        }
        assert!(proxy.values().iter().all(|v| *v <= 1e-14));
        let pv = proxy.values();
        assert!(pv.windows(2).all(|w| w[1].abs() < w[0].abs()));
    }

    #[test]
    fn scaled_gibbs_defect_matches_direct_relative_entropy() {
        let phi = Interaction::gauge_ising(u1(), 0.3, -1.0).unwrap();
        let h = tilt();
        let n = 2;
        let g = local_gibbs(&phi, &h, n).unwrap();
        let w = Candidate::ScaledGibbs(2.0).state(&phi, &h, n).unwrap();
        let direct = -w.relative_entropy(&g).unwrap() / n as f64;
        assert!((variational_defect_at(&phi, &h, &w).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn duality_gap_is_nonnegative() {
        let sym = u1();
        let h = tilt();
        let grid: Vec<Interaction> = [(-1.0, -1.0), (0.0, 0.5), (0.4, -0.3), (1.0, 1.0)]
            .iter()
            .map(|&(mu, j)| Interaction::gauge_ising(sym.clone(), mu, j).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in 1..=4 {
            let w = TracedDensity::random(FixedAlgebraTrace::new(sym.decompose(n).unwrap()), &mut rng).unwrap();
            assert!(duality_gap(&w, &h, &grid).unwrap() >= -1e-12);
            let g = local_gibbs(&grid[2], &h, n).unwrap();
            assert!(duality_gap(&g, &h, &grid).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn chain_for_zero_interaction() {
        let phi = Interaction::zero(u1());
        let ln2 = 2f64.ln();
        let c = entropy_density_chain(&phi, &GeneratorH::zero(2), &[1, 2, 3, 4], 1).unwrap();
        for p in 0..4 {
            assert!(c.relative_algebra.points[p].value.abs() < 1e-14);
            assert!(c.relative_field.points[p].value.abs() < 1e-14);
            assert!(c.entropy_identity.points[p].value.abs() < 1e-14);
            assert!((c.entropy_field.points[p].value - ln2).abs() < 1e-14);
            assert!((c.entropy_algebra.points[p].value - ln2).abs() < 1e-14);
        }
        let h = tilt();
        let site = h.site_density();
        let s1 = -site.diag_real().iter().map(|x| x * x.ln()).sum::<f64>();
        let c = entropy_density_chain(&phi, &h, &[1, 2, 3, 4, 5], 2).unwrap();
        for s in [&c.relative_algebra, &c.relative_field, &c.entropy_identity] {
            assert!(s.values().iter().all(|v| v.abs() < 1e-12), "{}", s.label);
        }
        for s in [&c.entropy_field, &c.entropy_algebra] {
            assert!(s.values().iter().all(|v| (v - s1).abs() < 1e-12));
        }
    }

    #[test]
    fn chain_gaps_for_ising() {
        let phi = Interaction::gauge_ising(u1(), 0.0, -1.0).unwrap();
        let c = entropy_density_chain(&phi, &tilt(), &[2, 4, 6, 8], 2).unwrap();
        assert!(c.entropy_corridor.max_defect() < 1e-12);
        // abelian: algebra and field sides agree exactly
        for (a, b) in c.relative_algebra.points.iter().zip(&c.relative_field.points) {
            assert!((a.value - b.value).abs() < 1e-12);
        }
        let g = c.max_gap.values();
        assert!(g.windows(2).all(|w| w[1] < w[0]), "{g:?}");
    }

    #[test]
    fn su2_chain_corridor() {
        let phi = Interaction::xxz_charge(su2(), 1.0, 1.0, 0.0).unwrap();
        let c = entropy_density_chain(&phi, &GeneratorH::zero(2), &[2, 3, 4], 1).unwrap();
        assert_eq!(c.entropy_corridor.max_defect(), 0.0);
    }

    #[test]
    fn derivative_examples() {
        let h = tilt();
        let zero = Interaction::zero(u1());
        let z = Interaction::single_site(u1(), HermitianOp::pauli_z()).unwrap();
        let dz = pressure_derivative(&zero, &h, &z, 1, 1e-4).unwrap();
        let expect = -h.site_density().trace_product(&HermitianOp::pauli_z()).unwrap();
        assert!((dz - expect).abs() < 1e-8);

        let phi = Interaction::gauge_ising(u1(), 0.5, 1.0).unwrap();
        let fd = pressure_derivative(&phi, &h, &phi, 4, 1e-4).unwrap();
        let exact = gibbs_energy_density(&phi, &h, 4).unwrap();
        assert!((fd - exact).abs() < 1e-6);

        let a = pressure_derivative(&phi, &h, &z.scaled(2.0), 3, 1e-4).unwrap();
        let b = pressure_derivative(&phi, &h, &z, 3, 1e-4).unwrap();
        assert!((a - 2.0 * b).abs() < 1e-7);
        assert!(pressure_derivative(&phi, &h, &z, 3, 0.5).is_err());
    }

    #[test]
    fn doubling_is_superadditive() {
        let phi = Interaction::gauge_ising(u1(), 0.2, -1.0).unwrap();
        let h = tilt();
        let sym = phi.symmetry().clone();
        for n in [1, 2, 3] {
            let big = buffered_gibbs(&phi.perturb(&h).unwrap(), Interval::chain(2 * n), 1).unwrap();
            let rel = |s: &TracedDensity<FullTrace>| {
                let dec = sym.decompose(s.volume()).unwrap();
                s.restrict(&dec).unwrap().relative_entropy(&product_phi(&h, &dec).unwrap()).unwrap()
            };
            let left: Vec<usize> = (1..=n).collect();
            let right: Vec<usize> = (n + 1..=2 * n).collect();
            let whole = rel(&big);
            let halves = rel(&big.partial_trace(&left).unwrap()) + rel(&big.partial_trace(&right).unwrap());
            assert!(whole >= halves - 1e-12);
        }
    }

    #[test]
    fn noncentral_gap_is_reported() {
        let phi = Interaction::xxz_charge(su2(), 1.0, 1.0, 0.0).unwrap();
        let h = GeneratorH::normalize(HermitianOp::pauli_z().scale(0.5));
        assert!(!h.is_central(phi.symmetry()).unwrap());
        let g = restricted_entropy_gap(&phi, &h, &[2, 3, 4], 1).unwrap();
        for (a, f) in g.algebra.points.iter().zip(&g.field.points) {
            assert!(a.value.is_finite() && f.value.is_finite());
        }
    }
}
