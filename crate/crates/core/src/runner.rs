use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::interaction::{GeneratorH, Interaction};
use crate::operator::{max_dim, set_max_dim, CMatrix, HermitianOp, C64};
use crate::symmetry::{Backend, GaugeSymmetry, SymmetrySpec};
use crate::testing::{exponent_series, gibbs_log_ratio_bound, ExponentVariant};
use crate::thermo::{
    entropy_density_chain, gibbs_energy_density, log_weighted_partition, perturbation_identity_defect,
    pressure_corridor_series, pressure_derivative, variational_defect_at, Candidate, PressureWeight,
};

pub const DEFAULT_EXACT_TOL: f64 = 1e-9;
pub const DEFAULT_DERIVATIVE_TOL: f64 = 1e-6;
pub const DERIVATIVE_STEP: f64 = 1e-4;

/// A matrix entered row-major as `[re, im]` pairs.
pub type MatrixEntries = Vec<[f64; 2]>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Norms,
    Decomposition,
    Thermo,
    Variational,
    Testing,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Norms, Suite::Decomposition, Suite::Thermo, Suite::Variational, Suite::Testing];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Norms => "norms",
            Suite::Decomposition => "decomposition",
            Suite::Thermo => "thermo",
            Suite::Variational => "variational",
            Suite::Testing => "testing",
        }
    }

    fn needs_buffer(&self) -> bool {
        matches!(self, Suite::Thermo | Suite::Variational | Suite::Testing)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SymmetryConfig {
    Trivial { d: usize },
    Abelian { charges: Vec<i64> },
    Cyclic { charges: Vec<i64>, order: usize },
    Su2,
    FiniteGroup { elements: Vec<MatrixEntries> },
    Lie { d: usize, generators: Vec<MatrixEntries> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermConfig {
    /// Offsets of the sites, starting at 0.
    pub sites: Vec<usize>,
    pub matrix: MatrixEntries,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum InteractionConfig {
    Zero,
    GaugeIsing { mu: f64, j: f64 },
    Xxz { jxy: f64, delta: f64, mu: f64 },
    Terms { terms: Vec<TermConfig> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "default_exact")]
    pub exact: f64,
    #[serde(default = "default_derivative")]
    pub derivative: f64,
    /// Per-identity overrides, keyed by the identity column of the tables.
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
}

fn default_exact() -> f64 {
    DEFAULT_EXACT_TOL
}

fn default_derivative() -> f64 {
    DEFAULT_DERIVATIVE_TOL
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            exact: DEFAULT_EXACT_TOL,
            derivative: DEFAULT_DERIVATIVE_TOL,
            overrides: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Inclusive `[first, last]`.
    pub n_range: [usize; 2],
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_buffers")]
    pub buffers: Vec<usize>,
    /// All suites when absent.
    #[serde(default)]
    pub suites: Option<Vec<Suite>>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_max_dim")]
    pub max_dim: usize,
    pub symmetry: SymmetryConfig,
    pub interaction: InteractionConfig,
    /// The raw generator; zero when absent.
    #[serde(default)]
    pub h: Option<MatrixEntries>,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn default_epsilons() -> Vec<f64> {
    vec![0.1]
}

fn default_buffers() -> Vec<usize> {
    vec![1, 2]
}

fn default_out() -> PathBuf {
    PathBuf::from("results")
}

fn default_max_dim() -> usize {
    4096
}

fn config_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

fn matrix_from_entries(field: &str, entries: &[[f64; 2]]) -> Result<CMatrix> {
    let dim = (entries.len() as f64).sqrt().round() as usize;
    if dim == 0 || dim * dim != entries.len() {
        return Err(config_err(field, format!("{} entries do not form a square matrix", entries.len())));
    }
    if entries.iter().flatten().any(|x| !x.is_finite()) {
        return Err(config_err(field, "non-finite entry"));
    }
    Ok(CMatrix::from_row_iterator(dim, dim, entries.iter().map(|[re, im]| C64::new(*re, *im))))
}

fn hermitian_from_entries(field: &str, entries: &[[f64; 2]]) -> Result<HermitianOp> {
    HermitianOp::from_dense(matrix_from_entries(field, entries)?).map_err(|e| config_err(field, e))
}

/// Row-major `[re, im]` entries of a real diagonal matrix.
pub fn diagonal_entries(diag: &[f64]) -> MatrixEntries {
    let d = diag.len();
    (0..d * d)
        .map(|k| if k / d == k % d { [diag[k / d], 0.0] } else { [0.0, 0.0] })
        .collect()
}

impl ExperimentConfig {
    /// Parses and checks a TOML document. Parse errors carry line and column.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn ns(&self) -> Vec<usize> {
        (self.n_range[0]..=self.n_range[1]).collect()
    }

    pub fn suites(&self) -> Vec<Suite> {
        let mut s = self.suites.clone().unwrap_or_else(|| Suite::ALL.to_vec());
        s.sort();
        s.dedup();
        s
    }

    /// Structural invariants: ascending nonempty range, `ε ∈ (0,1)`, a buffer list.
    pub fn check(&self) -> Result<()> {
        let [a, b] = self.n_range;
        if a == 0 || a > b {
            return Err(config_err("n_range", format!("[{a}, {b}] must satisfy 1 ≤ first ≤ last")));
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
            return Err(config_err("epsilons", format!("{e} outside (0, 1)")));
        }
        if self.buffers.is_empty() {
            return Err(config_err("buffers", "at least one buffer width is needed"));
        }
        if self.max_dim == 0 {
            return Err(config_err("max_dim", "must be positive"));
        }
        if self.tolerances.exact <= 0.0 || self.tolerances.derivative <= 0.0 {
            return Err(config_err("tolerances", "must be positive"));
        }
        Ok(())
    }

    pub fn symmetry_spec(&self) -> Result<SymmetrySpec> {
        let to_cfg = |e: Error| config_err("symmetry", e);
        match &self.symmetry {
            SymmetryConfig::Trivial { d } => {
                if *d == 0 {
                    return Err(config_err("symmetry.d", "must be positive"));
                }
                Ok(SymmetrySpec::trivial(*d))
            }
            SymmetryConfig::Abelian { charges } => SymmetrySpec::abelian_charges(charges.clone()).map_err(to_cfg),
            SymmetryConfig::Cyclic { charges, order } => SymmetrySpec::cyclic_charges(charges, *order).map_err(to_cfg),
            SymmetryConfig::Su2 => Ok(SymmetrySpec::su2_fundamental()),
            SymmetryConfig::FiniteGroup { elements } => {
                let mats = elements
                    .iter()
                    .enumerate()
                    .map(|(k, e)| matrix_from_entries(&format!("symmetry.elements[{k}]"), e))
                    .collect::<Result<Vec<_>>>()?;
                SymmetrySpec::finite_group(mats).map_err(to_cfg)
            }
            SymmetryConfig::Lie { d, generators } => {
                let mats = generators
                    .iter()
                    .enumerate()
                    .map(|(k, e)| matrix_from_entries(&format!("symmetry.generators[{k}]"), e))
                    .collect::<Result<Vec<_>>>()?;
                SymmetrySpec::lie_generators(*d, mats).map_err(to_cfg)
            }
        }
    }

    fn raw_terms(&self) -> Result<Vec<(Vec<usize>, HermitianOp)>> {
        match &self.interaction {
            InteractionConfig::Terms { terms } => terms
                .iter()
                .enumerate()
                .map(|(k, t)| Ok((t.sites.clone(), hermitian_from_entries(&format!("interaction.terms[{k}].matrix"), &t.matrix)?)))
                .collect(),
            _ => Ok(Vec::new()),
        }
    }

    pub fn interaction(&self, sym: Arc<GaugeSymmetry>) -> Result<Interaction> {
        let to_cfg = |e: Error| config_err("interaction", e);
        match &self.interaction {
            InteractionConfig::Zero => Ok(Interaction::zero(sym)),
            InteractionConfig::GaugeIsing { mu, j } => Interaction::gauge_ising(sym, *mu, *j).map_err(to_cfg),
            InteractionConfig::Xxz { jxy, delta, mu } => Interaction::xxz_charge(sym, *jxy, *delta, *mu).map_err(to_cfg),
            InteractionConfig::Terms { .. } => Interaction::new(sym, self.raw_terms()?).map_err(to_cfg),
        }
    }

    pub fn raw_generator(&self, d: usize) -> Result<HermitianOp> {
        match &self.h {
            None => Ok(HermitianOp::zeros(d)),
            Some(e) => {
                let h = hermitian_from_entries("h", e)?;
                if h.dim() != d {
                    return Err(config_err("h", format!("dimension {} but sites have {d}", h.dim())));
                }
                Ok(h)
            }
        }
    }

    /// Largest sites count any selected suite puts in one window.
    fn widest_window(&self, range: usize) -> usize {
        let suites = self.suites();
        let l = *self.buffers.iter().max().unwrap_or(&0);
        let mut w = 0;
        if !suites.is_empty() {
            w = self.n_range[1];
        }
        if suites.iter().any(|s| s.needs_buffer()) {
            w = w.max(self.n_range[1] + 2 * l.max(range));
        }
        w
    }

    /// Largest last `n` whose windows fit under `max_dim`.
    pub fn max_feasible_n(&self, d: usize, range: usize) -> Option<usize> {
        let extra = self.widest_window(range).saturating_sub(self.n_range[1]);
        let mut best = None;
        let mut dim: usize = d.checked_pow(extra as u32)?;
        for n in 1..=64 {
            dim = dim.checked_mul(d)?;
            if dim > self.max_dim {
                break;
            }
            best = Some(n);
        }
        best
    }
}

/// [`ExperimentConfig::max_feasible_n`] for the configured model.
pub fn max_feasible_last_n(config: &ExperimentConfig) -> Option<usize> {
    let spec = config.symmetry_spec().ok()?;
    let d = spec.d();
    let range = config
        .interaction(Arc::new(GaugeSymmetry::new(spec, config.seed)))
        .map(|p| p.range())
        .unwrap_or(1);
    config.max_feasible_n(d, range)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Info,
    Warning,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnostic {
    pub level: Level,
    pub field: String,
    pub message: String,
}

fn diag(level: Level, field: &str, message: impl Into<String>) -> Diagnostic {
    Diagnostic {
        level,
        field: field.into(),
        message: message.into(),
    }
}

/// Static diagnostics of a configuration. Never fails.
pub fn validate(config: &ExperimentConfig) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if let Err(e) = config.check() {
        out.push(diag(Level::Error, "config", e.to_string()));
    }
    let spec = match config.symmetry_spec() {
        Ok(s) => s,
        Err(e) => {
            out.push(diag(Level::Error, "symmetry", e.to_string()));
            return out;
        }
    };
    let d = spec.d();
    let sym = Arc::new(GaugeSymmetry::new(spec, config.seed));
    match config.raw_terms() {
        Ok(terms) => {
            for (k, (sites, op)) in terms.iter().enumerate() {
                let field = format!("interaction.terms[{k}]");
                if op.dim() != d.pow(sites.len() as u32) {
                    out.push(diag(Level::Error, &field, format!("dimension {} does not match {} sites", op.dim(), sites.len())));
                    continue;
                }
                match sym.gauge_residual(op, sites.len()) {
                    Ok(r) if r > crate::interaction::GAUGE_TOL => {
                        out.push(diag(Level::Error, &field, format!("not gauge invariant: residual {r:.3e}")))
                    }
                    Ok(_) => {}
                    Err(e) => out.push(diag(Level::Error, &field, e.to_string())),
                }
            }
        }
        Err(e) => out.push(diag(Level::Error, "interaction", e.to_string())),
    }
    let range = match config.interaction(sym.clone()) {
        Ok(phi) => phi.range(),
        Err(e) => {
            if !matches!(config.interaction, InteractionConfig::Terms { .. }) {
                out.push(diag(Level::Error, "interaction", e.to_string()));
            }
            1
        }
    };
    match config.raw_generator(d) {
        Ok(raw) => {
            let h = GeneratorH::normalize(raw);
            if h.shift().abs() <= 1e-15 {
                out.push(diag(Level::Info, "h", "already normalized"));
            } else {
                out.push(diag(Level::Info, "h", format!("normalization shift {:.16e} applied", h.shift())));
            }
            match h.is_central(&sym) {
                Ok(true) => out.push(diag(Level::Info, "h", "central")),
                Ok(false) => out.push(diag(
                    Level::Warning,
                    "h",
                    "not central: canonical-trace pressures and trace test variants are skipped",
                )),
                Err(e) => out.push(diag(Level::Error, "h", e.to_string())),
            }
        }
        Err(e) => out.push(diag(Level::Error, "h", e.to_string())),
    }
    if let Some(&l) = config.buffers.iter().find(|&&l| l < range) {
        out.push(diag(Level::Error, "buffers", format!("buffer {l} is below the interaction range {range}")));
    }
    let sites = config.widest_window(range);
    let dim = (d as f64).powi(sites as i32);
    if dim > config.max_dim as f64 {
        let hint = match config.max_feasible_n(d, range) {
            Some(n) => format!("largest feasible last n is {n}"),
            None => "no n fits".into(),
        };
        out.push(diag(
            Level::Error,
            "max_dim",
            format!("windows of {sites} sites need dimension {dim:.0} > {}; {hint}", config.max_dim),
        ));
    } else {
        out.push(diag(Level::Info, "max_dim", format!("largest window: {sites} sites, dimension {dim:.0}")));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Info,
}

impl Status {
    fn as_str(&self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Info => "info",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Row {
    pub identity: String,
    pub variant: String,
    pub n: Option<usize>,
    pub value: f64,
    pub reference: Option<f64>,
    pub defect: Option<f64>,
    pub tolerance: Option<f64>,
    pub status: Status,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Table {
    pub suite: Suite,
    pub rows: Vec<Row>,
}

pub const CSV_HEADER: &str = "identity,variant,n,value,reference,defect,tolerance,status";

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

impl Table {
    pub fn file_name(&self) -> String {
        format!("{}.csv", self.suite.name())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.identity,
                r.variant,
                r.n.map(|n| n.to_string()).unwrap_or_default(),
                num(r.value),
                opt(r.reference),
                opt(r.defect),
                opt(r.tolerance),
                r.status.as_str()
            );
        }
        s
    }
}

/// Worst gated row of one identity.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LedgerEntry {
    pub identity: String,
    pub checked: usize,
    pub failed: usize,
    pub worst_defect: f64,
    pub worst_n: Option<usize>,
    pub worst_variant: String,
    pub tolerance: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TableRecord {
    pub file: String,
    pub rows: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub package: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub suites: Vec<Suite>,
    pub tables: Vec<TableRecord>,
    pub ledger: Vec<LedgerEntry>,
    pub threads: usize,
    pub wall_time_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct ResultBundle {
    pub out: PathBuf,
    pub tables: Vec<Table>,
    pub manifest: Manifest,
}

impl ResultBundle {
    pub fn passed(&self) -> bool {
        self.manifest.ledger.iter().all(|e| e.failed == 0)
    }

    pub fn failures(&self) -> Vec<&Row> {
        self.tables.iter().flat_map(|t| &t.rows).filter(|r| r.status == Status::Fail).collect()
    }
}

struct Model {
    cfg: ExperimentConfig,
    sym: Arc<GaugeSymmetry>,
    phi: Interaction,
    h: GeneratorH,
    central: bool,
    ns: Vec<usize>,
}

impl Model {
    fn tol(&self, identity: &str, derivative: bool) -> f64 {
        self.cfg.tolerances.overrides.get(identity).copied().unwrap_or(if derivative {
            self.cfg.tolerances.derivative
        } else {
            self.cfg.tolerances.exact
        })
    }

    fn gated(&self, identity: &str, variant: impl Into<String>, n: Option<usize>, value: f64, reference: Option<f64>, defect: f64, derivative: bool) -> Row {
        let tol = self.tol(identity, derivative);
        Row {
            identity: identity.into(),
            variant: variant.into(),
            n,
            value,
            reference,
            defect: Some(defect),
            tolerance: Some(tol),
            status: if defect.is_finite() && defect <= tol { Status::Pass } else { Status::Fail },
        }
    }
}

fn info(identity: &str, variant: impl Into<String>, n: Option<usize>, value: f64, reference: Option<f64>, defect: Option<f64>) -> Row {
    Row {
        identity: identity.into(),
        variant: variant.into(),
        n,
        value,
        reference,
        defect,
        tolerance: None,
        status: Status::Info,
    }
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    (1..=k).fold(1usize, |acc, i| acc * (n - k + i) / i)
}

/// Expected `(multiplicity, irrep dimension)` list, sorted, when a closed form is known.
pub fn structure_oracle(spec: &SymmetrySpec, n: usize) -> Option<Vec<(usize, usize)>> {
    let d = spec.d();
    let mut out = match spec.backend() {
        Backend::AbelianCharges(charges) => {
            let mut counts: BTreeMap<i64, usize> = BTreeMap::from([(0, 1)]);
            for _ in 0..n {
                let mut next = BTreeMap::new();
                for (&q, &c) in &counts {
                    for &ch in charges {
                        *next.entry(q + ch).or_insert(0) += c;
                    }
                }
                counts = next;
            }
            counts.values().map(|&m| (m, 1)).collect::<Vec<_>>()
        }
        Backend::FiniteGroup(g) if g.len() == 1 => vec![(d.pow(n as u32), 1)],
        Backend::LieGenerators(g) if g.is_empty() => vec![(d.pow(n as u32), 1)],
        Backend::LieGenerators(_) if d == 2 && matches!(spec.backend(), Backend::LieGenerators(g) if g.len() == 3) => (0..=n / 2)
            .map(|k| (binomial(n, k) - if k == 0 { 0 } else { binomial(n, k - 1) }, n - 2 * k + 1))
            .filter(|&(m, _)| m > 0)
            .collect(),
        _ => return None,
    };
    out.sort();
    Some(out)
}

fn norms_suite(m: &Model) -> Result<Vec<Row>> {
    let norms = m.phi.norms()?;
    let mut rows = vec![
        info("interaction_norm", "triple", None, norms.triple, None, None),
        info("interaction_norm", "zero", None, norms.zero, None, None),
    ];
    let r = m.phi.range();
    for n in 1..=3 {
        let sites = 2 * n + 1 + 2 * r;
        if (m.phi.d() as f64).powi(sites as i32) > m.cfg.max_dim as f64 {
            break;
        }
        let b = m.phi.cyclic_derivation_bound(n)?;
        rows.push(m.gated("derivation_bound", "cyclic_shift", Some(n), b.value, Some(b.bound), (b.value - b.bound).max(0.0), false));
    }
    Ok(rows)
}

fn decomposition_suite(m: &Model) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    for &n in &m.ns {
        let dec = m.sym.decompose(n)?;
        let mut got = dec.structure();
        let total: usize = got.iter().map(|(a, b)| a * b).sum();
        let dim = dec.dim();
        rows.push(m.gated("dimension_count", "sum_m_d", Some(n), total as f64, Some(dim as f64), (total as f64 - dim as f64).abs(), false));
        got.sort();
        let label = got.iter().map(|(a, b)| format!("{a}x{b}")).collect::<Vec<_>>().join(";");
        rows.push(info("block_structure", label, Some(n), got.len() as f64, None, None));
        if let Some(want) = structure_oracle(m.sym.spec(), n) {
            let mismatch = if want == got { 0.0 } else { 1.0 };
            rows.push(m.gated("multiplicity_oracle", "closed_form", Some(n), mismatch, Some(0.0), mismatch, false));
        }
        rows.push(info("max_irrep_dim", "", Some(n), dec.max_irrep_dim() as f64, None, None));
    }
    Ok(rows)
}

fn thermo_suite(m: &Model) -> Result<Vec<Row>> {
    use rayon::prelude::*;
    let buffer = m.cfg.buffers[0];
    let nd = (m.phi.d() as f64).ln();
    let per_n: Vec<Vec<Row>> = m
        .ns
        .par_iter()
        .map(|&n| -> Result<Vec<Row>> {
            let nf = n as f64;
            let mut rows = Vec::new();
            let lhs = log_weighted_partition(&m.phi, &PressureWeight::State(m.h.clone()), n)?;
            let defect = perturbation_identity_defect(&m.phi, &m.h, n)?;
            rows.push(m.gated("perturbation_identity", "log_partition", Some(n), lhs, Some(lhs + nf * nd), defect, false));
            rows.push(info("pressure", "state", Some(n), lhs / nf, None, None));
            rows.push(info(
                "pressure",
                "fixed_trace",
                Some(n),
                log_weighted_partition(&m.phi, &PressureWeight::FixedAlgebra, n)? / nf,
                None,
                None,
            ));
            rows.push(info("pressure", "full_trace", Some(n), log_weighted_partition(&m.phi, &PressureWeight::Full, n)? / nf, None, None));
            let fd = pressure_derivative(&m.phi, &m.h, &m.phi, n, DERIVATIVE_STEP)?;
            let exact = gibbs_energy_density(&m.phi, &m.h, n)?;
            rows.push(m.gated("pressure_derivative", "self", Some(n), fd, Some(exact), (fd - exact).abs(), true));
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let mut rows: Vec<Row> = per_n.into_iter().flatten().collect();
    if m.central {
        let c = pressure_corridor_series(&m.phi, &m.h, &m.ns)?;
        for p in &c.points {
            rows.push(m.gated("pressure_corridor", "state_vs_fixed_trace", Some(p.n), p.value, None, p.defect.unwrap_or(0.0), false));
        }
    }
    let chain = entropy_density_chain(&m.phi, &m.h, &m.ns, buffer)?;
    for s in [
        &chain.relative_algebra,
        &chain.relative_field,
        &chain.entropy_identity,
        &chain.entropy_field,
        &chain.entropy_algebra,
        &chain.max_gap,
    ] {
        let variant = s.label.trim_start_matches("chain_").to_string();
        for p in &s.points {
            rows.push(info("entropy_chain", variant.clone(), Some(p.n), p.value, None, None));
        }
        if let Some(e) = &s.extrapolation {
            rows.push(info("entropy_chain_limit", variant.clone(), None, e.estimate, None, Some(e.uncertainty)));
        }
    }
    for p in &chain.entropy_corridor.points {
        rows.push(m.gated("entropy_corridor", "field_vs_algebra", Some(p.n), p.value, None, p.defect.unwrap_or(0.0), false));
    }
    Ok(rows)
}

fn variational_suite(m: &Model) -> Result<Vec<Row>> {
    use rayon::prelude::*;
    let mut candidates = vec![Candidate::LocalGibbs];
    candidates.extend(m.cfg.buffers.iter().map(|&l| Candidate::Buffered(l)));
    candidates.extend([Candidate::ScaledGibbs(2.0), Candidate::ScaledGibbs(0.5), Candidate::Reference]);
    let per_n: Vec<Vec<Row>> = m
        .ns
        .par_iter()
        .map(|&n| -> Result<Vec<Row>> {
            let mut rows = Vec::new();
            for c in &candidates {
                let v = variational_defect_at(&m.phi, &m.h, &c.state(&m.phi, &m.h, n)?)?;
                if *c == Candidate::LocalGibbs {
                    rows.push(m.gated("variational_equality", c.label(), Some(n), v, Some(0.0), v.abs(), false));
                } else {
                    rows.push(m.gated("variational_sign", c.label(), Some(n), v, Some(0.0), v.max(0.0), false));
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    Ok(per_n.into_iter().flatten().collect())
}

fn testing_suite(m: &Model) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    let buffer = m.cfg.buffers[0];
    for &eps in &m.cfg.epsilons {
        for v in ExponentVariant::ALL {
            if v.is_trace() && !m.central {
                continue;
            }
            let r = exponent_series(&m.phi, &m.h, eps, &m.ns, v, buffer)?;
            let variant = format!("{}_eps_{eps}", v.label());
            for p in &r.points {
                rows.push(info("test_beta", variant.clone(), Some(p.n), p.beta, Some(p.beta_lower), None));
                rows.push(info("test_exponent", variant.clone(), Some(p.n), p.exponent, Some(p.target_n), Some(p.corridor_excess)));
            }
            rows.push(info("test_corridor", format!("{variant}_lower"), None, r.corridor.0, None, None));
            rows.push(info("test_corridor", format!("{variant}_upper"), None, r.corridor.1, None, None));
        }
    }
    for &l in &m.cfg.buffers {
        for &n in &m.ns {
            let b = gibbs_log_ratio_bound(&m.phi, &m.h, n, l)?;
            rows.push(info("log_ratio_bound", format!("buffer_{l}"), Some(n), b.max_eigenvalue, Some(b.bound), Some(b.violation())));
        }
    }
    Ok(rows)
}

fn ledger(tables: &[Table]) -> Vec<LedgerEntry> {
    let mut map: BTreeMap<String, LedgerEntry> = BTreeMap::new();
    for r in tables.iter().flat_map(|t| &t.rows).filter(|r| r.status != Status::Info) {
        let e = map.entry(r.identity.clone()).or_insert_with(|| LedgerEntry {
            identity: r.identity.clone(),
            checked: 0,
            failed: 0,
            worst_defect: 0.0,
            worst_n: None,
            worst_variant: String::new(),
            tolerance: r.tolerance.unwrap_or(0.0),
        });
        e.checked += 1;
        if r.status == Status::Fail {
            e.failed += 1;
        }
        let d = r.defect.unwrap_or(0.0);
        if e.checked == 1 || !(d <= e.worst_defect) {
            e.worst_defect = d;
            e.worst_n = r.n;
            e.worst_variant = r.variant.clone();
            e.tolerance = r.tolerance.unwrap_or(0.0);
        }
    }
    map.into_values().collect()
}

fn build_model(cfg: &ExperimentConfig) -> Result<Model> {
    cfg.check()?;
    let spec = cfg.symmetry_spec()?;
    let d = spec.d();
    let sym = Arc::new(GaugeSymmetry::new(spec, cfg.seed));
    let phi = cfg.interaction(sym.clone())?;
    let h = GeneratorH::normalize(cfg.raw_generator(d)?);
    if let Some(&l) = cfg.buffers.iter().find(|&&l| l < phi.range()) {
        return Err(config_err("buffers", format!("buffer {l} is below the interaction range {}", phi.range())));
    }
    let sites = cfg.widest_window(phi.range());
    let dim = d.checked_pow(sites as u32).unwrap_or(usize::MAX);
    if dim > cfg.max_dim {
        return Err(Error::Capacity { dim, max: cfg.max_dim });
    }
    let central = h.is_central(&sym)?;
    Ok(Model {
        cfg: cfg.clone(),
        sym,
        phi,
        h,
        central,
        ns: cfg.ns(),
    })
}

/// Computes the selected suites without touching the file system.
pub fn compute(cfg: &ExperimentConfig) -> Result<Vec<Table>> {
    let m = build_model(cfg)?;
    if cfg.max_dim > max_dim() {
        set_max_dim(cfg.max_dim);
    }
    let mut tables = Vec::new();
    for suite in cfg.suites() {
        let rows = match suite {
            Suite::Norms => norms_suite(&m)?,
            Suite::Decomposition => decomposition_suite(&m)?,
            Suite::Thermo => thermo_suite(&m)?,
            Suite::Variational => variational_suite(&m)?,
            Suite::Testing => testing_suite(&m)?,
        };
        tables.push(Table { suite, rows });
    }
    Ok(tables)
}

/// Runs the suites and writes one CSV per suite, `config.toml` and `manifest.json` under `cfg.out`.
pub fn run(cfg: &ExperimentConfig) -> Result<ResultBundle> {
    let start = Instant::now();
    let tables = compute(cfg)?;
    std::fs::create_dir_all(&cfg.out)?;
    let mut records = Vec::new();
    for t in &tables {
        let body = t.to_csv();
        std::fs::write(cfg.out.join(t.file_name()), &body)?;
        records.push(TableRecord {
            file: t.file_name(),
            rows: t.rows.len(),
            sha256: hex::encode(Sha256::digest(body.as_bytes())),
        });
    }
    std::fs::write(cfg.out.join("config.toml"), cfg.to_toml())?;
    let manifest = Manifest {
        package: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        suites: cfg.suites(),
        tables: records,
        ledger: ledger(&tables),
        threads: rayon::current_num_threads(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(cfg.out.join("manifest.json"), json + "\n")?;
    Ok(ResultBundle {
        out: cfg.out.clone(),
        tables,
        manifest,
    })
}

/// Named starting configurations.
pub fn presets() -> Vec<(&'static str, &'static str, ExperimentConfig)> {
    let tilt = Some(diagonal_entries(&[1.0, -1.0]));
    let base = |symmetry, interaction, h: Option<MatrixEntries>, n_last| ExperimentConfig {
        seed: 1,
        n_range: [2, n_last],
        epsilons: default_epsilons(),
        buffers: default_buffers(),
        suites: None,
        out: default_out(),
        max_dim: default_max_dim(),
        symmetry,
        interaction,
        h,
        tolerances: Tolerances::default(),
    };
    let u1 = || SymmetryConfig::Abelian { charges: vec![1, -1] };
    vec![
        (
            "gauge_ising",
            "U(1) charges (1,-1), mu Z + J ZZ with mu = 0.5, J = 1, h = diag(1,-1), n 2..8",
            base(u1(), InteractionConfig::GaugeIsing { mu: 0.5, j: 1.0 }, tilt.clone(), 8),
        ),
        (
            "gauge_ising_zero_h",
            "as gauge_ising with h = 0",
            base(u1(), InteractionConfig::GaugeIsing { mu: 0.5, j: 1.0 }, None, 8),
        ),
        (
            "free_tilt",
            "zero interaction with h = diag(1,-1), n 2..12, decomposition and testing suites",
            ExperimentConfig {
                suites: Some(vec![Suite::Decomposition, Suite::Testing]),
                buffers: vec![1],
                ..base(u1(), InteractionConfig::Zero, tilt.clone(), 12)
            },
        ),
        (
            "xxz",
            "U(1) charges (1,-1), XXZ with Jxy = 1, Delta = 0.5, h = diag(0.5,-0.5), n 2..6",
            ExperimentConfig {
                buffers: vec![1],
                ..base(u1(), InteractionConfig::Xxz { jxy: 1.0, delta: 0.5, mu: 0.0 }, Some(diagonal_entries(&[0.5, -0.5])), 6)
            },
        ),
        (
            "su2_heisenberg",
            "SU(2) fundamental, Heisenberg bonds, h = 0, n 2..6",
            ExperimentConfig {
                buffers: vec![1],
                ..base(SymmetryConfig::Su2, InteractionConfig::Xxz { jxy: 1.0, delta: 1.0, mu: 0.0 }, None, 6)
            },
        ),
    ]
}

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    presets().into_iter().find(|(n, _, _)| *n == name).map(|(_, _, c)| c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            n_range: [2, 4],
            buffers: vec![1],
            ..preset("gauge_ising").unwrap()
        }
    }

    #[test]
    fn toml_round_trip_and_hash() {
        for (_, _, c) in presets() {
            let text = c.to_toml();
            let back = ExperimentConfig::from_toml_str(&text).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
    }

    #[test]
    fn parse_errors_name_the_field_and_line() {
        let e = ExperimentConfig::from_toml_str("seed = 1\nn_range = [2, 4]\n[symmetry]\nkind = \"abelian\"\ncharges = [1, -1]\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("interaction"), "{e}");
        let e = ExperimentConfig::from_toml_str("seed = \"x\"\n").unwrap_err().to_string();
        assert!(e.contains("line 1"), "{e}");
        let mut c = small();
        c.n_range = [5, 3];
        assert!(matches!(ExperimentConfig::from_toml_str(&c.to_toml()), Err(Error::Config(m)) if m.contains("n_range")));
        let mut c = small();
        c.epsilons = vec![1.0];
        assert!(matches!(c.check(), Err(Error::Config(m)) if m.contains("epsilons")));
    }

    #[test]
    fn seed_is_mandatory() {
        let mut text = small().to_toml();
        text = text.lines().filter(|l| !l.starts_with("seed")).collect::<Vec<_>>().join("\n");
        assert!(ExperimentConfig::from_toml_str(&text).unwrap_err().to_string().contains("seed"));
    }

    #[test]
    fn validate_diagnostics() {
        let mut c = small();
        c.h = None;
        let d = validate(&c);
        assert!(d.iter().any(|x| x.message == "already normalized"));
        assert!(d.iter().any(|x| x.message == "central"));

        let d = validate(&small());
        let shift: f64 = d
            .iter()
            .find_map(|x| x.message.strip_prefix("normalization shift ")?.strip_suffix(" applied")?.parse().ok())
            .unwrap();
        assert!((shift - 1f64.cosh().ln()).abs() < 1e-15);

        let mut c = small();
        c.interaction = InteractionConfig::Terms {
            terms: vec![TermConfig {
                sites: vec![0],
                matrix: vec![[0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 0.0]],
            }],
        };
        let d = validate(&c);
        assert!(d.iter().any(|x| x.level == Level::Error && x.message.contains("not gauge invariant")), "{d:?}");
        assert!(matches!(compute(&c), Err(Error::Config(_))));

        let mut c = small();
        c.n_range = [2, 14];
        let d = validate(&c);
        assert!(d.iter().any(|x| x.field == "max_dim" && x.message.contains("largest feasible last n is 10")), "{d:?}");
        assert!(matches!(compute(&c), Err(Error::Capacity { .. })));
    }

    #[test]
    fn empty_suite_gives_manifest_only() {
        let dir = tempfile::tempdir().unwrap();
        let c = ExperimentConfig {
            suites: Some(vec![]),
            out: dir.path().to_path_buf(),
            ..small()
        };
        let b = run(&c).unwrap();
        assert!(b.tables.is_empty() && b.passed());
        let files: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert!(!files.iter().any(|f| f.ends_with(".csv")));
        assert!(files.contains(&"manifest.json".to_string()));
        let written = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&written).unwrap().hash(), b.manifest.config_hash);
    }

    #[test]
    fn small_pipeline_passes_and_is_deterministic() {
        let a = compute(&small()).unwrap();
        assert_eq!(a.len(), 5);
        for t in &a {
            assert!(t.rows.iter().all(|r| r.status != Status::Fail), "{:?}", t.rows.iter().find(|r| r.status == Status::Fail));
            assert!(t.to_csv().starts_with(CSV_HEADER));
        }
        let b = compute(&small()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_csv(), y.to_csv());
        }
        let l = ledger(&a);
        for id in ["perturbation_identity", "pressure_derivative", "variational_equality", "dimension_count", "multiplicity_oracle"] {
            assert!(l.iter().any(|e| e.identity == id && e.checked > 0 && e.failed == 0), "{id}");
        }
    }

    #[test]
    fn failing_rows_reach_the_ledger() {
        let mut c = small();
        c.suites = Some(vec![Suite::Thermo]);
        c.tolerances.overrides.insert("pressure_derivative".into(), 1e-30);
        let t = compute(&c).unwrap();
        let l = ledger(&t);
        let e = l.iter().find(|e| e.identity == "pressure_derivative").unwrap();
        assert!(e.failed > 0 && e.worst_n.is_some() && e.worst_defect > 0.0);
    }

    #[test]
    fn structure_oracles() {
        assert_eq!(structure_oracle(&SymmetrySpec::su2_fundamental(), 3).unwrap(), vec![(1, 4), (2, 2)]);
        assert_eq!(
            structure_oracle(&SymmetrySpec::abelian_charges(vec![1, -1]).unwrap(), 4).unwrap(),
            vec![(1, 1), (1, 1), (4, 1), (4, 1), (6, 1)]
        );
        assert_eq!(structure_oracle(&SymmetrySpec::trivial(2), 3).unwrap(), vec![(8, 1)]);
        for spec in [
            SymmetrySpec::trivial(2),
            SymmetrySpec::su2_fundamental(),
            SymmetrySpec::abelian_charges(vec![1, -1]).unwrap(),
        ] {
            for n in 1..=5 {
                let mut got = GaugeSymmetry::new(spec.clone(), 0).decompose(n).unwrap().structure();
                got.sort();
                assert_eq!(structure_oracle(&spec, n).unwrap(), got);
            }
        }
    }
}
