use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::interaction::{GeneratorH, Interaction, Interval};
use crate::operator::{CMatrix, HermitianOp, EIGEN_FLOOR};
use crate::series::ThermoSeries;
use crate::states::{
    buffered_gibbs, product_phi, product_phi_hat, FixedAlgebraTrace, FullTrace, TraceReference, TracedDensity,
};
use crate::thermo::{local_gibbs, local_gibbs_field};

/// Slack allowed on the mass constraint `ψ(q) ≥ 1 − ε`.
pub const COVER_TOL: f64 = 1e-14;
/// Largest commutator accepted by the exact path.
pub const COMMUTING_TOL: f64 = 1e-10;
/// Relative optimality gap at which branch and bound stops refining.
pub const KNAPSACK_REL_TOL: f64 = 1e-10;
/// Node budget of one branch-and-bound run.
pub const KNAPSACK_BUDGET: usize = 5_000_000;

/// Result of `min Σ cost` over subsets with `Σ gain ≥ target`.
#[derive(Clone, Debug, PartialEq)]
pub struct Cover {
    pub cost: f64,
    pub gain: f64,
    /// Indices of the chosen items, ascending.
    pub chosen: Vec<usize>,
    pub nodes: usize,
}

struct Group {
    gain: f64,
    cost: f64,
    members: Vec<usize>,
}

const RATIO_TIE: f64 = 1e-12;

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

/// Items with equal gain and cost (to 1e-12 relative) merged, sorted by gain/cost descending.
fn group_items(idx: Vec<usize>, gains: &[f64], costs: &[f64]) -> Vec<Group> {
    let mut idx = idx;
    idx.sort_by(|&a, &b| gains[a].total_cmp(&gains[b]).then(costs[a].total_cmp(&costs[b])).then(a.cmp(&b)));
    let mut groups: Vec<Group> = Vec::new();
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && same(gains[idx[end]], gains[idx[end - 1]]) {
            end += 1;
        }
        let mut run: Vec<usize> = idx[start..end].to_vec();
        run.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));
        let mut s = 0;
        while s < run.len() {
            let mut e = s + 1;
            while e < run.len() && same(costs[run[e]], costs[run[e - 1]]) {
                e += 1;
            }
            let members: Vec<usize> = run[s..e].to_vec();
            let k = members.len() as f64;
            groups.push(Group {
                gain: members.iter().map(|&i| gains[i]).sum::<f64>() / k,
                cost: members.iter().map(|&i| costs[i]).sum::<f64>() / k,
                members,
            });
            s = e;
        }
        start = end;
    }
    groups.sort_by(|a, b| {
        (b.gain / b.cost)
            .total_cmp(&(a.gain / a.cost))
            .then(b.gain.total_cmp(&a.gain))
            .then(a.members[0].cmp(&b.members[0]))
    });
    // ratios within RATIO_TIE of a run's first count as tied: largest gains first
    let mut start = 0;
    while start < groups.len() {
        let head = groups[start].gain / groups[start].cost;
        let mut end = start + 1;
        while end < groups.len() && head - groups[end].gain / groups[end].cost <= RATIO_TIE * head {
            end += 1;
        }
        groups[start..end].sort_by(|a, b| b.gain.total_cmp(&a.gain).then(a.members[0].cmp(&b.members[0])));
        start = end;
    }
    groups
}

/// Any cover of `rem` needs at least as many items as the largest gains require,
/// and costs at least that many of the cheapest items.
struct CardinalityBound {
    /// Groups by gain descending: cumulative gain and count.
    gain_sum: Vec<f64>,
    gain_count: Vec<f64>,
    gains: Vec<f64>,
    /// Groups by cost ascending: cumulative count and cost.
    cost_count: Vec<f64>,
    cost_sum: Vec<f64>,
    costs: Vec<f64>,
}

impl CardinalityBound {
    fn new(groups: &[Group]) -> Self {
        let mut by_gain: Vec<(f64, f64)> = groups.iter().map(|g| (g.gain, g.members.len() as f64)).collect();
        by_gain.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut by_cost: Vec<(f64, f64)> = groups.iter().map(|g| (g.cost, g.members.len() as f64)).collect();
        by_cost.sort_by(|a, b| a.0.total_cmp(&b.0));
        let prefix = |v: &[(f64, f64)], f: &dyn Fn(&(f64, f64)) -> f64| {
            let mut out = vec![0.0];
            for x in v {
                out.push(out.last().unwrap() + f(x));
            }
            out
        };
        Self {
            gain_sum: prefix(&by_gain, &|x| x.0 * x.1),
            gain_count: prefix(&by_gain, &|x| x.1),
            gains: by_gain.iter().map(|x| x.0).collect(),
            cost_count: prefix(&by_cost, &|x| x.1),
            cost_sum: prefix(&by_cost, &|x| x.0 * x.1),
            costs: by_cost.iter().map(|x| x.0).collect(),
        }
    }

    fn min_items(&self, rem: f64) -> f64 {
        let j = self.gain_sum.partition_point(|&s| s < rem - COVER_TOL);
        if j == 0 {
            return 0.0;
        }
        if j >= self.gain_sum.len() {
            return f64::INFINITY;
        }
        let before = self.gain_sum[j - 1];
        self.gain_count[j - 1] + ((rem - COVER_TOL - before) / self.gains[j - 1] - 1e-9).ceil().max(1.0)
    }

    fn min_cost(&self, rem: f64) -> f64 {
        if rem <= COVER_TOL {
            return 0.0;
        }
        let m = self.min_items(rem);
        if !m.is_finite() {
            return f64::INFINITY;
        }
        let j = self.cost_count.partition_point(|&c| c < m);
        if j == 0 {
            return 0.0;
        }
        let j = j.min(self.costs.len());
        self.cost_sum[j - 1] + (m - self.cost_count[j - 1]).max(0.0) * self.costs[j - 1]
    }
}

struct Search<'a> {
    groups: &'a [Group],
    /// Prefix sums of total gain and cost over groups.
    pg: Vec<f64>,
    pc: Vec<f64>,
    card: CardinalityBound,
    tol: f64,
    best: f64,
    best_counts: Vec<usize>,
    counts: Vec<usize>,
    nodes: usize,
    budget: usize,
    exhausted: bool,
}

impl Search<'_> {
    /// Fractional cover of `rem` using groups `g..`; `None` if they cannot reach it.
    fn lp(&self, g: usize, rem: f64) -> Option<f64> {
        if rem <= COVER_TOL {
            return Some(0.0);
        }
        let base_g = self.pg[g];
        let total = self.pg[self.groups.len()] - base_g;
        if total < rem - COVER_TOL {
            return None;
        }
        // first j with cumulative gain over g..=j reaching rem
        let (mut lo, mut hi) = (g, self.groups.len() - 1);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.pg[mid + 1] - base_g >= rem {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        let j = lo;
        let full_gain = self.pg[j] - base_g;
        let full_cost = self.pc[j] - self.pc[g];
        let grp = &self.groups[j];
        let frac = ((rem - full_gain) / grp.gain).max(0.0);
        // groups are ordered only up to RATIO_TIE, so deflate to stay a lower bound
        Some((full_cost + frac * grp.cost) * (1.0 - 4.0 * RATIO_TIE))
    }

    fn bound(&self, g: usize, rem: f64, cost: f64) -> Option<f64> {
        let lp = self.lp(g, rem)?;
        Some(cost + lp.max(self.card.min_cost(rem)))
    }

    fn prune(&self, bound: f64) -> bool {
        bound >= self.best - self.tol * self.best.abs()
    }

    fn dfs(&mut self, g: usize, rem: f64, cost: f64) {
        if self.exhausted {
            return;
        }
        self.nodes += 1;
        if self.nodes > self.budget {
            self.exhausted = true;
            return;
        }
        if rem <= COVER_TOL {
            if cost < self.best {
                self.best = cost;
                self.best_counts = self.counts.clone();
            }
            return;
        }
        if g == self.groups.len() {
            return;
        }
        let (p, r, c) = {
            let grp = &self.groups[g];
            (grp.gain, grp.cost, grp.members.len())
        };
        let need = ((rem - COVER_TOL) / p).ceil().max(0.0);
        let kmax = if need >= c as f64 { c } else { need as usize };
        let k_lp = ((rem / p).floor() as usize).min(c);
        for k in (0..=kmax).rev() {
            let new_rem = rem - k as f64 * p;
            let new_cost = cost + k as f64 * r;
            let bound = match self.bound(g + 1, new_rem, new_cost) {
                Some(b) => b,
                None => break,
            };
            if self.prune(bound) {
                if k < k_lp {
                    break;
                }
                continue;
            }
            self.counts[g] = k;
            self.dfs(g + 1, new_rem, new_cost);
            self.counts[g] = 0;
            if self.exhausted {
                return;
            }
        }
    }
}

/// Best cover found and whether the node budget ran out before optimality was proved.
fn cover_search(gains: &[f64], costs: &[f64], target: f64, tol: f64, budget: usize) -> Result<(Cover, bool)> {
    if gains.len() != costs.len() {
        return Err(Error::Dimension("gains and costs differ in length".into()));
    }
    if gains.iter().chain(costs).any(|x| !x.is_finite() || *x < -1e-12) {
        return Err(Error::Domain("gains and costs must be finite and non-negative".into()));
    }
    let mut chosen = Vec::new();
    let mut rem = target;
    let mut rest = Vec::new();
    for i in 0..gains.len() {
        if gains[i] <= 0.0 {
            continue;
        }
        if costs[i] <= 0.0 {
            chosen.push(i);
            rem -= gains[i];
        } else {
            rest.push(i);
        }
    }
    let groups = group_items(rest, gains, costs);
    let mut pg = vec![0.0; groups.len() + 1];
    let mut pc = vec![0.0; groups.len() + 1];
    for (g, grp) in groups.iter().enumerate() {
        let k = grp.members.len() as f64;
        pg[g + 1] = pg[g] + k * grp.gain;
        pc[g + 1] = pc[g] + k * grp.cost;
    }
    if rem > COVER_TOL && pg[groups.len()] < rem - COVER_TOL {
        return Err(Error::Domain(format!("total gain {} cannot reach {target}", target - rem + pg[groups.len()])));
    }
    // greedy start: whole groups in ratio order, the last one closed by ceil(rem/p)
    let mut counts = vec![0usize; groups.len()];
    let mut best = 0.0;
    let mut r = rem;
    for (g, grp) in groups.iter().enumerate() {
        if r <= COVER_TOL {
            break;
        }
        let need = ((r - COVER_TOL) / grp.gain).ceil().max(0.0) as usize;
        let k = need.min(grp.members.len());
        counts[g] = k;
        best += k as f64 * grp.cost;
        r -= k as f64 * grp.gain;
    }
    let mut s = Search {
        groups: &groups,
        card: CardinalityBound::new(&groups),
        pg,
        pc,
        tol,
        best: if rem <= COVER_TOL { 0.0 } else { best },
        best_counts: if rem <= COVER_TOL { vec![0; groups.len()] } else { counts },
        counts: vec![0; groups.len()],
        nodes: 0,
        budget,
        exhausted: false,
    };
    if rem > COVER_TOL {
        let lb = s.bound(0, rem, 0.0).unwrap_or(f64::INFINITY);
        if !s.prune(lb) {
            s.dfs(0, rem, 0.0);
        }
    }
    for (g, &k) in s.best_counts.iter().enumerate() {
        chosen.extend_from_slice(&groups[g].members[..k]);
    }
    chosen.sort_unstable();
    let cost = chosen.iter().map(|&i| costs[i].max(0.0)).sum();
    let gain = chosen.iter().map(|&i| gains[i]).sum();
    Ok((
        Cover {
            cost,
            gain,
            chosen,
            nodes: s.nodes,
        },
        s.exhausted,
    ))
}

/// Exact minimum-cost cover by grouped branch and bound. Instances of at most 16
/// items are solved with zero optimality gap, larger ones to 1e-10 relative.
pub fn min_cost_cover(gains: &[f64], costs: &[f64], target: f64) -> Result<Cover> {
    let tol = if gains.len() <= 16 { 0.0 } else { KNAPSACK_REL_TOL };
    let (cover, exhausted) = cover_search(gains, costs, target, tol, KNAPSACK_BUDGET)?;
    if exhausted {
        return Err(Error::Budget(KNAPSACK_BUDGET));
    }
    Ok(cover)
}

/// Optimum of the relaxation with fractional items.
pub fn fractional_cover(gains: &[f64], costs: &[f64], target: f64) -> f64 {
    let mut idx: Vec<usize> = (0..gains.len()).filter(|&i| gains[i] > 0.0).collect();
    idx.sort_by(|&a, &b| (gains[b] / costs[b].max(0.0)).total_cmp(&(gains[a] / costs[a].max(0.0))));
    let mut rem = target;
    let mut cost = 0.0;
    for i in idx {
        if rem <= 0.0 {
            break;
        }
        let take = (rem / gains[i]).min(1.0);
        cost += take * costs[i].max(0.0);
        rem -= take * gains[i];
    }
    cost
}

/// Second argument of a test: the reference trace itself or a state.
#[derive(Clone, Debug)]
pub enum Alternative<R: TraceReference> {
    Trace,
    State(TracedDensity<R>),
}

/// Minimize the alternative's weight of a projection `q` in the algebra of `R`
/// subject to `ψ(q) ≥ 1 − ε`.
#[derive(Clone, Debug)]
pub struct TestInstance<R: TraceReference> {
    pub null: TracedDensity<R>,
    pub alternative: Alternative<R>,
    pub epsilon: f64,
}

impl<R: TraceReference> TestInstance<R> {
    pub fn new(null: TracedDensity<R>, alternative: Alternative<R>, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::Domain(format!("epsilon {epsilon} outside (0, 1)")));
        }
        if let Alternative::State(s) = &alternative {
            if !s.reference().same_algebra(null.reference()) {
                return Err(Error::Dimension("null and alternative live on different algebras".into()));
            }
        }
        Ok(Self {
            null,
            alternative,
            epsilon,
        })
    }

    fn alternative_block(&self, i: usize) -> Option<&HermitianOp> {
        match &self.alternative {
            Alternative::Trace => None,
            Alternative::State(s) => Some(&s.blocks()[i]),
        }
    }

    fn block_count(&self) -> usize {
        self.null.blocks().len()
    }
}

/// `⟨vₖ|a|vₖ⟩` for every column of `v`.
fn diag_in_basis(a: &HermitianOp, v: &CMatrix) -> Vec<f64> {
    if let Some(d) = a.diagonal_values() {
        return (0..v.ncols())
            .map(|k| v.column(k).iter().zip(d).map(|(z, x)| z.norm_sqr() * x).sum())
            .collect();
    }
    let av = a.to_dense() * v;
    (0..v.ncols()).map(|k| v.column(k).dotc(&av.column(k)).re).collect()
}

/// A basis of one block together with both masses of each vector.
#[derive(Clone, Debug)]
struct BlockBasis {
    /// `None` is the standard basis.
    vectors: Option<CMatrix>,
    null: Vec<f64>,
    alt: Vec<f64>,
}

fn basis_weights(psi: &HermitianOp, alt: Option<&HermitianOp>, vectors: Option<CMatrix>) -> BlockBasis {
    let (null, alt_w) = match &vectors {
        None => (
            psi.diag_real(),
            alt.map(|a| a.diag_real()).unwrap_or_else(|| vec![1.0; psi.dim()]),
        ),
        Some(v) => (
            diag_in_basis(psi, v),
            alt.map(|a| diag_in_basis(a, v)).unwrap_or_else(|| vec![1.0; psi.dim()]),
        ),
    };
    BlockBasis {
        vectors,
        null,
        alt: alt_w,
    }
}

/// Common eigenbasis of two commuting blocks.
fn joint_basis(psi: &HermitianOp, alt: Option<&HermitianOp>) -> Result<BlockBasis> {
    let dim = psi.dim();
    if let Some(a) = alt {
        let c = psi.commutator_norm(a)?;
        if c > COMMUTING_TOL {
            return Err(Error::NonCommuting(c));
        }
        if psi.is_diagonal() && a.is_diagonal() {
            return Ok(basis_weights(psi, alt, None));
        }
    } else if psi.is_diagonal() {
        return Ok(basis_weights(psi, alt, None));
    }
    let spec = psi.spectrum();
    let v = spec.vector_matrix();
    let Some(a) = alt else {
        return Ok(basis_weights(psi, alt, Some(v)));
    };
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&x, &y| spec.values()[x].total_cmp(&spec.values()[y]));
    let scale = spec.values().iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    let mut out = CMatrix::zeros(dim, dim);
    let mut col = 0;
    let mut s = 0;
    while s < dim {
        let mut e = s + 1;
        while e < dim && spec.values()[order[e]] - spec.values()[order[e - 1]] <= 1e-9 * scale {
            e += 1;
        }
        let cluster: Vec<usize> = order[s..e].to_vec();
        let sub = CMatrix::from_fn(dim, cluster.len(), |i, j| v[(i, cluster[j])]);
        if cluster.len() == 1 {
            out.set_column(col, &sub.column(0));
        } else {
            let w = a.compress(&sub)?.spectrum().vector_matrix();
            let rotated = &sub * w;
            for j in 0..cluster.len() {
                out.set_column(col + j, &rotated.column(j));
            }
        }
        col += cluster.len();
        s = e;
    }
    Ok(basis_weights(psi, alt, Some(out)))
}

/// Optimal test of a commuting instance.
#[derive(Clone, Debug)]
pub struct BetaSolution {
    /// The minimal alternative weight.
    pub value: f64,
    /// The null mass of the optimal projection.
    pub null_mass: f64,
    /// Optimum of the fractional relaxation, a lower bound.
    pub relaxed: f64,
    /// Rank of the optimal projection in each block.
    pub ranks: Vec<usize>,
    bases: Vec<BlockBasis>,
    chosen: Vec<(usize, usize)>,
}

impl BetaSolution {
    /// The optimal projection, block by block.
    pub fn projection_blocks(&self) -> Vec<HermitianOp> {
        self.bases
            .iter()
            .enumerate()
            .map(|(b, basis)| {
                let dim = basis.null.len();
                let cols: Vec<usize> = self.chosen.iter().filter(|(bb, _)| *bb == b).map(|(_, c)| *c).collect();
                match &basis.vectors {
                    None => {
                        let mut d = vec![0.0; dim];
                        for c in cols {
                            d[c] = 1.0;
                        }
                        HermitianOp::diagonal(d)
                    }
                    Some(v) => {
                        let mut m = CMatrix::zeros(dim, dim);
                        for c in cols {
                            let col = v.column(c);
                            m += &col * col.adjoint();
                        }
                        HermitianOp::from_dense(m).expect("sum of rank-one projections is hermitian")
                    }
                }
            })
            .collect()
    }
}

fn solve_on_bases<R: TraceReference>(inst: &TestInstance<R>, bases: Vec<BlockBasis>) -> Result<(BetaSolution, bool)> {
    let mut gains = Vec::new();
    let mut costs = Vec::new();
    let mut owner = Vec::new();
    for (b, basis) in bases.iter().enumerate() {
        for k in 0..basis.null.len() {
            gains.push(basis.null[k].max(0.0));
            costs.push(basis.alt[k].max(0.0));
            owner.push((b, k));
        }
    }
    let target = 1.0 - inst.epsilon;
    let tol = if gains.len() <= 16 { 0.0 } else { KNAPSACK_REL_TOL };
    let (cover, exhausted) = cover_search(&gains, &costs, target, tol, KNAPSACK_BUDGET)?;
    let mut ranks = vec![0; bases.len()];
    let chosen: Vec<(usize, usize)> = cover.chosen.iter().map(|&i| owner[i]).collect();
    for (b, _) in &chosen {
        ranks[*b] += 1;
    }
    Ok((
        BetaSolution {
            value: cover.cost,
            null_mass: cover.gain,
            relaxed: fractional_cover(&gains, &costs, target),
            ranks,
            bases,
            chosen,
        },
        exhausted,
    ))
}

/// Exact `β_ε` when null and alternative commute blockwise, as a knapsack over a joint eigenbasis.
pub fn beta_epsilon_commuting<R: TraceReference>(inst: &TestInstance<R>) -> Result<BetaSolution> {
    let bases: Vec<BlockBasis> = (0..inst.block_count())
        .map(|i| joint_basis(&inst.null.blocks()[i], inst.alternative_block(i)))
        .collect::<Result<_>>()?;
    let (sol, exhausted) = solve_on_bases(inst, bases)?;
    if exhausted {
        return Err(Error::Budget(KNAPSACK_BUDGET));
    }
    Ok(sol)
}

/// As [`beta_epsilon_commuting`], but when the node budget runs out the best cover
/// found so far is returned with `false`. Its `relaxed` field stays a valid lower bound.
pub fn beta_epsilon_commuting_best_effort<R: TraceReference>(inst: &TestInstance<R>) -> Result<(BetaSolution, bool)> {
    let bases: Vec<BlockBasis> = (0..inst.block_count())
        .map(|i| joint_basis(&inst.null.blocks()[i], inst.alternative_block(i)))
        .collect::<Result<_>>()?;
    let (sol, exhausted) = solve_on_bases(inst, bases)?;
    Ok((sol, !exhausted))
}

/// Certified bracket on `β_ε` for a general pair.
#[derive(Clone, Debug, Serialize)]
pub struct BetaBounds {
    /// Weight of the best projection found.
    pub upper: f64,
    /// Null mass of that projection.
    pub null_mass: f64,
    /// Value of the relaxation over `0 ≤ q ≤ 1`.
    pub lower: f64,
    /// Multiplier attaining the lower bound.
    pub multiplier: f64,
}

fn alt_blocks<R: TraceReference>(inst: &TestInstance<R>) -> Vec<HermitianOp> {
    (0..inst.block_count())
        .map(|i| match inst.alternative_block(i) {
            Some(a) => a.clone(),
            None => HermitianOp::identity(inst.null.blocks()[i].dim()),
        })
        .collect()
}

/// `t(1−ε) − Σᵢ Tr(tψᵢ − refᵢ)₊`.
fn dual_value(psi: &[HermitianOp], alt: &[HermitianOp], eps: f64, t: f64) -> Result<f64> {
    let mut pos = 0.0;
    for (p, a) in psi.iter().zip(alt) {
        let m = p.linear_combination(t, a, -1.0)?;
        pos += m.spectrum().values().iter().filter(|&&x| x > 0.0).sum::<f64>();
    }
    Ok(t * (1.0 - eps) - pos)
}

/// Upper bound from projections spanned by eigenvectors of `ψ − t·ref` on a grid
/// of `t`, of `log ψ − log ref`, and of `ψ`, each solved exactly as a knapsack over
/// that basis. Lower bound from the dual of the relaxation over `0 ≤ q ≤ 1`.
pub fn beta_epsilon_search<R: TraceReference>(inst: &TestInstance<R>) -> Result<BetaBounds> {
    let psi = inst.null.blocks().to_vec();
    let alt = alt_blocks(inst);
    let eps = inst.epsilon;
    let scale = {
        let a: f64 = alt.iter().map(|b| b.trace()).sum();
        a.max(1e-300)
    };

    // maximize the concave dual over t ≥ 0
    let grid: Vec<f64> = (0..=120).map(|k| scale * 10f64.powf(-6.0 + 0.1 * k as f64)).collect();
    let vals: Vec<f64> = grid.iter().map(|&t| dual_value(&psi, &alt, eps, t)).collect::<Result<_>>()?;
    let k = (0..vals.len()).max_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    let (mut a, mut b) = (if k == 0 { 0.0 } else { grid[k - 1] }, grid[(k + 1).min(grid.len() - 1)]);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let x1 = b - phi * (b - a);
        let x2 = a + phi * (b - a);
        if dual_value(&psi, &alt, eps, x1)? < dual_value(&psi, &alt, eps, x2)? {
            a = x1;
        } else {
            b = x2;
        }
    }
    let t_star = 0.5 * (a + b);
    let lower = dual_value(&psi, &alt, eps, t_star)?.max(vals[k]).max(0.0);

    // candidate bases
    let mut ts: Vec<f64> = (0..=40).map(|k| scale * 10f64.powf(-4.0 + 0.2 * k as f64)).collect();
    ts.push(t_star);
    let mut families: Vec<Vec<CMatrix>> = Vec::new();
    for &t in &ts {
        let fam: Vec<CMatrix> = psi
            .iter()
            .zip(&alt)
            .map(|(p, r)| Ok(p.linear_combination(1.0, r, -1.0 / t)?.spectrum().vector_matrix()))
            .collect::<Result<_>>()?;
        families.push(fam);
    }
    families.push(psi.iter().map(|p| p.spectrum().vector_matrix()).collect());
    if let Ok(logs) = psi
        .iter()
        .zip(&alt)
        .map(|(p, r)| Ok(p.logm()?.sub(&r.logm()?)?.spectrum().vector_matrix()))
        .collect::<Result<Vec<CMatrix>>>()
    {
        families.push(logs);
    }

    let mut best: Option<(f64, f64)> = None;
    for fam in families {
        let bases: Vec<BlockBasis> = fam
            .into_iter()
            .enumerate()
            .map(|(i, v)| basis_weights(&psi[i], inst.alternative_block(i), Some(v)))
            .collect();
        let (sol, _) = solve_on_bases(inst, bases)?;
        if best.is_none_or(|(u, _)| sol.value < u) {
            best = Some((sol.value, sol.null_mass));
        }
    }
    let (upper, null_mass) = best.expect("at least one candidate basis");
    Ok(BetaBounds {
        upper,
        null_mass,
        lower: lower.min(upper),
        multiplier: t_star,
    })
}

/// The quantities whose exponents are compared with relative and mean entropies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ExponentVariant {
    /// `β_ε(ωₙ, φₙ)` on the fixed-point algebra.
    StateVsProduct,
    /// `β_ε(φₙ^G, φₙ)`.
    GibbsVsProduct,
    /// `β_ε(φ̂ₙ^G, φ̂ₙ)` on the field algebra.
    FieldGibbsVsProduct,
    /// `β_ε(ωₙ)` against the canonical trace; central generator only.
    StateTrace,
    /// `β_ε(φₙ^G)` against the canonical trace; central generator only.
    GibbsTrace,
    /// `β_ε(ω̂ₙ)` against the full trace; central generator only.
    FieldStateTrace,
    /// `β_ε(φ̂ₙ^G)` against the full trace; central generator only.
    FieldGibbsTrace,
    /// `β_ε(ω̂ₙ, φ̂ₙ)` on the field algebra, reported as data.
    FieldStateVsProduct,
}

impl ExponentVariant {
    pub const ALL: [ExponentVariant; 8] = [
        ExponentVariant::StateVsProduct,
        ExponentVariant::GibbsVsProduct,
        ExponentVariant::FieldGibbsVsProduct,
        ExponentVariant::StateTrace,
        ExponentVariant::GibbsTrace,
        ExponentVariant::FieldStateTrace,
        ExponentVariant::FieldGibbsTrace,
        ExponentVariant::FieldStateVsProduct,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ExponentVariant::StateVsProduct => "state_vs_product",
            ExponentVariant::GibbsVsProduct => "gibbs_vs_product",
            ExponentVariant::FieldGibbsVsProduct => "field_gibbs_vs_product",
            ExponentVariant::StateTrace => "state_trace",
            ExponentVariant::GibbsTrace => "gibbs_trace",
            ExponentVariant::FieldStateTrace => "field_state_trace",
            ExponentVariant::FieldGibbsTrace => "field_gibbs_trace",
            ExponentVariant::FieldStateVsProduct => "field_state_vs_product",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.label() == s)
    }

    pub fn is_trace(&self) -> bool {
        matches!(
            self,
            ExponentVariant::StateTrace
                | ExponentVariant::GibbsTrace
                | ExponentVariant::FieldStateTrace
                | ExponentVariant::FieldGibbsTrace
        )
    }

    pub fn is_field(&self) -> bool {
        matches!(
            self,
            ExponentVariant::FieldGibbsVsProduct
                | ExponentVariant::FieldStateTrace
                | ExponentVariant::FieldGibbsTrace
                | ExponentVariant::FieldStateVsProduct
        )
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExponentPoint {
    pub n: usize,
    /// Optimal (or best certified) alternative weight.
    pub beta: f64,
    /// Lower bound on the optimum; equals `beta` up to the relaxation gap on the exact path.
    pub beta_lower: f64,
    pub exact: bool,
    /// `(1/n) log β`.
    pub exponent: f64,
    /// The finite-volume target: `−(1/n) S(ψₙ, ref)` or `(1/n) S(ψₙ)`.
    pub target_n: f64,
    /// Distance of the exponent outside the corridor.
    pub corridor_excess: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExponentReport {
    pub variant: ExponentVariant,
    pub epsilon: f64,
    pub points: Vec<ExponentPoint>,
    /// Extrapolated limit of the target sequence.
    pub target: f64,
    pub corridor: (f64, f64),
}

impl ExponentReport {
    pub fn exponents(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.exponent).collect()
    }

    pub fn exponent_series(&self) -> Result<ThermoSeries> {
        ThermoSeries::from_points(
            format!("exponent_{}", self.variant.label()),
            self.points.iter().map(|p| (p.n, p.exponent, Some(p.corridor_excess))),
        )
    }
}

enum AnyInstance {
    Algebra(TestInstance<FixedAlgebraTrace>),
    Field(TestInstance<FullTrace>),
}

struct Solved {
    beta: f64,
    lower: f64,
    exact: bool,
    target_n: f64,
    log_trace_identity: f64,
}

fn solve_instance<R: TraceReference>(inst: &TestInstance<R>) -> Result<(f64, f64, bool)> {
    match beta_epsilon_commuting_best_effort(inst) {
        Ok((s, true)) => Ok((s.value, s.value, true)),
        Ok((s, false)) => Ok((s.value, s.relaxed, false)),
        Err(Error::NonCommuting(_)) => {
            let b = beta_epsilon_search(inst)?;
            Ok((b.upper, b.lower, false))
        }
        Err(e) => Err(e),
    }
}

fn finite_target<R: TraceReference>(inst: &TestInstance<R>) -> Result<f64> {
    let n = inst.null.volume() as f64;
    Ok(match &inst.alternative {
        Alternative::Trace => inst.null.entropy() / n,
        Alternative::State(s) => -inst.null.relative_entropy(s)? / n,
    })
}

fn variant_point(phi: &Interaction, h: &GeneratorH, variant: ExponentVariant, eps: f64, n: usize, buffer: usize) -> Result<Solved> {
    let sym = phi.symmetry();
    let omega_hat = || buffered_gibbs(&phi.perturb(h)?, Interval::chain(n), buffer);
    let inst = match variant {
        ExponentVariant::StateVsProduct => {
            let dec = sym.decompose(n)?;
            AnyInstance::Algebra(TestInstance::new(
                omega_hat()?.restrict(&dec)?,
                Alternative::State(product_phi(h, &dec)?),
                eps,
            )?)
        }
        ExponentVariant::GibbsVsProduct => {
            let dec = sym.decompose(n)?;
            AnyInstance::Algebra(TestInstance::new(
                local_gibbs(phi, h, n)?,
                Alternative::State(product_phi(h, &dec)?),
                eps,
            )?)
        }
        ExponentVariant::FieldGibbsVsProduct => AnyInstance::Field(TestInstance::new(
            local_gibbs_field(phi, h, n)?,
            Alternative::State(product_phi_hat(h, n)?),
            eps,
        )?),
        ExponentVariant::StateTrace => {
            let dec = sym.decompose(n)?;
            AnyInstance::Algebra(TestInstance::new(omega_hat()?.restrict(&dec)?, Alternative::Trace, eps)?)
        }
        ExponentVariant::GibbsTrace => AnyInstance::Algebra(TestInstance::new(local_gibbs(phi, h, n)?, Alternative::Trace, eps)?),
        ExponentVariant::FieldStateTrace => AnyInstance::Field(TestInstance::new(omega_hat()?, Alternative::Trace, eps)?),
        ExponentVariant::FieldGibbsTrace => {
            AnyInstance::Field(TestInstance::new(local_gibbs_field(phi, h, n)?, Alternative::Trace, eps)?)
        }
        ExponentVariant::FieldStateVsProduct => AnyInstance::Field(TestInstance::new(
            omega_hat()?,
            Alternative::State(product_phi_hat(h, n)?),
            eps,
        )?),
    };
    let ((beta, lower, exact), target_n, log_trace_identity) = match &inst {
        AnyInstance::Algebra(i) => (solve_instance(i)?, finite_target(i)?, i.null.reference().identity_trace().ln()),
        AnyInstance::Field(i) => (solve_instance(i)?, finite_target(i)?, i.null.reference().identity_trace().ln()),
    };
    Ok(Solved {
        beta,
        lower,
        exact,
        target_n,
        log_trace_identity,
    })
}

/// Per-n optimal tests for one variant, with the entropy target and its corridor.
///
/// For a state alternative the corridor is `[T/(1−ε), T]` with `T = −S_M`. For the
/// trace alternatives, with `m` the per-site log trace of the identity and `T = s`,
/// it is `[m − (m − T)/(1−ε), T]`.
pub fn exponent_series(
    phi: &Interaction,
    h: &GeneratorH,
    epsilon: f64,
    ns: &[usize],
    variant: ExponentVariant,
    buffer: usize,
) -> Result<ExponentReport> {
    if variant.is_trace() && !h.is_central(phi.symmetry())? {
        return Err(Error::Hypothesis(format!("{} requires a central generator", variant.label())));
    }
    if ns.is_empty() {
        return Err(Error::Domain("empty range of n".into()));
    }
    let solved: Vec<Solved> = ns
        .par_iter()
        .map(|&n| variant_point(phi, h, variant, epsilon, n, buffer))
        .collect::<Result<_>>()?;
    let targets = ThermoSeries::from_points("target", ns.iter().zip(&solved).map(|(&n, s)| (n, s.target_n, None)))?;
    let target = targets
        .extrapolation
        .as_ref()
        .map(|e| e.estimate)
        .unwrap_or_else(|| solved.last().unwrap().target_n);
    let corridor = if variant.is_trace() {
        let m = solved.last().unwrap().log_trace_identity / *ns.last().unwrap() as f64;
        (m - (m - target) / (1.0 - epsilon), target)
    } else {
        (target / (1.0 - epsilon), target)
    };
    let (lo, hi) = (corridor.0.min(corridor.1), corridor.0.max(corridor.1));
    let points = ns
        .iter()
        .zip(&solved)
        .map(|(&n, s)| {
            let exponent = s.beta.ln() / n as f64;
            ExponentPoint {
                n,
                beta: s.beta,
                beta_lower: s.lower,
                exact: s.exact,
                exponent,
                target_n: s.target_n,
                corridor_excess: (lo - exponent).max(exponent - hi).max(0.0),
            }
        })
        .collect();
    Ok(ExponentReport {
        variant,
        epsilon,
        points,
        target,
        corridor: (lo, hi),
    })
}

/// Spectral window of `−(1/n) log D` around `−S`, with `D` the density of `ψ` relative to `φ`.
#[derive(Clone, Debug, Serialize)]
pub struct AepWindow {
    pub n: usize,
    pub null_mass: f64,
    pub reference_mass: f64,
    pub rank: usize,
    /// Largest violation of `e^{n(−S−δ)}D ≤ 1 ≤ e^{n(−S+δ)}D` on the window, eigenvalue by eigenvalue.
    pub inequality_defect: f64,
}

/// The projection onto eigenvalues of `−(1/n) log(dψ/dφ)` in `(−S−δ, −S+δ)`. Requires `ψ` and `φ` to commute.
pub fn aep_projection<R: TraceReference>(
    psi: &TracedDensity<R>,
    reference: &TracedDensity<R>,
    s_mean: f64,
    delta: f64,
) -> Result<AepWindow> {
    if !(delta > 0.0) {
        return Err(Error::Domain("delta must be positive".into()));
    }
    let n = psi.volume();
    let nf = n as f64;
    let mut out = AepWindow {
        n,
        null_mass: 0.0,
        reference_mass: 0.0,
        rank: 0,
        inequality_defect: 0.0,
    };
    let inst = TestInstance::new(psi.clone(), Alternative::State(reference.clone()), 0.5)?;
    for i in 0..inst.block_count() {
        let basis = joint_basis(&psi.blocks()[i], Some(&reference.blocks()[i]))?;
        for (&p, &r) in basis.null.iter().zip(&basis.alt) {
            if r <= EIGEN_FLOOR {
                if p > 1e-12 {
                    return Err(Error::Support("null state is not dominated by the reference".into()));
                }
                continue;
            }
            if p <= EIGEN_FLOOR {
                continue;
            }
            let log_d = (p / r).ln();
            let x = -log_d / nf;
            if x > -s_mean - delta && x < -s_mean + delta {
                out.null_mass += p;
                out.reference_mass += r;
                out.rank += 1;
                let lo = (nf * (-s_mean - delta) + log_d).exp();
                let hi = (nf * (-s_mean + delta) + log_d).exp();
                out.inequality_defect = out.inequality_defect.max(lo - 1.0).max(1.0 - hi);
            }
        }
    }
    Ok(out)
}

/// Window for the buffered Gibbs proxy against the product state of `h`.
pub fn aep_projection_model(phi: &Interaction, h: &GeneratorH, n: usize, delta: f64, buffer: usize, s_mean: f64) -> Result<AepWindow> {
    let dec = phi.symmetry().decompose(n)?;
    let omega = buffered_gibbs(&phi.perturb(h)?, Interval::chain(n), buffer)?.restrict(&dec)?;
    aep_projection(&omega, &product_phi(h, &dec)?, s_mean, delta)
}

#[derive(Clone, Debug, Serialize)]
pub struct LogRatioBound {
    pub n: usize,
    pub buffer: usize,
    /// Largest eigenvalue of `log φₙ^G − log ωₙ`.
    pub max_eigenvalue: f64,
    /// `2‖Wₙ‖`.
    pub bound: f64,
}

impl LogRatioBound {
    pub fn violation(&self) -> f64 {
        (self.max_eigenvalue - self.bound).max(0.0)
    }

    pub fn slack(&self) -> f64 {
        self.bound - self.max_eigenvalue
    }
}

/// Compares the local Gibbs state with the buffered proxy `ωₙ` through the largest
/// eigenvalue of the difference of their log-densities, against `2‖Wₙ‖`.
pub fn gibbs_log_ratio_bound(phi: &Interaction, h: &GeneratorH, n: usize, buffer: usize) -> Result<LogRatioBound> {
    let dec = phi.symmetry().decompose(n)?;
    let omega = buffered_gibbs(&phi.perturb(h)?, Interval::chain(n), buffer)?.restrict(&dec)?;
    let gibbs = local_gibbs(phi, h, n)?;
    let lo = omega.log_blocks()?;
    let lg = gibbs.log_blocks()?;
    let mut top = f64::NEG_INFINITY;
    for (a, b) in lg.iter().zip(&lo) {
        if a.dim() > 0 {
            top = top.max(a.sub(b)?.spectrum().max());
        }
    }
    Ok(LogRatioBound {
        n,
        buffer,
        max_eigenvalue: top,
        bound: 2.0 * phi.boundary_energy(n)?.norm(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::{random_density, random_unitary};
    use crate::symmetry::{GaugeSymmetry, SymmetrySpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn u1() -> Arc<GaugeSymmetry> {
        Arc::new(GaugeSymmetry::new(SymmetrySpec::abelian_charges(vec![1, -1]).unwrap(), 0))
    }

    fn tilt() -> GeneratorH {
        GeneratorH::normalize(HermitianOp::diagonal(vec![1.0, -1.0]))
    }

    fn brute_force(gains: &[f64], costs: &[f64], target: f64) -> f64 {
        let k = gains.len();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << k) {
            let (mut g, mut c) = (0.0, 0.0);
            for i in 0..k {
                if mask >> i & 1 == 1 {
                    g += gains[i];
                    c += costs[i];
                }
            }
            if g >= target - COVER_TOL && c < best {
                best = c;
            }
        }
        best
    }

    fn classical(p: Vec<f64>, q: Vec<f64>, eps: f64) -> TestInstance<FullTrace> {
        let n = 1;
        let r = FullTrace::new(n, p.len());
        TestInstance::new(
            TracedDensity::new(r, vec![HermitianOp::diagonal(p)]).unwrap(),
            Alternative::State(TracedDensity::new(r, vec![HermitianOp::diagonal(q)]).unwrap()),
            eps,
        )
        .unwrap()
    }

    #[test]
    fn classical_triple() {
        let third = 1.0 / 3.0;
        let inst = classical(vec![0.5, 0.3, 0.2], vec![third; 3], 0.25);
        let s = beta_epsilon_commuting(&inst).unwrap();
        assert!((s.value - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.null_mass - 0.8).abs() < 1e-15);
        assert_eq!(s.projection_blocks()[0].diagonal_values().unwrap(), &[1.0, 1.0, 0.0]);
        assert!(s.relaxed <= s.value);
        assert!((brute_force(&[0.5, 0.3, 0.2], &[third; 3], 0.75) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn pure_null_takes_its_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = random_unitary(4, &mut rng);
        let pure = HermitianOp::diagonal(vec![1.0, 0.0, 0.0, 0.0]).conjugate(&u).unwrap();
        let r = FullTrace::new(2, 2);
        for eps in [0.01, 0.5, 0.9] {
            let inst = TestInstance::new(TracedDensity::new(r, vec![pure.clone()]).unwrap(), Alternative::Trace, eps).unwrap();
            let s = beta_epsilon_commuting(&inst).unwrap();
            assert!((s.value - 1.0).abs() < 1e-12);
            assert!(s.projection_blocks()[0].sub(&pure).unwrap().max_abs_entry() < 1e-10);
        }
        let alt = TracedDensity::random(r, &mut rng).unwrap();
        let inst = TestInstance::new(TracedDensity::new(r, vec![pure.clone()]).unwrap(), Alternative::State(alt.clone()), 0.3).unwrap();
        assert!(matches!(beta_epsilon_commuting(&inst), Err(Error::NonCommuting(_))));
        // tilting the rank-one projection away from the support can only help
        let b = beta_epsilon_search(&inst).unwrap();
        assert!(b.upper <= alt.expectation(&pure).unwrap() + 1e-12);
        assert!(b.lower <= b.upper);
    }

    #[test]
    fn small_epsilon_needs_full_support() {
        let inst = classical(vec![0.5, 0.3, 0.2, 0.0], vec![0.1, 0.2, 0.3, 0.4], 1e-9);
        let s = beta_epsilon_commuting(&inst).unwrap();
        assert!((s.value - 0.6).abs() < 1e-15);
        assert_eq!(s.ranks, vec![3]);
    }

    #[test]
    fn grouped_ties_are_exact() {
        // many equal items: greedy by ratio overshoots, the exact cover mixes groups
        let mut gains = vec![0.3; 3];
        gains.extend(vec![0.05; 4]);
        let mut costs = vec![0.3; 3];
        costs.extend(vec![0.06; 4]);
        for target in [0.2, 0.35, 0.5, 0.61, 0.9, 1.05] {
            let c = min_cost_cover(&gains, &costs, target).unwrap();
            assert!((c.cost - brute_force(&gains, &costs, target)).abs() < 1e-14, "{target}");
            assert!(c.gain >= target - COVER_TOL);
        }
        let big: Vec<f64> = vec![1.0 / 4096.0; 4096];
        let c = min_cost_cover(&big, &big, 0.9).unwrap();
        assert_eq!(c.chosen.len(), 3687);
    }

    #[test]
    fn rounding_level_ratio_ties_stay_tractable() {
        // binomial product law with gain and cost equal up to last-bit noise
        let (p, n) = (1.0 / (1.0 + (-2f64).exp()), 10);
        let mut gains = Vec::new();
        let mut costs = Vec::new();
        for s in 0..1usize << n {
            let k = s.count_ones() as i32;
            let x = p.powi(k) * (1.0 - p).powi(n as i32 - k);
            gains.push(x);
            costs.push(x * (1.0 + if k % 2 == 0 { 2e-16 } else { -2e-16 }));
        }
        let (c, exhausted) = cover_search(&gains, &costs, 0.9, KNAPSACK_REL_TOL, KNAPSACK_BUDGET).unwrap();
        assert!(!exhausted);
        assert!((c.cost - 0.9).abs() < 1e-9);
    }

    #[test]
    fn budget_error_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g: Vec<f64> = (0..60).map(|_| rng.random::<f64>()).collect();
        let c: Vec<f64> = (0..60).map(|_| rng.random::<f64>()).collect();
        let (_, exhausted) = cover_search(&g, &c, 7.3, 0.0, 3).unwrap();
        assert!(exhausted);
    }

    #[test]
    fn search_agrees_with_exact_path_on_commuting_pairs() {
        let third = 1.0 / 3.0;
        let inst = classical(vec![0.5, 0.3, 0.2], vec![third; 3], 0.25);
        let exact = beta_epsilon_commuting(&inst).unwrap();
        let b = beta_epsilon_search(&inst).unwrap();
        assert!((b.upper - exact.value).abs() < 1e-12);
        // the relaxation is the fractional knapsack
        assert!((b.lower - exact.relaxed).abs() < 1e-9);
        assert!(b.lower <= b.upper);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_unitary(6, &mut rng);
        let p = HermitianOp::diagonal(vec![0.3, 0.25, 0.2, 0.1, 0.1, 0.05]).conjugate(&u).unwrap();
        let q = HermitianOp::diagonal(vec![0.05, 0.1, 0.15, 0.2, 0.2, 0.3]).conjugate(&u).unwrap();
        let r = FullTrace::new(1, 6);
        let inst = TestInstance::new(
            TracedDensity::new(r, vec![p]).unwrap(),
            Alternative::State(TracedDensity::new(r, vec![q]).unwrap()),
            0.2,
        )
        .unwrap();
        let exact = beta_epsilon_commuting(&inst).unwrap();
        let b = beta_epsilon_search(&inst).unwrap();
        assert!((b.upper - exact.value).abs() < 1e-10);
        assert!((b.lower - exact.relaxed).abs() < 1e-8);
    }

    #[test]
    fn noncommuting_bounds_bracket_sampled_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = FullTrace::new(2, 2);
        let psi = TracedDensity::random(r, &mut rng).unwrap();
        let alt = TracedDensity::random(r, &mut rng).unwrap();
        let inst = TestInstance::new(psi.clone(), Alternative::State(alt.clone()), 0.3).unwrap();
        let b = beta_epsilon_search(&inst).unwrap();
        assert!(b.upper >= b.lower);
        assert!(b.null_mass >= 0.7 - COVER_TOL);
        let mut sampled = f64::INFINITY;
        for _ in 0..4000 {
            let u = random_unitary(4, &mut rng);
            let k = rng.random_range(1..=4);
            let mut d = vec![0.0; 4];
            d[..k].fill(1.0);
            let q = HermitianOp::diagonal(d).conjugate(&u).unwrap();
            if psi.expectation(&q).unwrap() >= 0.7 {
                sampled = sampled.min(alt.expectation(&q).unwrap());
            }
        }
        assert!(sampled >= b.lower - 1e-12);
        assert!(b.upper <= sampled + 1e-9);
    }

    #[test]
    fn beta_is_monotone_in_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = FullTrace::new(2, 2);
        let psi = TracedDensity::random(r, &mut rng).unwrap();
        let alt = TracedDensity::random(r, &mut rng).unwrap();
        let at = |e: f64| beta_epsilon_search(&TestInstance::new(psi.clone(), Alternative::State(alt.clone()), e).unwrap()).unwrap();
        assert!(at(0.99).upper <= at(0.01).upper);
        let p: Vec<f64> = random_density(8, &mut rng).diag_real();
        let mut prev = f64::INFINITY;
        for eps in [0.01, 0.1, 0.3, 0.6, 0.9] {
            let v = beta_epsilon_commuting(&classical(p.clone(), vec![0.125; 8], eps)).unwrap().value;
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn fixed_algebra_tests_are_no_stronger_than_field_tests() {
        let sym = u1();
        let phi = Interaction::gauge_ising(sym.clone(), 0.3, -1.0).unwrap();
        let h = tilt();
        for n in 2..=4 {
            let dec = sym.decompose(n).unwrap();
            let field = local_gibbs_field(&phi, &h, n).unwrap();
            let alg = field.restrict(&dec).unwrap();
            let f = beta_epsilon_commuting(
                &TestInstance::new(field, Alternative::State(product_phi_hat(&h, n).unwrap()), 0.2).unwrap(),
            )
            .unwrap();
            let a = beta_epsilon_commuting(
                &TestInstance::new(alg, Alternative::State(product_phi(&h, &dec).unwrap()), 0.2).unwrap(),
            )
            .unwrap();
            assert!(a.value >= f.value - 1e-12);
        }
    }

    #[test]
    fn exponents_for_zero_interaction() {
        let zero = Interaction::zero(u1());
        let ns = [2, 4, 6, 8];
        let r = exponent_series(&zero, &GeneratorH::zero(2), 0.1, &ns, ExponentVariant::FieldStateTrace, 1).unwrap();
        for p in &r.points {
            assert!(p.exact);
            // uniform distribution: β = ⌈(1−ε)2ⁿ⌉
            let want = ((0.9 * 2f64.powi(p.n as i32)) - COVER_TOL).ceil();
            assert!((p.beta - want).abs() < 1e-9);
        }
        assert!((r.target - 2f64.ln()).abs() < 1e-12);

        // null equals alternative: a subset-sum problem just above 1 − ε
        let r = exponent_series(&zero, &tilt(), 0.1, &ns, ExponentVariant::StateVsProduct, 1).unwrap();
        for p in &r.points {
            assert!(p.beta >= 0.9 - COVER_TOL && p.beta < 0.9 + 0.2);
            assert!(p.beta_lower <= p.beta && p.beta_lower >= 0.9 - 1e-12);
        }
        assert!(r.target.abs() < 1e-12);
    }

    #[test]
    fn ising_exponents_sit_near_the_corridor() {
        let phi = Interaction::gauge_ising(u1(), 0.0, 1.0).unwrap();
        let h = tilt();
        let ns = [2, 4, 6, 8];
        for v in ExponentVariant::ALL {
            let r = exponent_series(&phi, &h, 0.1, &ns, v, 1).unwrap();
            assert!(r.points.iter().all(|p| p.exact && p.exponent.is_finite()), "{v:?}");
            assert!(r.points.iter().all(|p| p.beta_lower <= p.beta + 1e-15));
        }
        let r = exponent_series(&phi, &h, 0.1, &ns, ExponentVariant::GibbsVsProduct, 1).unwrap();
        let last = r.points.last().unwrap();
        assert!(last.exponent <= 0.0);
    }

    #[test]
    fn trace_variants_need_a_central_generator() {
        let sym = Arc::new(GaugeSymmetry::new(SymmetrySpec::su2_fundamental(), 0));
        let phi = Interaction::xxz_charge(sym, 1.0, 1.0, 0.0).unwrap();
        let h = GeneratorH::normalize(HermitianOp::pauli_z());
        let err = exponent_series(&phi, &h, 0.1, &[2], ExponentVariant::StateTrace, 1);
        assert!(matches!(err, Err(Error::Hypothesis(_))));
    }

    #[test]
    fn aep_examples() {
        let zero = Interaction::zero(u1());
        let w = aep_projection_model(&zero, &GeneratorH::zero(2), 4, 0.1, 1, 0.0).unwrap();
        assert!((w.null_mass - 1.0).abs() < 1e-12 && (w.reference_mass - 1.0).abs() < 1e-12);
        assert_eq!(w.rank, 16);

        // product of p = (p₀, p₁) against the uniform reference: classical window sum
        let h = tilt();
        let sym = u1();
        let site = h.site_density().diag_real();
        let s1 = site.iter().map(|p| p * (2.0 * p).ln()).sum::<f64>();
        for n in [4, 6, 8] {
            let dec = sym.decompose(n).unwrap();
            let psi = product_phi(&h, &dec).unwrap();
            let nu = crate::states::nu_density(&dec);
            let delta = 0.3;
            let w = aep_projection(&psi, &nu, s1, delta).unwrap();
            let mut mass = 0.0;
            let mut rmass = 0.0;
            for k in 0..=n {
                let logp = k as f64 * site[0].ln() + (n - k) as f64 * site[1].ln();
                let x = -(logp + n as f64 * 2f64.ln()) / n as f64;
                if x > -s1 - delta && x < -s1 + delta {
                    let c = (1..=k).fold(1.0, |a, i| a * (n - k + i) as f64 / i as f64);
                    mass += c * logp.exp();
                    rmass += c * 0.5f64.powi(n as i32);
                }
            }
            assert!((w.null_mass - mass).abs() < 1e-12);
            assert!((w.reference_mass - rmass).abs() < 1e-12);
            assert!(w.inequality_defect <= 1e-10);
        }
    }

    #[test]
    fn log_ratio_bound_examples() {
        let sym = u1();
        let single = Interaction::single_site(sym.clone(), HermitianOp::diagonal(vec![0.4, -0.4])).unwrap();
        let b = gibbs_log_ratio_bound(&single, &tilt(), 3, 1).unwrap();
        assert!(b.max_eigenvalue.abs() < 1e-12 && b.bound == 0.0);

        let j = -1.3;
        let phi = Interaction::gauge_ising(sym, 0.0, j).unwrap();
        let b = gibbs_log_ratio_bound(&phi, &tilt(), 4, 1).unwrap();
        assert!((b.bound - 4.0 * j.abs()).abs() < 1e-12);
        assert!(b.max_eigenvalue <= b.bound);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn knapsack_matches_brute_force(seed in any::<u64>(), k in 1usize..=16, target in 0.05f64..0.99, ties in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut gains: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
            let mut costs: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
            for i in 0..ties.min(k - 1) {
                gains[i + 1] = gains[0];
                costs[i + 1] = costs[0];
            }
            let s: f64 = gains.iter().sum();
            gains.iter_mut().for_each(|g| *g /= s);
            let t: f64 = costs.iter().sum();
            costs.iter_mut().for_each(|c| *c /= t);
            let c = min_cost_cover(&gains, &costs, target).unwrap();
            let bf = brute_force(&gains, &costs, target);
            prop_assert!((c.cost - bf).abs() <= 1e-12, "{} vs {}", c.cost, bf);
            prop_assert!(c.gain >= target - COVER_TOL);
            prop_assert!(fractional_cover(&gains, &costs, target) <= c.cost + 1e-12);
        }
    }
}
