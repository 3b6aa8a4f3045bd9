//! Budget-aware configuration: cost model, greedy rank assignment, split
//! selection by global importance, and the adjustment trigger.
//!
//! Costs are abstract units. An adapter of rank `r` on a `d_i × d_o` weight
//! costs `kappa_opt · r · (d_i + d_o)`; each block a side executes costs
//! `beta_act · batch · seq_len · d_model` in activations. A side's budget
//! must cover its base activation cost before any adapter is configured.
//!
//! Ordering conventions (all deterministic):
//! - candidates: score at the smallest rank, descending; ties by block
//!   ascending then Q < K < V < O;
//! - splits: highest global importance; ties toward the smallest `j`;
//! - sums over assignments run clients in order, weights ascending.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::importance::ImportanceTable;
use crate::model::{Side, SplitPoint, WeightId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlannerError {
    #[error("invalid cost model: {0}")]
    CostModel(String),
    #[error("invalid rank set: {0}")]
    RankSet(String),
    #[error("weight {weight} is not on the {side:?} side of split {split}")]
    SideMismatch { weight: WeightId, side: Side, split: SplitPoint },
    #[error("no candidate split points")]
    NoSplits,
    #[error("importance difference needs at least two candidate splits, got {0}")]
    TooFewSplits(usize),
    #[error("current split {0} is not among the candidates")]
    UnknownSplit(SplitPoint),
    #[error("threshold parameters must be positive (tau {tau}, epsilon {epsilon})")]
    Threshold { tau: f64, epsilon: f64 },
}

pub type Result<T> = std::result::Result<T, PlannerError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub kappa_opt: f64,
    pub beta_act: f64,
    pub batch: usize,
    pub seq_len: usize,
    pub d_model: usize,
}

impl CostModel {
    pub const DEFAULT_KAPPA_OPT: f64 = 3.0;
    pub const DEFAULT_BETA_ACT: f64 = 1.0;

    pub fn new(batch: usize, seq_len: usize, d_model: usize) -> Self {
        Self {
            kappa_opt: Self::DEFAULT_KAPPA_OPT,
            beta_act: Self::DEFAULT_BETA_ACT,
            batch,
            seq_len,
            d_model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa_opt > 0.0 && self.kappa_opt.is_finite()) {
            return Err(PlannerError::CostModel(format!("kappa_opt must be positive, got {}", self.kappa_opt)));
        }
        if !(self.beta_act > 0.0 && self.beta_act.is_finite()) {
            return Err(PlannerError::CostModel(format!("beta_act must be positive, got {}", self.beta_act)));
        }
        if self.batch == 0 || self.seq_len == 0 || self.d_model == 0 {
            return Err(PlannerError::CostModel("batch, seq_len and d_model must be positive".into()));
        }
        Ok(())
    }

    /// Activation cost of executing `blocks` blocks.
    pub fn base_cost(&self, blocks: usize) -> f64 {
        self.beta_act * self.batch as f64 * self.seq_len as f64 * self.d_model as f64 * blocks as f64
    }
}

/// `kappa_opt · r · (d_i + d_o)`. Every adaptable weight is `d_model × d_model`.
pub fn adapter_cost(_weight_id: WeightId, r: usize, cost_model: &CostModel) -> f64 {
    let (d_i, d_o) = (cost_model.d_model, cost_model.d_model);
    cost_model.kappa_opt * r as f64 * (d_i + d_o) as f64
}

/// Base activation cost of `side` plus the cost of every adapter in
/// `assignment`.
pub fn side_cost(split: SplitPoint, n_blocks: usize, side: Side, assignment: &Assignment, cost_model: &CostModel) -> Result<f64> {
    let blocks = match side {
        Side::Client => split.j(),
        Side::Server => n_blocks - split.j(),
    };
    let mut cost = cost_model.base_cost(blocks);
    for (&id, &r) in assignment {
        if id.side(split) != side || id.block >= n_blocks {
            return Err(PlannerError::SideMismatch { weight: id, side, split });
        }
        cost += adapter_cost(id, r, cost_model);
    }
    Ok(cost)
}

/// Ordered set of admissible ranks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankSet(Vec<usize>);

impl RankSet {
    pub const DEFAULT: [usize; 6] = [1, 2, 4, 8, 16, 32];

    pub fn new(ranks: Vec<usize>) -> Result<Self> {
        if ranks.is_empty() {
            return Err(PlannerError::RankSet("empty".into()));
        }
        if ranks[0] == 0 {
            return Err(PlannerError::RankSet("ranks must be positive".into()));
        }
        if ranks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PlannerError::RankSet(format!("not strictly increasing: {ranks:?}")));
        }
        Ok(Self(ranks))
    }

    pub fn min(&self) -> usize {
        self.0[0]
    }

    pub fn max(&self) -> usize {
        self.0[self.0.len() - 1]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Copy keeping only ranks `≤ limit`.
    pub fn capped(&self, limit: usize) -> Result<Self> {
        Self::new(self.0.iter().copied().filter(|&r| r <= limit).collect())
    }
}

impl Default for RankSet {
    fn default() -> Self {
        Self(Self::DEFAULT.to_vec())
    }
}

impl fmt::Display for RankSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|r| r.to_string()).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

/// Rank per configured weight.
pub type Assignment = BTreeMap<WeightId, usize>;

/// Canonical text form, e.g. `0Q:4 1V:2`; empty assignment is `-`.
pub fn format_assignment(a: &Assignment) -> String {
    if a.is_empty() {
        return "-".into();
    }
    a.iter().map(|(id, r)| format!("{id}:{r}")).collect::<Vec<_>>().join(" ")
}

/// Budgets of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundBudgets {
    pub clients: Vec<f64>,
    pub server: f64,
}

/// `Θ(W, r) = blended_numerator(W) / adapter_cost(W, r)`.
pub fn theta(table: &ImportanceTable, id: WeightId, r: usize, cost_model: &CostModel) -> f64 {
    table.blended(id) / adapter_cost(id, r, cost_model)
}

/// Candidate order for one side.
pub fn sort_candidates(
    weights: impl IntoIterator<Item = WeightId>,
    table: &ImportanceTable,
    ranks: &RankSet,
    cost_model: &CostModel,
) -> Vec<WeightId> {
    let mut list: Vec<WeightId> = weights.into_iter().collect();
    list.sort();
    // stable sort keeps the (block, kind) order among equal scores
    list.sort_by(|&u, &v| {
        let su = theta(table, u, ranks.min(), cost_model);
        let sv = theta(table, v, ranks.min(), cost_model);
        sv.total_cmp(&su)
    });
    list
}

/// In candidate order, give each weight the largest rank whose cost fits the
/// remaining budget and deduct it; weights where nothing fits are skipped.
pub fn greedy_assign(budget_remaining: f64, candidates: &[WeightId], ranks: &RankSet, cost_model: &CostModel) -> Assignment {
    let mut left = budget_remaining;
    let mut out = Assignment::new();
    for &id in candidates {
        if let Some(&r) = ranks.as_slice().iter().rev().find(|&&r| adapter_cost(id, r, cost_model) <= left) {
            left -= adapter_cost(id, r, cost_model);
            out.insert(id, r);
        }
    }
    out
}

/// Client part averages `Θ` over every client's assigned weights, server part
/// over the server's; an empty part contributes 0.
pub fn global_importance(
    client_assignments: &[Assignment],
    server_assignment: &Assignment,
    table: &ImportanceTable,
    cost_model: &CostModel,
) -> f64 {
    let mut client_sum = 0.0;
    let mut client_count = 0usize;
    for a in client_assignments {
        for (&id, &r) in a {
            client_sum += theta(table, id, r, cost_model);
            client_count += 1;
        }
    }
    let mut server_sum = 0.0;
    for (&id, &r) in server_assignment {
        server_sum += theta(table, id, r, cost_model);
    }
    let client_part = if client_count == 0 { 0.0 } else { client_sum / client_count as f64 };
    let server_part = if server_assignment.is_empty() {
        0.0
    } else {
        server_sum / server_assignment.len() as f64
    };
    client_part + server_part
}

/// Split decision and rank assignments for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    pub split: SplitPoint,
    pub client_assignments: Vec<Assignment>,
    pub server_assignment: Assignment,
    pub global_importance: f64,
}

/// A side whose planned cost exceeds its budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetViolation {
    /// `None` for the server.
    pub client: Option<usize>,
    pub cost: f64,
    pub budget: f64,
}

impl RoundPlan {
    pub fn client_cost(&self, client: usize, n_blocks: usize, cost_model: &CostModel) -> Result<f64> {
        side_cost(self.split, n_blocks, Side::Client, &self.client_assignments[client], cost_model)
    }

    pub fn server_cost(&self, n_blocks: usize, cost_model: &CostModel) -> Result<f64> {
        side_cost(self.split, n_blocks, Side::Server, &self.server_assignment, cost_model)
    }

    /// Every side whose cost exceeds its budget. Also rejects weights on the
    /// wrong side.
    pub fn violations(&self, n_blocks: usize, budgets: &RoundBudgets, cost_model: &CostModel) -> Result<Vec<BudgetViolation>> {
        let mut out = Vec::new();
        for (n, &budget) in budgets.clients.iter().enumerate() {
            let cost = self.client_cost(n, n_blocks, cost_model)?;
            if cost > budget {
                out.push(BudgetViolation {
                    client: Some(n),
                    cost,
                    budget,
                });
            }
        }
        let cost = self.server_cost(n_blocks, cost_model)?;
        if cost > budgets.server {
            out.push(BudgetViolation {
                client: None,
                cost,
                budget: budgets.server,
            });
        }
        Ok(out)
    }
}

/// Inputs shared by every planning call of a round.
#[derive(Debug, Clone, Copy)]
pub struct PlanContext<'a> {
    pub n_blocks: usize,
    pub budgets: &'a RoundBudgets,
    pub table: &'a ImportanceTable,
    pub ranks: &'a RankSet,
    pub cost_model: &'a CostModel,
}

impl PlanContext<'_> {
    /// Whether every side's base activation cost fits its budget at `split`.
    pub fn base_fits(&self, split: SplitPoint) -> bool {
        let client_base = self.cost_model.base_cost(split.j());
        let server_base = self.cost_model.base_cost(self.n_blocks - split.j());
        server_base <= self.budgets.server && self.budgets.clients.iter().all(|&c| client_base <= c)
    }

    fn side_weights(&self, split: SplitPoint, side: Side) -> impl Iterator<Item = WeightId> {
        let blocks = match side {
            Side::Client => split.client_blocks(),
            Side::Server => split.server_blocks(self.n_blocks),
        };
        WeightId::all(self.n_blocks).filter(move |id| blocks.contains(&id.block))
    }

    /// Greedy assignment for every client and the server at a fixed split.
    pub fn plan_at(&self, split: SplitPoint) -> RoundPlan {
        let cm = self.cost_model;
        let client_order = sort_candidates(self.side_weights(split, Side::Client), self.table, self.ranks, cm);
        let server_order = sort_candidates(self.side_weights(split, Side::Server), self.table, self.ranks, cm);
        let client_base = cm.base_cost(split.j());
        let server_base = cm.base_cost(self.n_blocks - split.j());
        let client_assignments: Vec<Assignment> = self
            .budgets
            .clients
            .iter()
            .map(|&c| greedy_assign(c - client_base, &client_order, self.ranks, cm))
            .collect();
        let server_assignment = greedy_assign(self.budgets.server - server_base, &server_order, self.ranks, cm);
        let global_importance = global_importance(&client_assignments, &server_assignment, self.table, cm);
        RoundPlan {
            split,
            client_assignments,
            server_assignment,
            global_importance,
        }
    }

    /// `I_g` of a fresh greedy plan at `split`.
    pub fn importance_at(&self, split: SplitPoint) -> f64 {
        self.plan_at(split).global_importance
    }
}

fn better(candidate: &RoundPlan, incumbent: &Option<RoundPlan>) -> bool {
    match incumbent {
        None => true,
        Some(b) => {
            candidate.global_importance > b.global_importance
                || (candidate.global_importance == b.global_importance && candidate.split.j() < b.split.j())
        }
    }
}

/// Best plan over `splits`. Splits whose base activation cost overflows a
/// budget are considered only when no split fits.
pub fn select_split(splits: &[SplitPoint], ctx: &PlanContext<'_>) -> Result<RoundPlan> {
    if splits.is_empty() {
        return Err(PlannerError::NoSplits);
    }
    let mut best_fit: Option<RoundPlan> = None;
    let mut best_any: Option<RoundPlan> = None;
    for &s in splits {
        let plan = ctx.plan_at(s);
        if ctx.base_fits(s) && better(&plan, &best_fit) {
            best_fit = Some(plan.clone());
        }
        if better(&plan, &best_any) {
            best_any = Some(plan);
        }
    }
    Ok(best_fit.or(best_any).expect("nonempty splits"))
}

/// `max_{S' ≠ S} I_g(S') − I_g(S)`, each `I_g` from a fresh greedy plan.
pub fn delta_importance(current: SplitPoint, splits: &[SplitPoint], ctx: &PlanContext<'_>) -> Result<f64> {
    if splits.len() < 2 {
        return Err(PlannerError::TooFewSplits(splits.len()));
    }
    if !splits.contains(&current) {
        return Err(PlannerError::UnknownSplit(current));
    }
    let here = ctx.importance_at(current);
    let best_other = splits
        .iter()
        .filter(|&&s| s != current)
        .map(|&s| ctx.importance_at(s))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(best_other - here)
}

/// `τ_t = τ_{t-1} · max(1 − ΔI, ε)`.
pub fn threshold_update(tau_prev: f64, delta_i: f64, epsilon: f64) -> f64 {
    tau_prev * (1.0 - delta_i).max(epsilon)
}

/// Re-plan when the importance gap exceeds the threshold or ranks alone
/// cannot absorb the budgets.
pub fn decide_adjustment(delta_i: f64, tau: f64, rank_only_feasible: bool) -> bool {
    delta_i > tau || !rank_only_feasible
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub tau: f64,
    pub epsilon: f64,
    pub tau_0: f64,
}

impl Threshold {
    pub const DEFAULT_TAU_0: f64 = 0.05;
    pub const DEFAULT_EPSILON: f64 = 0.01;

    pub fn new(tau_0: f64, epsilon: f64) -> Result<Self> {
        if !(tau_0 > 0.0 && epsilon > 0.0 && tau_0.is_finite() && epsilon.is_finite()) {
            return Err(PlannerError::Threshold { tau: tau_0, epsilon });
        }
        Ok(Self { tau: tau_0, epsilon, tau_0 })
    }

    /// Applies one update and returns the new `τ`. The value is kept inside
    /// the positive normal range so it never collapses to 0 or overflows.
    pub fn update(&mut self, delta_i: f64) -> f64 {
        self.tau = threshold_update(self.tau, delta_i, self.epsilon).clamp(f64::MIN_POSITIVE, f64::MAX);
        self.tau
    }
}

impl Default for Threshold {
    fn default() -> Self {
        Self {
            tau: Self::DEFAULT_TAU_0,
            epsilon: Self::DEFAULT_EPSILON,
            tau_0: Self::DEFAULT_TAU_0,
        }
    }
}

/// Outcome of fitting ranks without touching the split or the weight sets.
#[derive(Debug, Clone, PartialEq)]
pub struct RankRefit {
    pub plan: RoundPlan,
    /// False when some side cannot keep all of its configured weights at
    /// the smallest rank within its budget.
    pub feasible: bool,
}

/// Keeps the split and each side's configured weights. A side whose
/// current assignment still fits its budget keeps it verbatim; otherwise
/// the greedy rank choice is re-run over just those weights. Ranks thus
/// move only with budgets, never with importance noise.
pub fn refit_ranks(previous: &RoundPlan, ctx: &PlanContext<'_>) -> RankRefit {
    let cm = ctx.cost_model;
    let split = previous.split;
    let mut feasible = true;
    let mut fit = |assigned: &Assignment, budget: f64, base: f64| -> Assignment {
        let min_total: f64 = assigned.keys().map(|&id| adapter_cost(id, ctx.ranks.min(), cm)).sum();
        if base + min_total > budget {
            feasible = false;
        }
        let current: f64 = assigned.iter().map(|(&id, &r)| adapter_cost(id, r, cm)).sum();
        let ranks_admissible = assigned.values().all(|r| ctx.ranks.as_slice().contains(r));
        if base + current <= budget && ranks_admissible {
            return assigned.clone();
        }
        let order = sort_candidates(assigned.keys().copied(), ctx.table, ctx.ranks, cm);
        greedy_assign(budget - base, &order, ctx.ranks, cm)
    };
    let client_base = cm.base_cost(split.j());
    let server_base = cm.base_cost(ctx.n_blocks - split.j());
    let client_assignments: Vec<Assignment> = ctx
        .budgets
        .clients
        .iter()
        .enumerate()
        .map(|(n, &c)| {
            let prev = previous.client_assignments.get(n).cloned().unwrap_or_default();
            fit(&prev, c, client_base)
        })
        .collect();
    let server_assignment = fit(&previous.server_assignment, ctx.budgets.server, server_base);
    let global_importance = global_importance(&client_assignments, &server_assignment, ctx.table, cm);
    RankRefit {
        plan: RoundPlan {
            split,
            client_assignments,
            server_assignment,
            global_importance,
        },
        feasible,
    }
}
