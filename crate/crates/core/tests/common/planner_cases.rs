//! Random planner instances and glue between the library planner and the
//! naive reference.

#![allow(dead_code)]

use hetsplit::importance::ImportanceTable;
use hetsplit::model::{SplitPoint, WeightId};
use hetsplit::planner::{self, Assignment, CostModel, PlanContext, RankSet, RoundBudgets, RoundPlan};
use hetsplit::tensor::GaussianStream;

use super::naive_planner::{naive_greedy, naive_order, naive_select, NaiveAssignment, NaiveInstance, NaivePlan};

const RANK_POOL: [usize; 10] = [1, 2, 3, 4, 6, 8, 12, 16, 24, 32];

fn pick(stream: &mut GaussianStream, n: usize) -> usize {
    ((stream.next_uniform() * n as f64) as usize).min(n - 1)
}

/// Up to 4 blocks, up to 3 clients, 6 ranks. Numerators mix exact ties,
/// zeros and continuous values; budgets straddle the base costs.
pub fn random_instance(seed: u64) -> NaiveInstance {
    let mut s = GaussianStream::new(seed);
    let n_blocks = 2 + pick(&mut s, 3);
    let n_clients = 1 + pick(&mut s, 3);
    let d_model = [2, 4, 8][pick(&mut s, 3)];
    let batch = 1 + pick(&mut s, 2);
    let seq_len = 1 + pick(&mut s, 4);
    let mut ranks: Vec<usize> = if pick(&mut s, 2) == 0 {
        RankSet::DEFAULT.to_vec()
    } else {
        let mut pool = RANK_POOL.to_vec();
        while pool.len() > 6 {
            let i = pick(&mut s, pool.len());
            pool.remove(i);
        }
        pool
    };
    ranks.sort();
    let numerators = (0..n_blocks)
        .map(|_| {
            let mut row = [0.0; 4];
            for v in &mut row {
                *v = match pick(&mut s, 4) {
                    0 => 0.0,
                    1 => pick(&mut s, 3) as f64,
                    _ => s.next_uniform() * 10.0,
                };
            }
            row
        })
        .collect();
    let kappa = 3.0;
    let beta = 1.0;
    let block_cost = beta * (batch * seq_len * d_model) as f64;
    let unit = kappa * 2.0 * d_model as f64;
    let budget = |s: &mut GaussianStream| block_cost * (n_blocks as f64) * s.next_uniform() + unit * 40.0 * s.next_uniform();
    let client_budgets = (0..n_clients).map(|_| budget(&mut s)).collect();
    let server_budget = budget(&mut s);
    NaiveInstance {
        n_blocks,
        d_model,
        batch,
        seq_len,
        kappa,
        beta,
        ranks,
        numerators,
        client_budgets,
        server_budget,
    }
}

pub fn kind_index(id: WeightId) -> usize {
    id.kind.code() as usize
}

pub fn table_of(inst: &NaiveInstance) -> ImportanceTable {
    ImportanceTable::from_numerators(
        WeightId::all(inst.n_blocks).map(|id| (id, inst.numerators[id.block][kind_index(id)])),
        10,
    )
}

pub fn cost_model_of(inst: &NaiveInstance) -> CostModel {
    CostModel {
        kappa_opt: inst.kappa,
        beta_act: inst.beta,
        batch: inst.batch,
        seq_len: inst.seq_len,
        d_model: inst.d_model,
    }
}

pub fn budgets_of(inst: &NaiveInstance) -> RoundBudgets {
    RoundBudgets {
        clients: inst.client_budgets.clone(),
        server: inst.server_budget,
    }
}

pub fn to_naive(a: &Assignment) -> NaiveAssignment {
    a.iter().map(|(id, &r)| (id.block, kind_index(*id), r)).collect()
}

pub fn plan_to_naive(p: &RoundPlan) -> NaivePlan {
    NaivePlan {
        j: p.split.j(),
        clients: p.client_assignments.iter().map(to_naive).collect(),
        server: to_naive(&p.server_assignment),
        global_importance: p.global_importance,
    }
}

/// Canonical byte string of a plan; `I_g` is encoded by its bit pattern.
pub fn plan_bytes(p: &NaivePlan) -> Vec<u8> {
    format!("{}|{:?}|{:?}|{:016x}", p.j, p.clients, p.server, p.global_importance.to_bits()).into_bytes()
}

pub struct CaseOutcome {
    /// Some split's base cost fits every budget.
    pub base_feasible: bool,
    pub greedy_matches: bool,
    pub select_matches: bool,
    pub plan_within_budget: bool,
}

/// Runs the library and the reference on one instance.
pub fn check_case(inst: &NaiveInstance) -> CaseOutcome {
    let table = table_of(inst);
    let cm = cost_model_of(inst);
    let q = RankSet::new(inst.ranks.clone()).expect("valid ranks");
    let budgets = budgets_of(inst);
    let ctx = PlanContext {
        n_blocks: inst.n_blocks,
        budgets: &budgets,
        table: &table,
        ranks: &q,
        cost_model: &cm,
    };

    let all: Vec<WeightId> = WeightId::all(inst.n_blocks).collect();
    let lib_order = planner::sort_candidates(all.iter().copied(), &table, &q, &cm);
    let naive_ord = naive_order(inst, 0..inst.n_blocks);
    let mut greedy_matches = lib_order.iter().map(|id| (id.block, kind_index(*id))).eq(naive_ord.iter().copied());
    for &budget in inst.client_budgets.iter().chain([inst.server_budget].iter()) {
        let lib = planner::greedy_assign(budget, &lib_order, &q, &cm);
        greedy_matches &= to_naive(&lib) == naive_greedy(inst, budget, &naive_ord);
    }

    let splits = SplitPoint::all(inst.n_blocks);
    let plan = planner::select_split(&splits, &ctx).expect("nonempty splits");
    let js: Vec<usize> = splits.iter().map(|s| s.j()).collect();
    let naive = naive_select(inst, &js);
    let select_matches = plan_bytes(&plan_to_naive(&plan)) == plan_bytes(&naive);

    let base_feasible = splits.iter().any(|&s| ctx.base_fits(s));
    let plan_within_budget = plan.violations(inst.n_blocks, &budgets, &cm).expect("sides consistent").is_empty();
    CaseOutcome {
        base_feasible,
        greedy_matches,
        select_matches,
        plan_within_budget,
    }
}
