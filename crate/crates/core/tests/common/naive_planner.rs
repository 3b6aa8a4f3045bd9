//! Straight-line reference for the budgeted planner, written against plain
//! data only. Weights are `(block, kind)` with kinds 0..4 standing for
//! Q, K, V, O. Nothing from the library is used here.

#![allow(dead_code)]

#[derive(Debug, Clone)]
pub struct NaiveInstance {
    pub n_blocks: usize,
    pub d_model: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub kappa: f64,
    pub beta: f64,
    /// Strictly increasing.
    pub ranks: Vec<usize>,
    /// `numerators[block][kind]`.
    pub numerators: Vec<[f64; 4]>,
    pub client_budgets: Vec<f64>,
    pub server_budget: f64,
}

/// `(block, kind, rank)` triples in ascending `(block, kind)` order.
pub type NaiveAssignment = Vec<(usize, usize, usize)>;

#[derive(Debug, Clone, PartialEq)]
pub struct NaivePlan {
    pub j: usize,
    pub clients: Vec<NaiveAssignment>,
    pub server: NaiveAssignment,
    pub global_importance: f64,
}

pub fn naive_adapter_cost(inst: &NaiveInstance, r: usize) -> f64 {
    inst.kappa * r as f64 * (inst.d_model + inst.d_model) as f64
}

pub fn naive_base_cost(inst: &NaiveInstance, blocks: usize) -> f64 {
    inst.beta * inst.batch as f64 * inst.seq_len as f64 * inst.d_model as f64 * blocks as f64
}

/// Candidate order: score at the smallest rank, highest first; equal scores
/// keep ascending `(block, kind)`.
pub fn naive_order(inst: &NaiveInstance, blocks: std::ops::Range<usize>) -> Vec<(usize, usize)> {
    let c_min = naive_adapter_cost(inst, inst.ranks[0]);
    let mut list: Vec<(usize, usize)> = Vec::new();
    for b in blocks {
        for k in 0..4 {
            list.push((b, k));
        }
    }
    // insertion sort, stable by construction
    for i in 1..list.len() {
        let mut p = i;
        while p > 0 {
            let (b0, k0) = list[p - 1];
            let (b1, k1) = list[p];
            let s0 = inst.numerators[b0][k0] / c_min;
            let s1 = inst.numerators[b1][k1] / c_min;
            if s1 > s0 {
                list.swap(p - 1, p);
                p -= 1;
            } else {
                break;
            }
        }
    }
    list
}

/// For each weight in order try ranks from largest to smallest; take the
/// first that fits and move on to the next weight.
pub fn naive_greedy(inst: &NaiveInstance, budget: f64, order: &[(usize, usize)]) -> NaiveAssignment {
    let mut left = budget;
    let mut out: NaiveAssignment = Vec::new();
    for &(b, k) in order {
        let mut idx = inst.ranks.len();
        while idx > 0 {
            idx -= 1;
            let r = inst.ranks[idx];
            let c = naive_adapter_cost(inst, r);
            if c <= left {
                out.push((b, k, r));
                left -= c;
                break;
            }
        }
    }
    out.sort();
    out
}

pub fn naive_global_importance(inst: &NaiveInstance, clients: &[NaiveAssignment], server: &NaiveAssignment) -> f64 {
    let mut client_sum = 0.0;
    let mut client_count = 0usize;
    for a in clients {
        for &(b, k, r) in a {
            client_sum += inst.numerators[b][k] / naive_adapter_cost(inst, r);
            client_count += 1;
        }
    }
    let mut server_sum = 0.0;
    for &(b, k, r) in server {
        server_sum += inst.numerators[b][k] / naive_adapter_cost(inst, r);
    }
    let client_part = if client_count == 0 { 0.0 } else { client_sum / client_count as f64 };
    let server_part = if server.is_empty() { 0.0 } else { server_sum / server.len() as f64 };
    client_part + server_part
}

pub fn naive_plan_at(inst: &NaiveInstance, j: usize) -> (NaivePlan, bool) {
    let client_base = naive_base_cost(inst, j);
    let server_base = naive_base_cost(inst, inst.n_blocks - j);
    let mut feasible = server_base <= inst.server_budget;
    let client_order = naive_order(inst, 0..j);
    let server_order = naive_order(inst, j..inst.n_blocks);
    let mut clients = Vec::new();
    for &c in &inst.client_budgets {
        if client_base > c {
            feasible = false;
        }
        clients.push(naive_greedy(inst, c - client_base, &client_order));
    }
    let server = naive_greedy(inst, inst.server_budget - server_base, &server_order);
    let gi = naive_global_importance(inst, &clients, &server);
    (
        NaivePlan {
            j,
            clients,
            server,
            global_importance: gi,
        },
        feasible,
    )
}

/// Exhaustive evaluation of every split. Splits whose base cost already
/// overflows some budget are only considered when no split fits.
pub fn naive_select(inst: &NaiveInstance, splits: &[usize]) -> NaivePlan {
    let mut best_feasible: Option<NaivePlan> = None;
    let mut best_any: Option<NaivePlan> = None;
    for &j in splits {
        let (plan, feasible) = naive_plan_at(inst, j);
        if feasible {
            let better = match &best_feasible {
                None => true,
                Some(b) => plan.global_importance > b.global_importance || (plan.global_importance == b.global_importance && plan.j < b.j),
            };
            if better {
                best_feasible = Some(plan.clone());
            }
        }
        let better = match &best_any {
            None => true,
            Some(b) => plan.global_importance > b.global_importance || (plan.global_importance == b.global_importance && plan.j < b.j),
        };
        if better {
            best_any = Some(plan);
        }
    }
    best_feasible.or(best_any).expect("at least one split")
}
