//! Set-level training loss: pairwise event distances, the average Hausdorff
//! diagnostic, exact minimum-cost assignment, and the matched-sum loss.
//!
//! Each proxy prediction and each (padded) gold event form one side of a
//! bipartite graph whose edge weights are cross-entropy distances. The
//! training loss is the cost of the optimal one-to-one assignment; gradients
//! flow through the matched cross-entropy terms only, with the assignment
//! itself recomputed every forward pass and treated as a constant selection.

use crate::decoder::{EventRecord, ProxyBatch, Schema};
use crate::diffcore::{Tape, Var, PROB_FLOOR};
use crate::{Error, Result};

/// Pairwise proxy-to-gold distances. Rows are proxy predictions, columns are
/// (padded) gold events.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape(
                "cost_matrix",
                format!("{}x{} vs {} values", rows, cols, values.len()),
            ));
        }
        Ok(CostMatrix { rows, cols, values })
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }
}

/// One-to-one row-to-column matching with its total cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub row_to_col: Vec<usize>,
    pub cost: f64,
}

/// Gold events in class-index form, padded with null events to the proxy
/// count. `role_classes[k]` is the argument class of the k-th unique entity
/// (0 = null role).
#[derive(Debug, Clone)]
pub struct GoldEventLabels {
    pub type_class: usize,
    pub role_classes: Vec<usize>,
    pub padded: bool,
}

#[derive(Debug, Clone)]
pub struct GoldEventSet {
    pub events: Vec<GoldEventLabels>,
    pub n_real: usize,
}

fn ce_value(p: &[f64], gold: usize) -> f64 {
    -p[gold].max(PROB_FLOOR).ln()
}

/// Numeric (off-tape) distance between proxy prediction `i` and a gold
/// event: type cross-entropy plus mean argument cross-entropy over the
/// document's unique entities.
pub fn pair_distance_value(batch: &ProxyBatch, proxy: usize, gold: &GoldEventLabels) -> f64 {
    let mut d = ce_value(&batch.type_probs[proxy], gold.type_class);
    let n_ents = batch.n_entities();
    if n_ents > 0 {
        let mut arg = 0.0;
        for k in 0..n_ents {
            arg += ce_value(&batch.arg_probs[k][proxy], gold.role_classes[k]);
        }
        d += arg / n_ents as f64;
    }
    d
}

/// Tape node for the same distance, used for the matched pairs so gradients
/// reach the producing distributions.
pub fn pair_distance_node(
    tape: &mut Tape,
    batch: &ProxyBatch,
    proxy: usize,
    gold: &GoldEventLabels,
) -> Result<Var> {
    let type_row = tape.row(batch.type_probs_var, proxy)?;
    let mut total = tape.cross_entropy(type_row, gold.type_class)?;
    let n_ents = batch.n_entities();
    if n_ents > 0 {
        let mut terms = Vec::with_capacity(n_ents);
        for k in 0..n_ents {
            let row = tape.row(batch.arg_probs_vars[k], proxy)?;
            terms.push(tape.cross_entropy(row, gold.role_classes[k])?);
        }
        let stacked = tape.concat(&terms)?;
        let summed = tape.sum_all(stacked);
        let mean = tape.scale(summed, 1.0 / n_ents as f64);
        total = tape.add(total, mean)?;
    }
    Ok(total)
}

/// Builds the full proxy-by-gold cost matrix from prediction values.
pub fn build_cost_matrix(batch: &ProxyBatch, gold: &GoldEventSet) -> Result<CostMatrix> {
    let rows = batch.n_proxies();
    let cols = gold.events.len();
    let mut values = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for ev in &gold.events {
            values.push(pair_distance_value(batch, i, ev));
        }
    }
    CostMatrix::new(rows, cols, values)
}

/// Average Hausdorff distance between the row set and the column set:
/// mean row-minimum plus mean column-minimum. Diagnostic only.
pub fn avg_hausdorff(cost: &CostMatrix) -> Result<f64> {
    if cost.rows == 0 || cost.cols == 0 {
        return Err(Error::shape("avg_hausdorff", "empty cost matrix".to_string()));
    }
    let mut row_part = 0.0;
    for r in 0..cost.rows {
        let mut best = f64::INFINITY;
        for c in 0..cost.cols {
            best = best.min(cost.at(r, c));
        }
        row_part += best;
    }
    let mut col_part = 0.0;
    for c in 0..cost.cols {
        let mut best = f64::INFINITY;
        for r in 0..cost.rows {
            best = best.min(cost.at(r, c));
        }
        col_part += best;
    }
    Ok(row_part / cost.rows as f64 + col_part / cost.cols as f64)
}

/// Pads the gold event set with null events (null type, all-null argument
/// labels) until it matches the proxy count.
pub fn pad_gold(
    gold_events: &[EventRecord],
    unique_entity_ids: &[i64],
    schema: &Schema,
    n_proxies: usize,
) -> Result<GoldEventSet> {
    if gold_events.len() > n_proxies {
        return Err(Error::Config(format!(
            "{} gold events exceed {} proxy nodes; increase the proxy count",
            gold_events.len(),
            n_proxies
        )));
    }
    let mut events = Vec::with_capacity(n_proxies);
    for ev in gold_events {
        let type_class = schema.type_class(&ev.event_type)?;
        let mut role_classes = vec![0usize; unique_entity_ids.len()];
        for arg in &ev.args {
            let role_class = schema.role_class(&arg.role)?;
            match unique_entity_ids.iter().position(|&id| id == arg.entity_id) {
                Some(k) => role_classes[k] = role_class,
                None => {
                    return Err(Error::Validation(format!(
                        "gold event references entity {} absent from the document",
                        arg.entity_id
                    )))
                }
            }
        }
        events.push(GoldEventLabels {
            type_class,
            role_classes,
            padded: false,
        });
    }
    let n_real = events.len();
    while events.len() < n_proxies {
        events.push(GoldEventLabels {
            type_class: 0,
            role_classes: vec![0; unique_entity_ids.len()],
            padded: true,
        });
    }
    Ok(GoldEventSet { events, n_real })
}

// ---- assignment solver ----------------------------------------------------

/// Shortest-augmenting-path Hungarian solve. Returns row -> col for a square
/// matrix given in row-major order.
fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    // Potentials and matching over a (n+1)-sized frame; column 0 of `way`
    // tracks augmenting-path predecessors.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j (1-based)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

fn assignment_cost(cost: &CostMatrix, row_to_col: &[usize]) -> f64 {
    row_to_col
        .iter()
        .enumerate()
        .map(|(r, &c)| cost.at(r, c))
        .sum()
}

/// Optimal cost of assigning `rows` to the columns not in `used`, for the
/// square submatrix formed by rows `from..n`.
fn optimal_suffix_cost(cost: &CostMatrix, from: usize, used: &[bool]) -> f64 {
    let n = cost.rows;
    let free: Vec<usize> = (0..n).filter(|&c| !used[c]).collect();
    let m = n - from;
    if m == 0 {
        return 0.0;
    }
    debug_assert_eq!(free.len(), m);
    let mut sub = Vec::with_capacity(m * m);
    for r in from..n {
        for &c in &free {
            sub.push(cost.at(r, c));
        }
    }
    let sol = hungarian(&sub, m);
    sol.iter()
        .enumerate()
        .map(|(r, &c)| cost.at(from + r, free[c]))
        .sum()
}

/// Exact minimum-cost perfect matching with a deterministic tie-break: among
/// all minimum-cost assignments, the lexicographically smallest column
/// sequence (row 0 first) is returned.
pub fn solve_assignment(cost: &CostMatrix) -> Result<Assignment> {
    if cost.rows != cost.cols {
        return Err(Error::shape(
            "solve_assignment",
            format!("cost matrix is {}x{}, expected square", cost.rows, cost.cols),
        ));
    }
    let n = cost.rows;
    if n == 0 {
        return Err(Error::shape("solve_assignment", "empty cost matrix".to_string()));
    }
    for r in 0..n {
        for c in 0..n {
            let v = cost.at(r, c);
            if !v.is_finite() {
                return Err(Error::Validation(format!(
                    "cost matrix entry ({}, {}) is not finite",
                    r, c
                )));
            }
        }
    }
    let base = hungarian(&cost.values, n);
    let optimal = assignment_cost(cost, &base);
    let tol = 1e-9 * (1.0 + optimal.abs());

    // Lexicographic refinement: fix columns row by row, keeping total cost
    // optimal. Matters when several assignments tie, e.g. identical padded
    // null columns.
    let mut used = vec![false; n];
    let mut row_to_col = vec![0usize; n];
    let mut prefix = 0.0;
    for r in 0..n {
        let mut chosen = None;
        for c in 0..n {
            if used[c] {
                continue;
            }
            used[c] = true;
            let rest = optimal_suffix_cost(cost, r + 1, &used);
            let total = prefix + cost.at(r, c) + rest;
            if (total - optimal).abs() <= tol {
                chosen = Some(c);
                break;
            }
            used[c] = false;
        }
        let c = chosen.expect("an optimal extension always exists");
        row_to_col[r] = c;
        prefix += cost.at(r, c);
    }
    Ok(Assignment {
        cost: assignment_cost(cost, &row_to_col),
        row_to_col,
    })
}

/// Outcome of the constrained-Hausdorff loss on one document.
pub struct MatchOutcome {
    pub loss: Var,
    pub assignment: Assignment,
    pub cost: CostMatrix,
    /// Average Hausdorff distance of the same matrix (diagnostic).
    pub avg_hausdorff: f64,
}

/// Builds the cost matrix, solves the assignment, and returns the summed
/// matched distances as a differentiable scalar.
pub fn constrained_hausdorff(
    tape: &mut Tape,
    batch: &ProxyBatch,
    gold: &GoldEventSet,
) -> Result<MatchOutcome> {
    constrained_hausdorff_with(tape, batch, gold, solve_assignment)
}

/// Same as [`constrained_hausdorff`] but with a pluggable matcher, used by
/// the random-matching ablation.
pub fn constrained_hausdorff_with(
    tape: &mut Tape,
    batch: &ProxyBatch,
    gold: &GoldEventSet,
    matcher: impl FnOnce(&CostMatrix) -> Result<Assignment>,
) -> Result<MatchOutcome> {
    if gold.events.len() != batch.n_proxies() {
        return Err(Error::shape(
            "constrained_hausdorff",
            format!(
                "{} padded gold events vs {} proxies",
                gold.events.len(),
                batch.n_proxies()
            ),
        ));
    }
    let cost = build_cost_matrix(batch, gold)?;
    let diag = avg_hausdorff(&cost)?;
    let assignment = matcher(&cost)?;
    let mut terms = Vec::with_capacity(batch.n_proxies());
    for (r, &c) in assignment.row_to_col.iter().enumerate() {
        terms.push(pair_distance_node(tape, batch, r, &gold.events[c])?);
    }
    let stacked = tape.concat(&terms)?;
    let loss = tape.sum_all(stacked);
    Ok(MatchOutcome {
        loss,
        assignment,
        cost,
        avg_hausdorff: diag,
    })
}

/// Final objective: matched-set distance plus the entity-representation loss.
pub fn total_loss(tape: &mut Tape, d_hat: Var, l_e: Var) -> Result<Var> {
    tape.add(d_hat, l_e)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(rows: usize, cols: usize, v: &[f64]) -> CostMatrix {
        CostMatrix::new(rows, cols, v.to_vec()).unwrap()
    }

    /// Brute-force minimum assignment cost by permutation enumeration.
    pub(crate) fn brute_force_min(cost: &CostMatrix) -> f64 {
        fn permute(k: usize, cols: &mut Vec<usize>, cost: &CostMatrix, best: &mut f64) {
            let n = cols.len();
            if k == n {
                let total: f64 = cols.iter().enumerate().map(|(r, &c)| cost.at(r, c)).sum();
                if total < *best {
                    *best = total;
                }
                return;
            }
            for i in k..n {
                cols.swap(k, i);
                permute(k + 1, cols, cost, best);
                cols.swap(k, i);
            }
        }
        let mut cols: Vec<usize> = (0..cost.rows).collect();
        let mut best = f64::INFINITY;
        permute(0, &mut cols, cost, &mut best);
        best
    }

    #[test]
    fn avg_hausdorff_zero_matrix() {
        assert_eq!(avg_hausdorff(&cm(2, 2, &[0.0; 4])).unwrap(), 0.0);
    }

    #[test]
    fn avg_hausdorff_zero_diagonal() {
        assert_eq!(avg_hausdorff(&cm(2, 2, &[0.0, 5.0, 5.0, 0.0])).unwrap(), 0.0);
    }

    #[test]
    fn avg_hausdorff_hand_case() {
        // rows: min(1,2)=1, min(3,4)=3; cols: min(1,3)=1, min(2,4)=2
        let d = avg_hausdorff(&cm(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert!((d - 3.5).abs() < 1e-12);
    }

    #[test]
    fn avg_hausdorff_rejects_empty() {
        assert!(avg_hausdorff(&cm(0, 0, &[])).is_err());
    }

    #[test]
    fn solve_zero_diagonal() {
        let a = solve_assignment(&cm(2, 2, &[0.0, 5.0, 5.0, 0.0])).unwrap();
        assert_eq!(a.row_to_col, vec![0, 1]);
        assert_eq!(a.cost, 0.0);
    }

    #[test]
    fn solve_two_by_two() {
        let a = solve_assignment(&cm(2, 2, &[1.0, 2.0, 2.0, 1.0])).unwrap();
        assert_eq!(a.row_to_col, vec![0, 1]);
        assert!((a.cost - 2.0).abs() < 1e-12);
    }

    #[test]
    fn solve_rejects_non_square() {
        let err = solve_assignment(&cm(2, 3, &[0.0; 6])).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn solve_matches_brute_force_on_random_6x6() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let vals: Vec<f64> = (0..36).map(|_| rng.gen_range(0.0..10.0)).collect();
            let c = cm(6, 6, &vals);
            let solved = solve_assignment(&c).unwrap();
            let brute = brute_force_min(&c);
            assert!(
                (solved.cost - brute).abs() < 1e-9,
                "solver {} vs brute {}",
                solved.cost,
                brute
            );
        }
    }

    #[test]
    fn tie_break_is_lexicographically_smallest() {
        // All assignments cost 2; lexicographic smallest is the identity.
        let a = solve_assignment(&cm(3, 3, &[
            1.0, 1.0, 1.0, //
            0.0, 0.0, 0.0, //
            1.0, 1.0, 1.0,
        ]))
        .unwrap();
        assert_eq!(a.row_to_col, vec![0, 1, 2]);

        // Identical columns 1 and 2: row 0 must take the lower index.
        let b = solve_assignment(&cm(3, 3, &[
            5.0, 1.0, 1.0, //
            0.0, 9.0, 9.0, //
            7.0, 3.0, 3.0,
        ]))
        .unwrap();
        assert_eq!(b.row_to_col, vec![1, 0, 2]);
    }

    #[test]
    fn assignment_touches_each_row_and_col_once() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for n in 2..=7 {
            let vals: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..4.0)).collect();
            let a = solve_assignment(&cm(n, n, &vals)).unwrap();
            let mut seen = vec![false; n];
            for &c in &a.row_to_col {
                assert!(!seen[c]);
                seen[c] = true;
            }
            assert!(seen.iter().all(|&s| s));
        }
    }
}
