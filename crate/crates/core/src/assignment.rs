//! Assignment matrix construction and exact one-to-one matching.
//!
//! The optimal value of a coalition is found with the Hungarian algorithm
//! (Kuhn-Munkres with potentials). Among all matchings within [`TOLERANCE`]
//! of that optimum, the one whose sorted `(buyer, seller)` pair list is
//! lexicographically smallest is returned, so results do not depend on the
//! solver's internal pivoting order.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::market_model::{contract_value, MarketInstance, TOLERANCE};

/// Largest side accepted by [`brute_force_assignment`].
pub const BRUTE_FORCE_LIMIT: usize = 8;

/// Contract values `v(i, j)` for every buyer/seller pair, plus the data needed
/// to turn payoffs back into prices.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    buyer_ids: Vec<String>,
    seller_ids: Vec<String>,
    values: Vec<Vec<f64>>,
    quantities: Vec<Vec<f64>>,
    bids: Vec<Vec<f64>>,
    asks: Vec<f64>,
}

impl AssignmentMatrix {
    /// Evaluates the contract value of every pair in the instance.
    pub fn from_instance(instance: &MarketInstance) -> Result<Self> {
        let nb = instance.buyers.len();
        let ns = instance.sellers.len();
        let mut values = vec![vec![0.0; ns]; nb];
        let mut quantities = vec![vec![0.0; ns]; nb];
        let mut bids = vec![vec![0.0; ns]; nb];
        for (i, buyer) in instance.buyers.iter().enumerate() {
            for (j, seller) in instance.sellers.iter().enumerate() {
                let c = contract_value(buyer, seller, &instance.scenario_set)?;
                values[i][j] = c.value;
                quantities[i][j] = c.quantity;
                bids[i][j] = c.bid;
            }
        }
        Ok(Self {
            buyer_ids: instance.buyers.iter().map(|b| b.id.clone()).collect(),
            seller_ids: instance.sellers.iter().map(|s| s.id.clone()).collect(),
            values,
            quantities,
            bids,
            asks: instance.sellers.iter().map(|s| s.ask_price).collect(),
        })
    }

    /// Bare value matrix for abstract games. Agents are named `b1..`/`s1..`;
    /// every pair trades one unit at ask 0, so the bid equals the value.
    pub fn from_values(values: Vec<Vec<f64>>) -> Result<Self> {
        let nb = values.len();
        let ns = values.first().map_or(0, Vec::len);
        if values.iter().any(|row| row.len() != ns) {
            return Err(Error::Domain("value matrix rows have different lengths".into()));
        }
        if values.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Domain("matrix entries must be finite and nonnegative".into()));
        }
        Ok(Self {
            buyer_ids: (1..=nb).map(|i| format!("b{i}")).collect(),
            seller_ids: (1..=ns).map(|j| format!("s{j}")).collect(),
            quantities: vec![vec![1.0; ns]; nb],
            bids: values.clone(),
            asks: vec![0.0; ns],
            values,
        })
    }

    pub fn num_buyers(&self) -> usize {
        self.buyer_ids.len()
    }

    pub fn num_sellers(&self) -> usize {
        self.seller_ids.len()
    }

    pub fn buyer_ids(&self) -> &[String] {
        &self.buyer_ids
    }

    pub fn seller_ids(&self) -> &[String] {
        &self.seller_ids
    }

    pub fn value(&self, buyer: usize, seller: usize) -> f64 {
        self.values[buyer][seller]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// Energy traded if the pair is matched, kWh.
    pub fn quantity(&self, buyer: usize, seller: usize) -> f64 {
        self.quantities[buyer][seller]
    }

    pub fn bid(&self, buyer: usize, seller: usize) -> f64 {
        self.bids[buyer][seller]
    }

    pub fn ask(&self, seller: usize) -> f64 {
        self.asks[seller]
    }

    pub fn all_buyers(&self) -> Vec<usize> {
        (0..self.num_buyers()).collect()
    }

    pub fn all_sellers(&self) -> Vec<usize> {
        (0..self.num_sellers()).collect()
    }

    /// CSV dump: header row of seller ids, one row per buyer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("buyer");
        for s in &self.seller_ids {
            let _ = write!(out, ",{s}");
        }
        out.push('\n');
        for (id, row) in self.buyer_ids.iter().zip(&self.values) {
            out.push_str(id);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    fn check_subsets(&self, buyers: &[usize], sellers: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        let norm = |idx: &[usize], len: usize, side: &'static str| -> Result<Vec<usize>> {
            if let Some(&bad) = idx.iter().find(|&&k| k >= len) {
                return Err(Error::IndexOutOfRange { side, index: bad, len });
            }
            let mut v = idx.to_vec();
            v.sort_unstable();
            v.dedup();
            Ok(v)
        };
        Ok((
            norm(buyers, self.num_buyers(), "buyer")?,
            norm(sellers, self.num_sellers(), "seller")?,
        ))
    }
}

/// Convenience wrapper mirroring the matrix constructor.
pub fn build_assignment_matrix(instance: &MarketInstance) -> Result<AssignmentMatrix> {
    AssignmentMatrix::from_instance(instance)
}

/// A set of trading pairs in which every agent appears at most once.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Matching {
    /// `(buyer index, seller index)`, sorted; only pairs with positive value.
    pub pairs: Vec<(usize, usize)>,
    pub total_value: f64,
}

impl Matching {
    fn empty() -> Self {
        Self {
            pairs: Vec::new(),
            total_value: 0.0,
        }
    }

    fn from_pairs(matrix: &AssignmentMatrix, mut pairs: Vec<(usize, usize)>) -> Self {
        pairs.sort_unstable();
        let total_value = pairs.iter().map(|&(i, j)| matrix.value(i, j)).sum();
        Self { pairs, total_value }
    }

    pub fn partner_of_buyer(&self, buyer: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == buyer).map(|p| p.1)
    }

    pub fn partner_of_seller(&self, seller: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == seller).map(|p| p.0)
    }

    pub fn contains(&self, buyer: usize, seller: usize) -> bool {
        self.pairs.binary_search(&(buyer, seller)).is_ok()
    }
}

/// Optimal one-to-one matching restricted to the given buyer and seller
/// subsets. Zero-value pairs are left out, ties are broken lexicographically.
pub fn solve_optimal_assignment(
    matrix: &AssignmentMatrix,
    buyer_subset: &[usize],
    seller_subset: &[usize],
) -> Result<Matching> {
    let (buyers, sellers) = matrix.check_subsets(buyer_subset, seller_subset)?;
    if buyers.is_empty() || sellers.is_empty() {
        return Ok(Matching::empty());
    }
    let target = max_weight_value(matrix, &buyers, &sellers);
    let pairs = lexicographic_optimum(matrix, &buyers, &sellers, target);
    Ok(Matching::from_pairs(matrix, pairs))
}

/// Value of the coalition formed by the given buyers and sellers.
pub fn coalition_value(matrix: &AssignmentMatrix, buyer_subset: &[usize], seller_subset: &[usize]) -> Result<f64> {
    Ok(solve_optimal_assignment(matrix, buyer_subset, seller_subset)?.total_value)
}

/// Exhaustive enumeration of every matching configuration. Test oracle for
/// [`solve_optimal_assignment`]; applies the same tie-break rule.
pub fn brute_force_assignment(
    matrix: &AssignmentMatrix,
    buyer_subset: &[usize],
    seller_subset: &[usize],
) -> Result<Matching> {
    let (buyers, sellers) = matrix.check_subsets(buyer_subset, seller_subset)?;
    if buyers.len() > BRUTE_FORCE_LIMIT || sellers.len() > BRUTE_FORCE_LIMIT {
        return Err(Error::SubsetTooLarge {
            buyers: buyers.len(),
            sellers: sellers.len(),
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let mut all = Vec::new();
    let mut used = vec![false; sellers.len()];
    enumerate(matrix, &buyers, &sellers, 0, &mut used, &mut Vec::new(), &mut all);

    let totals: Vec<f64> = all
        .iter()
        .map(|pairs| pairs.iter().map(|&(i, j)| matrix.value(i, j)).sum())
        .collect();
    let best = totals.iter().copied().fold(0.0, f64::max);
    let winner = all
        .into_iter()
        .zip(totals)
        .filter(|(_, t)| *t >= best - TOLERANCE)
        .map(|(p, _)| p)
        .min()
        .unwrap_or_default();
    Ok(Matching::from_pairs(matrix, winner))
}

fn enumerate(
    matrix: &AssignmentMatrix,
    buyers: &[usize],
    sellers: &[usize],
    next: usize,
    used: &mut [bool],
    current: &mut Vec<(usize, usize)>,
    out: &mut Vec<Vec<(usize, usize)>>,
) {
    if next == buyers.len() {
        out.push(current.clone());
        return;
    }
    let i = buyers[next];
    // buyer stays out
    enumerate(matrix, buyers, sellers, next + 1, used, current, out);
    for (k, &j) in sellers.iter().enumerate() {
        if used[k] || matrix.value(i, j) <= 0.0 {
            continue;
        }
        used[k] = true;
        current.push((i, j));
        enumerate(matrix, buyers, sellers, next + 1, used, current, out);
        current.pop();
        used[k] = false;
    }
}

/// Builds the lexicographically smallest sorted pair list whose value reaches
/// `target - TOLERANCE`. Buyers are fixed in increasing order; each step takes
/// the smallest pair that still admits an optimal completion.
fn lexicographic_optimum(
    matrix: &AssignmentMatrix,
    buyers: &[usize],
    sellers: &[usize],
    target: f64,
) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut free: Vec<usize> = sellers.to_vec();
    let mut acc = 0.0;
    let mut start = 0;
    'grow: while acc < target - TOLERANCE {
        let from = start;
        for bi in from..buyers.len() {
            let i = buyers[bi];
            for (k, &j) in free.iter().enumerate() {
                let v = matrix.value(i, j);
                if v <= 0.0 {
                    continue;
                }
                let mut rest_sellers = free.clone();
                rest_sellers.remove(k);
                let rest = max_weight_value(matrix, &buyers[bi + 1..], &rest_sellers);
                if acc + v + rest >= target - TOLERANCE {
                    pairs.push((i, j));
                    acc += v;
                    free = rest_sellers;
                    start = bi + 1;
                    continue 'grow;
                }
            }
        }
        // The optimum is always reachable from the empty prefix; reaching this
        // point means `target` overshot the true optimum by more than TOLERANCE.
        unreachable!("no completion reaches the optimal value {target}");
    }
    pairs
}

/// Optimal matching value of the sub-matrix, via Hungarian.
fn max_weight_value(matrix: &AssignmentMatrix, buyers: &[usize], sellers: &[usize]) -> f64 {
    if buyers.is_empty() || sellers.is_empty() {
        return 0.0;
    }
    let mut pairs: Vec<(usize, usize)> = hungarian_max(buyers.len(), sellers.len(), |r, c| {
        matrix.value(buyers[r], sellers[c])
    })
    .into_iter()
    .map(|(r, c)| (buyers[r], sellers[c]))
    .filter(|&(i, j)| matrix.value(i, j) > 0.0)
    .collect();
    pairs.sort_unstable();
    pairs.iter().map(|&(i, j)| matrix.value(i, j)).sum()
}

/// Maximum-weight assignment on an `rows x cols` weight function. Returns the
/// `(row, col)` pairs of a complete assignment of the smaller side.
pub(crate) fn hungarian_max(rows: usize, cols: usize, weight: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    if rows <= cols {
        hungarian_min(rows, cols, |r, c| -weight(r, c))
    } else {
        hungarian_min(cols, rows, |r, c| -weight(c, r))
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect()
    }
}

/// Shortest augmenting path Hungarian algorithm with row/column potentials,
/// O(n^2 m) for `n <= m`. Every row is assigned.
fn hungarian_min(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    debug_assert!(n <= m);
    // 1-based with column 0 as the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for col in 1..=m {
                if used[col] {
                    continue;
                }
                let reduced = cost(r0 - 1, col - 1) - u[r0] - v[col];
                if reduced < minv[col] {
                    minv[col] = reduced;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=m {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }

    (1..=m)
        .filter(|&col| owner[col] != 0)
        .map(|col| (owner[col] - 1, col - 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_model::{Buyer, GridTariff, Seller, ScenarioSet};

    fn m(values: &[&[f64]]) -> AssignmentMatrix {
        AssignmentMatrix::from_values(values.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    fn all(matrix: &AssignmentMatrix) -> (Vec<usize>, Vec<usize>) {
        (matrix.all_buyers(), matrix.all_sellers())
    }

    #[test]
    fn two_by_two_picks_diagonal() {
        let mx = m(&[&[5.0, 3.0], &[4.0, 6.0]]);
        let (b, s) = all(&mx);
        let sol = solve_optimal_assignment(&mx, &b, &s).unwrap();
        assert_eq!(sol.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(sol.total_value, 11.0);
        assert_eq!(brute_force_assignment(&mx, &b, &s).unwrap().total_value, 11.0);
    }

    #[test]
    fn one_sided_coalitions_are_worthless() {
        let mx = m(&[&[5.0]]);
        assert_eq!(solve_optimal_assignment(&mx, &[0], &[]).unwrap(), Matching::empty());
        assert_eq!(coalition_value(&mx, &[], &[0]).unwrap(), 0.0);
        assert_eq!(coalition_value(&mx, &[], &[]).unwrap(), 0.0);
    }

    #[test]
    fn ties_break_lexicographically() {
        let mx = m(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let (b, s) = all(&mx);
        let sol = solve_optimal_assignment(&mx, &b, &s).unwrap();
        assert_eq!(sol.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(sol.total_value, 2.0);

        // {(0,0)} and {(0,1),(1,0)} both reach 2; the shorter prefix wins.
        let mx = m(&[&[2.0, 1.0], &[1.0, 0.0]]);
        let sol = solve_optimal_assignment(&mx, &[0, 1], &[0, 1]).unwrap();
        assert_eq!(sol.pairs, vec![(0, 0)]);
        assert_eq!(brute_force_assignment(&mx, &[0, 1], &[0, 1]).unwrap(), sol);
    }

    #[test]
    fn coalition_values_on_subsets() {
        let mx = m(&[&[5.0, 3.0], &[4.0, 6.0]]);
        assert_eq!(coalition_value(&mx, &[0, 1], &[0, 1]).unwrap(), 11.0);
        assert_eq!(coalition_value(&mx, &[0], &[1]).unwrap(), 3.0);
        assert_eq!(coalition_value(&mx, &[1], &[0, 1]).unwrap(), 6.0);
    }

    #[test]
    fn zero_pairs_are_not_matches() {
        let mx = m(&[&[0.0, 0.0], &[0.0, 2.0]]);
        let sol = solve_optimal_assignment(&mx, &[0, 1], &[0, 1]).unwrap();
        assert_eq!(sol.pairs, vec![(1, 1)]);
        let zero = m(&[&[0.0, 0.0], &[0.0, 0.0]]);
        assert!(solve_optimal_assignment(&zero, &[0, 1], &[0, 1]).unwrap().pairs.is_empty());
    }

    #[test]
    fn rectangular_matrices() {
        let mx = m(&[&[1.0, 7.0], &[6.0, 5.0], &[4.0, 8.0]]);
        let (b, s) = all(&mx);
        // enumeration: best is (1,0)+(2,1) = 14
        let sol = solve_optimal_assignment(&mx, &b, &s).unwrap();
        assert_eq!(sol.pairs, vec![(1, 0), (2, 1)]);
        assert_eq!(sol.total_value, 14.0);
        assert_eq!(brute_force_assignment(&mx, &b, &s).unwrap(), sol);

        let wide = m(&[&[1.0, 9.0, 2.0]]);
        assert_eq!(solve_optimal_assignment(&wide, &[0], &[0, 1, 2]).unwrap().pairs, vec![(0, 1)]);
    }

    #[test]
    fn brute_force_single_and_limits() {
        let mx = m(&[&[7.0]]);
        assert_eq!(brute_force_assignment(&mx, &[0], &[0]).unwrap().total_value, 7.0);
        let big = AssignmentMatrix::from_values(vec![vec![1.0; 9]; 9]).unwrap();
        assert!(matches!(
            brute_force_assignment(&big, &big.all_buyers(), &big.all_sellers()),
            Err(Error::SubsetTooLarge { .. })
        ));
    }

    #[test]
    fn bad_indices_are_reported() {
        let mx = m(&[&[1.0]]);
        assert!(matches!(
            solve_optimal_assignment(&mx, &[3], &[0]),
            Err(Error::IndexOutOfRange { side: "buyer", .. })
        ));
    }

    #[test]
    fn ragged_or_negative_matrices_rejected() {
        assert!(AssignmentMatrix::from_values(vec![vec![1.0, 2.0], vec![1.0]]).is_err());
        assert!(AssignmentMatrix::from_values(vec![vec![-1.0]]).is_err());
    }

    #[test]
    fn matrix_from_instance() {
        let inst = MarketInstance {
            tariff: GridTariff {
                buy_price: 0.05,
                sell_price: 0.17,
            },
            buyers: vec![Buyer {
                id: "b1".into(),
                demand_kwh: 3.0,
                base_price: 0.12,
                preferences: [("s1".to_string(), 1.2)].into_iter().collect(),
            }],
            sellers: vec![Seller {
                id: "s1".into(),
                ask_price: 0.10,
                rated_power_kw: 5.0,
                source_type: "PV".into(),
            }],
            scenario_set: ScenarioSet::deterministic([("s1", 4.0)]),
            slot_hours: 1.0,
        };
        let mx = build_assignment_matrix(&inst).unwrap();
        assert!((mx.value(0, 0) - 0.132).abs() < 1e-12);
        assert_eq!(mx.quantity(0, 0), 3.0);
        assert!((mx.bid(0, 0) - 0.144).abs() < 1e-12);
        assert_eq!(mx.to_csv().lines().next(), Some("buyer,s1"));

        let mut dead = inst.clone();
        dead.buyers[0].base_price = 0.06;
        dead.buyers[0].preferences.clear();
        let mx = build_assignment_matrix(&dead).unwrap();
        assert_eq!(mx.values(), &[vec![0.0]]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix_strategy() -> impl Strategy<Value = AssignmentMatrix> {
            (1usize..=5, 1usize..=5)
                .prop_flat_map(|(r, c)| proptest::collection::vec(proptest::collection::vec(0u8..=6, c), r))
                .prop_map(|rows| {
                    AssignmentMatrix::from_values(
                        rows.into_iter()
                            .map(|r| r.into_iter().map(f64::from).collect())
                            .collect(),
                    )
                    .unwrap()
                })
        }

        proptest! {
            #[test]
            fn matches_oracle_and_is_feasible(mx in matrix_strategy()) {
                let (b, s) = (mx.all_buyers(), mx.all_sellers());
                let sol = solve_optimal_assignment(&mx, &b, &s).unwrap();
                let oracle = brute_force_assignment(&mx, &b, &s).unwrap();
                prop_assert_eq!(&sol, &oracle);
                let mut rows: Vec<_> = sol.pairs.iter().map(|p| p.0).collect();
                let mut cols: Vec<_> = sol.pairs.iter().map(|p| p.1).collect();
                rows.dedup();
                cols.sort_unstable();
                cols.dedup();
                prop_assert_eq!(rows.len(), sol.pairs.len());
                prop_assert_eq!(cols.len(), sol.pairs.len());
            }

            #[test]
            fn coalition_value_is_monotone(mx in matrix_strategy(), drop_b in 0usize..5, drop_s in 0usize..5) {
                let (b, s) = (mx.all_buyers(), mx.all_sellers());
                let full = coalition_value(&mx, &b, &s).unwrap();
                let sub_b: Vec<_> = b.iter().copied().filter(|&i| i != drop_b).collect();
                let sub_s: Vec<_> = s.iter().copied().filter(|&j| j != drop_s).collect();
                prop_assert!(coalition_value(&mx, &sub_b, &s).unwrap() <= full);
                prop_assert!(coalition_value(&mx, &sub_b, &sub_s).unwrap() <= coalition_value(&mx, &sub_b, &s).unwrap());
            }
        }
    }
}
