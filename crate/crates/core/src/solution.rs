//! Core payoffs of the assignment game: extreme core points, the tau-value,
//! favorable-payoff midpoints, core membership, contract prices and welfare.

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::assignment::{coalition_value, solve_optimal_assignment, AssignmentMatrix, Matching};
use crate::error::{Error, Result};
use crate::market_model::TOLERANCE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    BuyerOptimal,
    SellerOptimal,
    Tau,
    Negotiated,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::BuyerOptimal => "buyer-optimal",
            Provenance::SellerOptimal => "seller-optimal",
            Provenance::Tau => "tau",
            Provenance::Negotiated => "negotiated",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Payoff per agent, keyed by agent id in instance order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoffAllocation {
    pub provenance: Provenance,
    pub buyers: IndexMap<String, f64>,
    pub sellers: IndexMap<String, f64>,
}

impl PayoffAllocation {
    /// All agents of `game` at payoff 0.
    pub fn zeros(game: &AssignmentGame, provenance: Provenance) -> Self {
        let m = game.matrix();
        Self {
            provenance,
            buyers: m.buyer_ids().iter().map(|id| (id.clone(), 0.0)).collect(),
            sellers: m.seller_ids().iter().map(|id| (id.clone(), 0.0)).collect(),
        }
    }

    pub fn buyer_total(&self) -> f64 {
        self.buyers.values().sum()
    }

    pub fn seller_total(&self) -> f64 {
        self.sellers.values().sum()
    }

    fn buyer_at(&self, game: &AssignmentGame, i: usize) -> Result<f64> {
        let id = &game.matrix().buyer_ids()[i];
        self.buyers
            .get(id)
            .copied()
            .ok_or_else(|| Error::Domain(format!("allocation has no payoff for buyer `{id}`")))
    }

    fn seller_at(&self, game: &AssignmentGame, j: usize) -> Result<f64> {
        let id = &game.matrix().seller_ids()[j];
        self.sellers
            .get(id)
            .copied()
            .ok_or_else(|| Error::Domain(format!("allocation has no payoff for seller `{id}`")))
    }

    /// Payoff vectors indexed like the game's matrix. Errors if an agent is
    /// missing or the allocation names agents the game does not have.
    fn vectors(&self, game: &AssignmentGame) -> Result<(Vec<f64>, Vec<f64>)> {
        let m = game.matrix();
        if self.buyers.len() != m.num_buyers() || self.sellers.len() != m.num_sellers() {
            return Err(Error::Domain(format!(
                "allocation covers {} buyers and {} sellers, game has {} and {}",
                self.buyers.len(),
                self.sellers.len(),
                m.num_buyers(),
                m.num_sellers()
            )));
        }
        let xb = (0..m.num_buyers()).map(|i| self.buyer_at(game, i)).collect::<Result<_>>()?;
        let xs = (0..m.num_sellers()).map(|j| self.seller_at(game, j)).collect::<Result<_>>()?;
        Ok((xb, xs))
    }
}

/// Bargaining range of one optimally matched pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairBounds {
    pub buyer: usize,
    pub seller: usize,
    pub value: f64,
    pub buyer_utopia: f64,
    pub buyer_min: f64,
    pub seller_utopia: f64,
    pub seller_min: f64,
    pub buyer_mid: f64,
    pub seller_mid: f64,
}

impl PairBounds {
    /// The tau-value split of the pair.
    pub fn tau_pair(&self) -> [f64; 2] {
        [self.buyer_mid, self.seller_mid]
    }
}

/// An assignment game together with its optimal grand-coalition matching and
/// the coalition values every solution concept needs, computed up front.
#[derive(Debug, Clone)]
pub struct AssignmentGame {
    matrix: AssignmentMatrix,
    matching: Matching,
    without_buyer: Vec<f64>,
    without_seller: Vec<f64>,
    /// `v(N \ {i, j})` for each matched pair, same order as `matching.pairs`.
    without_pair: Vec<f64>,
}

impl AssignmentGame {
    pub fn new(matrix: AssignmentMatrix) -> Result<Self> {
        let buyers = matrix.all_buyers();
        let sellers = matrix.all_sellers();
        let matching = solve_optimal_assignment(&matrix, &buyers, &sellers)?;
        let minus = |v: &[usize], k: usize| v.iter().copied().filter(|&x| x != k).collect::<Vec<_>>();
        let without_buyer = buyers
            .iter()
            .map(|&i| coalition_value(&matrix, &minus(&buyers, i), &sellers))
            .collect::<Result<_>>()?;
        let without_seller = sellers
            .iter()
            .map(|&j| coalition_value(&matrix, &buyers, &minus(&sellers, j)))
            .collect::<Result<_>>()?;
        let without_pair = matching
            .pairs
            .iter()
            .map(|&(i, j)| coalition_value(&matrix, &minus(&buyers, i), &minus(&sellers, j)))
            .collect::<Result<_>>()?;
        Ok(Self {
            matrix,
            matching,
            without_buyer,
            without_seller,
            without_pair,
        })
    }

    pub fn from_values(values: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(AssignmentMatrix::from_values(values)?)
    }

    pub fn matrix(&self) -> &AssignmentMatrix {
        &self.matrix
    }

    pub fn matching(&self) -> &Matching {
        &self.matching
    }

    /// `v_M` of the grand coalition.
    pub fn grand_value(&self) -> f64 {
        self.matching.total_value
    }

    pub fn buyer_index(&self, id: &str) -> Result<usize> {
        self.matrix
            .buyer_ids()
            .iter()
            .position(|b| b == id)
            .ok_or_else(|| Error::UnknownAgent {
                side: "buyer",
                id: id.to_string(),
            })
    }

    pub fn seller_index(&self, id: &str) -> Result<usize> {
        self.matrix
            .seller_ids()
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| Error::UnknownAgent {
                side: "seller",
                id: id.to_string(),
            })
    }

    fn check_buyer(&self, i: usize) -> Result<()> {
        if i >= self.matrix.num_buyers() {
            return Err(Error::IndexOutOfRange {
                side: "buyer",
                index: i,
                len: self.matrix.num_buyers(),
            });
        }
        Ok(())
    }

    fn pair_position(&self, i: usize, j: usize) -> Result<usize> {
        self.check_buyer(i)?;
        if j >= self.matrix.num_sellers() {
            return Err(Error::IndexOutOfRange {
                side: "seller",
                index: j,
                len: self.matrix.num_sellers(),
            });
        }
        self.matching
            .pairs
            .iter()
            .position(|&p| p == (i, j))
            .ok_or_else(|| {
                Error::Domain(format!(
                    "({}, {}) is not a pair of the optimal matching",
                    self.matrix.buyer_ids()[i],
                    self.matrix.seller_ids()[j]
                ))
            })
    }

    /// Buyer's marginal contribution to the grand coalition: the most it can
    /// get in any core allocation.
    pub fn utopia_payoff_buyer(&self, i: usize) -> Result<f64> {
        self.check_buyer(i)?;
        Ok((self.grand_value() - self.without_buyer[i]).max(0.0))
    }

    /// What buyer `i` can still secure once its partner `j` leaves:
    /// `v(N \ {j}) - v(N \ {i, j})`.
    pub fn minimal_rights_buyer(&self, i: usize, j: usize) -> Result<f64> {
        let k = self.pair_position(i, j)?;
        Ok((self.without_seller[j] - self.without_pair[k]).max(0.0))
    }

    pub fn pair_bounds(&self, i: usize, j: usize) -> Result<PairBounds> {
        self.pair_position(i, j)?;
        let value = self.matrix.value(i, j);
        if value <= 0.0 {
            return Err(Error::Domain("pair has no value to divide".into()));
        }
        // Clamp to the pair value so the complements stay nonnegative.
        let buyer_utopia = self.utopia_payoff_buyer(i)?.min(value);
        let buyer_min = self.minimal_rights_buyer(i, j)?.min(buyer_utopia);
        let seller_min = value - buyer_utopia;
        let seller_utopia = value - buyer_min;
        let buyer_mid = 0.5 * (buyer_utopia + buyer_min);
        Ok(PairBounds {
            buyer: i,
            seller: j,
            value,
            buyer_utopia,
            buyer_min,
            seller_utopia,
            seller_min,
            buyer_mid,
            seller_mid: 0.5 * (seller_utopia + seller_min),
        })
    }

    /// Bounds for every matched pair, in matching order.
    pub fn all_pair_bounds(&self) -> Result<Vec<PairBounds>> {
        self.matching
            .pairs
            .iter()
            .map(|&(i, j)| self.pair_bounds(i, j))
            .collect()
    }

    fn allocation_from(&self, provenance: Provenance, split: impl Fn(&PairBounds) -> (f64, f64)) -> Result<PayoffAllocation> {
        let mut alloc = PayoffAllocation::zeros(self, provenance);
        for b in self.all_pair_bounds()? {
            let (xb, xs) = split(&b);
            alloc.buyers[b.buyer] = xb;
            alloc.sellers[b.seller] = xs;
        }
        Ok(alloc)
    }

    /// Midpoint of the buyer-optimal and seller-optimal core points.
    pub fn tau_value(&self) -> Result<PayoffAllocation> {
        self.allocation_from(Provenance::Tau, |b| (b.buyer_mid, b.seller_mid))
    }

    /// `(buyer-optimal, seller-optimal)` core extreme points.
    pub fn extreme_allocations(&self) -> Result<(PayoffAllocation, PayoffAllocation)> {
        Ok((
            self.allocation_from(Provenance::BuyerOptimal, |b| (b.buyer_utopia, b.seller_min))?,
            self.allocation_from(Provenance::SellerOptimal, |b| (b.buyer_min, b.seller_utopia))?,
        ))
    }

    pub fn is_core_member(&self, allocation: &PayoffAllocation, tolerance: f64) -> Result<CoreCheck> {
        let (xb, xs) = allocation.vectors(self)?;
        let mut violations = Vec::new();

        let total: f64 = xb.iter().sum::<f64>() + xs.iter().sum::<f64>();
        if (total - self.grand_value()).abs() > tolerance {
            violations.push(CoreViolation::Efficiency {
                distributed: total,
                grand_value: self.grand_value(),
            });
        }
        for (i, &x) in xb.iter().enumerate() {
            for (j, &y) in xs.iter().enumerate() {
                let v = self.matrix.value(i, j);
                if x + y < v - tolerance {
                    violations.push(CoreViolation::Blocking {
                        buyer: self.matrix.buyer_ids()[i].clone(),
                        seller: self.matrix.seller_ids()[j].clone(),
                        payoff_sum: x + y,
                        pair_value: v,
                    });
                }
            }
        }
        let ids = self.matrix.buyer_ids().iter().zip(&xb).chain(self.matrix.seller_ids().iter().zip(&xs));
        for (id, &x) in ids {
            if x < -tolerance {
                violations.push(CoreViolation::Negative {
                    agent: id.clone(),
                    payoff: x,
                });
            }
        }
        Ok(CoreCheck { violations })
    }

    /// Per-kWh settlement price of every matched pair: the bid minus the
    /// buyer's payoff spread over the traded energy.
    pub fn contract_prices(&self, allocation: &PayoffAllocation) -> Result<Vec<ContractPrice>> {
        self.matching
            .pairs
            .iter()
            .map(|&(i, j)| {
                let quantity = self.matrix.quantity(i, j);
                if quantity <= 0.0 {
                    return Err(Error::Domain(format!(
                        "pair ({}, {}) trades no energy",
                        self.matrix.buyer_ids()[i],
                        self.matrix.seller_ids()[j]
                    )));
                }
                let payoff = allocation.buyer_at(self, i)?;
                Ok(ContractPrice {
                    buyer: self.matrix.buyer_ids()[i].clone(),
                    seller: self.matrix.seller_ids()[j].clone(),
                    quantity,
                    bid: self.matrix.bid(i, j),
                    ask: self.matrix.ask(j),
                    price: contract_price(self.matrix.bid(i, j), payoff, quantity),
                })
            })
            .collect()
    }

    pub fn welfare_split(&self, allocation: &PayoffAllocation) -> Result<WelfareSplit> {
        let total = self.grand_value();
        if total <= 0.0 {
            return Err(Error::Domain("total welfare is zero".into()));
        }
        Ok(WelfareSplit {
            buyer_share: 100.0 * allocation.buyer_total() / total,
            seller_share: 100.0 * allocation.seller_total() / total,
        })
    }
}

/// `bid - payoff / quantity`.
pub fn contract_price(bid: f64, buyer_payoff: f64, quantity: f64) -> f64 {
    bid - buyer_payoff / quantity
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoreViolation {
    /// Payoffs do not add up to the grand-coalition value.
    Efficiency { distributed: f64, grand_value: f64 },
    /// A buyer-seller pair would gain by trading with each other instead.
    Blocking {
        buyer: String,
        seller: String,
        payoff_sum: f64,
        pair_value: f64,
    },
    /// Negative payoff. Not part of the textbook core inequalities; callers
    /// that want those alone can filter this class out.
    Negative { agent: String, payoff: f64 },
}

impl fmt::Display for CoreViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreViolation::Efficiency {
                distributed,
                grand_value,
            } => write!(f, "distributes {distributed}, grand coalition is worth {grand_value}"),
            CoreViolation::Blocking {
                buyer,
                seller,
                payoff_sum,
                pair_value,
            } => write!(f, "({buyer}, {seller}) receive {payoff_sum} but can create {pair_value}"),
            CoreViolation::Negative { agent, payoff } => write!(f, "{agent} has negative payoff {payoff}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoreCheck {
    pub violations: Vec<CoreViolation>,
}

impl CoreCheck {
    pub fn is_member(&self) -> bool {
        self.violations.is_empty()
    }

    /// Membership ignoring the nonnegativity class.
    pub fn satisfies_core_inequalities(&self) -> bool {
        self.violations
            .iter()
            .all(|v| matches!(v, CoreViolation::Negative { .. }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractPrice {
    pub buyer: String,
    pub seller: String,
    pub quantity: f64,
    pub bid: f64,
    pub ask: f64,
    pub price: f64,
}

/// Percentages of the grand-coalition value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WelfareSplit {
    pub buyer_share: f64,
    pub seller_share: f64,
}

/// Tolerance used when no caller-specific one applies.
pub const DEFAULT_CORE_TOLERANCE: f64 = TOLERANCE;

#[cfg(test)]
mod tests {
    use super::*;

    fn game(values: &[&[f64]]) -> AssignmentGame {
        AssignmentGame::from_values(values.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    fn single() -> AssignmentGame {
        game(&[&[10.0]])
    }

    fn alloc(g: &AssignmentGame, xb: &[f64], xs: &[f64]) -> PayoffAllocation {
        let mut a = PayoffAllocation::zeros(g, Provenance::Negotiated);
        a.buyers.values_mut().zip(xb).for_each(|(p, x)| *p = *x);
        a.sellers.values_mut().zip(xs).for_each(|(p, x)| *p = *x);
        a
    }

    #[test]
    fn single_pair_bounds_and_tau() {
        let g = single();
        assert_eq!(g.utopia_payoff_buyer(0).unwrap(), 10.0);
        assert_eq!(g.minimal_rights_buyer(0, 0).unwrap(), 0.0);
        let b = g.pair_bounds(0, 0).unwrap();
        assert_eq!(
            (b.buyer_utopia, b.buyer_min, b.seller_utopia, b.seller_min),
            (10.0, 0.0, 10.0, 0.0)
        );
        assert_eq!(b.tau_pair(), [5.0, 5.0]);
        let tau = g.tau_value().unwrap();
        assert_eq!(tau.buyers["b1"], 5.0);
        assert_eq!(tau.sellers["s1"], 5.0);
        assert_eq!(tau.provenance, Provenance::Tau);

        let (bo, so) = g.extreme_allocations().unwrap();
        assert_eq!((bo.buyers["b1"], bo.sellers["s1"]), (10.0, 0.0));
        assert_eq!((so.buyers["b1"], so.sellers["s1"]), (0.0, 10.0));
    }

    #[test]
    fn two_by_two_bounds() {
        let g = game(&[&[5.0, 3.0], &[4.0, 6.0]]);
        assert_eq!(g.utopia_payoff_buyer(0).unwrap(), 5.0);
        assert_eq!(g.utopia_payoff_buyer(1).unwrap(), 6.0);
        assert_eq!(g.minimal_rights_buyer(0, 0).unwrap(), 0.0);
        let b = g.pair_bounds(0, 0).unwrap();
        assert_eq!(
            (b.buyer_utopia, b.buyer_min, b.seller_min, b.seller_utopia, b.buyer_mid, b.seller_mid),
            (5.0, 0.0, 0.0, 5.0, 2.5, 2.5)
        );
        let tau = g.tau_value().unwrap();
        assert_eq!(tau.buyers["b1"], 2.5);
        assert_eq!(tau.sellers["s1"], 2.5);
    }

    #[test]
    fn two_by_two_extremes_and_welfare() {
        // Marginal contributions: b1 = 11 - v({b2}, S) = 5, b2 = 11 - v({b1}, S) = 6,
        // so the buyer-optimal point leaves both sellers with nothing.
        let g = game(&[&[5.0, 3.0], &[4.0, 6.0]]);
        let (bo, so) = g.extreme_allocations().unwrap();
        assert_eq!(bo.buyers.values().copied().collect::<Vec<_>>(), [5.0, 6.0]);
        assert_eq!(bo.sellers.values().copied().collect::<Vec<_>>(), [0.0, 0.0]);
        assert_eq!(so.buyers.values().copied().collect::<Vec<_>>(), [0.0, 0.0]);
        assert_eq!(so.sellers.values().copied().collect::<Vec<_>>(), [5.0, 6.0]);
        let w = g.welfare_split(&bo).unwrap();
        assert_eq!((w.buyer_share, w.seller_share), (100.0, 0.0));
        assert!(g.is_core_member(&bo, 1e-9).unwrap().is_member());
        assert!(g.is_core_member(&so, 1e-9).unwrap().is_member());
    }

    #[test]
    fn minimal_rights_need_alternative_partner() {
        // optimum is {(b1,s2), (b2,s1)} = 7; (b1,s1) is not matched
        let g = game(&[&[5.0, 3.0], &[4.0, 0.0]]);
        assert_eq!(g.matching().pairs, vec![(0, 1), (1, 0)]);
        assert!(matches!(g.minimal_rights_buyer(0, 0), Err(Error::Domain(_))));
        // v(B, {s1}) - v({b2}, {s1}) = 5 - 4
        assert_eq!(g.minimal_rights_buyer(0, 1).unwrap(), 1.0);
        // v(B, {s2}) - v({b1}, {s2}) = 3 - 3
        assert_eq!(g.minimal_rights_buyer(1, 0).unwrap(), 0.0);
    }

    #[test]
    fn zero_row_buyer_has_no_utopia() {
        let g = game(&[&[0.0, 0.0], &[4.0, 6.0]]);
        assert_eq!(g.utopia_payoff_buyer(0).unwrap(), 0.0);
        assert!(g.utopia_payoff_buyer(7).is_err());
    }

    #[test]
    fn all_zero_game_pays_nothing() {
        let g = game(&[&[0.0, 0.0], &[0.0, 0.0]]);
        let tau = g.tau_value().unwrap();
        assert!(tau.buyers.values().chain(tau.sellers.values()).all(|&x| x == 0.0));
        assert!(g.is_core_member(&tau, 1e-9).unwrap().is_member());
        assert!(g.welfare_split(&tau).is_err());
    }

    #[test]
    fn core_membership_failures() {
        let g = single();
        let neg = g.is_core_member(&alloc(&g, &[12.0], &[-2.0]), 1e-9).unwrap();
        assert!(!neg.is_member());
        assert!(matches!(neg.violations[..], [CoreViolation::Negative { .. }]));
        assert!(neg.satisfies_core_inequalities());

        let short = g.is_core_member(&alloc(&g, &[4.0], &[4.0]), 1e-9).unwrap();
        assert!(!short.is_member());
        assert!(short
            .violations
            .iter()
            .any(|v| matches!(v, CoreViolation::Efficiency { .. })));

        let g2 = game(&[&[5.0, 3.0], &[4.0, 6.0]]);
        // efficient but (b1, s2) blocks: 1 + 1 < 3
        let blocked = g2.is_core_member(&alloc(&g2, &[1.0, 5.0], &[4.0, 1.0]), 1e-9).unwrap();
        assert!(blocked
            .violations
            .iter()
            .any(|v| matches!(v, CoreViolation::Blocking { buyer, seller, .. } if buyer == "b1" && seller == "s2")));
    }

    #[test]
    fn missing_agent_is_an_error() {
        let g = single();
        let mut a = g.tau_value().unwrap();
        a.sellers.clear();
        assert!(matches!(g.is_core_member(&a, 1e-9), Err(Error::Domain(_))));
        let mut renamed = g.tau_value().unwrap();
        renamed.buyers = [("zz".to_string(), 5.0)].into_iter().collect();
        assert!(g.is_core_member(&renamed, 1e-9).is_err());
    }

    #[test]
    fn welfare_split_single_pair() {
        let g = single();
        let w = g.welfare_split(&g.tau_value().unwrap()).unwrap();
        assert_eq!((w.buyer_share, w.seller_share), (50.0, 50.0));
        let (bo, _) = g.extreme_allocations().unwrap();
        let w = g.welfare_split(&bo).unwrap();
        assert_eq!((w.buyer_share, w.seller_share), (100.0, 0.0));
    }

    #[test]
    fn contract_price_examples() {
        // bid 0.144, q = 3, tau payoff 0.066
        assert!((contract_price(0.144, 0.066, 3.0) - 0.122).abs() < 1e-12);
        assert_eq!(contract_price(0.144, 0.0, 3.0), 0.144);
        // buyer takes the whole surplus (0.144 - 0.10) * 3 -> pays the ask
        assert!((contract_price(0.144, (0.144 - 0.10) * 3.0, 3.0) - 0.10).abs() < 1e-12);
    }
}
