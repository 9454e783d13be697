//! Bilateral negotiation between the two members of a matched pair.
//!
//! Each agent keeps a proposal `(buyer share, seller share)`. In every round
//! both agents average their own proposal with the partner's using a
//! row-stochastic weight matrix, then map the average through their own
//! paracontraction, here the projection onto their favorable-payoff set.
//! The two favorable sets meet in exactly one point, the tau split, which is
//! therefore the unique limit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solution::PairBounds;

/// `(buyer share, seller share)` of a pair's value.
pub type Proposal = [f64; 2];

/// Row `r` holds the weights agent `r` gives to (buyer, seller) proposals.
pub type WeightMatrix = [[f64; 2]; 2];

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITERS: usize = 10_000;
pub const DEFAULT_GAMMA: f64 = 0.2;
pub const DEFAULT_FAMILY_SIZE: usize = 5;

/// Membership tolerance for the favorable sets.
const SET_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Buyer,
    Seller,
}

impl Side {
    fn coord(self) -> usize {
        match self {
            Side::Buyer => 0,
            Side::Seller => 1,
        }
    }
}

/// Payoff splits of `value` on which `side` gets at least `own_mid`: a ray on
/// the line `a + b = value`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FavorableSet {
    value: f64,
    own_mid: f64,
    side: Side,
}

impl FavorableSet {
    pub fn new(value: f64, own_mid: f64, side: Side) -> Result<Self> {
        if !(value.is_finite() && own_mid.is_finite()) || own_mid < -SET_TOL || own_mid > value + SET_TOL {
            return Err(Error::Domain(format!(
                "favorable midpoint {own_mid} outside [0, {value}]"
            )));
        }
        Ok(Self {
            value,
            own_mid: own_mid.clamp(0.0, value),
            side,
        })
    }

    pub fn for_buyer(bounds: &PairBounds) -> Result<Self> {
        Self::new(bounds.value, bounds.buyer_mid, Side::Buyer)
    }

    pub fn for_seller(bounds: &PairBounds) -> Result<Self> {
        Self::new(bounds.value, bounds.seller_mid, Side::Seller)
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn own_mid(&self) -> f64 {
        self.own_mid
    }

    pub fn side(&self) -> Side {
        self.side
    }

    /// Closest point of the set to the agent: its own share equals the midpoint.
    pub fn endpoint(&self) -> Proposal {
        let m = self.own_mid;
        let rest = self.value - m;
        match self.side {
            Side::Buyer => [m, rest],
            Side::Seller => [rest, m],
        }
    }

    pub fn contains(&self, p: Proposal, tol: f64) -> bool {
        (p[0] + p[1] - self.value).abs() <= tol && p[self.side.coord()] >= self.own_mid - tol
    }

    pub fn distance(&self, p: Proposal) -> f64 {
        norm(sub(p, project_favorable(p, self)))
    }
}

/// Euclidean projection onto a favorable set.
pub fn project_favorable(point: Proposal, set: &FavorableSet) -> Proposal {
    let [a, b] = point;
    let v = set.value;
    let on_line = [(a - b + v) / 2.0, (b - a + v) / 2.0];
    if on_line[set.side.coord()] >= set.own_mid {
        on_line
    } else {
        set.endpoint()
    }
}

/// A map applied by an agent after averaging. Its fixed points must be the
/// agent's favorable set for the negotiation to reach the tau split.
pub trait Paracontraction {
    fn apply(&self, point: Proposal) -> Proposal;
}

impl Paracontraction for FavorableSet {
    fn apply(&self, point: Proposal) -> Proposal {
        project_favorable(point, self)
    }
}

/// Seed-driven order in which family members are used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    RoundRobin,
    Seeded(u64),
}

/// A finite family of 2x2 row-stochastic matrices with entries bounded below
/// by `gamma`, plus the rule choosing one per round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightSchedule {
    family: Vec<WeightMatrix>,
    gamma: f64,
    selection: Selection,
}

impl WeightSchedule {
    pub fn new(family: Vec<WeightMatrix>, gamma: f64, selection: Selection) -> Result<Self> {
        check_gamma(gamma)?;
        if family.is_empty() {
            return Err(Error::Config("weight family must not be empty".into()));
        }
        for (k, w) in family.iter().enumerate() {
            for row in w {
                if (row[0] + row[1] - 1.0).abs() > 1e-12 {
                    return Err(Error::Config(format!("weight matrix {k} has a row not summing to 1")));
                }
                if row.iter().any(|&x| x.is_nan() || x < gamma) {
                    return Err(Error::Config(format!("weight matrix {k} has an entry below gamma {gamma}")));
                }
            }
        }
        Ok(Self {
            family,
            gamma,
            selection,
        })
    }

    /// The single matrix `[[1-w, w], [w, 1-w]]` used every round.
    pub fn constant(w: f64) -> Result<Self> {
        let gamma = w.min(1.0 - w);
        Self::new(vec![[[1.0 - w, w], [w, 1.0 - w]]], gamma, Selection::RoundRobin)
    }

    pub fn family(&self) -> &[WeightMatrix] {
        &self.family
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn selection(&self) -> Selection {
        self.selection
    }

    /// Matrix used in round `k`.
    pub fn matrix_at(&self, k: u64) -> &WeightMatrix {
        let n = self.family.len() as u64;
        let idx = match self.selection {
            Selection::RoundRobin => k % n,
            Selection::Seeded(seed) => splitmix64(seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15)) % n,
        };
        &self.family[idx as usize]
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma <= 0.5 {
        Ok(())
    } else {
        Err(Error::Config(format!("gamma must lie in (0, 0.5], got {gamma}")))
    }
}

/// Draws `family_size` matrices `[[1-w, w], [w', 1-w']]` with `w, w'` uniform
/// on `[gamma, 1 - gamma]`, and a seeded selection sequence.
pub fn make_weight_family(gamma: f64, family_size: usize, seed: u64) -> Result<WeightSchedule> {
    check_gamma(gamma)?;
    if family_size == 0 {
        return Err(Error::Config("family size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let family = (0..family_size)
        .map(|_| {
            let w: f64 = rng.gen_range(gamma..=1.0 - gamma);
            let w2: f64 = rng.gen_range(gamma..=1.0 - gamma);
            [[1.0 - w, w], [w2, 1.0 - w2]]
        })
        .collect();
    let selection = Selection::Seeded(rng.gen());
    WeightSchedule::new(family, gamma, selection)
}

/// Seed for one pair's generator, independent of the order pairs are run in.
pub fn pair_seed(global_seed: u64, buyer: usize, seller: usize) -> u64 {
    let tag = ((buyer as u64) << 32) ^ (seller as u64);
    splitmix64(splitmix64(global_seed) ^ splitmix64(tag.wrapping_add(0x632B_E59B_D9B4_E019)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub buyer_proposal: Proposal,
    pub seller_proposal: Proposal,
    /// Euclidean distance of the stacked proposals from the stacked tau split.
    pub dist_to_tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NegotiationState {
    pub buyer: usize,
    pub seller: usize,
    /// `[buyer's proposal, seller's proposal]`.
    pub proposals: [Proposal; 2],
    pub step: usize,
    pub tau: Proposal,
    pub trajectory: Vec<TrajectoryPoint>,
}

impl NegotiationState {
    pub fn new(bounds: &PairBounds, buyer_proposal: Proposal, seller_proposal: Proposal) -> Self {
        let mut state = Self {
            buyer: bounds.buyer,
            seller: bounds.seller,
            proposals: [buyer_proposal, seller_proposal],
            step: 0,
            tau: bounds.tau_pair(),
            trajectory: Vec::new(),
        };
        state.log();
        state
    }

    pub fn dist_to_tau(&self) -> f64 {
        stacked_distance(self.proposals, self.tau)
    }

    /// Sup-norm gap between the two proposals.
    pub fn disagreement(&self) -> f64 {
        let [x, y] = self.proposals;
        (x[0] - y[0]).abs().max((x[1] - y[1]).abs())
    }

    fn log(&mut self) {
        self.trajectory.push(TrajectoryPoint {
            step: self.step,
            buyer_proposal: self.proposals[0],
            seller_proposal: self.proposals[1],
            dist_to_tau: self.dist_to_tau(),
        });
    }
}

pub fn stacked_distance(proposals: [Proposal; 2], tau: Proposal) -> f64 {
    let d0 = sub(proposals[0], tau);
    let d1 = sub(proposals[1], tau);
    (d0[0] * d0[0] + d0[1] * d0[1] + d1[0] * d1[0] + d1[1] * d1[1]).sqrt()
}

/// One synchronous round: both agents average with the previous proposals,
/// then apply their own operator.
pub fn negotiation_step<B, S>(state: &mut NegotiationState, weights: &WeightMatrix, operators: (&B, &S))
where
    B: Paracontraction + ?Sized,
    S: Paracontraction + ?Sized,
{
    let [x, y] = state.proposals;
    let avg = |row: &[f64; 2]| [row[0] * x[0] + row[1] * y[0], row[0] * x[1] + row[1] * y[1]];
    let buyer_avg = avg(&weights[0]);
    let seller_avg = avg(&weights[1]);
    state.proposals = [operators.0.apply(buyer_avg), operators.1.apply(seller_avg)];
    state.step += 1;
    state.log();
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialProposals {
    /// Buyer opens at its buyer-optimal split, seller at its seller-optimal split.
    Extremes,
    Fixed { buyer: Proposal, seller: Proposal },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NegotiationConfig {
    pub tol: f64,
    pub max_iters: usize,
    pub initial: InitialProposals,
}

impl Default for NegotiationConfig {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iters: DEFAULT_MAX_ITERS,
            initial: InitialProposals::Extremes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NegotiationOutcome {
    pub buyer: usize,
    pub seller: usize,
    /// Agreed split; `None` when the round limit was hit first.
    pub agreed: Option<Proposal>,
    pub iterations: usize,
    pub final_proposals: [Proposal; 2],
    pub trajectory: Vec<TrajectoryPoint>,
}

impl NegotiationOutcome {
    pub fn converged(&self) -> bool {
        self.agreed.is_some()
    }
}

/// Runs rounds until both proposals agree with each other and with the tau
/// split to within `tol`, or until `max_iters` rounds have been played.
pub fn run_negotiation(bounds: &PairBounds, schedule: &WeightSchedule, config: &NegotiationConfig) -> Result<NegotiationOutcome> {
    let buyer_set = FavorableSet::for_buyer(bounds)?;
    let seller_set = FavorableSet::for_seller(bounds)?;
    run_negotiation_with(bounds, schedule, config, (&buyer_set, &seller_set))
}

/// Same as [`run_negotiation`] with caller-supplied operators.
pub fn run_negotiation_with<B, S>(
    bounds: &PairBounds,
    schedule: &WeightSchedule,
    config: &NegotiationConfig,
    operators: (&B, &S),
) -> Result<NegotiationOutcome>
where
    B: Paracontraction + ?Sized,
    S: Paracontraction + ?Sized,
{
    if bounds.value <= 0.0 {
        return Err(Error::Domain("cannot negotiate a pair with no value".into()));
    }
    if config.tol.is_nan() || config.tol <= 0.0 {
        return Err(Error::Config(format!("tolerance must be positive, got {}", config.tol)));
    }
    let (x0, y0) = match config.initial {
        InitialProposals::Extremes => (
            [bounds.buyer_utopia, bounds.seller_min],
            [bounds.buyer_min, bounds.seller_utopia],
        ),
        InitialProposals::Fixed { buyer, seller } => (buyer, seller),
    };
    let mut state = NegotiationState::new(bounds, x0, y0);
    let done = |s: &NegotiationState| s.disagreement() <= config.tol && s.dist_to_tau() <= config.tol;
    while !done(&state) && state.step < config.max_iters {
        let w = schedule.matrix_at(state.step as u64);
        negotiation_step(&mut state, w, operators);
    }
    let agreed = done(&state).then(|| {
        let [x, y] = state.proposals;
        [0.5 * (x[0] + y[0]), 0.5 * (x[1] + y[1])]
    });
    Ok(NegotiationOutcome {
        buyer: state.buyer,
        seller: state.seller,
        agreed,
        iterations: state.step,
        final_proposals: state.proposals,
        trajectory: state.trajectory,
    })
}

/// Result of sampling the strict-contraction inequality.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParacontractionCheck {
    pub samples: usize,
    /// First `(x, y)` with `|P(x) - y| >= |x - y|`, if any.
    pub counterexample: Option<(Proposal, Proposal)>,
}

impl ParacontractionCheck {
    pub fn holds(&self) -> bool {
        self.counterexample.is_none()
    }
}

/// Strict contraction test for one pair: `None` when `x` is already in the
/// set (no requirement there).
pub fn contracts_toward(set: &FavorableSet, x: Proposal, y: Proposal) -> Option<bool> {
    if set.distance(x) <= membership_tol(set) {
        return None;
    }
    let px = project_favorable(x, set);
    Some(norm(sub(px, y)) < norm(sub(x, y)))
}

fn membership_tol(set: &FavorableSet) -> f64 {
    1e-9 * (1.0 + set.value.abs())
}

/// Samples `sample_count` points outside the set and as many points inside,
/// and checks that projecting strictly reduces the distance to the inside point.
pub fn check_paracontraction(set: &FavorableSet, sample_count: usize, seed: u64) -> ParacontractionCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = set.value.abs().max(1.0);
    let [ex, ey] = set.endpoint();
    // unit direction along the ray, away from the endpoint
    let dir = match set.side {
        Side::Buyer => [std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2],
        Side::Seller => [-std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2],
    };
    let mut samples = 0;
    let mut attempts = 0;
    while samples < sample_count && attempts < 100 * sample_count.max(1) {
        attempts += 1;
        let x = [
            ex + rng.gen_range(-2.0 * scale..2.0 * scale),
            ey + rng.gen_range(-2.0 * scale..2.0 * scale),
        ];
        let t = rng.gen_range(0.0..3.0 * scale);
        let y = [ex + t * dir[0], ey + t * dir[1]];
        match contracts_toward(set, x, y) {
            None => continue,
            Some(true) => samples += 1,
            Some(false) => {
                return ParacontractionCheck {
                    samples: samples + 1,
                    counterexample: Some((x, y)),
                }
            }
        }
    }
    ParacontractionCheck {
        samples,
        counterexample: None,
    }
}

fn sub(a: Proposal, b: Proposal) -> Proposal {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: Proposal) -> f64 {
    a[0].hypot(a[1])
}
