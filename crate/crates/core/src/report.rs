//! End-to-end clearing pipeline, grid comparison and report files.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::Serialize;

use crate::assignment::AssignmentMatrix;
use crate::error::{Error, Result};
use crate::market_model::{validate_instance, MarketInstance};
use crate::negotiation::{
    make_weight_family, pair_seed, run_negotiation, NegotiationConfig, TrajectoryPoint, DEFAULT_FAMILY_SIZE,
    DEFAULT_GAMMA, DEFAULT_MAX_ITERS, DEFAULT_TOL,
};
use crate::solution::{AssignmentGame, PayoffAllocation, Provenance, WelfareSplit, DEFAULT_CORE_TOLERANCE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;

/// How far the pipeline goes; later stages include the earlier ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Clear,
    Negotiate,
    Report,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub stage: Stage,
    pub seed: u64,
    pub gamma: f64,
    pub family_size: usize,
    pub tol: f64,
    pub max_iters: usize,
    /// Restricts the grid comparison to one allocation; all of them when `None`.
    pub allocation: Option<Provenance>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Report,
            seed: 0,
            gamma: DEFAULT_GAMMA,
            family_size: DEFAULT_FAMILY_SIZE,
            tol: DEFAULT_TOL,
            max_iters: DEFAULT_MAX_ITERS,
            allocation: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentSide {
    Buyer,
    Seller,
}

impl AgentSide {
    fn as_str(self) -> &'static str {
        match self {
            AgentSide::Buyer => "buyer",
            AgentSide::Seller => "seller",
        }
    }
}

/// Market settlement versus settling everything with the grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentBaseline {
    pub agent: String,
    pub side: AgentSide,
    pub matched: bool,
    pub quantity: f64,
    pub contract_price: Option<f64>,
    /// Seller revenue or buyer cost when trading in the market.
    pub market: f64,
    /// Same quantity settled with the grid only.
    pub grid: f64,
    /// Revenue improvement (sellers) or cost reduction (buyers), percent.
    pub change_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridBaseline {
    pub provenance: Provenance,
    pub agents: Vec<AgentBaseline>,
    pub seller_average_pct: f64,
    pub buyer_average_pct: f64,
}

/// Compares each agent's market settlement under `allocation` with trading
/// only with the grid. Sellers sell leftover expected generation to the grid;
/// buyers cover leftover demand from it.
pub fn grid_baseline(instance: &MarketInstance, game: &AssignmentGame, allocation: &PayoffAllocation) -> Result<GridBaseline> {
    let gb = instance.tariff.buy_price;
    let gs = instance.tariff.sell_price;
    let prices = game.contract_prices(allocation)?;
    let matching = game.matching();

    let mut agents = Vec::with_capacity(instance.buyers.len() + instance.sellers.len());
    for (j, seller) in instance.sellers.iter().enumerate() {
        let expected = instance.expected_generation(&seller.id)?;
        let grid = gb * expected;
        let row = match matching.partner_of_seller(j) {
            Some(_) => {
                let cp = prices.iter().find(|p| p.seller == seller.id).expect("matched seller has a price");
                let market = cp.price * cp.quantity + gb * (expected - cp.quantity).max(0.0);
                AgentBaseline {
                    agent: seller.id.clone(),
                    side: AgentSide::Seller,
                    matched: true,
                    quantity: cp.quantity,
                    contract_price: Some(cp.price),
                    market,
                    grid,
                    change_pct: percent_change(market - grid, grid),
                }
            }
            None => unmatched(&seller.id, AgentSide::Seller, grid),
        };
        agents.push(row);
    }
    for (i, buyer) in instance.buyers.iter().enumerate() {
        let grid = gs * buyer.demand_kwh;
        let row = match matching.partner_of_buyer(i) {
            Some(_) => {
                let cp = prices.iter().find(|p| p.buyer == buyer.id).expect("matched buyer has a price");
                let market = cp.price * cp.quantity + gs * (buyer.demand_kwh - cp.quantity);
                AgentBaseline {
                    agent: buyer.id.clone(),
                    side: AgentSide::Buyer,
                    matched: true,
                    quantity: cp.quantity,
                    contract_price: Some(cp.price),
                    market,
                    grid,
                    change_pct: percent_change(grid - market, grid),
                }
            }
            None => unmatched(&buyer.id, AgentSide::Buyer, grid),
        };
        agents.push(row);
    }
    let average = |side: AgentSide| {
        let v: Vec<f64> = agents.iter().filter(|a| a.side == side).map(|a| a.change_pct).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(GridBaseline {
        provenance: allocation.provenance,
        seller_average_pct: average(AgentSide::Seller),
        buyer_average_pct: average(AgentSide::Buyer),
        agents,
    })
}

fn unmatched(id: &str, side: AgentSide, grid: f64) -> AgentBaseline {
    AgentBaseline {
        agent: id.to_string(),
        side,
        matched: false,
        quantity: 0.0,
        contract_price: None,
        market: grid,
        grid,
        change_pct: 0.0,
    }
}

fn percent_change(delta: f64, base: f64) -> f64 {
    if base > 0.0 {
        100.0 * delta / base
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchSummary {
    pub buyer: String,
    pub seller: String,
    pub value: f64,
    pub quantity_kwh: f64,
    pub bid: f64,
    pub ask: f64,
    /// Contract price per kWh under each allocation.
    pub prices: IndexMap<Provenance, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NegotiationSummary {
    pub buyer: String,
    pub seller: String,
    pub converged: bool,
    pub iterations: usize,
    #[serde(skip)]
    pub trajectory: Vec<TrajectoryPoint>,
}

impl NegotiationSummary {
    pub fn pair_id(&self) -> String {
        format!("{}:{}", self.buyer, self.seller)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WelfareRow {
    pub provenance: Provenance,
    pub buyer_total: f64,
    pub seller_total: f64,
    /// `None` when the market creates no welfare.
    pub split: Option<WelfareSplit>,
}

#[derive(Debug, Clone)]
pub struct MarketReport {
    pub matrix: AssignmentMatrix,
    pub grand_value: f64,
    pub matches: Vec<MatchSummary>,
    pub unmatched_buyers: Vec<String>,
    pub unmatched_sellers: Vec<String>,
    pub allocations: Vec<PayoffAllocation>,
    pub welfare: Vec<WelfareRow>,
    pub baselines: Vec<GridBaseline>,
    pub negotiations: Vec<NegotiationSummary>,
    pub notes: Vec<String>,
}

impl MarketReport {
    pub fn all_converged(&self) -> bool {
        self.negotiations.iter().all(|n| n.converged)
    }

    pub fn allocation(&self, provenance: Provenance) -> Option<&PayoffAllocation> {
        self.allocations.iter().find(|a| a.provenance == provenance)
    }
}

/// Clears the market and, depending on the stage, negotiates every matched
/// pair and compares the outcome with grid-only settlement.
pub fn build_report(instance: &MarketInstance, config: &PipelineConfig) -> Result<MarketReport> {
    let violations = validate_instance(instance);
    if !violations.is_empty() {
        return Err(Error::Invalid(violations));
    }
    let matrix = AssignmentMatrix::from_instance(instance)?;
    let game = AssignmentGame::new(matrix.clone())?;
    let mut notes = Vec::new();
    if game.matching().pairs.is_empty() {
        notes.push("no viable contracts: empty matching, total welfare is zero".to_string());
    }

    let (buyer_opt, seller_opt) = game.extreme_allocations()?;
    let tau = game.tau_value()?;
    let mut allocations = vec![buyer_opt, seller_opt, tau];

    let mut negotiations = Vec::new();
    if config.stage >= Stage::Negotiate {
        let neg_config = NegotiationConfig {
            tol: config.tol,
            max_iters: config.max_iters,
            ..Default::default()
        };
        let mut negotiated = PayoffAllocation::zeros(&game, Provenance::Negotiated);
        for bounds in game.all_pair_bounds()? {
            let seed = pair_seed(config.seed, bounds.buyer, bounds.seller);
            let schedule = make_weight_family(config.gamma, config.family_size, seed)?;
            let outcome = run_negotiation(&bounds, &schedule, &neg_config)?;
            if let Some([xb, xs]) = outcome.agreed {
                negotiated.buyers[bounds.buyer] = xb;
                negotiated.sellers[bounds.seller] = xs;
            }
            negotiations.push(NegotiationSummary {
                buyer: matrix.buyer_ids()[bounds.buyer].clone(),
                seller: matrix.seller_ids()[bounds.seller].clone(),
                converged: outcome.converged(),
                iterations: outcome.iterations,
                trajectory: outcome.trajectory,
            });
        }
        if negotiations.iter().all(|n| n.converged) {
            allocations.push(negotiated);
        } else {
            let failed: Vec<String> = negotiations.iter().filter(|n| !n.converged).map(|n| n.pair_id()).collect();
            notes.push(format!(
                "negotiation did not converge within {} rounds for {}; negotiated allocation omitted",
                config.max_iters,
                failed.join(", ")
            ));
        }
    }

    let mut matches = Vec::new();
    for &(i, j) in &game.matching().pairs {
        let mut prices = IndexMap::new();
        for alloc in &allocations {
            let cp = game.contract_prices(alloc)?;
            let price = cp
                .iter()
                .find(|p| p.buyer == matrix.buyer_ids()[i])
                .map(|p| p.price)
                .expect("every matched pair is priced");
            prices.insert(alloc.provenance, price);
        }
        matches.push(MatchSummary {
            buyer: matrix.buyer_ids()[i].clone(),
            seller: matrix.seller_ids()[j].clone(),
            value: matrix.value(i, j),
            quantity_kwh: matrix.quantity(i, j),
            bid: matrix.bid(i, j),
            ask: matrix.ask(j),
            prices,
        });
    }
    let unmatched_buyers = (0..matrix.num_buyers())
        .filter(|&i| game.matching().partner_of_buyer(i).is_none())
        .map(|i| matrix.buyer_ids()[i].clone())
        .collect();
    let unmatched_sellers = (0..matrix.num_sellers())
        .filter(|&j| game.matching().partner_of_seller(j).is_none())
        .map(|j| matrix.seller_ids()[j].clone())
        .collect();

    let welfare = allocations
        .iter()
        .map(|a| WelfareRow {
            provenance: a.provenance,
            buyer_total: a.buyer_total(),
            seller_total: a.seller_total(),
            split: game.welfare_split(a).ok(),
        })
        .collect();

    for alloc in &allocations {
        let check = game.is_core_member(alloc, core_tolerance(config))?;
        if !check.is_member() {
            notes.push(format!(
                "{} allocation is outside the core: {}",
                alloc.provenance,
                check.violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
            ));
        }
    }

    let mut baselines = Vec::new();
    if config.stage >= Stage::Report {
        for alloc in &allocations {
            if config.allocation.is_none_or(|p| p == alloc.provenance) {
                baselines.push(grid_baseline(instance, &game, alloc)?);
            }
        }
        if let Some(p) = config.allocation {
            if baselines.is_empty() {
                notes.push(format!("allocation {p} is not available; no grid comparison written"));
            }
        }
    }

    Ok(MarketReport {
        grand_value: game.grand_value(),
        matrix,
        matches,
        unmatched_buyers,
        unmatched_sellers,
        allocations,
        welfare,
        baselines,
        negotiations,
        notes,
    })
}

/// Negotiated payoffs sit within the run tolerance of the tau split, so the
/// core check for them is loosened accordingly.
fn core_tolerance(config: &PipelineConfig) -> f64 {
    DEFAULT_CORE_TOLERANCE.max(10.0 * config.tol)
}

/// Result of [`run_pipeline`]: the report, the files written and the exit code.
#[derive(Debug)]
pub struct PipelineOutcome {
    pub report: MarketReport,
    pub files: Vec<PathBuf>,
    pub exit_code: i32,
}

/// Loads, validates and clears the instance at `instance_path`, writing the
/// stage's output files into `out_dir`.
pub fn run_pipeline(instance_path: &Path, out_dir: &Path, config: &PipelineConfig) -> Result<PipelineOutcome> {
    let instance = MarketInstance::from_path(instance_path)?;
    let report = build_report(&instance, config)?;
    let files = write_outputs(&report, out_dir, config.stage)?;
    let exit_code = if report.all_converged() {
        EXIT_OK
    } else {
        EXIT_NOT_CONVERGED
    };
    Ok(PipelineOutcome {
        report,
        files,
        exit_code,
    })
}

#[derive(Serialize)]
struct MatchesFile<'a> {
    grand_value: f64,
    pairs: &'a [MatchSummary],
    unmatched_buyers: &'a [String],
    unmatched_sellers: &'a [String],
    negotiations: &'a [NegotiationSummary],
    notes: &'a [String],
}

pub fn write_outputs(report: &MarketReport, out_dir: &Path, stage: Stage) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();

    let path = out_dir.join("matrix.csv");
    fs::write(&path, report.matrix.to_csv())?;
    files.push(path);

    let path = out_dir.join("matches.json");
    let matches = MatchesFile {
        grand_value: report.grand_value,
        pairs: &report.matches,
        unmatched_buyers: &report.unmatched_buyers,
        unmatched_sellers: &report.unmatched_sellers,
        negotiations: &report.negotiations,
        notes: &report.notes,
    };
    write_json(&path, &matches)?;
    files.push(path);

    let path = out_dir.join("allocations.json");
    let allocs: IndexMap<Provenance, &PayoffAllocation> =
        report.allocations.iter().map(|a| (a.provenance, a)).collect();
    write_json(&path, &allocs)?;
    files.push(path);

    let path = out_dir.join("welfare.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["allocation", "buyer_total", "seller_total", "buyer_share_pct", "seller_share_pct"])?;
    for row in &report.welfare {
        let (b, s) = row
            .split
            .map_or((String::new(), String::new()), |x| (x.buyer_share.to_string(), x.seller_share.to_string()));
        w.write_record([
            row.provenance.as_str().to_string(),
            row.buyer_total.to_string(),
            row.seller_total.to_string(),
            b,
            s,
        ])?;
    }
    w.flush()?;
    files.push(path);

    if stage >= Stage::Negotiate {
        let path = out_dir.join("trajectory.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record([
            "step",
            "pair_id",
            "buyer_prop_b",
            "buyer_prop_s",
            "seller_prop_b",
            "seller_prop_s",
            "dist_to_tau",
        ])?;
        for n in &report.negotiations {
            let pair_id = n.pair_id();
            for p in &n.trajectory {
                w.write_record([
                    p.step.to_string(),
                    pair_id.clone(),
                    p.buyer_proposal[0].to_string(),
                    p.buyer_proposal[1].to_string(),
                    p.seller_proposal[0].to_string(),
                    p.seller_proposal[1].to_string(),
                    p.dist_to_tau.to_string(),
                ])?;
            }
        }
        w.flush()?;
        files.push(path);
    }

    if stage >= Stage::Report {
        let path = out_dir.join("baseline.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record([
            "allocation",
            "agent",
            "side",
            "matched",
            "quantity_kwh",
            "contract_price",
            "market",
            "grid",
            "change_pct",
        ])?;
        for b in &report.baselines {
            for a in &b.agents {
                w.write_record([
                    b.provenance.as_str().to_string(),
                    a.agent.clone(),
                    a.side.as_str().to_string(),
                    a.matched.to_string(),
                    a.quantity.to_string(),
                    a.contract_price.map(|p| p.to_string()).unwrap_or_default(),
                    a.market.to_string(),
                    a.grid.to_string(),
                    a.change_pct.to_string(),
                ])?;
            }
            for (side, avg) in [("seller", b.seller_average_pct), ("buyer", b.buyer_average_pct)] {
                w.write_record([
                    b.provenance.as_str(),
                    "average",
                    side,
                    "",
                    "",
                    "",
                    "",
                    "",
                    &avg.to_string(),
                ])?;
            }
        }
        w.flush()?;
        files.push(path);
    }
    Ok(files)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
