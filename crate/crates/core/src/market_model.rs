//! Market participants, grid tariff, generation scenarios and the bilateral
//! contract value that feeds the assignment matrix.

use std::collections::HashSet;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance for currency and probability comparisons.
pub const TOLERANCE: f64 = 1e-9;

/// Prices at which the grid settles energy that does not clear in the market.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridTariff {
    /// Price the grid pays for injected energy (g_b), per kWh.
    pub buy_price: f64,
    /// Price the grid charges for consumed energy (g_s), per kWh.
    pub sell_price: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seller {
    pub id: String,
    /// Asking price per kWh.
    pub ask_price: f64,
    pub rated_power_kw: f64,
    /// Free-form tag such as `PV` or `ES`; reporting only.
    pub source_type: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Buyer {
    pub id: String,
    /// Energy needed in the trading slot, kWh.
    pub demand_kwh: f64,
    /// Base valuation per kWh before seller-specific preference scaling.
    pub base_price: f64,
    /// Preference factor per seller id. Missing sellers count as indifference (1.0).
    #[serde(default)]
    pub preferences: IndexMap<String, f64>,
}

impl Buyer {
    pub fn preference(&self, seller_id: &str) -> f64 {
        self.preferences.get(seller_id).copied().unwrap_or(1.0)
    }

    /// Bid per kWh offered to `seller_id`.
    pub fn bid_for(&self, seller_id: &str) -> f64 {
        self.preference(seller_id) * self.base_price
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub probability: f64,
    /// Forecast energy per seller id for the slot, kWh.
    pub generation: IndexMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScenarioSet {
    pub scenarios: Vec<Scenario>,
}

impl ScenarioSet {
    pub fn new(scenarios: Vec<Scenario>) -> Self {
        Self { scenarios }
    }

    /// A single certain scenario.
    pub fn deterministic<I, S>(generation: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        Self::new(vec![Scenario {
            probability: 1.0,
            generation: generation.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }])
    }
}

fn default_slot_hours() -> f64 {
    1.0
}

fn is_default_slot_hours(v: &f64) -> bool {
    *v == 1.0
}

/// Everything the market operator needs to clear one trading slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketInstance {
    pub tariff: GridTariff,
    pub buyers: Vec<Buyer>,
    pub sellers: Vec<Seller>,
    #[serde(rename = "scenarios")]
    pub scenario_set: ScenarioSet,
    #[serde(
        default = "default_slot_hours",
        skip_serializing_if = "is_default_slot_hours"
    )]
    pub slot_hours: f64,
}

impl MarketInstance {
    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    /// Parses and validates in one go.
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let instance = Self::from_path(path)?;
        let violations = validate_instance(&instance);
        if violations.is_empty() {
            Ok(instance)
        } else {
            Err(Error::Invalid(violations))
        }
    }

    pub fn buyer(&self, id: &str) -> Result<&Buyer> {
        self.buyers
            .iter()
            .find(|b| b.id == id)
            .ok_or_else(|| Error::UnknownAgent {
                side: "buyer",
                id: id.to_string(),
            })
    }

    pub fn seller(&self, id: &str) -> Result<&Seller> {
        self.sellers
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::UnknownAgent {
                side: "seller",
                id: id.to_string(),
            })
    }

    pub fn expected_generation(&self, seller_id: &str) -> Result<f64> {
        expected_generation(seller_id, &self.scenario_set)
    }

    /// Replaces buyer `id` by `copies` identical buyers with ids `id#1..=id#copies`.
    pub fn replicate_buyer(&self, id: &str, copies: usize) -> Result<Self> {
        let pos = self
            .buyers
            .iter()
            .position(|b| b.id == id)
            .ok_or_else(|| Error::UnknownAgent {
                side: "buyer",
                id: id.to_string(),
            })?;
        if copies == 0 {
            return Err(Error::Config("replication count must be at least 1".into()));
        }
        let mut out = self.clone();
        let original = out.buyers.remove(pos);
        let clones = (1..=copies).map(|k| Buyer {
            id: format!("{}#{k}", original.id),
            ..original.clone()
        });
        out.buyers.splice(pos..pos, clones);
        Ok(out)
    }

    /// Replaces seller `id` by `copies` identical sellers. Each clone inherits
    /// the original's forecasts and every buyer's preference for it.
    pub fn replicate_seller(&self, id: &str, copies: usize) -> Result<Self> {
        let pos = self
            .sellers
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| Error::UnknownAgent {
                side: "seller",
                id: id.to_string(),
            })?;
        if copies == 0 {
            return Err(Error::Config("replication count must be at least 1".into()));
        }
        let mut out = self.clone();
        let original = out.sellers.remove(pos);
        let ids: Vec<String> = (1..=copies).map(|k| format!("{}#{k}", original.id)).collect();
        out.sellers.splice(
            pos..pos,
            ids.iter().map(|cid| Seller {
                id: cid.clone(),
                ..original.clone()
            }),
        );
        for scenario in &mut out.scenario_set.scenarios {
            if let Some(g) = scenario.generation.shift_remove(&original.id) {
                for cid in &ids {
                    scenario.generation.insert(cid.clone(), g);
                }
            }
        }
        for buyer in &mut out.buyers {
            if let Some(alpha) = buyer.preferences.shift_remove(&original.id) {
                for cid in &ids {
                    buyer.preferences.insert(cid.clone(), alpha);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    NonFinite,
    TariffNonPositive,
    TariffOrder,
    EmptySide,
    DuplicateId,
    DemandNonPositive,
    RatedPowerNonPositive,
    PreferenceBelowOne,
    PreferenceUnknownSeller,
    BidNotAboveGridBuy,
    BidAboveGridSell,
    AskBelowGridBuy,
    AskNotBelowGridSell,
    NoScenarios,
    ProbabilityNonPositive,
    ProbabilitySum,
    GenerationMissing,
    GenerationNegative,
    GenerationAboveRating,
    GenerationUnknownSeller,
    SlotHoursNonPositive,
}

/// One violated invariant, tied to the agent (or section) that breaks it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub subject: String,
    pub rule: Rule,
    pub message: String,
}

impl Violation {
    fn new(subject: impl Into<String>, rule: Rule, message: impl Into<String>) -> Self {
        Self {
            subject: subject.into(),
            rule,
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.subject, self.message)
    }
}

/// Collects every violated invariant. An empty list means the instance is valid.
pub fn validate_instance(instance: &MarketInstance) -> Vec<Violation> {
    let mut out = Vec::new();
    let GridTariff {
        buy_price: gb,
        sell_price: gs,
    } = instance.tariff;

    if !gb.is_finite() || !gs.is_finite() {
        out.push(Violation::new("tariff", Rule::NonFinite, "grid prices must be finite"));
    } else {
        if gb <= 0.0 || gs <= 0.0 {
            out.push(Violation::new(
                "tariff",
                Rule::TariffNonPositive,
                format!("grid prices must be positive (buy {gb}, sell {gs})"),
            ));
        }
        if gb >= gs {
            out.push(Violation::new(
                "tariff",
                Rule::TariffOrder,
                format!("grid buy price {gb} must be below grid sell price {gs}"),
            ));
        }
    }
    if !(instance.slot_hours.is_finite() && instance.slot_hours > 0.0) {
        out.push(Violation::new(
            "slot_hours",
            Rule::SlotHoursNonPositive,
            format!("slot length must be positive, got {}", instance.slot_hours),
        ));
    }

    if instance.buyers.is_empty() {
        out.push(Violation::new("buyers", Rule::EmptySide, "at least one buyer is required"));
    }
    if instance.sellers.is_empty() {
        out.push(Violation::new("sellers", Rule::EmptySide, "at least one seller is required"));
    }
    check_unique(instance.buyers.iter().map(|b| b.id.as_str()), "buyer", &mut out);
    check_unique(instance.sellers.iter().map(|s| s.id.as_str()), "seller", &mut out);

    let seller_ids: HashSet<&str> = instance.sellers.iter().map(|s| s.id.as_str()).collect();

    for seller in &instance.sellers {
        let c = seller.ask_price;
        if !c.is_finite() || !seller.rated_power_kw.is_finite() {
            out.push(Violation::new(&seller.id, Rule::NonFinite, "ask and rated power must be finite"));
            continue;
        }
        if seller.rated_power_kw <= 0.0 {
            out.push(Violation::new(
                &seller.id,
                Rule::RatedPowerNonPositive,
                format!("rated power must be positive, got {}", seller.rated_power_kw),
            ));
        }
        if c < gb - TOLERANCE {
            out.push(Violation::new(
                &seller.id,
                Rule::AskBelowGridBuy,
                format!("ask must be at least grid buy price ({c} < {gb})"),
            ));
        }
        if c >= gs - TOLERANCE {
            out.push(Violation::new(
                &seller.id,
                Rule::AskNotBelowGridSell,
                format!("ask must be below grid sell price ({c} >= {gs})"),
            ));
        }
    }

    for buyer in &instance.buyers {
        if !buyer.demand_kwh.is_finite() || !buyer.base_price.is_finite() {
            out.push(Violation::new(&buyer.id, Rule::NonFinite, "demand and base price must be finite"));
            continue;
        }
        if buyer.demand_kwh <= 0.0 {
            out.push(Violation::new(
                &buyer.id,
                Rule::DemandNonPositive,
                format!("demand must be positive, got {}", buyer.demand_kwh),
            ));
        }
        for (sid, &alpha) in &buyer.preferences {
            if !seller_ids.contains(sid.as_str()) {
                out.push(Violation::new(
                    &buyer.id,
                    Rule::PreferenceUnknownSeller,
                    format!("preference refers to unknown seller `{sid}`"),
                ));
            }
            if !alpha.is_finite() || alpha < 1.0 - TOLERANCE {
                out.push(Violation::new(
                    &buyer.id,
                    Rule::PreferenceBelowOne,
                    format!("preference for `{sid}` must be >= 1, got {alpha}"),
                ));
            }
        }
        for seller in &instance.sellers {
            let bid = buyer.bid_for(&seller.id);
            if bid <= gb + TOLERANCE {
                out.push(Violation::new(
                    &buyer.id,
                    Rule::BidNotAboveGridBuy,
                    format!("bid must exceed grid buy price (bid {bid} to `{}` <= {gb})", seller.id),
                ));
            }
            if bid > gs + TOLERANCE {
                out.push(Violation::new(
                    &buyer.id,
                    Rule::BidAboveGridSell,
                    format!("bid must not exceed grid sell price (bid {bid} to `{}` > {gs})", seller.id),
                ));
            }
        }
    }

    validate_scenarios(instance, &seller_ids, &mut out);
    out
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>, side: &str, out: &mut Vec<Violation>) {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            out.push(Violation::new(
                id,
                Rule::DuplicateId,
                format!("duplicate {side} id `{id}`"),
            ));
        }
    }
}

fn validate_scenarios(instance: &MarketInstance, seller_ids: &HashSet<&str>, out: &mut Vec<Violation>) {
    let scenarios = &instance.scenario_set.scenarios;
    if scenarios.is_empty() {
        out.push(Violation::new("scenarios", Rule::NoScenarios, "at least one scenario is required"));
        return;
    }
    let mut total = 0.0;
    for (f, scenario) in scenarios.iter().enumerate() {
        let subject = format!("scenario[{f}]");
        let rho = scenario.probability;
        if !rho.is_finite() || rho <= 0.0 {
            out.push(Violation::new(
                &subject,
                Rule::ProbabilityNonPositive,
                format!("probability must be positive, got {rho}"),
            ));
        }
        total += rho;
        for seller in &instance.sellers {
            match scenario.generation.get(&seller.id) {
                None => out.push(Violation::new(
                    &subject,
                    Rule::GenerationMissing,
                    format!("no forecast for seller `{}`", seller.id),
                )),
                Some(&g) if !g.is_finite() || g < 0.0 => out.push(Violation::new(
                    &subject,
                    Rule::GenerationNegative,
                    format!("forecast for `{}` must be >= 0, got {g}", seller.id),
                )),
                Some(&g) => {
                    let cap = seller.rated_power_kw * instance.slot_hours;
                    if g > cap + TOLERANCE {
                        out.push(Violation::new(
                            &subject,
                            Rule::GenerationAboveRating,
                            format!(
                                "forecast {g} kWh for `{}` exceeds rated energy {cap} kWh",
                                seller.id
                            ),
                        ));
                    }
                }
            }
        }
        for sid in scenario.generation.keys() {
            if !seller_ids.contains(sid.as_str()) {
                out.push(Violation::new(
                    &subject,
                    Rule::GenerationUnknownSeller,
                    format!("forecast for unknown seller `{sid}`"),
                ));
            }
        }
    }
    if (total - 1.0).abs() > TOLERANCE {
        out.push(Violation::new(
            "scenarios",
            Rule::ProbabilitySum,
            format!("probabilities must sum to 1, got {total}"),
        ));
    }
}

/// Probability-weighted forecast energy of one seller.
pub fn expected_generation(seller_id: &str, scenario_set: &ScenarioSet) -> Result<f64> {
    let unknown = || Error::UnknownAgent {
        side: "seller",
        id: seller_id.to_string(),
    };
    if scenario_set.scenarios.is_empty() {
        return Err(unknown());
    }
    scenario_set.scenarios.iter().try_fold(0.0, |acc, s| {
        let g = s.generation.get(seller_id).ok_or_else(unknown)?;
        Ok(acc + s.probability * g)
    })
}

/// Per-unit surplus of a trade at bid `bid` against ask `ask`.
pub fn unit_value(bid: f64, ask: f64) -> f64 {
    (bid - ask).max(0.0)
}

/// Value of a bilateral contract together with the energy it moves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Contract {
    pub value: f64,
    pub quantity: f64,
    pub bid: f64,
    pub ask: f64,
}

/// Contract value under expected generation: surplus per kWh times the
/// traded quantity `min(demand, E[generation])`. Non-viable pairs are worth 0.
pub fn contract_value(buyer: &Buyer, seller: &Seller, scenario_set: &ScenarioSet) -> Result<Contract> {
    let expected = expected_generation(&seller.id, scenario_set)?;
    let quantity = buyer.demand_kwh.min(expected);
    let bid = buyer.bid_for(&seller.id);
    Ok(Contract {
        value: unit_value(bid, seller.ask_price) * quantity,
        quantity,
        bid,
        ask: seller.ask_price,
    })
}
