//! Bid pricing.
//!
//! The load-proportional policy charges
//!
//! ```text
//! ceil(base_rate * nodes * walltime * (1 + coefficient * load_ratio) * prod(feature multipliers))
//! load_ratio = committed_node_seconds / (capacity_nodes * horizon_s)
//! ```
//!
//! evaluated exactly over big integers. The flat policy drops the load term.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::domain::{JobSpec, Money, ValidationError};

/// Non-negative rational `p/q`, serialized as `[p, q]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "(u64, u64)", into = "(u64, u64)")]
pub struct Ratio {
    numer: u64,
    denom: u64,
}

impl Ratio {
    pub const ONE: Ratio = Ratio { numer: 1, denom: 1 };
    pub const ZERO: Ratio = Ratio { numer: 0, denom: 1 };

    pub fn new(numer: u64, denom: u64) -> Option<Self> {
        (denom != 0).then_some(Ratio { numer, denom })
    }

    pub fn numer(self) -> u64 {
        self.numer
    }

    pub fn denom(self) -> u64 {
        self.denom
    }

    pub fn at_least_one(self) -> bool {
        self.numer >= self.denom
    }
}

impl TryFrom<(u64, u64)> for Ratio {
    type Error = String;

    fn try_from((p, q): (u64, u64)) -> Result<Self, Self::Error> {
        Ratio::new(p, q).ok_or_else(|| "ratio denominator must be positive".to_owned())
    }
}

impl From<Ratio> for (u64, u64) {
    fn from(r: Ratio) -> Self {
        (r.numer, r.denom)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numer, self.denom)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    LoadProportional,
    Flat,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PricingPolicy {
    pub policy_id: PolicyKind,
    pub base_rate: Money,
    pub load_coefficient: Ratio,
    pub feature_multipliers: BTreeMap<String, Ratio>,
}

impl PricingPolicy {
    pub fn load_proportional(base_rate: Money) -> Self {
        PricingPolicy {
            policy_id: PolicyKind::LoadProportional,
            base_rate,
            load_coefficient: Ratio::ONE,
            feature_multipliers: BTreeMap::new(),
        }
    }

    /// Multipliers must be at least one and name advertised features only.
    pub fn validate(&self, capabilities: &BTreeSet<String>) -> Result<(), ValidationError> {
        if self.base_rate.is_zero() {
            return Err(ValidationError::new("base_rate", "must be at least 1"));
        }
        for (feature, m) in &self.feature_multipliers {
            if !capabilities.contains(feature) {
                return Err(ValidationError::new(
                    "feature_multipliers",
                    format!("{feature:?} is not an advertised capability"),
                ));
            }
            if !m.at_least_one() {
                return Err(ValidationError::new(
                    "feature_multipliers",
                    format!("multiplier {m} for {feature:?} is below 1"),
                ));
            }
        }
        Ok(())
    }

    /// Exact price for `spec` given the cluster's current load, or `None`
    /// if it does not fit in a Money value.
    pub fn price(
        &self,
        spec: &JobSpec,
        committed_node_seconds: u128,
        capacity_nodes: u32,
        horizon_s: u64,
    ) -> Option<Money> {
        let mut numer = BigUint::from(self.base_rate.amount)
            * BigUint::from(spec.nodes)
            * BigUint::from(spec.walltime_s);
        let mut denom = BigUint::one();

        if self.policy_id == PolicyKind::LoadProportional {
            // 1 + (p/q) * c / (cap * H) == (q * cap * H + p * c) / (q * cap * H)
            let window = BigUint::from(self.load_coefficient.denom)
                * BigUint::from(capacity_nodes)
                * BigUint::from(horizon_s);
            let load = BigUint::from(self.load_coefficient.numer)
                * BigUint::from(committed_node_seconds);
            numer *= &window + load;
            denom *= window;
        }

        for feature in &spec.required_features {
            if let Some(m) = self.feature_multipliers.get(feature) {
                numer *= BigUint::from(m.numer);
                denom *= BigUint::from(m.denom);
            }
        }

        if denom.is_zero() {
            return None;
        }
        let ceil = (numer + &denom - BigUint::one()) / denom;
        ceil.to_u64().map(Money::millicredits)
    }
}
