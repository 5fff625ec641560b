use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "basenet")]
    BaseNet,
    #[serde(rename = "sim")]
    Sim,
    #[serde(rename = "simphy")]
    SimPhy,
    #[serde(rename = "regfair")]
    RegFair,
    #[serde(rename = "self-reg")]
    SelfReg,
    #[serde(rename = "simfair")]
    SimFair,
    #[serde(rename = "simfair-p")]
    SimFairP,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::BaseNet,
        Strategy::Sim,
        Strategy::SimPhy,
        Strategy::RegFair,
        Strategy::SelfReg,
        Strategy::SimFair,
        Strategy::SimFairP,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::BaseNet => "basenet",
            Strategy::Sim => "sim",
            Strategy::SimPhy => "simphy",
            Strategy::RegFair => "regfair",
            Strategy::SelfReg => "self-reg",
            Strategy::SimFair => "simfair",
            Strategy::SimFairP => "simfair-p",
        }
    }

    /// Name as printed in result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Strategy::BaseNet => "BaseNet",
            Strategy::Sim => "Sim",
            Strategy::SimPhy => "SimPhy",
            Strategy::RegFair => "RegFair",
            Strategy::SelfReg => "Self-Reg",
            Strategy::SimFair => "SimFair",
            Strategy::SimFairP => "SimFair-P",
        }
    }

    pub fn needs_chain(self) -> bool {
        matches!(
            self,
            Strategy::Sim | Strategy::SimPhy | Strategy::SimFair | Strategy::SimFairP
        )
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == key || st.display_name().to_ascii_lowercase() == key)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown strategy `{s}` (expected one of basenet, sim, simphy, regfair, self-reg, simfair, simfair-p)"
                ))
            })
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.display_name())
    }
}

/// Which labels the fairness term compares predictions against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FairnessTerm {
    None,
    /// True labels of the training rows.
    Train,
    /// The model's own test predictions from the end of the previous
    /// refresh period.
    Pseudo,
    /// Simulated labels of the test rows.
    Simulated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub strategy: Strategy,
    pub weights: LossWeights,
    pub fairness: FairnessTerm,
    pub consistency: bool,
    pub physics: bool,
    /// Fit the simulated training labels before the true ones.
    pub pretrain: bool,
    /// Epochs between pseudo-label refreshes.
    pub pseudo_refresh: usize,
}

impl StrategySpec {
    pub fn new(strategy: Strategy) -> Self {
        let (fairness, consistency, physics, pretrain) = match strategy {
            Strategy::BaseNet => (FairnessTerm::None, false, false, false),
            Strategy::Sim => (FairnessTerm::None, false, false, true),
            Strategy::SimPhy => (FairnessTerm::None, false, true, true),
            Strategy::RegFair => (FairnessTerm::Train, false, false, false),
            Strategy::SelfReg => (FairnessTerm::Pseudo, false, false, false),
            Strategy::SimFair => (FairnessTerm::Simulated, true, false, false),
            Strategy::SimFairP => (FairnessTerm::Simulated, true, true, false),
        };
        let on = |b: bool| if b { 1.0 } else { 0.0 };
        StrategySpec {
            strategy,
            weights: LossWeights {
                p: 1.0,
                f: on(fairness != FairnessTerm::None),
                c: on(consistency),
                phy: on(physics),
            },
            fairness,
            consistency,
            physics,
            pretrain,
            pseudo_refresh: 1,
        }
    }

    pub fn with_weights(mut self, weights: LossWeights) -> Self {
        self.weights = weights;
        self
    }

    pub fn needs_chain(&self) -> bool {
        self.pretrain
            || self.consistency
            || self.physics
            || self.fairness == FairnessTerm::Simulated
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.pseudo_refresh == 0 {
            return Err(Error::config(
                "pseudo-label refresh period must be at least one epoch",
            ));
        }
        let unused = [
            (self.fairness == FairnessTerm::None, self.weights.f, "f"),
            (!self.consistency, self.weights.c, "c"),
            (!self.physics, self.weights.phy, "phy"),
        ];
        if let Some((_, w, name)) = unused.iter().find(|(off, w, _)| *off && *w != 0.0) {
            return Err(Error::config(format!(
                "{} has no `{name}` term but its weight is {w}",
                self.strategy
            )));
        }
        Ok(())
    }
}
