use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// OMOP clinical domain of a medical entity or concept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Domain {
    Condition,
    Drug,
    Procedure,
    Measurement,
    Observation,
    Device,
    Visit,
}

impl Domain {
    pub const ALL: [Domain; 7] = [
        Domain::Condition,
        Domain::Drug,
        Domain::Procedure,
        Domain::Measurement,
        Domain::Observation,
        Domain::Device,
        Domain::Visit,
    ];

    /// Uppercase label used when masking entities in text, e.g. `CONDITION`.
    pub fn label(self) -> &'static str {
        match self {
            Domain::Condition => "CONDITION",
            Domain::Drug => "DRUG",
            Domain::Procedure => "PROCEDURE",
            Domain::Measurement => "MEASUREMENT",
            Domain::Observation => "OBSERVATION",
            Domain::Device => "DEVICE",
            Domain::Visit => "VISIT",
        }
    }

    /// Lowercase form used inside `[domain@term]` placeholders.
    pub fn surface(self) -> &'static str {
        match self {
            Domain::Condition => "condition",
            Domain::Drug => "drug",
            Domain::Procedure => "procedure",
            Domain::Measurement => "measurement",
            Domain::Observation => "observation",
            Domain::Device => "device",
            Domain::Visit => "visit",
        }
    }

    /// Maps an OMOP `domain_id` value (`Condition`, `Drug`, ...) to a domain.
    pub fn from_omop_domain_id(s: &str) -> Option<Domain> {
        s.trim().parse().ok()
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown domain `{0}`")]
pub struct UnknownDomain(pub String);

impl FromStr for Domain {
    type Err = UnknownDomain;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        Domain::ALL
            .into_iter()
            .find(|d| d.surface() == lower)
            .ok_or_else(|| UnknownDomain(s.to_string()))
    }
}
