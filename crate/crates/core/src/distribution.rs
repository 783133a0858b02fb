use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which detector an outcome was recorded on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Signal,
    Idler,
    Probe,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Nothing registered (or, for number-resolving probes, no change).
    NoClick,
    Click { arm: Arm, mode: usize },
    /// Mode `mode` found with `n` photons, all other modes unchanged.
    Number { mode: usize, n: usize },
    Pixel(usize),
    /// Joint photon numbers of the measured modes.
    Photons(Vec<usize>),
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::NoClick => write!(f, "none"),
            Outcome::Click { arm, mode } => {
                let a = match arm {
                    Arm::Signal => "signal",
                    Arm::Idler => "idler",
                    Arm::Probe => "probe",
                };
                write!(f, "{a}:{mode}")
            }
            Outcome::Number { mode, n } => write!(f, "mode{mode}:n={n}"),
            Outcome::Pixel(j) => write!(f, "pixel:{j}"),
            Outcome::Photons(ns) => {
                let parts: Vec<String> = ns.iter().map(|n| n.to_string()).collect();
                write!(f, "n=({})", parts.join(","))
            }
        }
    }
}

pub const NORMALIZATION_TOL: f64 = 1e-10;

/// Discrete distribution over labelled detector outcomes.
///
/// `reference` marks the outcome carrying the residual probability (no click, or
/// probe unchanged). First-order click models are only accurate for the other
/// outcomes; see [`crate::fisher::FisherConvention`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountDistribution {
    pub outcomes: Vec<Outcome>,
    pub probabilities: Vec<f64>,
    pub parameters: Vec<String>,
    pub reference: Option<usize>,
    /// Probability mass lost outside the represented outcomes (truncation).
    #[serde(default)]
    pub truncated: f64,
}

impl CountDistribution {
    pub fn new(outcomes: Vec<Outcome>, probabilities: Vec<f64>, parameters: Vec<String>, reference: Option<usize>) -> Result<Self> {
        Self::with_truncation(outcomes, probabilities, parameters, reference, 0.0)
    }

    /// As [`CountDistribution::new`], with `truncated` mass allowed to be missing.
    pub fn with_truncation(
        outcomes: Vec<Outcome>,
        probabilities: Vec<f64>,
        parameters: Vec<String>,
        reference: Option<usize>,
        truncated: f64,
    ) -> Result<Self> {
        if outcomes.len() != probabilities.len() {
            return Err(Error::Dimension(format!(
                "{} outcomes but {} probabilities",
                outcomes.len(),
                probabilities.len()
            )));
        }
        if let Some(r) = reference {
            if r >= outcomes.len() {
                return Err(Error::Dimension("reference outcome out of range".into()));
            }
        }
        if let Some(p) = probabilities.iter().find(|p| !(**p >= 0.0)) {
            return Err(Error::Perturbative(format!("negative or undefined probability {p}")));
        }
        if !(0.0..=1.0).contains(&truncated) {
            return Err(Error::param("truncated", format!("{truncated} outside [0, 1]")));
        }
        let total: f64 = probabilities.iter().sum();
        if (total + truncated - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Numerical(format!("probabilities sum to {total}")));
        }
        Ok(CountDistribution { outcomes, probabilities, parameters, reference, truncated })
    }

    /// Click probabilities completed by a reference outcome placed first.
    pub fn with_reference(reference: Outcome, clicks: Vec<(Outcome, f64)>, parameters: &[&str]) -> Result<Self> {
        let total: f64 = clicks.iter().map(|c| c.1).sum();
        if !(total <= 1.0) {
            return Err(Error::Perturbative(format!("click probabilities sum to {total} > 1")));
        }
        let mut outcomes = vec![reference];
        let mut probabilities = vec![1.0 - total];
        for (o, p) in clicks {
            outcomes.push(o);
            probabilities.push(p);
        }
        Self::new(outcomes, probabilities, parameters.iter().map(|s| s.to_string()).collect(), Some(0))
    }

    /// Normalises non-negative weights; no reference outcome.
    pub fn from_weights(outcomes: Vec<Outcome>, weights: Vec<f64>, parameters: &[&str]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Numerical("weights have no mass".into()));
        }
        let p = weights.iter().map(|w| w / total).collect();
        Self::new(outcomes, p, parameters.iter().map(|s| s.to_string()).collect(), None)
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn probability(&self, outcome: &Outcome) -> f64 {
        self.outcomes.iter().position(|o| o == outcome).map_or(0.0, |i| self.probabilities[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Outcome, f64)> {
        self.outcomes.iter().zip(self.probabilities.iter().copied())
    }

    /// Total probability of the non-reference outcomes.
    pub fn click_probability(&self) -> f64 {
        self.probabilities
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != self.reference)
            .map(|(_, p)| p)
            .sum()
    }
}
