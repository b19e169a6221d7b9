//! Nuisance model-specification scenarios.
//!
//! Each nuisance model is flagged either correct (fit on the data-generating
//! basis) or deliberately misspecified. Misspecified binary models are
//! intercept-only logistics; misspecified conditional means are least squares
//! without intercept on exponentially transformed covariates.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// Specification flag for one nuisance model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelSpec {
    #[default]
    Correct,
    /// Intercept-only fit.
    InterceptOnly,
    /// Least squares / logistic without intercept on exp-transformed
    /// baseline covariates.
    NoInterceptExp,
    /// Treatment-arm terms removed: one fit pooled across arms (binary
    /// models conditioned on an arm; falls back to intercept-only where no
    /// arm conditioning exists).
    PooledArms,
}

impl ModelSpec {
    pub fn is_correct(self) -> bool {
        self == ModelSpec::Correct
    }

    pub fn pooled(self) -> bool {
        self == ModelSpec::PooledArms
    }
}

/// Per-nuisance specification flags. `phi1`/`phi2` govern both factors of
/// the joint propensity-censoring model for the corresponding stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ScenarioSpec {
    pub phi1: ModelSpec,
    pub p1: ModelSpec,
    pub phi2: ModelSpec,
    pub p2: ModelSpec,
    pub m_p2: ModelSpec,
    pub mu2: ModelSpec,
    pub m_mu2: ModelSpec,
}

impl ScenarioSpec {
    /// M1: all nuisance models correctly specified.
    pub fn m1() -> Self {
        ScenarioSpec::default()
    }

    /// M2: p2 and m_p2 misspecified.
    pub fn m2() -> Self {
        ScenarioSpec {
            p2: ModelSpec::InterceptOnly,
            m_p2: ModelSpec::NoInterceptExp,
            ..Default::default()
        }
    }

    /// M3: phi2 and m_p2 misspecified.
    pub fn m3() -> Self {
        ScenarioSpec {
            phi2: ModelSpec::InterceptOnly,
            m_p2: ModelSpec::NoInterceptExp,
            ..Default::default()
        }
    }

    /// M4: mu2 misspecified.
    pub fn m4() -> Self {
        ScenarioSpec {
            mu2: ModelSpec::NoInterceptExp,
            ..Default::default()
        }
    }

    /// M5: mu2 and m_mu2 misspecified.
    pub fn m5() -> Self {
        ScenarioSpec {
            mu2: ModelSpec::NoInterceptExp,
            m_mu2: ModelSpec::NoInterceptExp,
            ..Default::default()
        }
    }

    /// M6: phi1, phi2 and p1 misspecified (outside the consistency region).
    /// The arm terms are removed: the built-in processes have nearly flat
    /// stage-1 logits, so intercept-only misspecification would be almost
    /// correct specification, while pooling across arms distorts the
    /// control-arm survival model materially.
    pub fn m6() -> Self {
        ScenarioSpec {
            phi1: ModelSpec::PooledArms,
            phi2: ModelSpec::PooledArms,
            p1: ModelSpec::PooledArms,
            ..Default::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_uppercase().as_str() {
            "M1" => Ok(Self::m1()),
            "M2" => Ok(Self::m2()),
            "M3" => Ok(Self::m3()),
            "M4" => Ok(Self::m4()),
            "M5" => Ok(Self::m5()),
            "M6" => Ok(Self::m6()),
            other => Err(Error::InvalidConfig(format!(
                "unknown scenario `{other}` (expected M1..M6)"
            ))),
        }
    }

    pub fn all_presets() -> [(&'static str, ScenarioSpec); 6] {
        [
            ("M1", Self::m1()),
            ("M2", Self::m2()),
            ("M3", Self::m3()),
            ("M4", Self::m4()),
            ("M5", Self::m5()),
            ("M6", Self::m6()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_their_definitions() {
        let m6 = ScenarioSpec::preset("m6").unwrap();
        assert!(!m6.phi1.is_correct());
        assert!(!m6.phi2.is_correct());
        assert!(!m6.p1.is_correct());
        assert!(m6.p2.is_correct() && m6.m_p2.is_correct());
        assert!(ScenarioSpec::preset("M7").is_err());
    }
}
