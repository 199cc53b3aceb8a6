//! Synthetic backend whose yes-probability is a known function of the gold answer.
//!
//! `p_yes = clamp(fidelity * gold + (1 - fidelity) * base_rate + noise)`, with
//! noise drawn from a normal distribution seeded by (respondent, target). The
//! prompt text is ignored, so paraphrases cannot move the output.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{
    Backend, BackendFailure, BackendResult, QueryRequest, TokenDistribution, TopK, YesNoMass,
};
use crate::seeding::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    /// Weight on the gold answer, in [0, 1].
    pub fidelity: f64,
    /// Yes-probability assigned to the non-gold share, in [0, 1].
    pub base_rate: f64,
    /// Noise standard deviation.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl OracleSpec {
    pub fn faithful() -> Self {
        OracleSpec {
            fidelity: 1.0,
            base_rate: 0.0,
            noise: 0.0,
            seed: 0,
        }
    }

    pub fn constant_no() -> Self {
        OracleSpec {
            fidelity: 0.0,
            base_rate: 0.0,
            noise: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.fidelity) || !unit(self.base_rate) {
            return Err(Error::Config(format!(
                "oracle fidelity {} and base rate {} must lie in [0, 1]",
                self.fidelity, self.base_rate
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("oracle noise {} must be >= 0", self.noise)));
        }
        Ok(())
    }
}

/// Yes/no mass for one (respondent, target); `gold` is the respondent's answer
/// in {0, 1}, or the population yes-mean for respondent-independent prompts.
pub fn oracle_mass(spec: &OracleSpec, respondent_id: Option<&str>, target_id: &str, gold: f64) -> YesNoMass {
    let mut p = spec.fidelity * gold + (1.0 - spec.fidelity) * spec.base_rate;
    if spec.noise > 0.0 {
        let mut rng = rng_for(spec.seed, &["oracle", respondent_id.unwrap_or("*"), target_id]);
        let normal = Normal::new(0.0, spec.noise).expect("validated noise");
        p += normal.sample(&mut rng);
    }
    let p = p.clamp(0.0, 1.0);
    YesNoMass::new(p, 1.0 - p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpectedMetrics {
    pub pa: f64,
    pub bias: f64,
}

/// Closed-form PA and bias for a noiseless oracle on a question with yes-mean `m_yes`.
///
/// Every respondent with gold 1 gets `p1 = fidelity + (1 - fidelity) * base_rate`
/// and every respondent with gold 0 gets `p0 = (1 - fidelity) * base_rate`; both
/// already lie in [0, 1]. So the mean prediction is
/// `m_yes * p1 + (1 - m_yes) * p0` and
/// `bias = (1 - fidelity) * (base_rate - m_yes)`.
/// A label is 1 unless `1 - p > p`, so gold-1 respondents are right iff
/// `p1 >= 1 - p1` and gold-0 respondents are right iff `1 - p0 > p0`:
/// `pa = m_yes * [p1 >= 1 - p1] + (1 - m_yes) * [1 - p0 > p0]`.
pub fn expected_metrics(spec: &OracleSpec, m_yes: f64) -> Result<ExpectedMetrics> {
    spec.validate()?;
    if spec.noise > 0.0 {
        return Err(Error::Config(
            "closed forms need noise = 0; use Monte Carlo bounds instead".into(),
        ));
    }
    let p1 = oracle_mass(spec, None, "", 1.0).p_yes_raw;
    let p0 = oracle_mass(spec, None, "", 0.0).p_yes_raw;
    let yes_right = if 1.0 - p1 > p1 { 0.0 } else { 1.0 };
    let no_right = if 1.0 - p0 > p0 { 1.0 } else { 0.0 };
    Ok(ExpectedMetrics {
        pa: m_yes * yes_right + (1.0 - m_yes) * no_right,
        bias: (1.0 - spec.fidelity) * (spec.base_rate - m_yes),
    })
}

/// The oracle as a backend. Its answers depend on the query subject.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    id: String,
    spec: OracleSpec,
}

impl SyntheticBackend {
    pub fn new(spec: OracleSpec) -> Result<Self> {
        spec.validate()?;
        Ok(SyntheticBackend {
            id: format!(
                "synthetic(fidelity={:?},base_rate={:?},noise={:?},seed={})",
                spec.fidelity, spec.base_rate, spec.noise, spec.seed
            ),
            spec,
        })
    }

    pub fn spec(&self) -> &OracleSpec {
        &self.spec
    }

    fn mass(&self, request: &QueryRequest<'_>) -> BackendResult<YesNoMass> {
        let subject = request
            .subject
            .ok_or_else(|| BackendFailure::fatal("synthetic backend needs a query subject"))?;
        Ok(oracle_mass(
            &self.spec,
            subject.respondent_id.as_deref(),
            &subject.target_id,
            subject.gold,
        ))
    }
}

impl Backend for SyntheticBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn subject_dependent(&self) -> bool {
        true
    }

    fn next_token(&self, request: &QueryRequest<'_>) -> BackendResult<TopK> {
        let mass = self.mass(request)?;
        let entries = [("yes", mass.p_yes_raw), ("no", mass.p_no_raw)]
            .into_iter()
            .filter(|(_, p)| *p > 0.0)
            .map(|(t, p)| (t.to_string(), p))
            .collect();
        Ok(TopK {
            distribution: TokenDistribution::new(entries, request.prompt.decoding().top_k)?,
            converted: false,
        })
    }

    fn forced_pair(&self, request: &QueryRequest<'_>) -> BackendResult<YesNoMass> {
        self.mass(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(fidelity: f64, base_rate: f64) -> OracleSpec {
        OracleSpec {
            fidelity,
            base_rate,
            noise: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn mass_examples() {
        assert_eq!(oracle_mass(&OracleSpec::faithful(), Some("r"), "t", 1.0), YesNoMass::new(1.0, 0.0));
        assert_eq!(oracle_mass(&OracleSpec::constant_no(), Some("r"), "t", 1.0), YesNoMass::new(0.0, 1.0));
        assert_eq!(oracle_mass(&spec(0.5, 0.5), Some("r"), "t", 1.0), YesNoMass::new(0.75, 0.25));
    }

    #[test]
    fn noise_is_keyed_and_clamped() {
        let s = OracleSpec {
            noise: 0.3,
            seed: 9,
            ..spec(0.5, 0.5)
        };
        let a = oracle_mass(&s, Some("r1"), "t", 1.0);
        assert_eq!(a, oracle_mass(&s, Some("r1"), "t", 1.0));
        assert_ne!(a, oracle_mass(&s, Some("r2"), "t", 1.0));
        for i in 0..200 {
            let m = oracle_mass(&OracleSpec { noise: 5.0, ..s }, Some(&i.to_string()), "t", 1.0);
            assert!((0.0..=1.0).contains(&m.p_yes_raw));
        }
    }

    #[test]
    fn closed_forms() {
        let e = expected_metrics(&OracleSpec::faithful(), 0.37).unwrap();
        assert_eq!((e.pa, e.bias), (1.0, 0.0));
        let e = expected_metrics(&OracleSpec::constant_no(), 0.299).unwrap();
        assert!((e.bias + 0.299).abs() < 1e-15);
        assert!((e.pa - 0.701).abs() < 1e-15);
        // ties resolve to "yes", so everyone is predicted yes
        let e = expected_metrics(&spec(0.0, 0.5), 0.3).unwrap();
        assert!((e.pa - 0.3).abs() < 1e-15);
        assert!((e.bias - 0.2).abs() < 1e-15);
        let noisy = OracleSpec { noise: 0.1, ..spec(0.5, 0.5) };
        assert!(expected_metrics(&noisy, 0.5).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(SyntheticBackend::new(spec(1.5, 0.0)).is_err());
        assert!(SyntheticBackend::new(OracleSpec { noise: -1.0, ..spec(0.5, 0.5) }).is_err());
    }
}
