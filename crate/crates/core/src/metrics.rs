//! Accuracy, bias, variability and correlation statistics.
//!
//! All reductions iterate in the order given (respondent order), so results
//! are bitwise reproducible for a fixed input order.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::gateway::YesNoMass;
use crate::survey::{Leaning, Question};

/// Predicted answer: -1 when both masses are zero, 0 for "no", 1 otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub p_yes_norm: Option<f64>,
    pub label: i8,
}

pub fn predict(mass: YesNoMass) -> Prediction {
    let YesNoMass { p_yes_raw, p_no_raw } = mass;
    if p_yes_raw == 0.0 && p_no_raw == 0.0 {
        return Prediction {
            p_yes_norm: None,
            label: -1,
        };
    }
    Prediction {
        p_yes_norm: Some(p_yes_raw / (p_yes_raw + p_no_raw)),
        label: if p_no_raw > p_yes_raw { 0 } else { 1 },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerRespondentPrediction {
    pub respondent_id: String,
    pub target_id: String,
    pub p_yes_raw: f64,
    pub p_no_raw: f64,
    pub p_yes_norm: Option<f64>,
    pub label: i8,
}

impl PerRespondentPrediction {
    pub fn new(respondent_id: &str, target_id: &str, mass: YesNoMass) -> Self {
        let p = predict(mass);
        PerRespondentPrediction {
            respondent_id: respondent_id.to_string(),
            target_id: target_id.to_string(),
            p_yes_raw: mass.p_yes_raw,
            p_no_raw: mass.p_no_raw,
            p_yes_norm: p.p_yes_norm,
            label: p.label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Accuracy {
    pub pa: f64,
    pub pa_se: f64,
    pub n: usize,
}

/// Share of predictions whose label equals the gold answer. Label -1 is
/// always wrong.
pub fn personalization_accuracy(labels: &[i8], gold: &[bool]) -> Result<Accuracy> {
    check_paired(labels.len(), gold.len())?;
    let n = labels.len();
    let correct = labels
        .iter()
        .zip(gold)
        .filter(|(l, g)| **l == i8::from(**g))
        .count();
    let pa = correct as f64 / n as f64;
    Ok(Accuracy {
        pa,
        pa_se: (pa * (1.0 - pa) / n as f64).sqrt(),
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BiasEstimate {
    pub bias: f64,
    /// Standard error of the paired differences `p_yes_norm_i - gold_i`.
    pub bias_se: f64,
    /// Predictions with a defined normalized probability.
    pub n: usize,
}

/// Mean normalized yes-probability minus mean gold answer, over respondents
/// whose prediction is defined.
pub fn bias(p_yes_norm: &[Option<f64>], gold: &[bool]) -> Result<BiasEstimate> {
    check_paired(p_yes_norm.len(), gold.len())?;
    let pairs: Vec<(f64, f64)> = p_yes_norm
        .iter()
        .zip(gold)
        .filter_map(|(p, g)| p.map(|p| (p, if *g { 1.0 } else { 0.0 })))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Metric(
            "no defined yes-probabilities; bias is undefined".into(),
        ));
    }
    let n = pairs.len() as f64;
    let mean_p = pairs.iter().map(|(p, _)| p).sum::<f64>() / n;
    let mean_g = pairs.iter().map(|(_, g)| g).sum::<f64>() / n;
    let diffs: Vec<f64> = pairs.iter().map(|(p, g)| p - g).collect();
    Ok(BiasEstimate {
        bias: mean_p - mean_g,
        bias_se: sample_sd(&diffs) / n.sqrt(),
        n: pairs.len(),
    })
}

/// Root mean square of per-realization bias scores about zero.
pub fn std_bias(biases: &[f64]) -> Result<f64> {
    if biases.is_empty() {
        return Err(Error::Metric("std_bias of an empty list".into()));
    }
    let k = biases.len() as f64;
    Ok((biases.iter().map(|b| b * b).sum::<f64>() / k).sqrt())
}

/// Population standard deviation of bias scores about their mean.
pub fn centered_sd(biases: &[f64]) -> Result<f64> {
    if biases.is_empty() {
        return Err(Error::Metric("centered SD of an empty list".into()));
    }
    let k = biases.len() as f64;
    let mean = biases.iter().sum::<f64>() / k;
    Ok((biases.iter().map(|b| (b - mean) * (b - mean)).sum::<f64>() / k).sqrt())
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
pub fn sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn check_paired(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Metric(format!(
            "{a} predictions but {b} gold answers"
        )));
    }
    if a == 0 {
        return Err(Error::Metric("no predictions (n = 0)".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResponseSummary {
    pub mean_p_yes: Option<f64>,
    pub sd_p_yes: Option<f64>,
    pub yes: usize,
    pub no: usize,
    pub undefined: usize,
}

impl ResponseSummary {
    pub fn total(&self) -> usize {
        self.yes + self.no + self.undefined
    }
}

/// Mean and SD of defined yes-probabilities, and label counts.
pub fn response_summary<'a>(preds: impl IntoIterator<Item = &'a Prediction>) -> ResponseSummary {
    let mut probs = Vec::new();
    let (mut yes, mut no, mut undefined) = (0, 0, 0);
    for p in preds {
        match p.label {
            1 => yes += 1,
            0 => no += 1,
            _ => undefined += 1,
        }
        if let Some(v) = p.p_yes_norm {
            probs.push(v);
        }
    }
    let (mean_p_yes, sd_p_yes) = if probs.is_empty() {
        (None, None)
    } else {
        (
            Some(probs.iter().sum::<f64>() / probs.len() as f64),
            Some(sample_sd(&probs)),
        )
    };
    ResponseSummary {
        mean_p_yes,
        sd_p_yes,
        yes,
        no,
        undefined,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionMetrics {
    pub target_id: String,
    pub n: usize,
    pub pa: f64,
    pub pa_se: f64,
    pub bias: Option<f64>,
    pub bias_se: Option<f64>,
    pub n_bias: usize,
    pub mean_p_yes: Option<f64>,
    pub sd_p_yes: Option<f64>,
}

/// All per-question statistics for predictions paired with gold answers.
pub fn question_metrics(target_id: &str, preds: &[Prediction], gold: &[bool]) -> Result<QuestionMetrics> {
    let labels: Vec<i8> = preds.iter().map(|p| p.label).collect();
    let acc = personalization_accuracy(&labels, gold)?;
    let norms: Vec<Option<f64>> = preds.iter().map(|p| p.p_yes_norm).collect();
    let b = bias(&norms, gold).ok();
    let summary = response_summary(preds);
    Ok(QuestionMetrics {
        target_id: target_id.to_string(),
        n: acc.n,
        pa: acc.pa,
        pa_se: acc.pa_se,
        bias: b.map(|b| b.bias),
        bias_se: b.map(|b| b.bias_se),
        n_bias: b.map_or(0, |b| b.n),
        mean_p_yes: summary.mean_p_yes,
        sd_p_yes: summary.sd_p_yes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AverageRow {
    pub mean_pa: f64,
    pub sd_pa: f64,
    pub mean_abs_bias: Option<f64>,
    pub sd_abs_bias: Option<f64>,
    pub targets: usize,
}

/// Averages across targets: mean PA and mean absolute bias, each with the SD across targets.
pub fn average_row(rows: &[QuestionMetrics]) -> Option<AverageRow> {
    if rows.is_empty() {
        return None;
    }
    let pas: Vec<f64> = rows.iter().map(|r| r.pa).collect();
    let abs: Vec<f64> = rows.iter().filter_map(|r| r.bias.map(f64::abs)).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Some(AverageRow {
        mean_pa: mean(&pas),
        sd_pa: sample_sd(&pas),
        mean_abs_bias: (!abs.is_empty()).then(|| mean(&abs)),
        sd_abs_bias: (!abs.is_empty()).then(|| sample_sd(&abs)),
        targets: rows.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariabilityResult {
    pub target_id: String,
    pub k: usize,
    pub biases: Vec<f64>,
    pub std_bias: f64,
    pub centered_sd: f64,
}

pub fn variability(target_id: &str, biases: Vec<f64>) -> Result<VariabilityResult> {
    Ok(VariabilityResult {
        target_id: target_id.to_string(),
        k: biases.len(),
        std_bias: std_bias(&biases)?,
        centered_sd: centered_sd(&biases)?,
        biases,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub scope: String,
    pub n: usize,
    pub r: f64,
    pub df: usize,
    pub t_statistic: f64,
    pub p_value: f64,
}

/// Pearson correlation coefficient from centered sums.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Metric("correlation inputs differ in length".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate(
            "zero variance in a correlation coordinate".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson r between absolute bias and PA with its two-sided t-test.
pub fn correlate_abs_bias_pa(pairs: &[(f64, f64)], scope: &str) -> Result<CorrelationResult> {
    if pairs.len() < 3 {
        return Err(Error::Metric(format!(
            "correlation needs at least 3 pairs, got {}",
            pairs.len()
        )));
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let r = pearson(&xs, &ys)?;
    let df = pairs.len() - 2;
    let (t, p) = t_test(r, df);
    Ok(CorrelationResult {
        scope: scope.to_string(),
        n: pairs.len(),
        r,
        df,
        t_statistic: t,
        p_value: p,
    })
}

/// t = r * sqrt(df / (1 - r^2)); perfect correlation maps to +/- f64::MAX with p = 0.
pub fn t_test(r: f64, df: usize) -> (f64, f64) {
    let denom = 1.0 - r * r;
    if denom <= 0.0 {
        return (f64::MAX.copysign(r), 0.0);
    }
    let t = r * (df as f64 / denom).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
    let p = 2.0 * dist.sf(t.abs());
    (t, p.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisScore {
    pub target_id: String,
    /// Positive = conservative, negative = liberal.
    pub score: f64,
    pub se: Option<f64>,
}

/// Signs bias scores by the leaning of a "yes" answer.
pub fn political_axis(items: &[(&Question, f64, Option<f64>)]) -> Result<Vec<AxisScore>> {
    items
        .iter()
        .map(|(q, bias, se)| {
            let sign = match q.leaning {
                Some(Leaning::ConservativeIfYes) => 1.0,
                Some(Leaning::LiberalIfYes) => -1.0,
                None => return Err(Error::MissingLeaning(q.id.clone())),
            };
            let score = sign * bias;
            Ok(AxisScore {
                target_id: q.id.clone(),
                score: if score == 0.0 { 0.0 } else { score },
                se: *se,
            })
        })
        .collect()
}
