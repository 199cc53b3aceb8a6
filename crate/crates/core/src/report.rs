//! Metric tables and plot data computed from a completed result set.
//!
//! Values are held unrounded; tables show percentages with two decimals.
//! Output is a pure function of the result set and corpus, so regenerating a
//! report gives identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::QueryOutcome;
use crate::metrics::{
    average_row, correlate_abs_bias_pa, political_axis, predict, question_metrics,
    response_summary, variability, AverageRow, AxisScore, CorrelationResult, Prediction,
    QuestionMetrics, ResponseSummary, VariabilityResult,
};
use crate::orchestrator::{Condition, ResultEntry, ResultSet};
use crate::survey::AnswerMatrix;

pub const METRICS_COLUMNS: [&str; 8] = [
    "target_id", "n", "pa", "pa_se", "bias", "bias_se", "mean_p_yes", "sd_p_yes",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportOptions {
    /// Fail when a target lacks a leaning annotation instead of skipping the axis.
    pub require_axis: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub condition: Condition,
    /// `None` for pooled rows.
    pub variant: Option<usize>,
    #[serde(flatten)]
    pub metrics: QuestionMetrics,
    pub human_yes_mean: f64,
    pub majority_baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub condition: Condition,
    pub responses: ResponseSummary,
    pub average: Option<AverageRow>,
    pub mean_majority_baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariabilityRow {
    pub condition: Condition,
    pub result: VariabilityResult,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationRow {
    pub scope: String,
    pub n: usize,
    pub result: std::result::Result<CorrelationResult, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AxisSeries {
    pub condition: Condition,
    pub points: Vec<AxisScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenMass {
    pub token: String,
    pub mean_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenBars {
    pub condition: Condition,
    pub target_id: String,
    pub queries: usize,
    pub tokens: Vec<TokenMass>,
}

/// Everything a report contains, before serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub entries: usize,
    pub conditions: Vec<Condition>,
    /// Per condition: pooled per-target rows, then per-variant rows.
    pub rows: BTreeMap<Condition, Vec<MetricRow>>,
    pub summary: Vec<SummaryRow>,
    pub variability: Vec<VariabilityRow>,
    pub correlation: Vec<CorrelationRow>,
    pub axis: std::result::Result<Vec<AxisSeries>, String>,
    pub tokens: Vec<TokenBars>,
}

impl ReportBundle {
    /// The condition shown in `metrics.csv`.
    pub fn primary(&self) -> Condition {
        self.conditions[0]
    }

    pub fn pooled(&self, condition: Condition) -> Vec<&MetricRow> {
        self.rows
            .get(&condition)
            .map(|rows| rows.iter().filter(|r| r.variant.is_none()).collect())
            .unwrap_or_default()
    }
}

fn target_order(results: &ResultSet) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for e in &results.entries {
        if !out.contains(&e.target_id) {
            out.push(e.target_id.clone());
        }
    }
    out
}

fn prediction(e: &ResultEntry) -> Prediction {
    predict(e.outcome.mass())
}

/// Predictions and gold answers for one group of entries. Zero-shot answers
/// are broadcast to every respondent with a gold answer.
fn paired(
    condition: Condition,
    entries: &[&ResultEntry],
    matrix: &AnswerMatrix,
    target: &str,
) -> Result<(Vec<Prediction>, Vec<bool>)> {
    if condition == Condition::ZeroShot {
        let q = matrix.question_position(target)?;
        let gold: Vec<bool> = matrix
            .respondents_with_gold(target)?
            .into_iter()
            .filter_map(|r| matrix.answer_at(r, q).as_bool())
            .collect();
        let first = entries
            .first()
            .ok_or_else(|| Error::Metric(format!("no zero-shot result for {target}")))?;
        return Ok((vec![prediction(first); gold.len()], gold));
    }
    let mut preds = Vec::with_capacity(entries.len());
    let mut gold = Vec::with_capacity(entries.len());
    for e in entries {
        let g = e.gold.ok_or_else(|| {
            Error::Metric(format!("result {} has no gold answer", e.index))
        })?;
        preds.push(prediction(e));
        gold.push(g);
    }
    Ok((preds, gold))
}

pub fn compute_bundle(
    results: &ResultSet,
    matrix: &AnswerMatrix,
    options: &ReportOptions,
) -> Result<ReportBundle> {
    if results.entries.is_empty() {
        return Err(Error::NoResults);
    }
    let conditions = results.conditions();
    let targets = target_order(results);
    let mut rows = BTreeMap::new();
    let mut summary = Vec::new();
    let mut variability_rows = Vec::new();
    let mut tokens = Vec::new();

    for &condition in &conditions {
        let of: Vec<&ResultEntry> = results.of(condition).collect();
        let mut condition_rows = Vec::new();
        for target in &targets {
            let group: Vec<&ResultEntry> = of.iter().copied().filter(|e| &e.target_id == target).collect();
            if group.is_empty() {
                continue;
            }
            let yes_mean = matrix.human_yes_mean(target)?.mean;
            let majority = matrix.majority_baseline(target)?.accuracy;
            let row = |variant, entries: &[&ResultEntry]| -> Result<MetricRow> {
                let (preds, gold) = paired(condition, entries, matrix, target)?;
                Ok(MetricRow {
                    condition,
                    variant,
                    metrics: question_metrics(target, &preds, &gold)?,
                    human_yes_mean: yes_mean,
                    majority_baseline: majority,
                })
            };
            condition_rows.push(row(None, &group)?);

            let mut variants: BTreeMap<usize, Vec<&ResultEntry>> = BTreeMap::new();
            for e in &group {
                if let Some(v) = e.variant {
                    variants.entry(v).or_default().push(e);
                }
            }
            let mut biases = Vec::new();
            for (v, entries) in &variants {
                let r = row(Some(*v), entries)?;
                match r.metrics.bias {
                    Some(b) => biases.push(b),
                    None => log::warn!(
                        "{condition} {target} variant {v}: bias undefined, left out of variability"
                    ),
                }
                condition_rows.push(r);
            }
            if condition.has_variants() && !biases.is_empty() {
                variability_rows.push(VariabilityRow {
                    condition,
                    result: variability(target, biases)?,
                });
            }
            tokens.push(token_bars(condition, target, &group));
        }
        // pooled rows first, then variants, each in target order
        condition_rows.sort_by_key(|r| r.variant.map_or(0, |v| v + 1));
        let pooled: Vec<QuestionMetrics> = condition_rows
            .iter()
            .filter(|r| r.variant.is_none())
            .map(|r| r.metrics.clone())
            .collect();
        let majorities: Vec<f64> = condition_rows
            .iter()
            .filter(|r| r.variant.is_none())
            .map(|r| r.majority_baseline)
            .collect();
        let predictions: Vec<Prediction> = of.iter().map(|e| prediction(e)).collect();
        summary.push(SummaryRow {
            condition,
            responses: response_summary(&predictions),
            average: average_row(&pooled),
            mean_majority_baseline: majorities.iter().sum::<f64>() / majorities.len() as f64,
        });
        rows.insert(condition, condition_rows);
    }

    let mut correlation = Vec::new();
    let mut all_pairs = Vec::new();
    for &condition in &conditions {
        let pairs: Vec<(f64, f64)> = rows[&condition]
            .iter()
            .filter(|r| r.variant.is_none())
            .filter_map(|r| r.metrics.bias.map(|b| (b.abs(), r.metrics.pa)))
            .collect();
        all_pairs.extend_from_slice(&pairs);
        correlation.push(correlation_row(condition.as_str(), &pairs));
    }
    if conditions.len() > 1 {
        correlation.push(correlation_row("pooled", &all_pairs));
    }

    let axis = axis_series(&rows, &conditions, matrix, options)?;
    Ok(ReportBundle {
        entries: results.entries.len(),
        conditions,
        rows,
        summary,
        variability: variability_rows,
        correlation,
        axis,
        tokens,
    })
}

fn correlation_row(scope: &str, pairs: &[(f64, f64)]) -> CorrelationRow {
    CorrelationRow {
        scope: scope.to_string(),
        n: pairs.len(),
        result: correlate_abs_bias_pa(pairs, scope).map_err(|e| e.to_string()),
    }
}

fn axis_series(
    rows: &BTreeMap<Condition, Vec<MetricRow>>,
    conditions: &[Condition],
    matrix: &AnswerMatrix,
    options: &ReportOptions,
) -> Result<std::result::Result<Vec<AxisSeries>, String>> {
    let mut series = Vec::new();
    for &condition in conditions {
        let mut items = Vec::new();
        for r in rows[&condition].iter().filter(|r| r.variant.is_none()) {
            if let Some(b) = r.metrics.bias {
                items.push((matrix.question(&r.metrics.target_id)?, b, r.metrics.bias_se));
            }
        }
        match political_axis(&items) {
            Ok(points) => series.push(AxisSeries { condition, points }),
            Err(e @ Error::MissingLeaning(_)) if !options.require_axis => {
                return Ok(Err(e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Ok(series))
}

/// Mean probability of each token over a group's queries.
fn token_bars(condition: Condition, target: &str, group: &[&ResultEntry]) -> TokenBars {
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    for e in group {
        match &e.outcome {
            QueryOutcome::Distribution { distribution, .. } => {
                for t in distribution.entries() {
                    *sums.entry(t.token.clone()).or_default() += t.prob;
                }
            }
            QueryOutcome::ForcedPair { mass } => {
                *sums.entry("yes".into()).or_default() += mass.p_yes_raw;
                *sums.entry("no".into()).or_default() += mass.p_no_raw;
            }
        }
    }
    let n = group.len() as f64;
    let mut tokens: Vec<TokenMass> = sums
        .into_iter()
        .map(|(token, s)| TokenMass {
            token,
            mean_prob: s / n,
        })
        .collect();
    tokens.sort_by(|a, b| b.mean_prob.total_cmp(&a.mean_prob).then_with(|| a.token.cmp(&b.token)));
    TokenBars {
        condition,
        target_id: target.to_string(),
        queries: group.len(),
        tokens,
    }
}

/// Two decimals, without a negative zero.
fn fixed2(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn pct(v: f64) -> String {
    fixed2(v * 100.0)
}

fn opt_pct(v: Option<f64>) -> String {
    v.map(pct).unwrap_or_default()
}

fn md_pct(v: Option<f64>) -> String {
    v.map(pct).unwrap_or_else(|| "n/a".into())
}

fn metrics_csv(rows: &[&MetricRow], with_variant: bool) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = Vec::new();
    if with_variant {
        header.push("variant");
    }
    header.extend(METRICS_COLUMNS);
    w.write_record(&header)?;
    for r in rows {
        let m = &r.metrics;
        let mut rec = Vec::new();
        if with_variant {
            rec.push(r.variant.map(|v| v.to_string()).unwrap_or_default());
        }
        rec.extend([
            m.target_id.clone(),
            m.n.to_string(),
            pct(m.pa),
            pct(m.pa_se),
            opt_pct(m.bias),
            opt_pct(m.bias_se),
            opt_pct(m.mean_p_yes),
            opt_pct(m.sd_p_yes),
        ]);
        w.write_record(&rec)?;
    }
    w.into_inner()
        .map_err(|e| Error::Metric(format!("csv buffer: {e}")))
}

fn summary_csv(bundle: &ReportBundle) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "condition", "predictions", "mean_p_yes", "sd_p_yes", "yes", "no", "undefined",
        "mean_pa", "sd_pa", "mean_abs_bias", "sd_abs_bias", "majority_baseline",
    ])?;
    for s in &bundle.summary {
        let r = &s.responses;
        let a = s.average;
        w.write_record([
            s.condition.to_string(),
            r.total().to_string(),
            opt_pct(r.mean_p_yes),
            opt_pct(r.sd_p_yes),
            r.yes.to_string(),
            r.no.to_string(),
            r.undefined.to_string(),
            opt_pct(a.map(|a| a.mean_pa)),
            opt_pct(a.map(|a| a.sd_pa)),
            opt_pct(a.and_then(|a| a.mean_abs_bias)),
            opt_pct(a.and_then(|a| a.sd_abs_bias)),
            pct(s.mean_majority_baseline),
        ])?;
    }
    w.into_inner()
        .map_err(|e| Error::Metric(format!("csv buffer: {e}")))
}

fn variability_csv(bundle: &ReportBundle) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["condition", "target_id", "k", "std_bias", "centered_sd"])?;
    for v in &bundle.variability {
        w.write_record([
            v.condition.to_string(),
            v.result.target_id.clone(),
            v.result.k.to_string(),
            pct(v.result.std_bias),
            pct(v.result.centered_sd),
        ])?;
    }
    w.into_inner()
        .map_err(|e| Error::Metric(format!("csv buffer: {e}")))
}

fn correlation_csv(rows: &[CorrelationRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scope", "n", "r", "df", "t_statistic", "p_value", "status"])?;
    for c in rows {
        match &c.result {
            Ok(r) => w.write_record([
                c.scope.clone(),
                c.n.to_string(),
                format!("{:.4}", r.r),
                r.df.to_string(),
                format!("{:.4}", r.t_statistic),
                format!("{:.4e}", r.p_value),
                "ok".into(),
            ])?,
            Err(msg) => w.write_record([
                c.scope.clone(),
                c.n.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                msg.clone(),
            ])?,
        }
    }
    w.into_inner()
        .map_err(|e| Error::Metric(format!("csv buffer: {e}")))
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn axis_json(bundle: &ReportBundle) -> Result<Vec<u8>> {
    let value = match &bundle.axis {
        Ok(series) => serde_json::json!({ "series": series }),
        Err(reason) => serde_json::json!({ "series": [], "skipped": reason }),
    };
    json_bytes(&value)
}

#[derive(Serialize)]
struct MetricsJson<'a> {
    primary: Condition,
    rows: Vec<&'a MetricRow>,
}

fn report_md(bundle: &ReportBundle) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Questionnaire modeling report\n");
    let _ = writeln!(s, "Resolved queries: {}\n", bundle.entries);
    let _ = writeln!(
        s,
        "Values are percentages. PA counts undefined predictions as wrong; bias averages defined predictions only.\n"
    );
    for (condition, summary) in bundle.conditions.iter().zip(&bundle.summary) {
        let _ = writeln!(s, "## {condition}\n");
        let _ = writeln!(
            s,
            "| Target | n | PA | ±SE | Maj. | Bias | ±SE | Human yes | Mean p_yes | SD |"
        );
        let _ = writeln!(s, "|---|---:|---:|---:|---:|---:|---:|---:|---:|---:|");
        for r in bundle.pooled(*condition) {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
                m.target_id,
                m.n,
                pct(m.pa),
                pct(m.pa_se),
                pct(r.majority_baseline),
                md_pct(m.bias),
                md_pct(m.bias_se),
                pct(r.human_yes_mean),
                md_pct(m.mean_p_yes),
                md_pct(m.sd_p_yes),
            );
        }
        if let Some(a) = summary.average {
            let _ = writeln!(
                s,
                "| Average (abs. bias) | | {} | {} | {} | {} | {} | | | |",
                pct(a.mean_pa),
                pct(a.sd_pa),
                pct(summary.mean_majority_baseline),
                md_pct(a.mean_abs_bias),
                md_pct(a.sd_abs_bias),
            );
        }
        let _ = writeln!(s);
    }

    let _ = writeln!(s, "## Responses\n");
    let _ = writeln!(s, "| Condition | Mean p_yes | SD | yes:no:undefined |");
    let _ = writeln!(s, "|---|---:|---:|---|");
    for r in &bundle.summary {
        let x = &r.responses;
        let _ = writeln!(
            s,
            "| {} | {} | {} | {}:{}:{} |",
            r.condition,
            md_pct(x.mean_p_yes),
            md_pct(x.sd_p_yes),
            x.yes,
            x.no,
            x.undefined
        );
    }
    let _ = writeln!(s);

    if !bundle.variability.is_empty() {
        let _ = writeln!(s, "## Bias variability\n");
        let _ = writeln!(s, "Std_Bias is the root mean square of the bias over variants; the centered SD is shown for comparison.\n");
        let _ = writeln!(s, "| Condition | Target | k | Std_Bias | Centered SD |");
        let _ = writeln!(s, "|---|---|---:|---:|---:|");
        for v in &bundle.variability {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} |",
                v.condition,
                v.result.target_id,
                v.result.k,
                pct(v.result.std_bias),
                pct(v.result.centered_sd)
            );
        }
        let _ = writeln!(s);
    }

    let _ = writeln!(s, "## Correlation of absolute bias and PA\n");
    let _ = writeln!(s, "| Scope | n | r | t | df | p |");
    let _ = writeln!(s, "|---|---:|---:|---:|---:|---:|");
    for c in &bundle.correlation {
        match &c.result {
            Ok(r) => {
                let _ = writeln!(
                    s,
                    "| {} | {} | {:.2} | {:.2} | {} | {:.2e} |",
                    c.scope, c.n, r.r, r.t_statistic, r.df, r.p_value
                );
            }
            Err(msg) => {
                let _ = writeln!(s, "| {} | {} | {msg} | | | |", c.scope, c.n);
            }
        }
    }
    s
}

/// Writes all report files into `out_dir` and returns their paths.
pub fn write_bundle(bundle: &ReportBundle, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files: Vec<(String, Vec<u8>)> = vec![
        ("metrics.csv".into(), metrics_csv(&bundle.pooled(bundle.primary()), false)?),
        ("summary.csv".into(), summary_csv(bundle)?),
        ("variability.csv".into(), variability_csv(bundle)?),
        ("correlation.csv".into(), correlation_csv(&bundle.correlation)?),
        ("axis.json".into(), axis_json(bundle)?),
        ("token_distributions.json".into(), json_bytes(&bundle.tokens)?),
        ("report.md".into(), report_md(bundle).into_bytes()),
    ];
    let all_rows: Vec<&MetricRow> = bundle.rows.values().flatten().collect();
    files.push((
        "metrics.json".into(),
        json_bytes(&MetricsJson {
            primary: bundle.primary(),
            rows: all_rows,
        })?,
    ));
    for (condition, rows) in &bundle.rows {
        let refs: Vec<&MetricRow> = rows.iter().collect();
        files.push((format!("metrics_{condition}.csv"), metrics_csv(&refs, true)?));
    }
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = out_dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Computes and writes the full report.
pub fn emit_reports(
    results: &ResultSet,
    matrix: &AnswerMatrix,
    out_dir: &Path,
    options: &ReportOptions,
) -> Result<ReportBundle> {
    let bundle = compute_bundle(results, matrix, options)?;
    write_bundle(&bundle, out_dir)?;
    Ok(bundle)
}

/// Pools (|bias|, PA) pairs of one condition from several `metrics.json` files,
/// one per model, and correlates them.
pub fn correlate_reports(paths: &[PathBuf], condition: Condition) -> Result<CorrelationResult> {
    #[derive(Deserialize)]
    struct Rows {
        rows: Vec<MetricRow>,
    }
    let mut pairs = Vec::new();
    for path in paths {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rows: Rows = serde_json::from_str(&text)?;
        pairs.extend(
            rows.rows
                .iter()
                .filter(|r| r.condition == condition && r.variant.is_none())
                .filter_map(|r| r.metrics.bias.map(|b| (b.abs(), r.metrics.pa))),
        );
    }
    correlate_abs_bias_pa(&pairs, "pooled")
}
