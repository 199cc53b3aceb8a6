//! Turns a run configuration into a manifest of queries and executes it.

mod config;
mod execute;
mod paraphrase;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::QuerySubject;
use crate::prompt::{
    apply_paraphrase, derive_ablation_specs, AblationKind, ContextSpec, PromptFactory,
    PromptFormat, RenderedPrompt,
};
use crate::seeding::{rng_for, sha256_hex};
use crate::survey::AnswerMatrix;

pub use config::{
    AblationConfig, BackendConfig, BackendKind, Condition, CorpusConfig, FormatConfig,
    ParaphraseConfig, RunConfig, StubConfig,
};
pub use execute::{
    execute, run, ExecuteOptions, FailedQuery, Remainder, ResultEntry, ResultSet, RunDir,
    RunOptions, RunStatus,
};
pub use paraphrase::{
    check_paraphrase_set, generate_paraphrases, load_paraphrase_file, paraphrase_user_prompt,
    statement_of, write_paraphrase_file, GeneratedSet, ParaphraseRequest, SetCheck,
    PARAPHRASE_SYSTEM_PROMPT,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub run_id: String,
    pub backend_id: String,
    pub format: PromptFormat,
    pub conditions: Vec<Condition>,
    pub targets: Vec<String>,
    pub seeds: BTreeMap<Condition, u64>,
    pub entries: usize,
    /// Respondents of the paraphrase study, when enabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paraphrase_subsample: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub condition: Condition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub respondent_id: Option<String>,
    pub target_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_digest: Option<String>,
    /// Paraphrase or ablation spec index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<bool>,
    /// Gold passed to subject-dependent backends: the respondent's answer,
    /// or the population yes-mean for respondent-independent prompts.
    pub subject_gold: f64,
    pub canonical_hash: String,
}

impl ManifestEntry {
    pub fn subject(&self) -> QuerySubject {
        QuerySubject {
            respondent_id: self.respondent_id.clone(),
            target_id: self.target_id.clone(),
            gold: self.subject_gold,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
}

impl RunManifest {
    /// Header line followed by one line per entry.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: ManifestHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Config("empty manifest".into()))?,
        )?;
        let entries = lines
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
        if entries.len() != header.entries {
            return Err(Error::Config(format!(
                "manifest lists {} entries, header says {}",
                entries.len(),
                header.entries
            )));
        }
        Ok(RunManifest { header, entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Entry counts per (condition, target) in manifest order of first appearance.
    pub fn counts(&self) -> Vec<(Condition, String, usize)> {
        let mut out: Vec<(Condition, String, usize)> = Vec::new();
        for e in &self.entries {
            match out
                .iter_mut()
                .find(|(c, t, _)| *c == e.condition && *t == e.target_id)
            {
                Some(slot) => slot.2 += 1,
                None => out.push((e.condition, e.target_id.clone(), 1)),
            }
        }
        out
    }
}

/// A manifest plus what is needed to re-render any of its prompts.
pub struct Plan {
    pub manifest: RunManifest,
    matrix: Arc<AnswerMatrix>,
    factory: PromptFactory,
    specs: BTreeMap<(Condition, usize), ContextSpec>,
    paraphrases: BTreeMap<String, Vec<String>>,
}

impl Plan {
    pub fn matrix(&self) -> &AnswerMatrix {
        &self.matrix
    }

    pub fn format(&self) -> &PromptFormat {
        &self.factory.format
    }

    pub fn spec(&self, condition: Condition, variant: Option<usize>) -> Option<&ContextSpec> {
        self.specs.get(&(condition, variant.unwrap_or(0)))
    }

    /// Rebuilds the prompt of an entry.
    pub fn render(&self, entry: &ManifestEntry) -> Result<RenderedPrompt> {
        if entry.condition == Condition::ZeroShot {
            let target = self.matrix.question(&entry.target_id)?;
            return self.factory.build_zero_shot(&target.text);
        }
        let respondent_id = entry.respondent_id.as_deref().ok_or_else(|| {
            Error::Config(format!("entry {} has no respondent", entry.index))
        })?;
        let r = self.matrix.respondent_position(respondent_id)?;
        let spec_key = match entry.condition {
            Condition::ParaphraseStudy => (Condition::Qm, 0),
            c => (c, entry.variant.unwrap_or(0)),
        };
        let spec = self
            .specs
            .get(&spec_key)
            .ok_or_else(|| Error::Config(format!("no context spec for entry {}", entry.index)))?;
        let prompt = self.factory.build_qm(&self.matrix, r, &entry.target_id, spec)?;
        if entry.condition != Condition::ParaphraseStudy {
            return Ok(prompt);
        }
        let text = entry
            .variant
            .and_then(|k| self.paraphrases.get(&entry.target_id)?.get(k))
            .ok_or_else(|| {
                Error::Config(format!("entry {} names a missing paraphrase", entry.index))
            })?;
        apply_paraphrase(&prompt, text)
    }
}

/// Respondents of the paraphrase study: `round(n / factor)` (at least one)
/// drawn without replacement, returned in corpus order.
pub fn subsample_respondents(n: usize, factor: usize, seed: u64) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let size = ((n as f64 / factor.max(1) as f64).round() as usize).clamp(1, n);
    let mut rng = rng_for(seed, &["paraphrase-subsample"]);
    let mut picked = sample(&mut rng, n, size).into_vec();
    picked.sort_unstable();
    picked
}

/// Enumerates every query of a run. A pure function of its inputs.
pub fn plan(
    config: &RunConfig,
    matrix: Arc<AnswerMatrix>,
    paraphrase_sets: BTreeMap<String, Vec<String>>,
) -> Result<Plan> {
    config.validate()?;
    let format = config.format.prompt_format();
    let factory = PromptFactory::new(format);
    let (backend_id, _) = config.backend.identity()?;
    let targets = config.target_ids(&matrix)?;
    let base = ContextSpec::full(matrix.in_context_ordinals());

    let mut specs = BTreeMap::new();
    specs.insert((Condition::Qm, 0), base.clone());
    if config.enabled(Condition::RandomContext) {
        let seed = config.seed(Condition::RandomContext)?;
        specs.insert((Condition::RandomContext, 0), base.clone().with_random_answers(seed));
    }
    let ablations = [
        (
            Condition::PermutationAblation,
            AblationKind::Permutation {
                count: config.ablation.permutation_count,
                same_last: config.ablation.permutation_same_last,
            },
        ),
        (
            Condition::LengthAblation,
            AblationKind::Truncation {
                fractions: config.ablation.truncation_fractions.clone(),
                both_last_variants: config.ablation.both_last_variants,
            },
        ),
    ];
    for (condition, kind) in ablations {
        if config.enabled(condition) {
            let derived = derive_ablation_specs(&base, &kind, config.seed(condition)?)?;
            for (v, spec) in derived.into_iter().enumerate() {
                specs.insert((condition, v), spec);
            }
        }
    }

    let template = &config.paraphrase.template;
    let paraphrases: BTreeMap<String, Vec<String>> = paraphrase_sets
        .into_iter()
        .map(|(t, set)| {
            let framed = set
                .iter()
                .map(|p| template.replace("{paraphrase}", p))
                .collect();
            (t, framed)
        })
        .collect();

    let mut header = ManifestHeader {
        run_id: String::new(),
        backend_id,
        format,
        conditions: Condition::ALL
            .into_iter()
            .filter(|c| config.enabled(*c))
            .collect(),
        targets: targets.clone(),
        seeds: config
            .seeds
            .iter()
            .filter(|(c, _)| config.enabled(**c))
            .map(|(c, s)| (*c, *s))
            .collect(),
        entries: 0,
        paraphrase_subsample: None,
    };
    let mut plan = Plan {
        manifest: RunManifest {
            header: header.clone(),
            entries: Vec::new(),
        },
        matrix: matrix.clone(),
        factory,
        specs,
        paraphrases,
    };

    let mut entries = Vec::new();
    let mut push = |plan: &Plan, mut entry: ManifestEntry| -> Result<()> {
        entry.index = entries.len();
        entry.canonical_hash = plan.render(&entry)?.canonical_hash().to_string();
        entries.push(entry);
        Ok(())
    };
    let subsample = if config.enabled(Condition::ParaphraseStudy) {
        let picked = subsample_respondents(
            matrix.respondents().len(),
            config.paraphrase.subsample_factor,
            config.seed(Condition::ParaphraseStudy)?,
        );
        header.paraphrase_subsample =
            Some(picked.iter().map(|&r| matrix.respondents()[r].id.clone()).collect());
        picked
    } else {
        Vec::new()
    };

    for condition in header.conditions.clone() {
        for target in &targets {
            let with_gold = matrix.respondents_with_gold(target)?;
            match condition {
                Condition::ZeroShot => {
                    let mean = matrix.human_yes_mean(target)?.mean;
                    push(&plan, entry(condition, None, target, None, None, None, mean))?;
                }
                Condition::Qm | Condition::RandomContext => {
                    let digest = plan.specs[&(condition, 0)].digest();
                    for &r in &with_gold {
                        let (id, gold) = respondent_gold(&matrix, r, target)?;
                        push(
                            &plan,
                            entry(condition, Some(id), target, Some(&digest), None, Some(gold), 0.0),
                        )?;
                    }
                }
                Condition::ParaphraseStudy => {
                    let set_len = plan
                        .paraphrases
                        .get(target)
                        .map(Vec::len)
                        .ok_or_else(|| {
                            Error::Config(format!(
                                "paraphrase condition without paraphrase file for target {target}"
                            ))
                        })?;
                    let digest = plan.specs[&(Condition::Qm, 0)].digest();
                    let eligible: Vec<usize> = subsample
                        .iter()
                        .copied()
                        .filter(|r| with_gold.contains(r))
                        .collect();
                    for k in 0..set_len {
                        for &r in &eligible {
                            let (id, gold) = respondent_gold(&matrix, r, target)?;
                            push(
                                &plan,
                                entry(condition, Some(id), target, Some(&digest), Some(k), Some(gold), 0.0),
                            )?;
                        }
                    }
                }
                Condition::PermutationAblation | Condition::LengthAblation => {
                    let variants: Vec<(usize, String)> = plan
                        .specs
                        .range((condition, 0)..=(condition, usize::MAX))
                        .map(|((_, v), s)| (*v, s.digest()))
                        .collect();
                    for (v, digest) in variants {
                        for &r in &with_gold {
                            let (id, gold) = respondent_gold(&matrix, r, target)?;
                            push(
                                &plan,
                                entry(condition, Some(id), target, Some(&digest), Some(v), Some(gold), 0.0),
                            )?;
                        }
                    }
                }
            }
        }
    }
    if let Some(picked) = &header.paraphrase_subsample {
        let per_target: usize = targets
            .iter()
            .map(|t| plan.paraphrases.get(t).map_or(0, Vec::len))
            .sum();
        log::info!(
            "paraphrase study: {} respondents (round(N/{})), {} target-paraphrase pairs; {} queries at most",
            picked.len(),
            config.paraphrase.subsample_factor,
            per_target,
            per_target * picked.len()
        );
    }

    header.entries = entries.len();
    let mut id_input = serde_json::to_vec(&header)?;
    for e in &entries {
        id_input.extend_from_slice(e.canonical_hash.as_bytes());
        id_input.extend_from_slice(e.condition.as_str().as_bytes());
    }
    header.run_id = sha256_hex(&id_input)[..16].to_string();
    plan.manifest = RunManifest { header, entries };
    Ok(plan)
}

fn respondent_gold(matrix: &AnswerMatrix, r: usize, target: &str) -> Result<(String, bool)> {
    let q = matrix.question_position(target)?;
    let gold = matrix
        .answer_at(r, q)
        .as_bool()
        .ok_or_else(|| Error::NoGoldAnswers(target.to_string()))?;
    Ok((matrix.respondents()[r].id.clone(), gold))
}

fn entry(
    condition: Condition,
    respondent_id: Option<String>,
    target: &str,
    digest: Option<&str>,
    variant: Option<usize>,
    gold: Option<bool>,
    mean: f64,
) -> ManifestEntry {
    ManifestEntry {
        index: 0,
        condition,
        respondent_id,
        target_id: target.to_string(),
        context_digest: digest.map(str::to_string),
        variant,
        gold,
        subject_gold: match gold {
            Some(g) => f64::from(u8::from(g)),
            None => mean,
        },
        canonical_hash: String::new(),
    }
}

/// Loads corpus and paraphrases named by the config and plans the run.
pub fn plan_from_config(config: &RunConfig) -> Result<Plan> {
    config.validate()?;
    let (matrix, _) = config.load_corpus()?;
    let targets = config.target_ids(&matrix)?;
    let paraphrases = config.load_paraphrases(&targets)?;
    plan(config, Arc::new(matrix), paraphrases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survey::{ingest_reader, CorpusSchema, Question, QuestionKind};

    pub(crate) fn toy(n: usize) -> AnswerMatrix {
        let mut questions = Vec::new();
        for i in 0..4 {
            questions.push(Question {
                id: format!("I{i}"),
                ordinal: i,
                text: format!("Issue {i}?"),
                kind: QuestionKind::Issue,
                leaning: None,
                scale: None,
            });
        }
        for j in 0..2 {
            questions.push(Question {
                id: format!("T{j}"),
                ordinal: 4 + j,
                text: format!("Attitude {j}"),
                kind: QuestionKind::Attitude,
                leaning: None,
                scale: None,
            });
        }
        let mut csv = String::from("respondent_id,I0,I1,I2,I3,T0,T1\n");
        for r in 0..n {
            let t1 = if r == 0 { "4".to_string() } else { ((r % 7) + 1).to_string() };
            csv.push_str(&format!(
                "r{r},{},{},1,4,{},{t1}\n",
                (r % 4) + 1,
                ((r / 2) % 4) + 1,
                ((r * 3) % 7) + 1
            ));
        }
        let schema = CorpusSchema {
            elected_column: None,
            metadata_columns: vec![],
            ..Default::default()
        };
        ingest_reader(csv.as_bytes(), questions, &schema).unwrap().0
    }

    fn config(conditions: &str, seeds: &str) -> RunConfig {
        let text = format!(
            r#"
conditions = {conditions}
[corpus]
matrix = "unused.csv"
questions = "unused.json"
[backend]
kind = "synthetic"
synthetic = {{ fidelity = 1.0, base_rate = 0.0 }}
[seeds]
{seeds}
[paraphrase]
dir = "p"
"#
        );
        RunConfig::from_toml_str(&text, ".").unwrap()
    }

    #[test]
    fn qm_entries_follow_gold_availability() {
        let m = Arc::new(toy(20));
        let gold_t0 = m.respondents_with_gold("T0").unwrap().len();
        let gold_t1 = m.respondents_with_gold("T1").unwrap().len();
        let p = plan(&config(r#"["qm", "zero_shot"]"#, "qm = 1\nzero_shot = 2"), m, BTreeMap::new())
            .unwrap();
        let counts = p.manifest.counts();
        assert_eq!(
            counts,
            vec![
                (Condition::Qm, "T0".into(), gold_t0),
                (Condition::Qm, "T1".into(), gold_t1),
                (Condition::ZeroShot, "T0".into(), 1),
                (Condition::ZeroShot, "T1".into(), 1),
            ]
        );
        for (i, e) in p.manifest.entries.iter().enumerate() {
            assert_eq!(e.index, i);
            assert_eq!(p.render(e).unwrap().canonical_hash(), e.canonical_hash);
        }
    }

    #[test]
    fn plan_is_pure() {
        let c = config(
            r#"["qm", "random_context", "permutation_ablation", "length_ablation"]"#,
            "qm = 1\nrandom_context = 2\npermutation_ablation = 3\nlength_ablation = 4",
        );
        let a = plan(&c, Arc::new(toy(12)), BTreeMap::new()).unwrap();
        let b = plan(&c, Arc::new(toy(12)), BTreeMap::new()).unwrap();
        assert_eq!(a.manifest.to_jsonl().unwrap(), b.manifest.to_jsonl().unwrap());
        let back = RunManifest::from_jsonl(&a.manifest.to_jsonl().unwrap()).unwrap();
        assert_eq!(back, a.manifest);
        let variants: std::collections::BTreeSet<_> = a
            .manifest
            .entries
            .iter()
            .filter(|e| e.condition == Condition::LengthAblation)
            .map(|e| e.variant.unwrap())
            .collect();
        assert_eq!(variants.len(), 6);
    }

    #[test]
    fn paraphrase_entries_use_fixed_subsample() {
        let m = Arc::new(toy(30));
        let mut sets = BTreeMap::new();
        sets.insert("T0".to_string(), vec!["p one".to_string(), "p two".to_string()]);
        sets.insert("T1".to_string(), vec!["p three".to_string()]);
        let p = plan(&config(r#"["paraphrase_study"]"#, "paraphrase_study = 9"), m.clone(), sets)
            .unwrap();
        let picked = p.manifest.header.paraphrase_subsample.clone().unwrap();
        assert_eq!(picked.len(), 3);
        let gold = |t: &str| {
            picked
                .iter()
                .filter(|id| m.answer(id, t).unwrap().as_bool().is_some())
                .count()
        };
        let n = p.manifest.entries.len();
        assert_eq!(n, 2 * gold("T0") + gold("T1"));
        let e = &p.manifest.entries[0];
        assert!(p.render(e).unwrap().target_text().contains("p one"));
    }

    #[test]
    fn paraphrase_study_without_sets_fails() {
        let err = plan(
            &config(r#"["paraphrase_study"]"#, "paraphrase_study = 9"),
            Arc::new(toy(10)),
            BTreeMap::new(),
        )
        .err()
        .unwrap();
        assert!(err.to_string().contains("paraphrase"), "{err}");
    }

    #[test]
    fn subsample_sizes() {
        assert_eq!(subsample_respondents(192, 10, 1).len(), 19);
        assert_eq!(subsample_respondents(5, 10, 1).len(), 1);
        assert_eq!(subsample_respondents(0, 10, 1).len(), 0);
        let s = subsample_respondents(192, 10, 1);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, subsample_respondents(192, 10, 1));
    }
}
