//! TOML run configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{
    Backend, OpenAiBackend, OpenAiConfig, ReplayBackend, RetryPolicy, StubBackend, TextGenerator,
    YesNoMass,
};
use crate::oracle::{OracleSpec, SyntheticBackend};
use crate::prompt::{DecodingParams, PromptFormat, QueryMode, RenderMode, TemplateId};
use crate::seeding::derive_seed;
use crate::survey::{ingest_corpus, AnswerMatrix, CorpusSchema, IngestReport, QuestionKind};

use super::paraphrase::load_paraphrase_file;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Qm,
    ZeroShot,
    RandomContext,
    ParaphraseStudy,
    PermutationAblation,
    LengthAblation,
}

impl Condition {
    /// Canonical order; manifests enumerate conditions in this order.
    pub const ALL: [Condition; 6] = [
        Condition::Qm,
        Condition::ZeroShot,
        Condition::RandomContext,
        Condition::ParaphraseStudy,
        Condition::PermutationAblation,
        Condition::LengthAblation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Qm => "qm",
            Condition::ZeroShot => "zero_shot",
            Condition::RandomContext => "random_context",
            Condition::ParaphraseStudy => "paraphrase_study",
            Condition::PermutationAblation => "permutation_ablation",
            Condition::LengthAblation => "length_ablation",
        }
    }

    /// Conditions whose entries differ by a variant index.
    pub fn has_variants(self) -> bool {
        matches!(
            self,
            Condition::ParaphraseStudy | Condition::PermutationAblation | Condition::LengthAblation
        )
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown condition {s}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub matrix: PathBuf,
    pub questions: PathBuf,
    #[serde(default)]
    pub schema: CorpusSchema,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Openai,
    /// Cache only; keyed like the backend described by the other section.
    Replay,
    Synthetic,
    Stub,
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "openai" => Ok(BackendKind::Openai),
            "replay" => Ok(BackendKind::Replay),
            "synthetic" => Ok(BackendKind::Synthetic),
            "stub" => Ok(BackendKind::Stub),
            other => Err(Error::Config(format!("unknown backend kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubConfig {
    #[serde(default)]
    pub distribution: Vec<(String, f64)>,
    /// Forced-pair answer as `[p_yes, p_no]`.
    #[serde(default)]
    pub forced: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub openai: Option<OpenAiConfig>,
    #[serde(default)]
    pub synthetic: Option<OracleSpec>,
    #[serde(default)]
    pub stub: Option<StubConfig>,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl BackendConfig {
    /// Identity the cache is keyed on, and whether answers depend on the subject.
    pub fn identity(&self) -> Result<(String, bool)> {
        match self.kind {
            BackendKind::Replay => {
                let mut found = Vec::new();
                if self.openai.is_some() {
                    found.push(BackendKind::Openai);
                }
                if self.synthetic.is_some() {
                    found.push(BackendKind::Synthetic);
                }
                if self.stub.is_some() {
                    found.push(BackendKind::Stub);
                }
                match found.as_slice() {
                    [kind] => self.identity_of(*kind),
                    [] => Err(Error::Config(
                        "replay backend needs the section of the recorded backend".into(),
                    )),
                    _ => Err(Error::Config(
                        "replay backend is ambiguous: several backend sections present".into(),
                    )),
                }
            }
            kind => self.identity_of(kind),
        }
    }

    fn identity_of(&self, kind: BackendKind) -> Result<(String, bool)> {
        match kind {
            BackendKind::Openai => Ok((format!("openai:{}", self.openai_config()?.model), false)),
            BackendKind::Synthetic => {
                let backend = SyntheticBackend::new(self.oracle_spec()?)?;
                Ok((backend.id().to_string(), true))
            }
            BackendKind::Stub => Ok(("stub".into(), false)),
            BackendKind::Replay => unreachable!("replay resolves to a recorded kind"),
        }
    }

    fn openai_config(&self) -> Result<&OpenAiConfig> {
        self.openai
            .as_ref()
            .ok_or_else(|| Error::Config("backend kind openai needs a [backend.openai] table".into()))
    }

    fn oracle_spec(&self) -> Result<OracleSpec> {
        self.synthetic.ok_or_else(|| {
            Error::Config("backend kind synthetic needs a [backend.synthetic] table".into())
        })
    }

    pub fn build(&self) -> Result<Arc<dyn Backend>> {
        let (id, dependent) = self.identity()?;
        Ok(match self.kind {
            BackendKind::Openai => Arc::new(OpenAiBackend::new(id, self.openai_config()?.clone())),
            BackendKind::Synthetic => Arc::new(SyntheticBackend::new(self.oracle_spec()?)?),
            BackendKind::Stub => {
                let stub = self.stub.clone().unwrap_or_default();
                let [y, n] = stub.forced.unwrap_or([0.0, 0.0]);
                Arc::new(
                    StubBackend::new(id)
                        .with_distribution(stub.distribution)
                        .with_forced(YesNoMass::new(y, n)),
                )
            }
            BackendKind::Replay => {
                Arc::new(ReplayBackend::new(id).with_subject_dependence(dependent))
            }
        })
    }

    /// Text generator for paraphrase creation.
    pub fn build_generator(&self) -> Result<Arc<dyn TextGenerator>> {
        let (id, _) = self.identity()?;
        match self.kind {
            BackendKind::Openai => Ok(Arc::new(OpenAiBackend::new(id, self.openai_config()?.clone()))),
            BackendKind::Replay => Ok(Arc::new(ReplayBackend::new(id))),
            kind => Err(Error::Config(format!(
                "backend kind {kind:?} cannot generate text"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FormatConfig {
    pub mode: RenderMode,
    pub template_id: Option<TemplateId>,
    pub temperature: f64,
    pub top_k: usize,
    pub query_mode: QueryMode,
}

impl Default for FormatConfig {
    fn default() -> Self {
        let d = DecodingParams::default();
        FormatConfig {
            mode: RenderMode::ChatMessages,
            template_id: None,
            temperature: d.temperature,
            top_k: d.top_k,
            query_mode: d.mode,
        }
    }
}

impl FormatConfig {
    pub fn prompt_format(&self) -> PromptFormat {
        PromptFormat {
            mode: self.mode,
            template_id: self.template_id,
            decoding: DecodingParams {
                temperature: self.temperature,
                top_k: self.top_k,
                mode: self.query_mode,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParaphraseConfig {
    /// Directory holding `<target_id>.txt`, one paraphrase per line.
    pub dir: Option<PathBuf>,
    pub subsample_factor: usize,
    /// Target text built from a paraphrase; `{paraphrase}` is replaced.
    pub template: String,
    /// Paraphrases per target when generating.
    pub count: usize,
}

impl Default for ParaphraseConfig {
    fn default() -> Self {
        ParaphraseConfig {
            dir: None,
            subsample_factor: 10,
            template: "{paraphrase}".into(),
            count: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub permutation_count: usize,
    pub permutation_same_last: usize,
    pub truncation_fractions: Vec<f64>,
    pub both_last_variants: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            permutation_count: 6,
            permutation_same_last: 3,
            truncation_fractions: vec![0.25, 0.5, 0.75],
            both_last_variants: true,
        }
    }
}

fn default_parallelism() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub backend: BackendConfig,
    #[serde(default)]
    pub format: FormatConfig,
    pub conditions: Vec<Condition>,
    /// Target question ids; all attitude questions when absent.
    #[serde(default)]
    pub targets: Option<Vec<String>>,
    #[serde(default)]
    pub seeds: BTreeMap<Condition, u64>,
    #[serde(default)]
    pub paraphrase: ParaphraseConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))?;
        config.base_dir = base_dir.into();
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, base)
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn enabled(&self, condition: Condition) -> bool {
        self.conditions.contains(&condition)
    }

    pub fn seed(&self, condition: Condition) -> Result<u64> {
        self.seeds
            .get(&condition)
            .copied()
            .ok_or_else(|| Error::Config(format!("condition {condition} has no seed")))
    }

    /// Replaces every condition seed with one derived from `master`.
    pub fn override_seed(&mut self, master: u64) {
        for &c in &self.conditions {
            self.seeds.insert(c, derive_seed(master, &["condition", c.as_str()]));
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conditions.is_empty() {
            return Err(Error::Config("no conditions enabled".into()));
        }
        for &c in &self.conditions {
            self.seed(c)?;
        }
        if matches!(&self.targets, Some(t) if t.is_empty()) {
            return Err(Error::Config("targets must not be empty".into()));
        }
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        if self.paraphrase.subsample_factor == 0 {
            return Err(Error::Config("subsample factor must be at least 1".into()));
        }
        if self.enabled(Condition::ParaphraseStudy) && self.paraphrase.dir.is_none() {
            return Err(Error::Config(
                "paraphrase condition without paraphrase files: set paraphrase.dir".into(),
            ));
        }
        self.format.prompt_format().validate()?;
        self.backend.identity()?;
        Ok(())
    }

    pub fn load_corpus(&self) -> Result<(AnswerMatrix, IngestReport)> {
        ingest_corpus(
            self.resolve_path(&self.corpus.matrix),
            self.resolve_path(&self.corpus.questions),
            &self.corpus.schema,
        )
    }

    /// Target ids in configured order, checked against the corpus.
    pub fn target_ids(&self, matrix: &AnswerMatrix) -> Result<Vec<String>> {
        let ids: Vec<String> = match &self.targets {
            Some(t) => t.clone(),
            None => matrix.attitude_questions().map(|q| q.id.clone()).collect(),
        };
        if ids.is_empty() {
            return Err(Error::Config("corpus has no attitude questions to target".into()));
        }
        for id in &ids {
            if matrix.question(id)?.kind != QuestionKind::Attitude {
                return Err(Error::Config(format!("target {id} is not an attitude question")));
            }
        }
        Ok(ids)
    }

    /// Paraphrase sets per target; empty unless the paraphrase study is enabled.
    pub fn load_paraphrases(&self, targets: &[String]) -> Result<BTreeMap<String, Vec<String>>> {
        let mut sets = BTreeMap::new();
        if !self.enabled(Condition::ParaphraseStudy) {
            return Ok(sets);
        }
        let dir = self.paraphrase.dir.as_ref().ok_or_else(|| {
            Error::Config("paraphrase condition without paraphrase files: set paraphrase.dir".into())
        })?;
        let dir = self.resolve_path(dir);
        for t in targets {
            let path = dir.join(format!("{t}.txt"));
            if !path.exists() {
                return Err(Error::Config(format!(
                    "paraphrase condition without paraphrase file for target {t} ({})",
                    path.display()
                )));
            }
            sets.insert(t.clone(), load_paraphrase_file(&path)?);
        }
        Ok(sets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
conditions = ["qm", "zero_shot"]

[corpus]
matrix = "m.csv"
questions = "q.json"

[backend]
kind = "synthetic"
synthetic = { fidelity = 1.0, base_rate = 0.0 }

[seeds]
qm = 1
zero_shot = 2
"#;

    #[test]
    fn parses_with_defaults() {
        let c = RunConfig::from_toml_str(MINIMAL, "/data").unwrap();
        c.validate().unwrap();
        assert_eq!(c.format.top_k, 10);
        assert_eq!(c.paraphrase.subsample_factor, 10);
        assert_eq!(c.parallelism, 4);
        assert_eq!(c.resolve_path(Path::new("m.csv")), PathBuf::from("/data/m.csv"));
        assert!(c.backend.identity().unwrap().1);
    }

    #[test]
    fn missing_seed_is_a_config_error() {
        let text = MINIMAL.replace("zero_shot = 2\n", "");
        let c = RunConfig::from_toml_str(&text, ".").unwrap();
        let err = c.validate().unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("zero_shot")), "{err}");
    }

    #[test]
    fn paraphrase_study_needs_files() {
        let text = MINIMAL
            .replace(r#"["qm", "zero_shot"]"#, r#"["paraphrase_study"]"#)
            .replace("qm = 1", "paraphrase_study = 1");
        let c = RunConfig::from_toml_str(&text, ".").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("paraphrase"));
    }

    #[test]
    fn replay_takes_identity_of_recorded_backend() {
        let text = MINIMAL.replace(r#"kind = "synthetic""#, r#"kind = "replay""#);
        let replay = RunConfig::from_toml_str(&text, ".").unwrap();
        let synth = RunConfig::from_toml_str(MINIMAL, ".").unwrap();
        assert_eq!(replay.backend.identity().unwrap(), synth.backend.identity().unwrap());
        assert_eq!(replay.backend.build().unwrap().id(), synth.backend.build().unwrap().id());
    }

    #[test]
    fn seed_override_is_derived_per_condition() {
        let mut c = RunConfig::from_toml_str(MINIMAL, ".").unwrap();
        c.override_seed(5);
        assert_ne!(c.seeds[&Condition::Qm], c.seeds[&Condition::ZeroShot]);
        let mut d = c.clone();
        d.override_seed(5);
        assert_eq!(c.seeds, d.seeds);
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = format!("{MINIMAL}\nbogus = 1\n");
        assert!(RunConfig::from_toml_str(&text, ".").is_err());
    }
}
