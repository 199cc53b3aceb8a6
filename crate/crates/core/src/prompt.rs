//! Prompt construction for questionnaire modeling and its baselines.
//!
//! Every prompt is a list of user/assistant turns ending with the target
//! question as a user turn. Prompts are rendered either as chat messages for
//! chat-completion APIs or as raw template text for completion APIs.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{derive_seed, rng_for, sha256_hex};
use crate::survey::{Answer, AnswerMatrix, QuestionKind};

/// Prepended to every question, in-context or target.
pub const INSTRUCTION_PREFIX: &str = "Please respond with 'yes' or 'no': ";
/// Appended to the target question in zero-shot prompts.
pub const ZERO_SHOT_SUFFIX: &str = "\nYour response:";

const HASH_DOMAIN: &[u8] = b"qmbias/prompt/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationTurn {
    pub role: Role,
    #[serde(rename = "content")]
    pub text: String,
}

impl ConversationTurn {
    fn user(text: String) -> Self {
        ConversationTurn {
            role: Role::User,
            text,
        }
    }

    fn assistant(text: &str) -> Self {
        ConversationTurn {
            role: Role::Assistant,
            text: text.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerSource {
    Human,
    /// Uniform random yes/no per (respondent, question); requires `ContextSpec::seed`.
    Random,
}

/// Which in-context examples appear, in which order, with which answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSpec {
    /// Permutation of in-context ordinals.
    pub order: Vec<usize>,
    pub included: BTreeSet<usize>,
    pub answer_source: AnswerSource,
    /// Seed for random answers.
    pub seed: Option<u64>,
    /// Whether the original final in-context example is still in final position.
    pub keep_last: bool,
    /// Seed that produced this spec when derived for an ablation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derivation_seed: Option<u64>,
}

impl ContextSpec {
    /// All given ordinals, in the given order, with human answers.
    pub fn full(ordinals: Vec<usize>) -> Self {
        ContextSpec {
            included: ordinals.iter().copied().collect(),
            order: ordinals,
            answer_source: AnswerSource::Human,
            seed: None,
            keep_last: true,
            derivation_seed: None,
        }
    }

    pub fn with_random_answers(mut self, seed: u64) -> Self {
        self.answer_source = AnswerSource::Random;
        self.seed = Some(seed);
        self
    }

    /// Included ordinals in presentation order.
    pub fn sequence(&self) -> Vec<usize> {
        self.order
            .iter()
            .copied()
            .filter(|o| self.included.contains(o))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.included.len()
    }

    pub fn is_empty(&self) -> bool {
        self.included.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let domain: BTreeSet<usize> = self.order.iter().copied().collect();
        if domain.len() != self.order.len() {
            return Err(Error::Prompt("context order repeats an ordinal".into()));
        }
        if let Some(o) = self.included.iter().find(|o| !domain.contains(o)) {
            return Err(Error::Prompt(format!(
                "included ordinal {o} is not part of the context order"
            )));
        }
        if self.answer_source == AnswerSource::Random && self.seed.is_none() {
            return Err(Error::Prompt("random answer source requires a seed".into()));
        }
        Ok(())
    }

    /// Short stable digest identifying this spec.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("context spec serializes");
        sha256_hex(&bytes)[..16].to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    ChatMessages,
    RawTemplate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Llama3,
    Olmo,
}

impl TemplateId {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::Llama3 => "llama3",
            TemplateId::Olmo => "olmo",
        }
    }

    fn template(self) -> &'static dyn ChatTemplate {
        match self {
            TemplateId::Llama3 => &Llama3Template,
            TemplateId::Olmo => &OlmoTemplate,
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "llama3" => Ok(TemplateId::Llama3),
            "olmo" => Ok(TemplateId::Olmo),
            other => Err(Error::Prompt(format!("unknown template id {other}"))),
        }
    }
}

/// Per-turn wrappers of a model family's chat format.
trait ChatTemplate: Sync {
    fn user(&self, out: &mut String, text: &str);
    fn assistant(&self, out: &mut String, text: &str);
    /// Header after which the model's answer token follows.
    fn generation_prompt(&self, out: &mut String);
}

struct Llama3Template;

impl ChatTemplate for Llama3Template {
    fn user(&self, out: &mut String, text: &str) {
        out.push_str("<|start_header_id|>user<|end_header_id|>\n\n");
        out.push_str(text);
        out.push_str("<|eot_id|>");
    }

    fn assistant(&self, out: &mut String, text: &str) {
        out.push_str("<|start_header_id|>assistant<|end_header_id|>\n\n");
        out.push_str(text);
        out.push_str("<|eot_id|>");
    }

    fn generation_prompt(&self, out: &mut String) {
        out.push_str("<|start_header_id|>assistant<|end_header_id|>\n\n");
    }
}

struct OlmoTemplate;

impl ChatTemplate for OlmoTemplate {
    fn user(&self, out: &mut String, text: &str) {
        out.push_str("<|user|>\n");
        out.push_str(text);
        out.push('\n');
    }

    fn assistant(&self, out: &mut String, text: &str) {
        out.push_str("<|assistant|>\n");
        out.push_str(text);
        out.push_str("<|endoftext|>\n");
    }

    fn generation_prompt(&self, out: &mut String) {
        out.push_str("<|assistant|>\n");
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Read the top-k next-token distribution.
    TopK,
    /// Read the probabilities of forced "yes" and "no" completions.
    ForcedPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub top_k: usize,
    pub mode: QueryMode,
}

impl Default for DecodingParams {
    fn default() -> Self {
        DecodingParams {
            temperature: 1.0,
            top_k: 10,
            mode: QueryMode::TopK,
        }
    }
}

impl DecodingParams {
    /// Canonical string form used in hashes and cache keys.
    pub fn canonical(&self) -> String {
        let mode = match self.mode {
            QueryMode::TopK => "top_k",
            QueryMode::ForcedPair => "forced_pair",
        };
        format!(
            "temperature={:?};top_k={};mode={mode}",
            self.temperature, self.top_k
        )
    }
}

/// How prompts are rendered and queried.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptFormat {
    pub mode: RenderMode,
    pub template_id: Option<TemplateId>,
    pub decoding: DecodingParams,
}

impl Default for PromptFormat {
    fn default() -> Self {
        PromptFormat {
            mode: RenderMode::ChatMessages,
            template_id: None,
            decoding: DecodingParams::default(),
        }
    }
}

impl PromptFormat {
    pub fn raw(template_id: TemplateId) -> Self {
        PromptFormat {
            mode: RenderMode::RawTemplate,
            template_id: Some(template_id),
            decoding: DecodingParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == RenderMode::RawTemplate && self.template_id.is_none() {
            return Err(Error::Prompt(
                "raw_template mode requires a template id".into(),
            ));
        }
        Ok(())
    }
}

/// A fully built prompt with its content hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    turns: Vec<ConversationTurn>,
    mode: RenderMode,
    template_id: Option<TemplateId>,
    decoding: DecodingParams,
    target_text: String,
    target_suffix: String,
    canonical_hash: String,
}

impl RenderedPrompt {
    fn assemble(
        mut context: Vec<ConversationTurn>,
        target_text: String,
        target_suffix: &str,
        format: &PromptFormat,
    ) -> Result<Self> {
        format.validate()?;
        context.push(ConversationTurn::user(format!(
            "{INSTRUCTION_PREFIX}{target_text}{target_suffix}"
        )));
        let mut prompt = RenderedPrompt {
            turns: context,
            mode: format.mode,
            template_id: format.template_id,
            decoding: format.decoding,
            target_text,
            target_suffix: target_suffix.to_string(),
            canonical_hash: String::new(),
        };
        prompt.canonical_hash = prompt.compute_hash()?;
        Ok(prompt)
    }

    pub fn turns(&self) -> &[ConversationTurn] {
        &self.turns
    }

    pub fn mode(&self) -> RenderMode {
        self.mode
    }

    pub fn template_id(&self) -> Option<TemplateId> {
        self.template_id
    }

    pub fn decoding(&self) -> &DecodingParams {
        &self.decoding
    }

    pub fn canonical_hash(&self) -> &str {
        &self.canonical_hash
    }

    /// Question text of the final user turn, without instruction or suffix.
    pub fn target_text(&self) -> &str {
        &self.target_text
    }

    /// Number of in-context question/answer pairs.
    pub fn context_pairs(&self) -> usize {
        (self.turns.len() - 1) / 2
    }

    /// The exact bytes sent to the backend for this prompt's mode.
    pub fn canonical_bytes(&self) -> Result<Vec<u8>> {
        match self.mode {
            RenderMode::ChatMessages => Ok(serde_json::to_vec(&self.turns)?),
            RenderMode::RawTemplate => {
                let id = self
                    .template_id
                    .ok_or_else(|| Error::Prompt("raw prompt without template id".into()))?;
                Ok(render_raw(self, id)?.into_bytes())
            }
        }
    }

    fn compute_hash(&self) -> Result<String> {
        let mut buf = Vec::with_capacity(4096);
        buf.extend_from_slice(HASH_DOMAIN);
        buf.push(0);
        buf.extend_from_slice(match self.mode {
            RenderMode::ChatMessages => b"chat_messages",
            RenderMode::RawTemplate => b"raw_template",
        });
        buf.push(0);
        buf.extend_from_slice(self.template_id.map_or("", |t| t.as_str()).as_bytes());
        buf.push(0);
        buf.extend_from_slice(&self.canonical_bytes()?);
        buf.push(0);
        buf.extend_from_slice(self.decoding.canonical().as_bytes());
        Ok(sha256_hex(&buf))
    }
}

/// Renders a prompt with a model family's raw chat template, ending after the
/// assistant header so that the next token is the model's answer.
pub fn render_raw(prompt: &RenderedPrompt, template_id: TemplateId) -> Result<String> {
    let template = template_id.template();
    let mut out = String::with_capacity(prompt.turns.iter().map(|t| t.text.len() + 64).sum());
    for turn in &prompt.turns {
        match turn.role {
            Role::User => template.user(&mut out, &turn.text),
            Role::Assistant => template.assistant(&mut out, &turn.text),
        }
    }
    template.generation_prompt(&mut out);
    Ok(out)
}

/// Raw render from a template name, as used by the CLI and FFI.
pub fn render_raw_named(prompt: &RenderedPrompt, template_id: &str) -> Result<String> {
    render_raw(prompt, template_id.parse()?)
}

/// Builds prompts in one fixed format. Stateless apart from the format.
#[derive(Debug, Clone, Copy, Default)]
pub struct PromptFactory {
    pub format: PromptFormat,
}

impl PromptFactory {
    pub fn new(format: PromptFormat) -> Self {
        PromptFactory { format }
    }

    /// Questionnaire-modeling prompt for one respondent and target.
    ///
    /// In-context questions the respondent did not answer are skipped when
    /// answers come from the respondent.
    pub fn build_qm(
        &self,
        matrix: &AnswerMatrix,
        respondent: usize,
        target_id: &str,
        spec: &ContextSpec,
    ) -> Result<RenderedPrompt> {
        spec.validate()?;
        let target = matrix.question(target_id)?;
        if target.kind != QuestionKind::Attitude {
            return Err(Error::Prompt(format!(
                "target {target_id} is not an attitude question"
            )));
        }
        if spec.included.contains(&target.ordinal) {
            return Err(Error::Prompt(format!(
                "target {target_id} is part of its own context"
            )));
        }
        let respondent_id = &matrix
            .respondents()
            .get(respondent)
            .ok_or_else(|| Error::UnknownRespondent(respondent.to_string()))?
            .id;
        let questions = matrix.questions();
        let mut rng = spec
            .seed
            .map(|seed| rng_for(seed, &["random-answers", respondent_id]));

        let sequence = spec.sequence();
        let mut turns = Vec::with_capacity(sequence.len() * 2 + 1);
        let mut skipped = 0usize;
        for ordinal in sequence {
            let question = questions
                .get(ordinal)
                .ok_or_else(|| Error::Prompt(format!("context ordinal {ordinal} out of range")))?;
            let yes = match spec.answer_source {
                AnswerSource::Human => match matrix.answer_at(respondent, ordinal) {
                    Answer::Yes => true,
                    Answer::No => false,
                    Answer::Missing => {
                        skipped += 1;
                        continue;
                    }
                },
                AnswerSource::Random => rng
                    .as_mut()
                    .expect("validated: random source has a seed")
                    .random_bool(0.5),
            };
            turns.push(ConversationTurn::user(format!(
                "{INSTRUCTION_PREFIX}{}",
                question.text
            )));
            turns.push(ConversationTurn::assistant(if yes { "yes" } else { "no" }));
        }
        if skipped > 0 {
            log::warn!(
                "respondent {respondent_id}: skipped {skipped} unanswered in-context question(s) for target {target_id}"
            );
        }
        RenderedPrompt::assemble(turns, target.text.clone(), "", &self.format)
    }

    /// Zero-shot prompt: the target alone with the "Your response:" suffix.
    pub fn build_zero_shot(&self, target_text: &str) -> Result<RenderedPrompt> {
        RenderedPrompt::assemble(
            Vec::new(),
            target_text.to_string(),
            ZERO_SHOT_SUFFIX,
            &self.format,
        )
    }

    /// Replaces the target question text; all context turns stay byte-identical.
    pub fn apply_paraphrase(
        &self,
        prompt: &RenderedPrompt,
        paraphrase: &str,
    ) -> Result<RenderedPrompt> {
        apply_paraphrase(prompt, paraphrase)
    }
}

pub fn apply_paraphrase(prompt: &RenderedPrompt, paraphrase: &str) -> Result<RenderedPrompt> {
    if paraphrase.trim().is_empty() {
        return Err(Error::Prompt("empty paraphrase".into()));
    }
    match prompt.turns.last() {
        Some(t) if t.role == Role::User => {}
        _ => return Err(Error::Prompt("prompt does not end with a target question".into())),
    }
    let format = PromptFormat {
        mode: prompt.mode,
        template_id: prompt.template_id,
        decoding: prompt.decoding,
    };
    let context = prompt.turns[..prompt.turns.len() - 1].to_vec();
    RenderedPrompt::assemble(
        context,
        paraphrase.to_string(),
        &prompt.target_suffix,
        &format,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AblationKind {
    /// `count` reorderings, `same_last` of which keep the final example in place.
    Permutation { count: usize, same_last: usize },
    /// For each fraction, remove that share of examples at random.
    Truncation {
        fractions: Vec<f64>,
        both_last_variants: bool,
    },
}

/// Derives reordered or shortened context specs from a base spec.
pub fn derive_ablation_specs(
    base: &ContextSpec,
    kind: &AblationKind,
    seed: u64,
) -> Result<Vec<ContextSpec>> {
    base.validate()?;
    let sequence = base.sequence();
    let n = sequence.len();
    let last = *sequence
        .last()
        .ok_or_else(|| Error::Prompt("cannot ablate an empty context".into()))?;
    match kind {
        AblationKind::Permutation { count, same_last } => {
            if *count == 0 {
                return Err(Error::Prompt("permutation count must be at least 1".into()));
            }
            if same_last > count {
                return Err(Error::Prompt(format!(
                    "same_last_count {same_last} exceeds count {count}"
                )));
            }
            if *same_last < *count && n < 2 {
                return Err(Error::Prompt(
                    "a context of one example cannot change its last element".into(),
                ));
            }
            (0..*count)
                .map(|i| {
                    let spec_seed = derive_seed(seed, &["permutation", &i.to_string()]);
                    let mut rng = rng_for(spec_seed, &[]);
                    let mut order = sequence.clone();
                    let keep_last = i < *same_last;
                    if keep_last {
                        order[..n - 1].shuffle(&mut rng);
                    } else {
                        loop {
                            order.shuffle(&mut rng);
                            if order[n - 1] != last {
                                break;
                            }
                        }
                    }
                    Ok(ContextSpec {
                        included: order.iter().copied().collect(),
                        order,
                        answer_source: base.answer_source,
                        seed: base.seed,
                        keep_last,
                        derivation_seed: Some(spec_seed),
                    })
                })
                .collect()
        }
        AblationKind::Truncation {
            fractions,
            both_last_variants,
        } => {
            let mut specs = Vec::new();
            for (fi, &f) in fractions.iter().enumerate() {
                if !(f > 0.0 && f < 1.0) {
                    return Err(Error::Prompt(format!(
                        "truncation fraction {f} must lie strictly between 0 and 1"
                    )));
                }
                let retain = ((1.0 - f) * n as f64).round() as usize;
                let remove = n - retain;
                let variants: &[bool] = if *both_last_variants {
                    &[true, false]
                } else {
                    &[true]
                };
                for &keep_last in variants {
                    let spec_seed = derive_seed(
                        seed,
                        &["truncation", &fi.to_string(), if keep_last { "same" } else { "different" }],
                    );
                    let mut rng = rng_for(spec_seed, &[]);
                    let candidates = &sequence[..n - 1];
                    let mut removed: BTreeSet<usize> = BTreeSet::new();
                    let random_removals = if keep_last {
                        remove
                    } else {
                        if remove == 0 {
                            return Err(Error::Prompt(format!(
                                "fraction {f} removes no example, so the last one cannot change"
                            )));
                        }
                        removed.insert(last);
                        remove - 1
                    };
                    if random_removals > candidates.len() {
                        return Err(Error::Prompt(format!(
                            "fraction {f} removes more examples than available"
                        )));
                    }
                    for idx in rand::seq::index::sample(&mut rng, candidates.len(), random_removals)
                    {
                        removed.insert(candidates[idx]);
                    }
                    let order: Vec<usize> = sequence
                        .iter()
                        .copied()
                        .filter(|o| !removed.contains(o))
                        .collect();
                    specs.push(ContextSpec {
                        included: order.iter().copied().collect(),
                        order,
                        answer_source: base.answer_source,
                        seed: base.seed,
                        keep_last,
                        derivation_seed: Some(spec_seed),
                    });
                }
            }
            Ok(specs)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survey::{Question, RawResponse, Respondent, Scale};
    use std::collections::BTreeMap;

    const STATE_SECURITY: &str = "Do you agree with the following statement? \"Someone who is not guilty has nothing to fear from state security measures.\"";

    fn matrix(n_issue: usize, rows: &[(&str, Vec<u8>)]) -> AnswerMatrix {
        let mut questions: Vec<Question> = (0..n_issue)
            .map(|i| Question {
                id: format!("i{i}"),
                ordinal: i,
                text: format!("Issue question {i}?"),
                kind: QuestionKind::Issue,
                leaning: None,
                scale: None,
            })
            .collect();
        questions.push(Question {
            id: "t".into(),
            ordinal: n_issue,
            text: STATE_SECURITY.into(),
            kind: QuestionKind::Attitude,
            leaning: None,
            scale: None,
        });
        let respondents = rows
            .iter()
            .map(|(id, _)| Respondent {
                id: id.to_string(),
                elected: true,
                metadata: BTreeMap::new(),
            })
            .collect();
        let mut responses = Vec::new();
        for (id, values) in rows {
            for (i, v) in values.iter().enumerate() {
                if *v == 0 {
                    continue;
                }
                let (qid, scale) = if i < n_issue {
                    (format!("i{i}"), Scale::FourPoint)
                } else {
                    ("t".to_string(), Scale::Likert7)
                };
                responses.push(RawResponse {
                    respondent_id: id.to_string(),
                    question_id: qid,
                    scale,
                    value: *v,
                });
            }
        }
        AnswerMatrix::from_responses(questions, respondents, &responses).unwrap()
    }

    fn full_row(n: usize, target: u8) -> Vec<u8> {
        let mut v: Vec<u8> = (0..n).map(|i| if i % 3 == 0 { 3 } else { 1 }).collect();
        v.push(target);
        v
    }

    #[test]
    fn full_context_has_121_turns() {
        let m = matrix(60, &[("r", full_row(60, 6))]);
        let spec = ContextSpec::full(m.in_context_ordinals());
        let p = PromptFactory::default().build_qm(&m, 0, "t", &spec).unwrap();
        assert_eq!(p.turns().len(), 121);
        assert_eq!(p.context_pairs(), 60);
        let last = p.turns().last().unwrap();
        assert_eq!(last.role, Role::User);
        assert_eq!(last.text, format!("{INSTRUCTION_PREFIX}{STATE_SECURITY}"));
        assert_eq!(p.turns()[0].text, "Please respond with 'yes' or 'no': Issue question 0?");
        assert_eq!(p.turns()[1].text, "no");
        assert_eq!(p.turns()[3].text, "yes");
        for pair in p.turns()[..120].chunks(2) {
            assert_eq!(pair[0].role, Role::User);
            assert_eq!(pair[1].role, Role::Assistant);
            assert!(pair[1].text == "yes" || pair[1].text == "no");
        }
    }

    #[test]
    fn missing_in_context_answers_are_skipped() {
        let mut row = full_row(4, 6);
        row[2] = 0;
        let m = matrix(4, &[("r", row)]);
        let spec = ContextSpec::full(m.in_context_ordinals());
        let p = PromptFactory::default().build_qm(&m, 0, "t", &spec).unwrap();
        assert_eq!(p.context_pairs(), 3);
        assert!(!p.turns().iter().any(|t| t.text.contains("question 2?")));
    }

    #[test]
    fn random_answers_are_deterministic() {
        let m = matrix(60, &[("r", full_row(60, 6))]);
        let spec = ContextSpec::full(m.in_context_ordinals()).with_random_answers(7);
        let f = PromptFactory::default();
        let a = f.build_qm(&m, 0, "t", &spec).unwrap();
        let b = f.build_qm(&m, 0, "t", &spec).unwrap();
        assert_eq!(a.canonical_bytes().unwrap(), b.canonical_bytes().unwrap());
        assert_eq!(a.canonical_hash(), b.canonical_hash());
        let human = f
            .build_qm(&m, 0, "t", &ContextSpec::full(m.in_context_ordinals()))
            .unwrap();
        assert_ne!(a.canonical_hash(), human.canonical_hash());
    }

    #[test]
    fn random_source_without_seed_is_rejected() {
        let m = matrix(3, &[("r", full_row(3, 6))]);
        let mut spec = ContextSpec::full(m.in_context_ordinals());
        spec.answer_source = AnswerSource::Random;
        assert!(PromptFactory::default().build_qm(&m, 0, "t", &spec).is_err());
    }

    #[test]
    fn target_in_context_is_rejected() {
        let m = matrix(3, &[("r", full_row(3, 6))]);
        let mut spec = ContextSpec::full(m.in_context_ordinals());
        spec.order.push(3);
        spec.included.insert(3);
        let err = PromptFactory::default().build_qm(&m, 0, "t", &spec).unwrap_err();
        assert!(err.to_string().contains("own context"));
        let err = PromptFactory::default()
            .build_qm(&m, 0, "i0", &ContextSpec::full(vec![1, 2]))
            .unwrap_err();
        assert!(err.to_string().contains("not an attitude"));
    }

    #[test]
    fn identical_rows_hash_identically() {
        let m = matrix(10, &[("a", full_row(10, 2)), ("b", full_row(10, 7))]);
        let spec = ContextSpec::full(m.in_context_ordinals());
        let f = PromptFactory::default();
        let a = f.build_qm(&m, 0, "t", &spec).unwrap();
        let b = f.build_qm(&m, 1, "t", &spec).unwrap();
        assert_eq!(a.canonical_hash(), b.canonical_hash());
    }

    #[test]
    fn zero_shot_matches_reference_layout() {
        let f = PromptFactory::new(PromptFormat::raw(TemplateId::Llama3));
        let p = f.build_zero_shot(STATE_SECURITY).unwrap();
        assert_eq!(p.turns().len(), 1);
        let raw = render_raw(&p, TemplateId::Llama3).unwrap();
        let expected = "<|start_header_id|>user<|end_header_id|>\n\n\
            Please respond with 'yes' or 'no': Do you agree with the following statement? \
            \"Someone who is not guilty has nothing to fear from state security measures.\"\n\
            Your response:<|eot_id|><|start_header_id|>assistant<|end_header_id|>\n\n";
        assert_eq!(raw, expected);
        let again = f.build_zero_shot(STATE_SECURITY).unwrap();
        assert_eq!(p.canonical_hash(), again.canonical_hash());
    }

    #[test]
    fn paraphrase_changes_only_the_target_turn() {
        let m = matrix(5, &[("r", full_row(5, 6))]);
        let spec = ContextSpec::full(m.in_context_ordinals());
        let f = PromptFactory::default();
        let p = f.build_qm(&m, 0, "t", &spec).unwrap();
        let text = "Innocent individuals have no need to fear state security measures.";
        let q = f.apply_paraphrase(&p, text).unwrap();
        let n = p.turns().len();
        assert_eq!(&p.turns()[..n - 1], &q.turns()[..n - 1]);
        assert_ne!(p.turns()[n - 1], q.turns()[n - 1]);
        assert!(q.turns()[n - 1].text.contains(text));
        let same = f.apply_paraphrase(&p, STATE_SECURITY).unwrap();
        assert_eq!(same.canonical_hash(), p.canonical_hash());
        assert!(f.apply_paraphrase(&p, "  ").is_err());
    }

    #[test]
    fn paraphrase_keeps_zero_shot_suffix() {
        let f = PromptFactory::default();
        let p = f.build_zero_shot(STATE_SECURITY).unwrap();
        let q = f.apply_paraphrase(&p, "Innocent people need not fear.").unwrap();
        assert!(q.turns()[0].text.ends_with("Innocent people need not fear.\nYour response:"));
    }

    #[test]
    fn distinct_paraphrases_distinct_hashes() {
        let f = PromptFactory::default();
        let p = f.build_zero_shot(STATE_SECURITY).unwrap();
        let hashes: BTreeSet<String> = (0..50)
            .map(|i| {
                f.apply_paraphrase(&p, &format!("Paraphrase number {i}."))
                    .unwrap()
                    .canonical_hash()
                    .to_string()
            })
            .collect();
        assert_eq!(hashes.len(), 50);
    }

    #[test]
    fn chat_mode_ignores_templates() {
        let chat = PromptFactory::default().build_zero_shot("Q?").unwrap();
        let bytes = chat.canonical_bytes().unwrap();
        let s = String::from_utf8(bytes).unwrap();
        assert!(!s.contains("<|"));
        assert!(s.starts_with("[{\"role\":\"user\",\"content\":"));
    }

    #[test]
    fn olmo_terminates_answers() {
        let m = matrix(1, &[("r", full_row(1, 6))]);
        let f = PromptFactory::new(PromptFormat::raw(TemplateId::Olmo));
        let p = f
            .build_qm(&m, 0, "t", &ContextSpec::full(m.in_context_ordinals()))
            .unwrap();
        let raw = render_raw(&p, TemplateId::Olmo).unwrap();
        assert!(raw.contains("<|assistant|>\nno<|endoftext|>"));
        assert!(raw.ends_with("<|assistant|>\n"));
        assert!(render_raw_named(&p, "gpt2").is_err());
    }

    #[test]
    fn decoding_params_feed_the_hash() {
        let mut format = PromptFormat::default();
        let a = PromptFactory::new(format).build_zero_shot("Q?").unwrap();
        format.decoding.mode = QueryMode::ForcedPair;
        let b = PromptFactory::new(format).build_zero_shot("Q?").unwrap();
        assert_ne!(a.canonical_hash(), b.canonical_hash());
    }

    #[test]
    fn permutation_ablation_shape() {
        let base = ContextSpec::full((0..60).collect());
        let kind = AblationKind::Permutation {
            count: 6,
            same_last: 3,
        };
        let specs = derive_ablation_specs(&base, &kind, 11).unwrap();
        assert_eq!(specs.len(), 6);
        assert_eq!(specs.iter().filter(|s| s.keep_last).count(), 3);
        for s in &specs {
            assert_eq!(s.len(), 60);
            assert_eq!(*s.sequence().last().unwrap() == 59, s.keep_last);
            assert!(s.derivation_seed.is_some());
        }
        assert_eq!(specs, derive_ablation_specs(&base, &kind, 11).unwrap());
        assert_ne!(specs, derive_ablation_specs(&base, &kind, 12).unwrap());
    }

    #[test]
    fn permutation_rejects_bad_counts() {
        let base = ContextSpec::full((0..60).collect());
        let kind = AblationKind::Permutation {
            count: 2,
            same_last: 3,
        };
        assert!(derive_ablation_specs(&base, &kind, 1).is_err());
    }

    #[test]
    fn truncation_ablation_shape() {
        let base = ContextSpec::full((0..60).collect());
        let kind = AblationKind::Truncation {
            fractions: vec![0.25, 0.5, 0.75],
            both_last_variants: true,
        };
        let specs = derive_ablation_specs(&base, &kind, 3).unwrap();
        let sizes: Vec<usize> = specs.iter().map(|s| s.len()).collect();
        assert_eq!(sizes, vec![45, 45, 30, 30, 15, 15]);
        for s in &specs {
            assert_eq!(*s.sequence().last().unwrap() == 59, s.keep_last);
            let seq = s.sequence();
            assert!(seq.windows(2).all(|w| w[0] < w[1]), "relative order kept");
        }
        let zero = AblationKind::Truncation {
            fractions: vec![0.0],
            both_last_variants: true,
        };
        assert!(derive_ablation_specs(&base, &zero, 3).is_err());
    }
}
