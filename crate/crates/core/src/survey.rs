//! Questionnaire ingestion and binarization.
//!
//! A corpus is a wide CSV (one row per respondent, one column per question)
//! plus a JSON sidecar describing every question. Issue questions are answered
//! on a four-point scale and attitude statements on a 7-point Likert scale;
//! both are flattened to yes / no / missing on ingestion.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    /// Political issue question, used as in-context example.
    Issue,
    /// Value attitude statement, used as target.
    Attitude,
}

/// Political leaning associated with a "yes" answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Leaning {
    ConservativeIfYes,
    LiberalIfYes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// 1 = yes, 2 = rather yes, 3 = rather no, 4 = no.
    FourPoint,
    /// 1 = strongly disagree ... 7 = strongly agree.
    Likert7,
}

impl Scale {
    pub fn range(self) -> (u8, u8) {
        match self {
            Scale::FourPoint => (1, 4),
            Scale::Likert7 => (1, 7),
        }
    }

    pub fn binarize(self, value: u8) -> Result<Answer> {
        let (lo, hi) = self.range();
        if value < lo || value > hi {
            return Err(Error::Ingest {
                row: 0,
                message: format!("value {value} outside {self:?} range {lo}..={hi}"),
            });
        }
        Ok(match (self, value) {
            (Scale::FourPoint, 1 | 2) => Answer::Yes,
            (Scale::FourPoint, _) => Answer::No,
            (Scale::Likert7, 5..=7) => Answer::Yes,
            (Scale::Likert7, 4) => Answer::Missing,
            (Scale::Likert7, _) => Answer::No,
        })
    }
}

/// One entry of the question sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub ordinal: usize,
    pub text: String,
    pub kind: QuestionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leaning: Option<Leaning>,
    /// Answer scale; defaults from `kind` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<Scale>,
}

impl Question {
    pub fn scale(&self) -> Scale {
        self.scale.unwrap_or(match self.kind {
            QuestionKind::Issue => Scale::FourPoint,
            QuestionKind::Attitude => Scale::Likert7,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawResponse {
    pub respondent_id: String,
    pub question_id: String,
    pub scale: Scale,
    pub value: u8,
}

/// Binarized answer cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Yes,
    No,
    Missing,
}

impl Answer {
    pub fn as_bool(self) -> Option<bool> {
        match self {
            Answer::Yes => Some(true),
            Answer::No => Some(false),
            Answer::Missing => None,
        }
    }

    pub fn as_f64(self) -> Option<f64> {
        self.as_bool().map(|b| if b { 1.0 } else { 0.0 })
    }
}

pub fn binarize(raw: &RawResponse) -> Result<Answer> {
    raw.scale.binarize(raw.value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Respondent {
    pub id: String,
    pub elected: bool,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

/// Respondents x questions matrix of binarized answers. Immutable once built.
#[derive(Debug, Clone)]
pub struct AnswerMatrix {
    questions: Vec<Question>,
    respondents: Vec<Respondent>,
    cells: Vec<Answer>,
    question_index: HashMap<String, usize>,
    respondent_index: HashMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct YesMean {
    pub mean: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MajorityBaseline {
    pub accuracy: f64,
    /// Modal class; `None` on a tie.
    pub majority: Option<bool>,
    pub tie: bool,
}

impl AnswerMatrix {
    /// Builds a matrix from question metadata, respondents and raw responses.
    ///
    /// Questions are reordered by ordinal. Absent responses become missing.
    pub fn from_responses(
        mut questions: Vec<Question>,
        respondents: Vec<Respondent>,
        responses: &[RawResponse],
    ) -> Result<Self> {
        validate_questions(&mut questions)?;
        if respondents.is_empty() {
            return Err(Error::NoRespondents);
        }
        let question_index: HashMap<String, usize> = questions
            .iter()
            .enumerate()
            .map(|(i, q)| (q.id.clone(), i))
            .collect();
        let mut respondent_index = HashMap::with_capacity(respondents.len());
        for (i, r) in respondents.iter().enumerate() {
            if respondent_index.insert(r.id.clone(), i).is_some() {
                return Err(Error::Ingest {
                    row: i,
                    message: format!("duplicate respondent id {}", r.id),
                });
            }
        }
        let width = questions.len();
        let mut cells = vec![Answer::Missing; respondents.len() * width];
        let mut seen = HashSet::with_capacity(responses.len());
        for (row, raw) in responses.iter().enumerate() {
            let ri = *respondent_index
                .get(&raw.respondent_id)
                .ok_or_else(|| Error::UnknownRespondent(raw.respondent_id.clone()))?;
            let qi = *question_index.get(&raw.question_id).ok_or_else(|| Error::Ingest {
                row,
                message: format!("unknown question id {}", raw.question_id),
            })?;
            if !seen.insert((ri, qi)) {
                return Err(Error::Ingest {
                    row,
                    message: format!(
                        "duplicate response for ({}, {})",
                        raw.respondent_id, raw.question_id
                    ),
                });
            }
            cells[ri * width + qi] = binarize(raw).map_err(|e| relocate(e, row))?;
        }
        Ok(AnswerMatrix {
            questions,
            respondents,
            cells,
            question_index,
            respondent_index,
        })
    }

    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    pub fn respondents(&self) -> &[Respondent] {
        &self.respondents
    }

    pub fn question(&self, id: &str) -> Result<&Question> {
        self.question_index
            .get(id)
            .map(|&i| &self.questions[i])
            .ok_or_else(|| Error::UnknownQuestion(id.to_string()))
    }

    pub fn question_position(&self, id: &str) -> Result<usize> {
        self.question_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownQuestion(id.to_string()))
    }

    pub fn respondent_position(&self, id: &str) -> Result<usize> {
        self.respondent_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownRespondent(id.to_string()))
    }

    /// Cell by positional indices. Question positions equal ordinals.
    pub fn answer_at(&self, respondent: usize, question: usize) -> Answer {
        self.cells[respondent * self.questions.len() + question]
    }

    pub fn answer(&self, respondent_id: &str, question_id: &str) -> Result<Answer> {
        Ok(self.answer_at(
            self.respondent_position(respondent_id)?,
            self.question_position(question_id)?,
        ))
    }

    pub fn row(&self, respondent: usize) -> &[Answer] {
        let w = self.questions.len();
        &self.cells[respondent * w..(respondent + 1) * w]
    }

    /// Ordinals of the in-context (issue) questions in questionnaire order.
    pub fn in_context_ordinals(&self) -> Vec<usize> {
        self.questions
            .iter()
            .filter(|q| q.kind == QuestionKind::Issue)
            .map(|q| q.ordinal)
            .collect()
    }

    pub fn attitude_questions(&self) -> impl Iterator<Item = &Question> {
        self.questions
            .iter()
            .filter(|q| q.kind == QuestionKind::Attitude)
    }

    pub fn missing_cells(&self) -> usize {
        self.cells.iter().filter(|c| **c == Answer::Missing).count()
    }

    /// Respondent positions holding a non-missing answer for the question.
    pub fn respondents_with_gold(&self, question_id: &str) -> Result<Vec<usize>> {
        let qi = self.question_position(question_id)?;
        Ok((0..self.respondents.len())
            .filter(|&r| self.answer_at(r, qi) != Answer::Missing)
            .collect())
    }

    pub fn human_yes_mean(&self, question_id: &str) -> Result<YesMean> {
        let qi = self.question_position(question_id)?;
        let (mut yes, mut n) = (0usize, 0usize);
        for r in 0..self.respondents.len() {
            match self.answer_at(r, qi) {
                Answer::Yes => {
                    yes += 1;
                    n += 1;
                }
                Answer::No => n += 1,
                Answer::Missing => {}
            }
        }
        if n == 0 {
            return Err(Error::NoGoldAnswers(question_id.to_string()));
        }
        Ok(YesMean {
            mean: yes as f64 / n as f64,
            n,
        })
    }

    pub fn majority_baseline(&self, question_id: &str) -> Result<MajorityBaseline> {
        let m = self.human_yes_mean(question_id)?.mean;
        Ok(majority_from_mean(m))
    }
}

pub fn majority_from_mean(m: f64) -> MajorityBaseline {
    if m == 0.5 {
        MajorityBaseline {
            accuracy: 0.5,
            majority: None,
            tie: true,
        }
    } else {
        MajorityBaseline {
            accuracy: m.max(1.0 - m),
            majority: Some(m > 0.5),
            tie: false,
        }
    }
}

fn relocate(err: Error, row: usize) -> Error {
    match err {
        Error::Ingest { message, .. } => Error::Ingest { row, message },
        other => other,
    }
}

fn validate_questions(questions: &mut [Question]) -> Result<()> {
    questions.sort_by_key(|q| q.ordinal);
    let mut ids = HashSet::new();
    for (expected, q) in questions.iter().enumerate() {
        if q.ordinal != expected {
            return Err(Error::Metadata(format!(
                "ordinals must be unique and contiguous from 0; question {} has ordinal {} where {} was expected",
                q.id, q.ordinal, expected
            )));
        }
        if !ids.insert(q.id.as_str()) {
            return Err(Error::Metadata(format!("duplicate question id {}", q.id)));
        }
        if q.kind == QuestionKind::Attitude && q.text.trim().is_empty() {
            return Err(Error::Metadata(format!(
                "attitude question {} has empty text",
                q.id
            )));
        }
    }
    Ok(())
}

/// Column mapping for the wide CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSchema {
    pub respondent_column: String,
    /// Rows with a false value here are dropped. When `None`, every row is kept.
    pub elected_column: Option<String>,
    /// Pass-through columns copied into `Respondent::metadata`.
    #[serde(default)]
    pub metadata_columns: Vec<String>,
}

impl Default for CorpusSchema {
    fn default() -> Self {
        CorpusSchema {
            respondent_column: "respondent_id".into(),
            elected_column: Some("elected".into()),
            metadata_columns: vec!["party".into(), "canton".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub respondents: usize,
    pub questions: usize,
    pub missing_cells: usize,
    pub filtered_respondents: usize,
    pub absent_cells: usize,
}

pub fn load_questions(path: impl AsRef<Path>) -> Result<Vec<Question>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(file)?)
}

/// Reads the matrix CSV and question sidecar from disk.
pub fn ingest_corpus(
    matrix_path: impl AsRef<Path>,
    questions_path: impl AsRef<Path>,
    schema: &CorpusSchema,
) -> Result<(AnswerMatrix, IngestReport)> {
    let questions = load_questions(questions_path)?;
    let path = matrix_path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, questions, schema)
}

pub fn ingest_reader<R: Read>(
    reader: R,
    questions: Vec<Question>,
    schema: &CorpusSchema,
) -> Result<(AnswerMatrix, IngestReport)> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_reader(reader);
    let mut records = csv.records();
    let header = match records.next() {
        Some(h) => h?,
        None => return Err(Error::NoRespondents),
    };

    let by_id: HashMap<&str, &Question> = questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut respondent_col = None;
    let mut elected_col = None;
    let mut metadata_cols = Vec::new();
    let mut question_cols: Vec<(usize, &Question)> = Vec::new();
    let mut header_seen = HashSet::new();
    for (col, name) in header.iter().enumerate() {
        let name = name.trim();
        if !header_seen.insert(name.to_string()) {
            return Err(Error::Ingest {
                row: 1,
                message: format!("duplicate column {name}"),
            });
        }
        if name == schema.respondent_column {
            respondent_col = Some(col);
        } else if schema.elected_column.as_deref() == Some(name) {
            elected_col = Some(col);
        } else if schema.metadata_columns.iter().any(|m| m == name) {
            metadata_cols.push((col, name.to_string()));
        } else if let Some(q) = by_id.get(name) {
            question_cols.push((col, q));
        } else {
            return Err(Error::Ingest {
                row: 1,
                message: format!("unknown question id {name} in column {}", col + 1),
            });
        }
    }
    let respondent_col = respondent_col.ok_or_else(|| Error::Ingest {
        row: 1,
        message: format!("missing respondent column {}", schema.respondent_column),
    })?;
    if schema.elected_column.is_some() && elected_col.is_none() {
        return Err(Error::Ingest {
            row: 1,
            message: format!(
                "missing elected column {}",
                schema.elected_column.as_deref().unwrap_or_default()
            ),
        });
    }

    let mut respondents = Vec::new();
    let mut responses = Vec::new();
    let mut filtered = 0usize;
    let mut absent = 0usize;
    let mut ids = HashSet::new();
    for (i, record) in records.enumerate() {
        let row = i + 2;
        let record = record?;
        let id = record.get(respondent_col).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(Error::Ingest {
                row,
                message: "empty respondent id".into(),
            });
        }
        let elected = match elected_col {
            Some(c) => parse_flag(record.get(c).unwrap_or(""), row)?,
            None => true,
        };
        if !ids.insert(id.clone()) {
            return Err(Error::Ingest {
                row,
                message: format!("duplicate (respondent, question) rows for respondent {id}"),
            });
        }
        if !elected {
            filtered += 1;
            continue;
        }
        let metadata = metadata_cols
            .iter()
            .map(|(c, name)| (name.clone(), record.get(*c).unwrap_or("").to_string()))
            .collect();
        for (col, q) in &question_cols {
            let cell = record.get(*col).unwrap_or("").trim();
            if cell.is_empty() {
                absent += 1;
                continue;
            }
            let value: u8 = cell.parse().map_err(|_| Error::Ingest {
                row,
                message: format!("non-integer value {cell:?} for question {}", q.id),
            })?;
            let raw = RawResponse {
                respondent_id: id.clone(),
                question_id: q.id.clone(),
                scale: q.scale(),
                value,
            };
            binarize(&raw).map_err(|e| match e {
                Error::Ingest { message, .. } => Error::Ingest {
                    row,
                    message: format!("question {}: {message}", q.id),
                },
                other => other,
            })?;
            responses.push(raw);
        }
        respondents.push(Respondent {
            id,
            elected,
            metadata,
        });
    }
    if respondents.is_empty() {
        return Err(Error::NoRespondents);
    }
    let matrix = AnswerMatrix::from_responses(questions, respondents, &responses)?;
    let report = IngestReport {
        respondents: matrix.respondents().len(),
        questions: matrix.questions().len(),
        missing_cells: matrix.missing_cells(),
        filtered_respondents: filtered,
        absent_cells: absent,
    };
    log::info!(
        "ingested {} respondents x {} questions ({} missing cells, {} rows filtered)",
        report.respondents,
        report.questions,
        report.missing_cells,
        report.filtered_respondents
    );
    Ok((matrix, report))
}

fn parse_flag(s: &str, row: usize) -> Result<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "y" => Ok(true),
        "0" | "false" | "no" | "n" | "" => Ok(false),
        other => Err(Error::Ingest {
            row,
            message: format!("unparseable elected flag {other:?}"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(id: &str, ordinal: usize, kind: QuestionKind) -> Question {
        Question {
            id: id.into(),
            ordinal,
            text: format!("Question {id}?"),
            kind,
            leaning: None,
            scale: None,
        }
    }

    fn toy_questions() -> Vec<Question> {
        vec![
            q("i1", 0, QuestionKind::Issue),
            q("i2", 1, QuestionKind::Issue),
            q("t1", 2, QuestionKind::Attitude),
        ]
    }

    #[test]
    fn likert_binarization_table() {
        let got: Vec<Answer> = (1..=7)
            .map(|v| Scale::Likert7.binarize(v).unwrap())
            .collect();
        use Answer::*;
        assert_eq!(got, vec![No, No, No, Missing, Yes, Yes, Yes]);
    }

    #[test]
    fn four_point_binarization() {
        assert_eq!(Scale::FourPoint.binarize(1).unwrap(), Answer::Yes);
        assert_eq!(Scale::FourPoint.binarize(2).unwrap(), Answer::Yes);
        assert_eq!(Scale::FourPoint.binarize(3).unwrap(), Answer::No);
        assert_eq!(Scale::FourPoint.binarize(4).unwrap(), Answer::No);
        assert!(Scale::FourPoint.binarize(5).is_err());
        assert!(Scale::Likert7.binarize(0).is_err());
        assert!(Scale::Likert7.binarize(8).is_err());
    }

    #[test]
    fn likert_binarization_is_monotone() {
        let rank = |a: Answer| a.as_f64();
        for lo in 1..=7u8 {
            for hi in lo..=7u8 {
                let (a, b) = (
                    rank(Scale::Likert7.binarize(lo).unwrap()),
                    rank(Scale::Likert7.binarize(hi).unwrap()),
                );
                if let (Some(a), Some(b)) = (a, b) {
                    assert!(b >= a, "{lo}->{a} vs {hi}->{b}");
                }
            }
        }
    }

    #[test]
    fn empty_file_has_no_respondents() {
        let err = ingest_reader(&b""[..], toy_questions(), &CorpusSchema::default()).unwrap_err();
        assert_eq!(err.to_string(), "no respondents");
        let header_only = "respondent_id,elected,i1,i2,t1\n";
        let err = ingest_reader(header_only.as_bytes(), toy_questions(), &CorpusSchema::default())
            .unwrap_err();
        assert!(matches!(err, Error::NoRespondents));
    }

    #[test]
    fn unknown_question_column_names_the_row() {
        let csv = "respondent_id,elected,i1,zz\nr1,1,1,1\n";
        let err = ingest_reader(csv.as_bytes(), toy_questions(), &CorpusSchema::default())
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 1") && msg.contains("zz"), "{msg}");
    }

    #[test]
    fn duplicate_respondent_rows_rejected() {
        let csv = "respondent_id,elected,i1,i2,t1\nr1,1,1,2,5\nr1,1,1,2,5\n";
        let err = ingest_reader(csv.as_bytes(), toy_questions(), &CorpusSchema::default())
            .unwrap_err();
        assert!(err.to_string().contains("row 3"), "{err}");
    }

    #[test]
    fn out_of_range_value_rejected() {
        let csv = "respondent_id,elected,i1,i2,t1\nr1,1,5,2,5\n";
        let err = ingest_reader(csv.as_bytes(), toy_questions(), &CorpusSchema::default())
            .unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
    }

    #[test]
    fn raw_duplicate_response_rejected() {
        let responses = vec![
            RawResponse {
                respondent_id: "r1".into(),
                question_id: "i1".into(),
                scale: Scale::FourPoint,
                value: 1,
            };
            2
        ];
        let respondents = vec![Respondent {
            id: "r1".into(),
            elected: true,
            metadata: BTreeMap::new(),
        }];
        let err = AnswerMatrix::from_responses(toy_questions(), respondents, &responses)
            .unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn elected_filter_and_missing_accounting() {
        let csv = "respondent_id,elected,party,i1,i2,t1\n\
                   r1,1,SP,1,3,4\n\
                   r2,0,FDP,1,1,1\n\
                   r3,1,SVP,2,,7\n";
        let (m, report) =
            ingest_reader(csv.as_bytes(), toy_questions(), &CorpusSchema::default()).unwrap();
        assert_eq!(report.respondents, 2);
        assert_eq!(report.filtered_respondents, 1);
        // r1 neutral on t1, r3 absent on i2
        assert_eq!(report.missing_cells, 2);
        assert_eq!(report.absent_cells, 1);
        assert_eq!(m.answer("r3", "t1").unwrap(), Answer::Yes);
        assert_eq!(m.respondents()[1].metadata["party"], "SVP");
        let ym = m.human_yes_mean("t1").unwrap();
        assert_eq!((ym.mean, ym.n), (1.0, 1));
    }

    #[test]
    fn all_missing_target_has_no_gold() {
        let csv = "respondent_id,elected,i1,i2,t1\nr1,1,1,1,4\n";
        let (m, _) =
            ingest_reader(csv.as_bytes(), toy_questions(), &CorpusSchema::default()).unwrap();
        assert!(matches!(
            m.human_yes_mean("t1"),
            Err(Error::NoGoldAnswers(_))
        ));
    }

    #[test]
    fn toy_majority_baseline() {
        let csv = "respondent_id,elected,i1,i2,t1\nr1,1,1,1,7\nr2,1,1,1,6\nr3,1,1,1,1\n";
        let (m, _) =
            ingest_reader(csv.as_bytes(), toy_questions(), &CorpusSchema::default()).unwrap();
        let b = m.majority_baseline("t1").unwrap();
        assert!((b.accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(b.majority, Some(true));
        let tie = majority_from_mean(0.5);
        assert!(tie.tie && tie.accuracy == 0.5);
    }

    #[test]
    fn ordinals_must_be_contiguous() {
        let mut qs = toy_questions();
        qs[2].ordinal = 5;
        let respondents = vec![Respondent {
            id: "r".into(),
            elected: true,
            metadata: BTreeMap::new(),
        }];
        assert!(matches!(
            AnswerMatrix::from_responses(qs, respondents, &[]),
            Err(Error::Metadata(_))
        ));
    }
}
