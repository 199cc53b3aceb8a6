//! Raw template renders checked against committed bytes.
//! Set UPDATE_GOLDEN=1 to rewrite the files after an intended change.

mod common;

use qmbias::prompt::{render_raw, ContextSpec, PromptFactory, PromptFormat, TemplateId};
use qmbias::survey::{ingest_reader, AnswerMatrix, CorpusSchema, Question};

pub fn two_example_matrix() -> AnswerMatrix {
    let text = std::fs::read_to_string(common::data_dir().join("appendix/questions.json")).unwrap();
    let all: Vec<Question> = serde_json::from_str(&text).unwrap();
    let mut questions: Vec<Question> = all
        .into_iter()
        .filter(|q| ["Q1.1", "Q1.2", "Q13.1"].contains(&q.id.as_str()))
        .collect();
    for (i, q) in questions.iter_mut().enumerate() {
        q.ordinal = i;
    }
    let csv = "respondent_id,Q1.1,Q1.2,Q13.1\nr1,1,4,6\n";
    let schema = CorpusSchema {
        elected_column: None,
        metadata_columns: vec![],
        ..Default::default()
    };
    ingest_reader(csv.as_bytes(), questions, &schema).unwrap().0
}

fn check(template: TemplateId, file: &str) {
    let m = two_example_matrix();
    let prompt = PromptFactory::new(PromptFormat::raw(template))
        .build_qm(&m, 0, "Q13.1", &ContextSpec::full(vec![0, 1]))
        .unwrap();
    let got = render_raw(&prompt, template).unwrap();
    let path = common::golden_dir().join(file);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &got).unwrap();
    }
    let want = std::fs::read(&path).unwrap();
    assert_eq!(got.as_bytes(), want.as_slice(), "{file} differs");
}

#[test]
fn llama3_two_examples() {
    check(TemplateId::Llama3, "llama3_2ctx.txt");
}

#[test]
fn olmo_two_examples() {
    check(TemplateId::Olmo, "olmo_2ctx.txt");
}
