//! Paraphrase sets: generation through a chat backend, files, validation.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gateway::GenerationGateway;
use crate::seeding::{derive_seed, rng_for};

pub const PARAPHRASE_SYSTEM_PROMPT: &str =
    "You are a helpful assistant designed to create paraphrases and output them separated by new lines.";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParaphraseRequest {
    pub calls: usize,
    pub per_call: usize,
    pub temperature: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for ParaphraseRequest {
    fn default() -> Self {
        ParaphraseRequest {
            calls: 5,
            per_call: 20,
            temperature: 1.0,
            count: 50,
            seed: 0,
        }
    }
}

pub fn paraphrase_user_prompt(statement: &str, per_call: usize) -> String {
    let statement = statement.trim().trim_end_matches('.');
    format!("Provide {per_call} paraphrases for the following statement: {statement}.")
}

/// The quoted statement inside a question such as
/// `Do you agree with the following statement? "..."`, else the whole text.
pub fn statement_of(question_text: &str) -> &str {
    match (question_text.find('"'), question_text.rfind('"')) {
        (Some(a), Some(b)) if b > a + 1 => &question_text[a + 1..b],
        _ => question_text.trim(),
    }
}

/// Drops list markers models like to prepend ("1.", "2)", "-", "*").
fn clean_line(line: &str) -> &str {
    let line = line.trim();
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    let rest = if digits > 0 {
        match line[digits..].strip_prefix(['.', ')']) {
            Some(r) => r,
            None => line,
        }
    } else if let Some(r) = line.strip_prefix(['-', '*']) {
        r
    } else {
        line
    };
    rest.trim()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneratedSet {
    pub generated: usize,
    pub survivors: usize,
    pub paraphrases: Vec<String>,
}

/// Calls the generator `calls` times with distinct seeds, drops blank lines,
/// deduplicates, and samples `count` survivors with a seeded draw.
pub fn generate_paraphrases(
    gateway: &GenerationGateway,
    statement: &str,
    request: &ParaphraseRequest,
) -> Result<GeneratedSet> {
    let user = paraphrase_user_prompt(statement, request.per_call);
    let mut generated = 0usize;
    let mut seen = HashSet::new();
    let mut survivors = Vec::new();
    for call in 0..request.calls {
        let seed = derive_seed(request.seed, &["paraphrase-call", &call.to_string()]);
        let text = gateway.generate(PARAPHRASE_SYSTEM_PROMPT, &user, request.temperature, seed)?;
        for line in text.lines().map(clean_line).filter(|l| !l.is_empty()) {
            generated += 1;
            if seen.insert(line.to_string()) {
                survivors.push(line.to_string());
            }
        }
    }
    if survivors.len() < request.count {
        return Err(Error::ParaphraseShortfall {
            short: request.count - survivors.len(),
            survivors: survivors.len(),
            requested: request.count,
        });
    }
    let mut rng = rng_for(request.seed, &["paraphrase-sample"]);
    let mut picked = sample(&mut rng, survivors.len(), request.count).into_vec();
    picked.sort_unstable();
    Ok(GeneratedSet {
        generated,
        survivors: survivors.len(),
        paraphrases: picked.into_iter().map(|i| survivors[i].clone()).collect(),
    })
}

pub fn write_paraphrase_file(path: &Path, paraphrases: &[String]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = String::new();
    for p in paraphrases {
        text.push_str(p);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One paraphrase per line; blank lines are ignored.
pub fn load_paraphrase_file(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let set: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if set.is_empty() {
        return Err(Error::Config(format!(
            "paraphrase file {} is empty",
            path.display()
        )));
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SetCheck {
    pub target_id: String,
    pub count: usize,
    pub duplicates: usize,
    pub problems: Vec<String>,
}

impl SetCheck {
    pub fn ok(&self) -> bool {
        self.problems.is_empty()
    }
}

pub fn check_paraphrase_set(target_id: &str, set: &[String], expected: Option<usize>) -> SetCheck {
    let distinct: HashSet<&String> = set.iter().collect();
    let duplicates = set.len() - distinct.len();
    let mut problems = Vec::new();
    if duplicates > 0 {
        problems.push(format!("{duplicates} duplicate line(s)"));
    }
    if let Some(n) = expected {
        if set.len() != n {
            problems.push(format!("{} paraphrases, expected {n}", set.len()));
        }
    }
    SetCheck {
        target_id: target_id.to_string(),
        count: set.len(),
        duplicates,
        problems,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::StubGenerator;
    use std::sync::Arc;

    fn batch(range: std::ops::Range<usize>) -> String {
        range.map(|i| format!("{}. Variant {i}\n\n", i + 1)).collect()
    }

    #[test]
    fn prompt_wording() {
        assert_eq!(
            paraphrase_user_prompt("Smoking should be banned.", 20),
            "Provide 20 paraphrases for the following statement: Smoking should be banned."
        );
        assert_eq!(
            statement_of("Do you agree with the following statement? \"A b c.\""),
            "A b c."
        );
        assert_eq!(statement_of("Plain question?"), "Plain question?");
    }

    #[test]
    fn list_markers_stripped() {
        assert_eq!(clean_line("12. Text"), "Text");
        assert_eq!(clean_line("3) Text"), "Text");
        assert_eq!(clean_line("- Text"), "Text");
        assert_eq!(clean_line("  Text  "), "Text");
        assert_eq!(clean_line("2024 was a year"), "2024 was a year");
    }

    #[test]
    fn hundred_with_eight_duplicates_gives_fifty_of_ninety_two() {
        // five calls of 20; the last call repeats 8 lines from the first
        let mut responses: Vec<String> = (0..4).map(|c| batch(c * 20..c * 20 + 20)).collect();
        responses.push(batch(80..92) + &batch(0..8));
        let gen = Arc::new(StubGenerator::new("g", responses));
        let gw = GenerationGateway::new(gen.clone());
        let out = generate_paraphrases(&gw, "s", &ParaphraseRequest::default()).unwrap();
        assert_eq!((out.generated, out.survivors, out.paraphrases.len()), (100, 92, 50));
        assert_eq!(gen.calls(), 5);
        let distinct: HashSet<_> = out.paraphrases.iter().collect();
        assert_eq!(distinct.len(), 50);
    }

    #[test]
    fn identical_output_is_a_shortfall() {
        let same = "Same line\n".repeat(20);
        let gen = Arc::new(StubGenerator::new("g", vec![same; 5]));
        let gw = GenerationGateway::new(gen);
        match generate_paraphrases(&gw, "s", &ParaphraseRequest::default()) {
            Err(Error::ParaphraseShortfall { short, survivors, requested }) => {
                assert_eq!((short, survivors, requested), (49, 1, 50))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let responses: Vec<String> = (0..5).map(|c| batch(c * 20..c * 20 + 20)).collect();
        let run = |seed| {
            let gw = GenerationGateway::new(Arc::new(StubGenerator::new("g", responses.clone())));
            let req = ParaphraseRequest { seed, ..Default::default() };
            generate_paraphrases(&gw, "s", &req).unwrap().paraphrases
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn file_round_trip_and_checks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("Q.txt");
        let set = vec!["a".to_string(), "b".to_string(), "a".to_string()];
        write_paraphrase_file(&path, &set).unwrap();
        assert_eq!(load_paraphrase_file(&path).unwrap(), set);
        let check = check_paraphrase_set("Q", &set, Some(50));
        assert_eq!(check.duplicates, 1);
        assert_eq!(check.problems.len(), 2);
        fs::write(&path, "\n\n").unwrap();
        assert!(load_paraphrase_file(&path).is_err());
    }
}
