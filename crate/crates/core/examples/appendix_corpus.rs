//! Writes a 200-row candidate table whose 192 elected respondents reproduce the
//! published attitude distributions exactly. Issue answers are synthetic.
//!
//! cargo run -p qmbias --example appendix_corpus -- data/appendix/questions.json data/appendix/matrix.csv

use std::error::Error;
use std::fmt::Write as _;

use qmbias::seeding::rng_for;
use qmbias::survey::{load_questions, QuestionKind};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

const ELECTED: usize = 192;
const NOT_ELECTED: usize = 8;
const SEED: u64 = 2023;

/// Respondents per Likert category (strongly disagree .. strongly agree), Q13.1 to Q13.7.
const LIKERT_COUNTS: [[usize; 7]; 7] = [
    [51, 36, 14, 7, 21, 41, 22],
    [16, 35, 17, 13, 16, 29, 66],
    [50, 28, 12, 20, 15, 15, 52],
    [81, 21, 13, 28, 24, 19, 6],
    [3, 2, 14, 21, 57, 63, 32],
    [43, 29, 17, 18, 28, 37, 20],
    [32, 35, 18, 15, 25, 27, 40],
];

/// Whether agreeing aligns with the latent left-right position.
const RIGHT_IF_YES: [bool; 7] = [true, true, false, true, false, true, false];

fn main() -> Result<(), Box<dyn Error>> {
    let args: Vec<String> = std::env::args().collect();
    let (questions, out) = match args.as_slice() {
        [_, q, o] => (q.as_str(), o.as_str()),
        _ => return Err("usage: appendix_corpus QUESTIONS_JSON OUT_CSV".into()),
    };
    let questions = load_questions(questions)?;
    let issues: Vec<_> = questions.iter().filter(|q| q.kind == QuestionKind::Issue).collect();
    let targets: Vec<_> = questions.iter().filter(|q| q.kind == QuestionKind::Attitude).collect();
    assert_eq!(targets.len(), LIKERT_COUNTS.len());

    let n = ELECTED + NOT_ELECTED;
    let mut rng = rng_for(SEED, &["latent"]);
    let normal = Normal::new(0.0, 1.0)?;
    let latent: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();

    let mut cells = vec![vec![0u8; issues.len() + targets.len()]; n];
    for (j, _) in issues.iter().enumerate() {
        let mut rng = rng_for(SEED, &["issue", &j.to_string()]);
        let loading: f64 = rng.random_range(-1.5..1.5);
        let offset: f64 = rng.random_range(-0.8..0.8);
        for (i, row) in cells.iter_mut().enumerate() {
            let z = loading * latent[i] + offset + normal.sample(&mut rng);
            row[j] = match z {
                z if z > 1.0 => 1,
                z if z > 0.0 => 2,
                z if z > -1.0 => 3,
                _ => 4,
            };
        }
    }
    for (t, counts) in LIKERT_COUNTS.iter().enumerate() {
        let mut rng = rng_for(SEED, &["attitude", &t.to_string()]);
        let sign = if RIGHT_IF_YES[t] { 1.0 } else { -1.0 };
        // rank elected respondents on a noisy latent score and hand out the
        // published category counts along that ranking
        let mut order: Vec<(f64, usize)> = (0..ELECTED)
            .map(|i| (sign * latent[i] + 1.5 * normal.sample(&mut rng), i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut values: Vec<u8> = Vec::with_capacity(ELECTED);
        for (k, &c) in counts.iter().enumerate() {
            values.extend(std::iter::repeat_n(k as u8 + 1, c));
        }
        assert_eq!(values.len(), ELECTED);
        for ((_, i), v) in order.into_iter().zip(values) {
            cells[i][issues.len() + t] = v;
        }
        for row in cells.iter_mut().skip(ELECTED) {
            row[issues.len() + t] = rng.random_range(1..=7);
        }
    }

    let parties = ["SVP", "SP", "FDP", "Mitte", "GPS", "GLP"];
    let cantons = ["ZH", "BE", "VD", "AG", "SG", "GE", "LU", "TI"];
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut rng_for(SEED, &["row-order"]));

    let mut csv = String::from("respondent_id,elected,party,canton");
    for q in issues.iter().chain(&targets) {
        write!(csv, ",{}", q.id)?;
    }
    csv.push('\n');
    for (k, &i) in rows.iter().enumerate() {
        let party = parties[((latent[i] + 3.0).max(0.0) as usize).min(parties.len() - 1)];
        write!(csv, "c{:03},{},{party},{}", k + 1, i < ELECTED, cantons[i % cantons.len()])?;
        for v in &cells[i] {
            write!(csv, ",{v}")?;
        }
        csv.push('\n');
    }
    std::fs::write(out, csv)?;
    Ok(())
}
