//! Deterministic synthetic QA datasets plus ingestion of externally
//! authored ones.
//!
//! Two families are generated from fixed templates: knowledge passages (13
//! QA pairs each) and coreference passages (9 pairs each, with a seeded
//! fraction of pronoun-swapped questions whose gold becomes "I don't
//! know"). Under the canonical entity pool every knowledge passage is
//! exactly 32 words and every coreference passage exactly 44; custom pools
//! with different slot word lengths shift those counts.
//!
//! Span positions index the normalized token sequence of the passage
//! (lowercased whitespace tokens, punctuation trimmed), the same
//! tokenization the metrics use.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::derived_rng;
use crate::metrics::{normalize_tokens, DEFAULT_UNKNOWN_MARKERS};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("requested zero passages")]
    ZeroCount,
    #[error("swap fraction {0} outside [0, 1]")]
    SwapFractionRange(f64),
    #[error("entity pool is missing values for {0}")]
    EmptyPool(&'static str),
    #[error("unsupported gender {0:?}: only \"male\" and \"female\" carry pronoun forms")]
    BadGender(String),
    #[error("gold answer {gold:?} not found in passage for question {question:?}")]
    GroundingFailed { question: String, gold: String },
    #[error("gold is an unknown marker; no span to align")]
    UnknownGold,
    #[error("{} invalid lines", diagnostics.len())]
    Ingest { diagnostics: Vec<IngestDiagnostic> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One rejected JSONL line with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestDiagnostic {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Base,
    Knowledge,
    MultiPresence,
    MultiEntity,
    LongContext,
    Coreference,
    Hops,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Base => "base",
            Task::Knowledge => "knowledge",
            Task::MultiPresence => "multi_presence",
            Task::MultiEntity => "multi_entity",
            Task::LongContext => "long_context",
            Task::Coreference => "coreference",
            Task::Hops => "hops",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerTag {
    Person,
    Thing,
    Organization,
    Creature,
    Location,
    Numerals,
    DateTime,
    Event,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionTag {
    Standard,
    Manipulated,
    Part,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Reverse,
}

/// Template slot kinds, each with a fixed answer tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    FirstName,
    LastName,
    FullName,
    Date,
    Year,
    University,
    Occupation,
    City,
    Location,
    Gender,
}

pub fn tag_answer(slot: Slot) -> AnswerTag {
    match slot {
        Slot::FirstName | Slot::LastName | Slot::FullName => AnswerTag::Person,
        Slot::Date => AnswerTag::DateTime,
        Slot::Year => AnswerTag::Numerals,
        Slot::University => AnswerTag::Organization,
        Slot::Occupation | Slot::Gender => AnswerTag::Thing,
        Slot::City | Slot::Location => AnswerTag::Location,
    }
}

/// Slot value lists for template instantiation. Sampling is uniform under
/// the per-passage derived RNG, one draw per slot in declaration order.
#[derive(Debug, Clone)]
pub struct EntityPool {
    pub first_names: Vec<String>,
    pub last_names: Vec<String>,
    /// Full dates, canonically "Month Day, Year" (three words).
    pub dates: Vec<String>,
    pub universities: Vec<String>,
    pub occupations: Vec<String>,
    pub cities: Vec<String>,
    pub locations: Vec<String>,
    pub genders: Vec<String>,
}

impl EntityPool {
    /// Default pool with fixed per-slot word lengths: one word everywhere
    /// except dates (three) and universities/occupations (two). City and
    /// location values are disjoint so residence and birthplace spans never
    /// collide.
    pub fn canonical() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect();
        EntityPool {
            first_names: s(&[
                "Cora", "Xena", "Julian", "Mira", "Tobias", "Selene", "Anders", "Priya", "Felix",
                "Ingrid", "Mateo", "Hazel", "Rowan", "Leila", "Viktor", "Noor",
            ]),
            last_names: s(&[
                "Delaine", "Bell", "Foster", "Hartley", "Okafor", "Lindqvist", "Marchetti",
                "Novak", "Ashford", "Kimura", "Vance", "Petrov", "Sandoval", "Whitlock", "Iyer",
                "Moreau",
            ]),
            dates: s(&[
                "December 11, 1954",
                "November 20, 1968",
                "September 7, 1962",
                "March 3, 1971",
                "July 19, 1949",
                "January 5, 1983",
                "April 28, 1957",
                "June 14, 1990",
                "August 2, 1946",
                "October 31, 1975",
                "February 9, 1988",
                "May 23, 1961",
            ]),
            universities: s(&[
                "Westbrook University",
                "Harborview University",
                "Tianjin University",
                "Daegu University",
                "Shanghai University",
                "Aldgate University",
                "Noventa University",
                "Kestrel University",
                "Bluewater University",
                "Ortega University",
            ]),
            occupations: s(&[
                "Tour Guide",
                "Marine Biologist",
                "Bridge Engineer",
                "Pastry Chef",
                "Wildlife Photographer",
                "Data Archivist",
                "Flight Instructor",
                "Stage Manager",
                "Forensic Accountant",
                "Church Organist",
            ]),
            cities: s(&[
                "Lisbon", "Oslo", "Tunis", "Quito", "Hanoi", "Perth", "Denver", "Lagos", "Mumbai",
                "Krakow", "Seville", "Geneva",
            ]),
            locations: s(&[
                "Porto", "Aleppo", "Bergen", "Cusco", "Kyoto", "Valletta", "Tbilisi", "Windhoek",
                "Suva", "Reykjavik", "Galway", "Davao",
            ]),
            genders: s(&["male", "female"]),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let checks: [(&'static str, &Vec<String>); 8] = [
            ("first names", &self.first_names),
            ("last names", &self.last_names),
            ("dates", &self.dates),
            ("universities", &self.universities),
            ("occupations", &self.occupations),
            ("cities", &self.cities),
            ("locations", &self.locations),
            ("genders", &self.genders),
        ];
        for (name, list) in checks {
            if list.is_empty() {
                return Err(SynthError::EmptyPool(name));
            }
        }
        for g in &self.genders {
            if g != "male" && g != "female" {
                return Err(SynthError::BadGender(g.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QAPair {
    pub question: String,
    pub gold: String,
    pub answer_tag: AnswerTag,
    pub question_tag: QuestionTag,
    pub direction: Direction,
    pub hop_index: Option<u32>,
    /// Normalized-token positions of the gold span(s); empty for
    /// unknown-marker golds.
    pub t_ans: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthExample {
    pub id: String,
    pub task: Task,
    pub passage: String,
    pub qa_pairs: Vec<QAPair>,
}

impl SynthExample {
    pub fn word_count(&self) -> usize {
        self.passage.split_whitespace().count()
    }
}

/// Normalized passage tokens; span positions index this sequence.
pub fn passage_tokens(passage: &str) -> Vec<String> {
    normalize_tokens(passage)
}

pub fn is_unknown_marker(gold: &str) -> bool {
    let toks = normalize_tokens(gold);
    DEFAULT_UNKNOWN_MARKERS
        .iter()
        .any(|m| normalize_tokens(m) == toks)
}

/// Positions of every occurrence of gold as a consecutive normalized token
/// run in the passage, unioned. Grounding fails when there is none.
pub fn align_answer_span(passage: &str, gold: &str) -> Result<Vec<usize>, SynthError> {
    if is_unknown_marker(gold) {
        return Err(SynthError::UnknownGold);
    }
    let toks = passage_tokens(passage);
    let needle = normalize_tokens(gold);
    if needle.is_empty() || needle.len() > toks.len() {
        return Err(SynthError::GroundingFailed {
            question: String::new(),
            gold: gold.to_string(),
        });
    }
    let mut positions = BTreeSet::new();
    for start in 0..=(toks.len() - needle.len()) {
        if toks[start..start + needle.len()] == needle[..] {
            positions.extend(start..start + needle.len());
        }
    }
    if positions.is_empty() {
        return Err(SynthError::GroundingFailed {
            question: String::new(),
            gold: gold.to_string(),
        });
    }
    Ok(positions.into_iter().collect())
}

fn pick<'a>(rng: &mut impl Rng, xs: &'a [String]) -> &'a str {
    &xs[rng.gen_range(0..xs.len())]
}

fn grounded_pair(
    passage: &str,
    question: String,
    gold: String,
    slot: Slot,
    question_tag: QuestionTag,
    direction: Direction,
) -> Result<QAPair, SynthError> {
    let t_ans = align_answer_span(passage, &gold).map_err(|e| match e {
        SynthError::GroundingFailed { gold, .. } => SynthError::GroundingFailed {
            question: question.clone(),
            gold,
        },
        other => other,
    })?;
    Ok(QAPair {
        question,
        gold,
        answer_tag: tag_answer(slot),
        question_tag,
        direction,
        hop_index: None,
        t_ans,
    })
}

/// Knowledge-manipulation passages: a fixed biographical template around
/// born-on / studied-in / work-as / live-in lines, 13 QA pairs covering
/// each attribute forward and reverse plus name-part and subject questions.
/// Name parts and the birth year require picking a fragment out of a longer
/// span, so they carry the manipulated tag.
pub fn gen_knowledge_manipulation(
    pool: &EntityPool,
    n: usize,
    seed: u64,
) -> Result<Vec<SynthExample>, SynthError> {
    if n == 0 {
        return Err(SynthError::ZeroCount);
    }
    pool.validate()?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = derived_rng(seed, "knowledge", i as u64, 0);
        let first = pick(&mut rng, &pool.first_names).to_string();
        let last = pick(&mut rng, &pool.last_names).to_string();
        let date = pick(&mut rng, &pool.dates).to_string();
        let university = pick(&mut rng, &pool.universities).to_string();
        let occupation = pick(&mut rng, &pool.occupations).to_string();
        let city = pick(&mut rng, &pool.cities).to_string();

        let full = format!("{first} {last}");
        let year = date
            .split_whitespace()
            .last()
            .expect("dates are non-empty")
            .to_string();
        let passage = format!(
            "This is a biographical record. {full} was born on {date}. \
             They studied in {university}. They work as {occupation}. \
             They live in {city}. The record describes one person."
        );

        let p = &passage;
        let qa_pairs = vec![
            grounded_pair(
                p,
                format!("What is {full}'s first name?"),
                first.clone(),
                Slot::FirstName,
                QuestionTag::Manipulated,
                Direction::Forward,
            )?,
            grounded_pair(
                p,
                format!("What is {full}'s last name?"),
                last.clone(),
                Slot::LastName,
                QuestionTag::Manipulated,
                Direction::Forward,
            )?,
            grounded_pair(
                p,
                format!("In which year was {full} born?"),
                year,
                Slot::Year,
                QuestionTag::Manipulated,
                Direction::Forward,
            )?,
            grounded_pair(
                p,
                format!("When was {full} born?"),
                date.clone(),
                Slot::Date,
                QuestionTag::Standard,
                Direction::Forward,
            )?,
            grounded_pair(
                p,
                format!("In which university did {full} study?"),
                university.clone(),
                Slot::University,
                QuestionTag::Standard,
                Direction::Forward,
            )?,
            grounded_pair(
                p,
                format!("What does {full} work as?"),
                occupation.clone(),
                Slot::Occupation,
                QuestionTag::Standard,
                Direction::Forward,
            )?,
            grounded_pair(
                p,
                format!("Where does {full} live?"),
                city.clone(),
                Slot::City,
                QuestionTag::Standard,
                Direction::Forward,
            )?,
            grounded_pair(
                p,
                format!("Who was born on {date}?"),
                full.clone(),
                Slot::FullName,
                QuestionTag::Standard,
                Direction::Reverse,
            )?,
            grounded_pair(
                p,
                format!("Who studied in {university}?"),
                full.clone(),
                Slot::FullName,
                QuestionTag::Standard,
                Direction::Reverse,
            )?,
            grounded_pair(
                p,
                format!("Who works as {occupation}?"),
                full.clone(),
                Slot::FullName,
                QuestionTag::Standard,
                Direction::Reverse,
            )?,
            grounded_pair(
                p,
                format!("Who lives in {city}?"),
                full.clone(),
                Slot::FullName,
                QuestionTag::Standard,
                Direction::Reverse,
            )?,
            grounded_pair(
                p,
                "What is the full name of the person described?".to_string(),
                full.clone(),
                Slot::FullName,
                QuestionTag::Standard,
                Direction::Forward,
            )?,
            grounded_pair(
                p,
                "What is the subject of the given passage?".to_string(),
                full.clone(),
                Slot::FullName,
                QuestionTag::Standard,
                Direction::Forward,
            )?,
        ];
        out.push(SynthExample {
            id: format!("knowledge-{i}"),
            task: Task::Knowledge,
            passage,
            qa_pairs,
        });
    }
    Ok(out)
}

fn pronoun_forms(gender: &str) -> (&'static str, &'static str) {
    // (subject, possessive)
    if gender == "male" {
        ("he", "his")
    } else {
        ("she", "her")
    }
}

fn flipped(gender: &str) -> &'static str {
    if gender == "male" {
        "female"
    } else {
        "male"
    }
}

fn capitalize(word: &str) -> String {
    let mut cs = word.chars();
    match cs.next() {
        Some(c) => c.to_uppercase().collect::<String>() + cs.as_str(),
        None => String::new(),
    }
}

/// Coreference passages: the biographical template restated with pronouns
/// after an explicit gender sentence, 9 QA pairs of which six refer to the
/// subject only by pronoun. Each pronoun pair is independently
/// gender-flipped with probability `swap_fraction`; a flipped question has
/// no referent, so its gold is "I don't know" and its span is empty.
pub fn gen_coreference(
    pool: &EntityPool,
    n: usize,
    swap_fraction: f64,
    seed: u64,
) -> Result<Vec<SynthExample>, SynthError> {
    if n == 0 {
        return Err(SynthError::ZeroCount);
    }
    if !(0.0..=1.0).contains(&swap_fraction) || swap_fraction.is_nan() {
        return Err(SynthError::SwapFractionRange(swap_fraction));
    }
    pool.validate()?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = derived_rng(seed, "coreference", i as u64, 0);
        let first = pick(&mut rng, &pool.first_names).to_string();
        let last = pick(&mut rng, &pool.last_names).to_string();
        let date = pick(&mut rng, &pool.dates).to_string();
        let location = pick(&mut rng, &pool.locations).to_string();
        let gender = pick(&mut rng, &pool.genders).to_string();
        let university = pick(&mut rng, &pool.universities).to_string();
        let occupation = pick(&mut rng, &pool.occupations).to_string();
        let city = pick(&mut rng, &pool.cities).to_string();

        let full = format!("{first} {last}");
        let (subj, poss) = pronoun_forms(&gender);
        let cap = capitalize(subj);
        let passage = format!(
            "This is a short biographical record about one person. \
             {full} was born on {date} in {location}. {cap} is {gender}. \
             {cap} studied in {university}. {cap} works as {occupation}. \
             {cap} lives in {city}. Each later sentence refers to the same person."
        );

        // (question under passage pronouns, question under flipped
        // pronouns, gold, slot)
        let (fsubj, fposs) = pronoun_forms(flipped(&gender));
        let pronoun_questions: Vec<(String, String, String, Slot)> = vec![
            (
                format!("When was {subj} born?"),
                format!("When was {fsubj} born?"),
                date.clone(),
                Slot::Date,
            ),
            (
                format!("Where was {subj} born?"),
                format!("Where was {fsubj} born?"),
                location.clone(),
                Slot::Location,
            ),
            (
                format!("What is {poss} gender?"),
                format!("What is {fposs} gender?"),
                gender.clone(),
                Slot::Gender,
            ),
            (
                format!("In which university did {subj} study?"),
                format!("In which university did {fsubj} study?"),
                university.clone(),
                Slot::University,
            ),
            (
                format!("What does {subj} work as?"),
                format!("What does {fsubj} work as?"),
                occupation.clone(),
                Slot::Occupation,
            ),
            (
                format!("Where does {subj} live?"),
                format!("Where does {fsubj} live?"),
                city.clone(),
                Slot::City,
            ),
        ];

        let mut qa_pairs = Vec::with_capacity(9);
        for (question, swapped_question, gold, slot) in pronoun_questions {
            let swap = rng.gen::<f64>() < swap_fraction;
            if swap {
                qa_pairs.push(QAPair {
                    question: swapped_question,
                    gold: "I don't know".to_string(),
                    answer_tag: tag_answer(slot),
                    question_tag: QuestionTag::Standard,
                    direction: Direction::Forward,
                    hop_index: None,
                    t_ans: Vec::new(),
                });
            } else {
                qa_pairs.push(grounded_pair(
                    &passage,
                    question,
                    gold,
                    slot,
                    QuestionTag::Standard,
                    Direction::Forward,
                )?);
            }
        }
        qa_pairs.push(grounded_pair(
            &passage,
            format!("Who was born in {location}?"),
            full.clone(),
            Slot::FullName,
            QuestionTag::Standard,
            Direction::Reverse,
        )?);
        qa_pairs.push(grounded_pair(
            &passage,
            format!("Who works as {occupation}?"),
            full.clone(),
            Slot::FullName,
            QuestionTag::Standard,
            Direction::Reverse,
        )?);
        qa_pairs.push(grounded_pair(
            &passage,
            "What is the full name of the person described?".to_string(),
            full.clone(),
            Slot::FullName,
            QuestionTag::Standard,
            Direction::Forward,
        )?);

        out.push(SynthExample {
            id: format!("coreference-{i}"),
            task: Task::Coreference,
            passage,
            qa_pairs,
        });
    }
    Ok(out)
}

pub const PROMPT_HEADER: &str =
    "Read the following text and answer briefly based on it. Return only the answer. Do not generate extra.";

/// Question-agnostic prompt: instruction header, blank line, passage.
pub fn agnostic_prompt(passage: &str) -> String {
    format!("{PROMPT_HEADER}\n\n{passage}")
}

/// Question-aware prompt: the header, the advertised question list, then
/// the passage.
pub fn aware_prompt(passage: &str, questions: &[String]) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "{PROMPT_HEADER}\n\nYou will be given one of the following questions:\n\n"
    );
    for q in questions {
        let _ = writeln!(out, "{q}");
    }
    let _ = write!(out, "\n{passage}");
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct QaRecord {
    question: String,
    gold: String,
    answer_tag: AnswerTag,
    question_tag: QuestionTag,
    direction: Direction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hop_index: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExampleRecord {
    task: Task,
    passage: String,
    qa: Vec<QaRecord>,
}

/// Serialize examples as JSONL, one object per line. Spans are not stored;
/// ingestion recomputes them.
pub fn to_jsonl(examples: &[SynthExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        let record = ExampleRecord {
            task: ex.task,
            passage: ex.passage.clone(),
            qa: ex
                .qa_pairs
                .iter()
                .map(|q| QaRecord {
                    question: q.question.clone(),
                    gold: q.gold.clone(),
                    answer_tag: q.answer_tag,
                    question_tag: q.question_tag,
                    direction: q.direction,
                    hop_index: q.hop_index,
                })
                .collect(),
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Parse and validate a JSONL dataset. Every line must parse, every
/// non-unknown gold must ground in its passage, and hop indices must
/// appear exactly on hops-task pairs with values 0 through 3. All offending
/// lines are reported together.
pub fn ingest_reader<R: Read>(reader: R) -> Result<Vec<SynthExample>, SynthError> {
    let mut examples = Vec::new();
    let mut diagnostics = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ExampleRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                diagnostics.push(IngestDiagnostic {
                    line: line_no,
                    message: e.to_string(),
                });
                continue;
            }
        };
        match validate_record(record, examples.len()) {
            Ok(ex) => examples.push(ex),
            Err(message) => diagnostics.push(IngestDiagnostic {
                line: line_no,
                message,
            }),
        }
    }
    if diagnostics.is_empty() {
        Ok(examples)
    } else {
        Err(SynthError::Ingest { diagnostics })
    }
}

pub fn ingest_dataset(path: &Path) -> Result<Vec<SynthExample>, SynthError> {
    let file = std::fs::File::open(path)?;
    ingest_reader(file)
}

fn validate_record(record: ExampleRecord, index: usize) -> Result<SynthExample, String> {
    if passage_tokens(&record.passage).is_empty() {
        return Err("passage has no tokens".to_string());
    }
    if record.qa.is_empty() {
        return Err("no qa pairs".to_string());
    }
    let mut qa_pairs = Vec::with_capacity(record.qa.len());
    for (qi, q) in record.qa.into_iter().enumerate() {
        match (record.task, q.hop_index) {
            (Task::Hops, None) => return Err(format!("qa {qi}: hops pair missing hop_index")),
            (Task::Hops, Some(h)) if h > 3 => {
                return Err(format!("qa {qi}: hop_index {h} outside 0..=3"));
            }
            (Task::Hops, Some(_)) => {}
            (_, Some(h)) => {
                return Err(format!("qa {qi}: hop_index {h} on non-hops task"));
            }
            (_, None) => {}
        }
        let t_ans = if is_unknown_marker(&q.gold) {
            Vec::new()
        } else {
            align_answer_span(&record.passage, &q.gold)
                .map_err(|_| format!("qa {qi}: gold {:?} not grounded in passage", q.gold))?
        };
        qa_pairs.push(QAPair {
            question: q.question,
            gold: q.gold,
            answer_tag: q.answer_tag,
            question_tag: q.question_tag,
            direction: q.direction,
            hop_index: q.hop_index,
            t_ans,
        });
    }
    Ok(SynthExample {
        id: format!("{}-{index}", record.task.as_str()),
        task: record.task,
        passage: record.passage,
        qa_pairs,
    })
}

/// Per-task structural summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskStats {
    pub task: Task,
    pub passages: usize,
    pub mean_words: f64,
    pub sd_words: f64,
    pub mean_queries: f64,
    pub total_queries: usize,
}

pub fn dataset_stats(examples: &[SynthExample]) -> Vec<TaskStats> {
    let mut by_task: Vec<(Task, Vec<&SynthExample>)> = Vec::new();
    for ex in examples {
        match by_task.iter_mut().find(|(t, _)| *t == ex.task) {
            Some((_, v)) => v.push(ex),
            None => by_task.push((ex.task, vec![ex])),
        }
    }
    by_task
        .into_iter()
        .map(|(task, exs)| {
            let n = exs.len() as f64;
            let words: Vec<f64> = exs.iter().map(|e| e.word_count() as f64).collect();
            let mean = words.iter().sum::<f64>() / n;
            let var = words.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / n;
            let total_queries: usize = exs.iter().map(|e| e.qa_pairs.len()).sum();
            TaskStats {
                task,
                passages: exs.len(),
                mean_words: mean,
                sd_words: var.sqrt(),
                mean_queries: total_queries as f64 / n,
                total_queries,
            }
        })
        .collect()
}
