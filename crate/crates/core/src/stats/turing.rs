//! Visual Turing test: study definition, response capture and summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::volume::Modality;

/// Label of a real acquisition; any other label names a model.
pub const REAL: &str = "real";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyItem {
    pub volume_id: String,
    pub patient_id: String,
    pub label: String,
}

impl StudyItem {
    pub fn is_real(&self) -> bool {
        self.label == REAL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub question_id: String,
    pub part: u8,
    pub task: String,
    /// Modality of the displayed images.
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
    pub items: Vec<StudyItem>,
    #[serde(default)]
    pub is_sanity: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub study_id: String,
    /// Volume id to NIfTI path; relative paths resolve against the config file.
    pub volumes: BTreeMap<String, PathBuf>,
    pub questions: Vec<Question>,
}

impl StudyConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        let mut s: StudyConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in s.volumes.values_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn question(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.question_id == id)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for q in &self.questions {
            let bad = |msg: String| Error::Validation(format!("question {}: {msg}", q.question_id));
            if !ids.insert(q.question_id.as_str()) {
                return Err(bad("duplicate question id".into()));
            }
            let want = match q.part {
                1 => 1,
                2 => 2,
                3 => 3,
                p => return Err(bad(format!("part must be 1, 2 or 3, got {p}"))),
            };
            if q.items.len() != want {
                return Err(bad(format!("part {} needs {want} items, got {}", q.part, q.items.len())));
            }
            for it in &q.items {
                if !self.volumes.contains_key(&it.volume_id) {
                    return Err(bad(format!("unknown volume {}", it.volume_id)));
                }
            }
            if q.items.iter().any(|it| it.patient_id != q.items[0].patient_id) {
                return Err(bad("items must come from the same patient".into()));
            }
            match (q.part, q.is_sanity) {
                (1, true) => return Err(bad("part 1 has no sanity checks".into())),
                (2, false) => {
                    if q.items.iter().any(StudyItem::is_real) {
                        return Err(bad("part 2 pairs must be synthetic".into()));
                    }
                    if q.items[0].label == q.items[1].label {
                        return Err(bad("part 2 pairs must compare different models".into()));
                    }
                }
                (2, true) => {
                    if q.items[0].volume_id != q.items[1].volume_id {
                        return Err(bad("a part 2 sanity pair shows one volume twice".into()));
                    }
                }
                (3, false) => {
                    let labels: BTreeSet<&str> = q.items.iter().map(|i| i.label.as_str()).collect();
                    if labels.len() != 3 {
                        return Err(bad("part 3 triplets need three distinct sources".into()));
                    }
                }
                (3, true) if sanity_twins(q).is_none() => {
                    return Err(bad("a part 3 sanity triplet needs two items from one model".into()));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// What the browser sees: no labels, no sanity flags.
    pub fn client_view(&self) -> ClientStudy {
        ClientStudy {
            study_id: self.study_id.clone(),
            questions: self
                .questions
                .iter()
                .map(|q| ClientQuestion {
                    question_id: q.question_id.clone(),
                    part: q.part,
                    volume_ids: q.items.iter().map(|i| i.volume_id.clone()).collect(),
                    options: options(q.part).iter().map(|s| s.to_string()).collect(),
                })
                .collect(),
        }
    }
}

/// Per-part question counts with the number of sanity checks.
pub fn part_counts(study: &StudyConfig) -> [(usize, usize); 3] {
    let mut out = [(0, 0); 3];
    for q in &study.questions {
        let slot = &mut out[q.part as usize - 1];
        slot.0 += 1;
        if q.is_sanity {
            slot.1 += 1;
        }
    }
    out
}

/// Indices of the two items sharing a model label in a triplet.
fn sanity_twins(q: &Question) -> Option<(usize, usize)> {
    for a in 0..q.items.len() {
        for b in a + 1..q.items.len() {
            if q.items[a].label == q.items[b].label && !q.items[a].is_real() {
                return Some((a, b));
            }
        }
    }
    None
}

fn options(part: u8) -> &'static [&'static str] {
    match part {
        1 => &["real", "synthetic"],
        2 => &["A", "B", "none"],
        _ => &["1", "2", "3"],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientQuestion {
    pub question_id: String,
    pub part: u8,
    pub volume_ids: Vec<String>,
    pub options: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientStudy {
    pub study_id: String,
    pub questions: Vec<ClientQuestion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    Ranks(Vec<u8>),
    Choice(String),
}

/// Body of `POST /responses`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub participant_id: String,
    pub question_id: String,
    pub part: u8,
    pub answer: Answer,
}

/// One stored answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRow {
    pub participant_id: String,
    pub question_id: String,
    pub part: u8,
    /// `real`/`synthetic`, `A`/`B`/`none`, or ranks joined by `-`.
    pub answer: String,
    pub is_sanity: bool,
    pub timestamp: String,
}

/// Stable opaque id derived from the client token.
pub fn anonymize(token: &str) -> String {
    let digest = Sha256::digest(token.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Checks a submission against the study and turns it into a stored row.
pub fn accept_submission(study: &StudyConfig, sub: &Submission, timestamp: &str) -> Result<ResponseRow> {
    if sub.participant_id.trim().is_empty() {
        return Err(Error::Validation("participant_id is empty".into()));
    }
    let q = study
        .question(&sub.question_id)
        .ok_or_else(|| Error::Validation(format!("unknown question {}", sub.question_id)))?;
    if q.part != sub.part {
        return Err(Error::Validation(format!(
            "question {} belongs to part {}, not {}",
            q.question_id, q.part, sub.part
        )));
    }
    let answer = match (&sub.answer, q.part) {
        (Answer::Choice(c), 1) if c == "real" || c == "synthetic" => c.clone(),
        (Answer::Choice(c), 2) if c == "A" || c == "B" || c == "none" => c.clone(),
        (Answer::Ranks(r), 3) => {
            let mut sorted = r.clone();
            sorted.sort_unstable();
            if sorted != [1, 2, 3] {
                return Err(Error::Validation(format!("ranks {r:?} are not a permutation of 1, 2, 3")));
            }
            join_ranks(r)
        }
        (a, p) => return Err(Error::Validation(format!("answer {a:?} is not valid for part {p}"))),
    };
    Ok(ResponseRow {
        participant_id: anonymize(&sub.participant_id),
        question_id: q.question_id.clone(),
        part: q.part,
        answer,
        is_sanity: q.is_sanity,
        timestamp: timestamp.to_string(),
    })
}

fn join_ranks(r: &[u8]) -> String {
    r.iter().map(u8::to_string).collect::<Vec<_>>().join("-")
}

pub fn parse_ranks(s: &str) -> Result<[u8; 3]> {
    let parts: Vec<u8> = s
        .split('-')
        .map(|p| p.parse::<u8>().map_err(|_| Error::Validation(format!("bad rank answer {s:?}"))))
        .collect::<Result<_>>()?;
    let mut sorted = parts.clone();
    sorted.sort_unstable();
    if sorted != [1, 2, 3] {
        return Err(Error::Validation(format!("rank answer {s:?} is not a permutation")));
    }
    Ok([parts[0], parts[1], parts[2]])
}

pub const RESPONSE_HEADER: [&str; 6] = ["participant_id", "question_id", "part", "answer", "is_sanity", "timestamp"];

/// Appends rows, writing the header when the file is new or empty.
pub fn append_responses(path: &Path, rows: &[ResponseRow]) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io_at(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(RESPONSE_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io_at(path, e))?;
    Ok(())
}

pub fn read_responses(reader: impl std::io::Read) -> Result<Vec<ResponseRow>> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize().map(|row| Ok(row?)).collect()
}

fn pct(k: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * k as f64 / n as f64
    }
}

fn lookup<'a>(study: &'a StudyConfig, row: &ResponseRow) -> Result<&'a Question> {
    study
        .question(&row.question_id)
        .ok_or_else(|| Error::Configuration(format!("no answer key for question {}", row.question_id)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantAccuracy {
    pub participant_id: String,
    pub real_accuracy: f64,
    pub synthetic_accuracy: f64,
    pub balanced_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Part1Summary {
    pub answers: usize,
    pub accuracy: f64,
    pub real_accuracy: f64,
    pub synthetic_accuracy: f64,
    /// Real images called synthetic.
    pub real_misclassified: f64,
    /// Synthetic images called real.
    pub synthetic_misclassified: f64,
    /// Accuracy per modality family (CT, MRI, PET).
    pub by_family: BTreeMap<String, f64>,
    pub participants: Vec<ParticipantAccuracy>,
    pub best: Option<String>,
    pub worst_real: Option<String>,
    pub worst_synthetic: Option<String>,
}

#[derive(Default, Clone, Copy)]
struct Tally {
    real: (usize, usize),
    synth: (usize, usize),
}

impl Tally {
    fn add(&mut self, real: bool, correct: bool) {
        let slot = if real { &mut self.real } else { &mut self.synth };
        slot.1 += 1;
        if correct {
            slot.0 += 1;
        }
    }
}

pub fn part1_summary(study: &StudyConfig, responses: &[ResponseRow]) -> Result<Part1Summary> {
    let mut all = Tally::default();
    let mut family: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut people: BTreeMap<String, Tally> = BTreeMap::new();
    for row in responses.iter().filter(|r| r.part == 1) {
        let q = lookup(study, row)?;
        let real = q.items[0].is_real();
        let said_real = match row.answer.as_str() {
            "real" => true,
            "synthetic" => false,
            a => return Err(Error::Validation(format!("part 1 answer {a:?}"))),
        };
        let correct = real == said_real;
        all.add(real, correct);
        people.entry(row.participant_id.clone()).or_default().add(real, correct);
        let f = family.entry(q.modality.family().to_string()).or_default();
        f.1 += 1;
        if correct {
            f.0 += 1;
        }
    }
    let participants: Vec<ParticipantAccuracy> = people
        .into_iter()
        .map(|(id, t)| {
            let ra = pct(t.real.0, t.real.1);
            let sa = pct(t.synth.0, t.synth.1);
            ParticipantAccuracy {
                participant_id: id,
                real_accuracy: ra,
                synthetic_accuracy: sa,
                balanced_accuracy: (ra + sa) / 2.0,
            }
        })
        .collect();
    let pick = |key: fn(&ParticipantAccuracy) -> f64, best: bool| {
        participants
            .iter()
            .fold(None::<&ParticipantAccuracy>, |acc, p| match acc {
                None => Some(p),
                Some(a) if (best && key(p) > key(a)) || (!best && key(p) < key(a)) => Some(p),
                keep => keep,
            })
            .map(|p| p.participant_id.clone())
    };
    let n = all.real.1 + all.synth.1;
    Ok(Part1Summary {
        answers: n,
        accuracy: pct(all.real.0 + all.synth.0, n),
        real_accuracy: pct(all.real.0, all.real.1),
        synthetic_accuracy: pct(all.synth.0, all.synth.1),
        real_misclassified: pct(all.real.1 - all.real.0, all.real.1),
        synthetic_misclassified: pct(all.synth.1 - all.synth.0, all.synth.1),
        by_family: family.into_iter().map(|(k, (c, t))| (k, pct(c, t))).collect(),
        best: pick(|p| p.balanced_accuracy, true),
        worst_real: pick(|p| p.real_accuracy, false),
        worst_synthetic: pick(|p| p.synthetic_accuracy, false),
        participants,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPreference {
    /// Task name, or `all` for the aggregate over tasks.
    pub task: String,
    pub model_a: String,
    pub model_b: String,
    pub answers: usize,
    pub pct_a: f64,
    pub pct_b: f64,
    pub pct_none: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Part2Summary {
    pub pairs: Vec<PairPreference>,
    pub sanity_answers: usize,
    /// Share of sanity answers expressing a preference.
    pub sanity_violation_rate: f64,
}

pub fn part2_summary(study: &StudyConfig, responses: &[ResponseRow]) -> Result<Part2Summary> {
    // (task, a, b) -> (a, b, none)
    let mut cells: BTreeMap<(String, String, String), [usize; 3]> = BTreeMap::new();
    let (mut sanity, mut violations) = (0, 0);
    for row in responses.iter().filter(|r| r.part == 2) {
        let q = lookup(study, row)?;
        let choice = match row.answer.as_str() {
            "A" => 0,
            "B" => 1,
            "none" => 2,
            a => return Err(Error::Validation(format!("part 2 answer {a:?}"))),
        };
        if q.is_sanity {
            sanity += 1;
            if choice != 2 {
                violations += 1;
            }
            continue;
        }
        let (mut a, mut b) = (q.items[0].label.clone(), q.items[1].label.clone());
        let mut choice = choice;
        if b < a {
            std::mem::swap(&mut a, &mut b);
            choice = [1, 0, 2][choice];
        }
        for task in [q.task.clone(), "all".to_string()] {
            cells.entry((task, a.clone(), b.clone())).or_default()[choice] += 1;
        }
    }
    let pairs = cells
        .into_iter()
        .map(|((task, model_a, model_b), c)| {
            let n = c.iter().sum();
            PairPreference {
                task,
                model_a,
                model_b,
                answers: n,
                pct_a: pct(c[0], n),
                pct_b: pct(c[1], n),
                pct_none: pct(c[2], n),
            }
        })
        .collect();
    Ok(Part2Summary {
        pairs,
        sanity_answers: sanity,
        sanity_violation_rate: pct(violations, sanity),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankDistribution {
    pub label: String,
    pub answers: usize,
    pub pct_rank1: f64,
    pub pct_rank2: f64,
    pub pct_rank3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanityOutcome {
    pub participant_id: String,
    pub question_id: String,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Part3Summary {
    pub distributions: Vec<RankDistribution>,
    pub sanity: Vec<SanityOutcome>,
    pub sanity_violation_rate: f64,
}

pub fn part3_summary(study: &StudyConfig, responses: &[ResponseRow]) -> Result<Part3Summary> {
    let mut counts: BTreeMap<String, [usize; 3]> = BTreeMap::new();
    let mut sanity = Vec::new();
    for row in responses.iter().filter(|r| r.part == 3) {
        let q = lookup(study, row)?;
        let ranks = parse_ranks(&row.answer)?;
        if q.is_sanity {
            let (a, b) = sanity_twins(q)
                .ok_or_else(|| Error::Configuration(format!("sanity question {} has no twin items", q.question_id)))?;
            sanity.push(SanityOutcome {
                participant_id: row.participant_id.clone(),
                question_id: q.question_id.clone(),
                violated: ranks[a].abs_diff(ranks[b]) > 1,
            });
            continue;
        }
        for (item, &r) in q.items.iter().zip(&ranks) {
            counts.entry(item.label.clone()).or_default()[r as usize - 1] += 1;
        }
    }
    let violated = sanity.iter().filter(|s| s.violated).count();
    Ok(Part3Summary {
        distributions: counts
            .into_iter()
            .map(|(label, c)| {
                let n = c.iter().sum();
                RankDistribution {
                    label,
                    answers: n,
                    pct_rank1: pct(c[0], n),
                    pct_rank2: pct(c[1], n),
                    pct_rank3: pct(c[2], n),
                }
            })
            .collect(),
        sanity_violation_rate: pct(violated, sanity.len()),
        sanity,
    })
}

fn f(v: f64) -> String {
    format!("{v:.4}")
}

pub fn write_part1_csv(s: &Part1Summary, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["participant_id", "real_accuracy", "synthetic_accuracy", "balanced_accuracy"])?;
    for p in &s.participants {
        w.write_record([p.participant_id.clone(), f(p.real_accuracy), f(p.synthetic_accuracy), f(p.balanced_accuracy)])?;
    }
    w.write_record([
        "average".to_string(),
        f(s.real_accuracy),
        f(s.synthetic_accuracy),
        f((s.real_accuracy + s.synthetic_accuracy) / 2.0),
    ])?;
    w.flush()?;
    Ok(())
}

pub fn write_part2_csv(s: &Part2Summary, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["task", "model_a", "model_b", "answers", "pct_a", "pct_b", "pct_none"])?;
    for p in &s.pairs {
        w.write_record([
            p.task.clone(),
            p.model_a.clone(),
            p.model_b.clone(),
            p.answers.to_string(),
            f(p.pct_a),
            f(p.pct_b),
            f(p.pct_none),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_part3_csv(s: &Part3Summary, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "answers", "pct_rank1", "pct_rank2", "pct_rank3"])?;
    for d in &s.distributions {
        w.write_record([d.label.clone(), d.answers.to_string(), f(d.pct_rank1), f(d.pct_rank2), f(d.pct_rank3)])?;
    }
    w.flush()?;
    Ok(())
}
