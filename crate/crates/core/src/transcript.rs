//! Transcript data model and the on-disk JSONL corpus format.
//!
//! A corpus is one JSON object per interview in a JSON-Lines file. Loaded
//! corpora are immutable after construction and safe to share across
//! concurrent readers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::MadrsItem;

/// Who produced an utterance in the diarized transcript.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Clinician,
    Patient,
}

/// The research assistant who administered and scored an interview.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RaterId {
    R1,
    R2,
    R3,
}

impl fmt::Display for RaterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RaterId::R1 => f.write_str("R1"),
            RaterId::R2 => f.write_str("R2"),
            RaterId::R3 => f.write_str("R3"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
    Other,
}

/// One speaker-attributed utterance. `index` is the position within the
/// interview; indices are contiguous from 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub index: usize,
    pub speaker: Speaker,
    pub text: String,
}

/// Interview- and patient-level metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterviewMeta {
    pub interview_id: String,
    pub patient_id: String,
    pub visit_number: u32,
    pub rater_id: RaterId,
    pub education: u32,
    pub gender: Gender,
    pub age: u32,
}

/// One diarized interview with optional clinician ground-truth scores.
///
/// When `clinician_scores` is present it contains all ten items, each in
/// 0..=6. The whitespace token count is computed once at construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub meta: InterviewMeta,
    pub utterances: Vec<Utterance>,
    pub clinician_scores: Option<BTreeMap<MadrsItem, u8>>,
    token_count: usize,
}

impl Transcript {
    /// Whitespace-delimited token count across all utterance texts.
    pub fn token_count(&self) -> usize {
        self.token_count
    }

    /// Sum of the ten clinician item scores (0..=60), if ground truth exists.
    pub fn clinician_total(&self) -> Option<u32> {
        self.clinician_scores
            .as_ref()
            .map(|scores| scores.values().map(|&s| u32::from(s)).sum())
    }

    pub fn clinician_score(&self, item: MadrsItem) -> Option<u8> {
        self.clinician_scores.as_ref().map(|s| s[&item])
    }
}

/// An immutable set of transcripts loaded from one JSONL file.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub transcripts: Vec<Transcript>,
    pub source_path: String,
}

impl Corpus {
    pub fn get(&self, interview_id: &str) -> Option<&Transcript> {
        self.transcripts
            .iter()
            .find(|t| t.meta.interview_id == interview_id)
    }

    pub fn len(&self) -> usize {
        self.transcripts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transcripts.is_empty()
    }

    /// True if every transcript carries clinician scores.
    pub fn fully_labeled(&self) -> bool {
        self.transcripts
            .iter()
            .all(|t| t.clinician_scores.is_some())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("failed to read corpus {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("line {line}: duplicate interview_id {interview_id}")]
    DuplicateInterviewId { interview_id: String, line: usize },
    #[error("line {line}: duplicate (patient_id, visit_number) = ({patient_id}, {visit_number})")]
    DuplicatePatientVisit {
        patient_id: String,
        visit_number: u32,
        line: usize,
    },
    #[error("interview {interview_id}: madrs_scores is missing item {item}")]
    MissingGroundTruthItem {
        interview_id: String,
        item: MadrsItem,
    },
    #[error("corpus {path} contains no transcripts")]
    EmptyCorpus { path: String },
}

/// On-disk shape of one utterance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub speaker: Speaker,
    pub text: String,
}

/// On-disk shape of one interview (one JSONL line).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub interview_id: String,
    pub patient_id: String,
    pub visit_number: u32,
    pub rater_id: RaterId,
    pub education: u32,
    pub gender: Gender,
    pub age: u32,
    pub utterances: Vec<UtteranceRecord>,
    pub madrs_scores: Option<BTreeMap<MadrsItem, u8>>,
}

impl From<&Transcript> for TranscriptRecord {
    fn from(t: &Transcript) -> TranscriptRecord {
        TranscriptRecord {
            interview_id: t.meta.interview_id.clone(),
            patient_id: t.meta.patient_id.clone(),
            visit_number: t.meta.visit_number,
            rater_id: t.meta.rater_id,
            education: t.meta.education,
            gender: t.meta.gender,
            age: t.meta.age,
            utterances: t
                .utterances
                .iter()
                .map(|u| UtteranceRecord {
                    speaker: u.speaker,
                    text: u.text.clone(),
                })
                .collect(),
            madrs_scores: t.clinician_scores.clone(),
        }
    }
}

impl TranscriptRecord {
    /// Validate the record and build the in-memory transcript.
    pub fn into_transcript(self) -> Result<Transcript, String> {
        if self.interview_id.trim().is_empty() {
            return Err("interview_id is empty".into());
        }
        if self.patient_id.trim().is_empty() {
            return Err("patient_id is empty".into());
        }
        if self.visit_number == 0 {
            return Err("visit_number must be positive".into());
        }
        if self.utterances.is_empty() {
            return Err("utterances is empty".into());
        }
        let mut utterances = Vec::with_capacity(self.utterances.len());
        for (index, u) in self.utterances.into_iter().enumerate() {
            if u.text.trim().is_empty() {
                return Err(format!("utterance {index} has empty text"));
            }
            utterances.push(Utterance {
                index,
                speaker: u.speaker,
                text: u.text,
            });
        }
        if let Some(scores) = &self.madrs_scores {
            for (&item, &score) in scores {
                if score > 6 {
                    return Err(format!("madrs_scores[{item}] = {score} is out of 0-6"));
                }
            }
        }
        let token_count = utterances
            .iter()
            .map(|u| u.text.split_whitespace().count())
            .sum();
        Ok(Transcript {
            meta: InterviewMeta {
                interview_id: self.interview_id,
                patient_id: self.patient_id,
                visit_number: self.visit_number,
                rater_id: self.rater_id,
                education: self.education,
                gender: self.gender,
                age: self.age,
            },
            utterances,
            clinician_scores: self.madrs_scores,
            token_count,
        })
    }
}

/// Load and validate a JSONL corpus from disk.
pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut transcripts = Vec::new();
    let mut seen_ids = BTreeSet::new();
    let mut seen_visits = BTreeSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line_number = lineno + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TranscriptRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                line: line_number,
                reason: e.to_string(),
            })?;
        let transcript =
            record
                .into_transcript()
                .map_err(|reason| CorpusError::MalformedRecord {
                    line: line_number,
                    reason,
                })?;
        if !seen_ids.insert(transcript.meta.interview_id.clone()) {
            return Err(CorpusError::DuplicateInterviewId {
                interview_id: transcript.meta.interview_id,
                line: line_number,
            });
        }
        if !seen_visits.insert((
            transcript.meta.patient_id.clone(),
            transcript.meta.visit_number,
        )) {
            return Err(CorpusError::DuplicatePatientVisit {
                patient_id: transcript.meta.patient_id,
                visit_number: transcript.meta.visit_number,
                line: line_number,
            });
        }
        if let Some(scores) = &transcript.clinician_scores {
            for item in MadrsItem::ALL {
                if !scores.contains_key(&item) {
                    return Err(CorpusError::MissingGroundTruthItem {
                        interview_id: transcript.meta.interview_id,
                        item,
                    });
                }
            }
        }
        transcripts.push(transcript);
    }
    if transcripts.is_empty() {
        return Err(CorpusError::EmptyCorpus {
            path: path.display().to_string(),
        });
    }
    Ok(Corpus {
        transcripts,
        source_path: path.display().to_string(),
    })
}

/// Serialize a corpus back to its canonical JSONL form.
pub fn write_corpus<W: Write>(corpus: &Corpus, mut out: W) -> std::io::Result<()> {
    for transcript in &corpus.transcripts {
        let record = TranscriptRecord::from(transcript);
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn corpus_to_jsonl(corpus: &Corpus) -> String {
    let mut buf = Vec::new();
    write_corpus(corpus, &mut buf).expect("writing to Vec cannot fail");
    String::from_utf8(buf).expect("serde_json output is UTF-8")
}
