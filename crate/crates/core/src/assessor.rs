//! Per-item zero-shot assessment over a corpus: build the context for the
//! configured scope, prompt the model once per (interview, run, item), parse
//! the four-field structured output, and aggregate item scores into totals.
//!
//! Results persist incrementally as JSONL so interrupted jobs resume.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, MadrsItem};
use crate::gateway::{prompt_hash, Gateway, LlmError};
use crate::prompt::{build_assessment_prompt, ContextScope, PromptVariant};
use crate::segmenter::SegmentedInterview;
use crate::transcript::{Corpus, Speaker, Transcript};

/// One parsed LLM judgment for one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemAssessment {
    pub item: MadrsItem,
    pub score: u8,
    pub explanation: String,
    pub key_utterances: Vec<String>,
    pub most_relevant_question: String,
    pub raw_response: String,
}

/// Why an item could not be scored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FailureCause {
    /// Segmented scope and no exchanges were mapped to the item.
    MissingContext,
    /// Rating could not be parsed after all retries.
    ParseFailure { last_error: String },
    /// The transport gave up.
    Llm { message: String },
}

/// Scored-or-failed outcome for one (interview, run, item).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ItemOutcome {
    Scored { assessment: ItemAssessment },
    Failed { cause: FailureCause },
}

impl ItemOutcome {
    pub fn score(&self) -> Option<u8> {
        match self {
            ItemOutcome::Scored { assessment } => Some(assessment.score),
            ItemOutcome::Failed { .. } => None,
        }
    }
}

/// Persisted record: one line per (interview, run, item).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub interview_id: String,
    pub run_index: u32,
    pub variant: PromptVariant,
    pub scope: ContextScope,
    pub item: MadrsItem,
    pub outcome: ItemOutcome,
    /// Gateway calls spent on this item (0 for missing context).
    pub attempts: u32,
    /// SHA-256 of the assessment prompt; empty when no prompt was built.
    pub prompt_sha256: String,
    pub catalog_version: String,
    pub catalog_sha256: String,
}

/// All ten item outcomes for one interview in one repetition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssessmentRun {
    pub interview_id: String,
    pub run_index: u32,
    pub variant: PromptVariant,
    pub scope: ContextScope,
    pub items: BTreeMap<MadrsItem, ItemOutcome>,
    /// Present iff all ten items scored; equals their sum (0..=60).
    pub total: Option<u32>,
}

impl AssessmentRun {
    fn from_items(
        interview_id: String,
        run_index: u32,
        variant: PromptVariant,
        scope: ContextScope,
        items: BTreeMap<MadrsItem, ItemOutcome>,
    ) -> AssessmentRun {
        let total = if items.len() == MadrsItem::ALL.len() {
            items
                .values()
                .map(|o| o.score().map(u32::from))
                .sum::<Option<u32>>()
        } else {
            None
        };
        AssessmentRun {
            interview_id,
            run_index,
            variant,
            scope,
            items,
            total,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.total.is_some()
    }
}

/// All assessment runs for one (corpus, variant, scope) job.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSet {
    pub variant: PromptVariant,
    pub scope: ContextScope,
    pub repetitions: u32,
    pub catalog_version: String,
    pub runs: Vec<AssessmentRun>,
}

impl RunSet {
    /// Group flat records into runs. Duplicate (interview, run, item) keys
    /// are an error.
    pub fn from_records(records: Vec<RunRecord>) -> Result<RunSet, AssessError> {
        let mut variant = None;
        let mut scope = None;
        let mut catalog_version = String::new();
        let mut grouped: BTreeMap<(String, u32), BTreeMap<MadrsItem, ItemOutcome>> =
            BTreeMap::new();
        let mut repetitions = 0;
        for record in records {
            let v = *variant.get_or_insert(record.variant);
            let s = *scope.get_or_insert(record.scope);
            if v != record.variant || s != record.scope {
                return Err(AssessError::MixedRunSet);
            }
            catalog_version = record.catalog_version;
            repetitions = repetitions.max(record.run_index);
            let slot = grouped
                .entry((record.interview_id, record.run_index))
                .or_default();
            if slot.insert(record.item, record.outcome).is_some() {
                return Err(AssessError::DuplicateRecord {
                    run_index: record.run_index,
                    item: record.item,
                });
            }
        }
        let runs = grouped
            .into_iter()
            .map(|((interview_id, run_index), items)| {
                AssessmentRun::from_items(
                    interview_id,
                    run_index,
                    variant.unwrap_or(PromptVariant::AllCues),
                    scope.unwrap_or(ContextScope::FullTranscript),
                    items,
                )
            })
            .collect();
        Ok(RunSet {
            variant: variant.unwrap_or(PromptVariant::AllCues),
            scope: scope.unwrap_or(ContextScope::FullTranscript),
            repetitions,
            catalog_version,
            runs,
        })
    }

    pub fn run_for(&self, interview_id: &str, run_index: u32) -> Option<&AssessmentRun> {
        self.runs
            .iter()
            .find(|r| r.interview_id == interview_id && r.run_index == run_index)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AssessError {
    #[error("run store I/O failure at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("run store line {line} is malformed: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("duplicate record for run {run_index}, item {item}")]
    DuplicateRecord { run_index: u32, item: MadrsItem },
    #[error("run store mixes records from different (variant, scope) jobs")]
    MixedRunSet,
    #[error(
        "run store was produced with variant={found_variant}, scope={found_scope}; \
         expected variant={expected_variant}, scope={expected_scope}"
    )]
    StoreMismatch {
        found_variant: PromptVariant,
        found_scope: ContextScope,
        expected_variant: PromptVariant,
        expected_scope: ContextScope,
    },
    #[error("segmented scope requires segments for interview {interview_id}")]
    MissingSegments { interview_id: String },
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("response has no parsable Rating field")]
    MissingRating,
    #[error("rating {0} is outside 0-6")]
    RatingOutOfRange(i64),
}

/// Parse the four labeled output fields from a raw completion.
///
/// Tolerant of reordered fields and surrounding prose. The rating is the
/// first integer after a `Rating` label and must be in 0..=6. Missing
/// non-rating fields are substituted empty and reported as warnings.
pub fn parse_assessment(
    raw: &str,
    item: MadrsItem,
) -> Result<(ItemAssessment, Vec<String>), ParseError> {
    const LABELS: [&str; 4] = [
        "rating",
        "explanation",
        "key utterances",
        "most relevant question",
    ];

    // Split the response into labeled fields: a field starts at a line whose
    // (de-decorated) prefix is one of the labels and runs until the next one.
    let mut fields: BTreeMap<&'static str, String> = BTreeMap::new();
    let mut current: Option<&'static str> = None;
    for line in raw.lines() {
        let stripped = line
            .trim_start()
            .trim_start_matches(['*', '#', '-', '>', ' '])
            .to_ascii_lowercase();
        let mut matched = None;
        for label in LABELS {
            if let Some(rest) = stripped.strip_prefix(label) {
                // Require a separator so prose like "ratings vary" does not
                // open a field. A bare "Rating 3" is unambiguous and also
                // accepted; "Rating Scale" is not.
                let separated = rest.is_empty() || rest.starts_with([':', '*', '=']);
                let bare_rating = label == "rating"
                    && rest.starts_with(char::is_whitespace)
                    && rest
                        .trim_start()
                        .starts_with(|c: char| c.is_ascii_digit() || c == '[' || c == '-');
                if separated || bare_rating {
                    matched = Some(label);
                    break;
                }
            }
        }
        if let Some(label) = matched {
            let lower_line = line.to_ascii_lowercase();
            let after = lower_line
                .find(label)
                .map(|pos| line[pos + label.len()..].trim_start_matches([':', '*', '=', ' ']).trim())
                .unwrap_or("");
            let entry = fields.entry(label).or_default();
            if !entry.is_empty() {
                entry.push('\n');
            }
            entry.push_str(after);
            current = Some(label);
        } else if let Some(label) = current {
            let entry = fields.get_mut(label).expect("field was opened");
            if !entry.is_empty() {
                entry.push('\n');
            }
            entry.push_str(line.trim());
        }
    }

    let rating_field = fields.get("rating").ok_or(ParseError::MissingRating)?;
    let rating = first_integer(rating_field).ok_or(ParseError::MissingRating)?;
    if !(0..=6).contains(&rating) {
        return Err(ParseError::RatingOutOfRange(rating));
    }

    let mut warnings = Vec::new();
    let mut take = |label: &'static str| -> String {
        match fields.get(label) {
            Some(text) => text.trim().to_string(),
            None => {
                warnings.push(format!("missing field: {label}"));
                String::new()
            }
        }
    };
    let explanation = take("explanation");
    let key_utterances: Vec<String> = take("key utterances")
        .lines()
        .map(|l| l.trim().trim_start_matches("- ").to_string())
        .filter(|l| !l.is_empty())
        .collect();
    let most_relevant_question = take("most relevant question")
        .lines()
        .next()
        .unwrap_or("")
        .to_string();

    Ok((
        ItemAssessment {
            item,
            score: rating as u8,
            explanation,
            key_utterances,
            most_relevant_question,
            raw_response: raw.to_string(),
        },
        warnings,
    ))
}

fn first_integer(text: &str) -> Option<i64> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let negative = i > 0 && bytes[i - 1] == b'-';
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            let digits: i64 = text[start..i].parse().ok()?;
            return Some(if negative { -digits } else { digits });
        }
        i += 1;
    }
    None
}

/// Render the full-transcript context: every utterance in order as
/// speaker-labeled lines.
pub fn full_transcript_context(transcript: &Transcript) -> String {
    transcript
        .utterances
        .iter()
        .map(|u| match u.speaker {
            Speaker::Clinician => format!("CLINICIAN: {}", u.text),
            Speaker::Patient => format!("PATIENT: {}", u.text),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Gateway calls allowed per item: one request plus up to two parse retries.
const MAX_PARSE_ATTEMPTS: u32 = 3;

/// Assess one item for one transcript. Returns the outcome together with
/// the attempt count and the prompt hash (empty if no prompt was sent).
pub fn assess_item(
    transcript: &Transcript,
    segments: Option<&SegmentedInterview>,
    item: MadrsItem,
    variant: PromptVariant,
    scope: ContextScope,
    gateway: &Gateway,
    catalog: &Catalog,
) -> (ItemOutcome, u32, String) {
    let context = match scope {
        ContextScope::FullTranscript => full_transcript_context(transcript),
        ContextScope::Segmented => {
            let mapped = segments.and_then(|seg| seg.context_for(item));
            match mapped {
                Some(context) => context,
                None => {
                    return (
                        ItemOutcome::Failed {
                            cause: FailureCause::MissingContext,
                        },
                        0,
                        String::new(),
                    )
                }
            }
        }
    };
    let prompt = build_assessment_prompt(item, &context, variant, scope, catalog)
        .expect("contexts built from validated transcripts are non-empty");
    let hash = prompt_hash(&prompt.rendered_text);

    let mut attempts = 0;
    let mut last_parse_error = String::new();
    while attempts < MAX_PARSE_ATTEMPTS {
        attempts += 1;
        match gateway.complete(&prompt.rendered_text) {
            Ok(response) => match parse_assessment(&response.text, item) {
                Ok((assessment, _warnings)) => {
                    return (ItemOutcome::Scored { assessment }, attempts, hash)
                }
                Err(parse_error) => {
                    last_parse_error = parse_error.to_string();
                }
            },
            Err(llm_error) => {
                let cause = match llm_error {
                    LlmError::EmptyPrompt
                    | LlmError::ContextOverflow { .. }
                    | LlmError::Transport { .. }
                    | LlmError::Endpoint { .. } => FailureCause::Llm {
                        message: llm_error.to_string(),
                    },
                };
                return (ItemOutcome::Failed { cause }, attempts, hash);
            }
        }
    }
    (
        ItemOutcome::Failed {
            cause: FailureCause::ParseFailure {
                last_error: last_parse_error,
            },
        },
        attempts,
        hash,
    )
}

/// Append-only persistence for run records with resume support.
pub struct RunStore {
    path: Option<PathBuf>,
    file: Option<std::fs::File>,
    existing: BTreeSet<(String, u32, MadrsItem)>,
    records: Vec<RunRecord>,
}

impl RunStore {
    /// Volatile store for tests and ad-hoc runs.
    pub fn in_memory() -> RunStore {
        RunStore {
            path: None,
            file: None,
            existing: BTreeSet::new(),
            records: Vec::new(),
        }
    }

    /// Open (creating if absent) a JSONL store and load existing records.
    ///
    /// Existing records must come from the same (variant, scope) job. A
    /// malformed *final* line is treated as an interrupted append and
    /// truncated away so the job can resume; malformed interior lines are
    /// errors.
    pub fn open(
        path: &Path,
        variant: PromptVariant,
        scope: ContextScope,
    ) -> Result<RunStore, AssessError> {
        let io_err = |source: std::io::Error| AssessError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut records = Vec::new();
        let mut existing = BTreeSet::new();
        if path.exists() {
            let content = std::fs::read_to_string(path).map_err(io_err)?;
            let lines: Vec<&str> = content.lines().collect();
            let last_content_line = lines.iter().rposition(|l| !l.trim().is_empty());
            let mut keep_bytes = None;
            for (lineno, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let record: RunRecord = match serde_json::from_str(line) {
                    Ok(record) => record,
                    Err(_) if Some(lineno) == last_content_line => {
                        // Interrupted mid-append; keep everything before it.
                        let offset = line.as_ptr() as usize - content.as_ptr() as usize;
                        keep_bytes = Some(offset);
                        break;
                    }
                    Err(e) => {
                        return Err(AssessError::MalformedRecord {
                            line: lineno + 1,
                            reason: e.to_string(),
                        })
                    }
                };
                if record.variant != variant || record.scope != scope {
                    return Err(AssessError::StoreMismatch {
                        found_variant: record.variant,
                        found_scope: record.scope,
                        expected_variant: variant,
                        expected_scope: scope,
                    });
                }
                existing.insert((record.interview_id.clone(), record.run_index, record.item));
                records.push(record);
            }
            if let Some(offset) = keep_bytes {
                let file = std::fs::OpenOptions::new()
                    .write(true)
                    .open(path)
                    .map_err(io_err)?;
                file.set_len(offset as u64).map_err(io_err)?;
            }
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err)?;
        Ok(RunStore {
            path: Some(path.to_path_buf()),
            file: Some(file),
            existing,
            records,
        })
    }

    pub fn contains(&self, interview_id: &str, run_index: u32, item: MadrsItem) -> bool {
        self.existing
            .contains(&(interview_id.to_string(), run_index, item))
    }

    pub fn append(&mut self, record: RunRecord) -> Result<(), AssessError> {
        if let Some(file) = &mut self.file {
            let line = serde_json::to_string(&record).expect("run records serialize");
            let path = self
                .path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default();
            writeln!(file, "{line}").map_err(|source| AssessError::Io {
                path: path.clone(),
                source,
            })?;
            file.flush()
                .map_err(|source| AssessError::Io { path, source })?;
        }
        self.existing
            .insert((record.interview_id.clone(), record.run_index, record.item));
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    pub fn into_runset(self) -> Result<RunSet, AssessError> {
        RunSet::from_records(self.records)
    }
}

/// Load a RunSet straight from a store file without resuming anything.
pub fn load_runset(path: &Path) -> Result<RunSet, AssessError> {
    let file = std::fs::File::open(path).map_err(|source| AssessError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut records = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| AssessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RunRecord =
            serde_json::from_str(&line).map_err(|e| AssessError::MalformedRecord {
                line: lineno + 1,
                reason: e.to_string(),
            })?;
        records.push(record);
    }
    RunSet::from_records(records)
}

/// One (corpus, variant, scope, repetitions) assessment job.
pub struct AssessJob<'a> {
    pub corpus: &'a Corpus,
    pub segments: Option<&'a BTreeMap<String, SegmentedInterview>>,
    pub catalog: &'a Catalog,
    pub variant: PromptVariant,
    pub scope: ContextScope,
    pub repetitions: u32,
}

/// Run the whole job: `repetitions` runs per interview, interviews processed
/// independently, per-run results persisted in canonical item order.
///
/// Records already present in the store are skipped, which makes interrupted
/// jobs resumable. Item failures are recorded, never fatal. Run `r` uses the
/// gateway reseeded with salt `r`, so under a mock backend the whole RunSet
/// is a pure function of (corpus, catalog, variant, scope, seed).
pub fn assess_corpus(
    job: &AssessJob,
    gateway: &Gateway,
    store: &mut RunStore,
) -> Result<RunSet, AssessError> {
    for transcript in &job.corpus.transcripts {
        let interview_id = &transcript.meta.interview_id;
        let segments = match job.scope {
            ContextScope::Segmented => {
                let map = job.segments.ok_or_else(|| AssessError::MissingSegments {
                    interview_id: interview_id.clone(),
                })?;
                Some(
                    map.get(interview_id)
                        .ok_or_else(|| AssessError::MissingSegments {
                            interview_id: interview_id.clone(),
                        })?,
                )
            }
            ContextScope::FullTranscript => None,
        };
        for run_index in 1..=job.repetitions {
            let pending: Vec<MadrsItem> = MadrsItem::ALL
                .into_iter()
                .filter(|&item| !store.contains(interview_id, run_index, item))
                .collect();
            if pending.is_empty() {
                continue;
            }
            let run_gateway = gateway.reseeded(u64::from(run_index));
            let slots: Vec<std::sync::Mutex<Option<(ItemOutcome, u32, String)>>> = pending
                .iter()
                .map(|_| std::sync::Mutex::new(None))
                .collect();
            std::thread::scope(|threads| {
                for (slot, &item) in slots.iter().zip(&pending) {
                    let run_gateway = &run_gateway;
                    threads.spawn(move || {
                        let result = assess_item(
                            transcript,
                            segments,
                            item,
                            job.variant,
                            job.scope,
                            run_gateway,
                            job.catalog,
                        );
                        *slot.lock().expect("slot poisoned") = Some(result);
                    });
                }
            });
            let mut outcomes: BTreeMap<MadrsItem, (ItemOutcome, u32, String)> = BTreeMap::new();
            for (slot, item) in slots.into_iter().zip(pending) {
                let result = slot
                    .into_inner()
                    .expect("slot poisoned")
                    .expect("every slot is filled");
                outcomes.insert(item, result);
            }
            // Canonical item order keeps the file layout deterministic.
            for (item, (outcome, attempts, prompt_sha256)) in outcomes {
                store.append(RunRecord {
                    interview_id: interview_id.clone(),
                    run_index,
                    variant: job.variant,
                    scope: job.scope,
                    item,
                    outcome,
                    attempts,
                    prompt_sha256,
                    catalog_version: job.catalog.version().to_string(),
                    catalog_sha256: job.catalog.content_hash().to_string(),
                })?;
            }
        }
    }
    RunSet::from_records(store.records.clone())
}
