//! Interview segmentation: pair each clinician question with the patient
//! responses that follow it, classify each question into a MADRS item via
//! the LLM, and group the pairs by item.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, MadrsItem};
use crate::gateway::Gateway;
use crate::prompt::{build_segmentation_prompt, NONE_LABEL};
use crate::transcript::{Speaker, Transcript};

/// One clinician question with the patient utterances that follow it, up to
/// the next clinician utterance.
///
/// Patient speech before the first clinician utterance is collected into a
/// synthetic preamble pair (`question_index == None`), which is always
/// unmapped; this preserves the partition property without inventing a
/// question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionResponsePair {
    pub question_index: Option<usize>,
    pub question: String,
    pub responses: Vec<String>,
    pub label: Option<MadrsItem>,
}

impl QuestionResponsePair {
    pub fn is_preamble(&self) -> bool {
        self.question_index.is_none()
    }
}

/// A transcript partitioned into per-item question-response segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentedInterview {
    pub interview_id: String,
    pub segments: BTreeMap<MadrsItem, Vec<QuestionResponsePair>>,
    pub unmapped: Vec<QuestionResponsePair>,
}

impl SegmentedInterview {
    /// Render the context for one item: its question-response pairs in
    /// interview order as speaker-labeled lines. `None` if no exchanges
    /// were mapped to the item.
    pub fn context_for(&self, item: MadrsItem) -> Option<String> {
        let pairs = &self.segments[&item];
        if pairs.is_empty() {
            return None;
        }
        let mut lines = Vec::new();
        for pair in pairs {
            lines.push(format!("CLINICIAN: {}", pair.question));
            for response in &pair.responses {
                lines.push(format!("PATIENT: {response}"));
            }
        }
        Some(lines.join("\n"))
    }

    /// Count of all pairs across segments and unmapped.
    pub fn pair_count(&self) -> usize {
        self.unmapped.len() + self.segments.values().map(Vec::len).sum::<usize>()
    }

    /// Fraction of non-preamble pairs that were not mapped to any item.
    pub fn unmapped_fraction(&self) -> f64 {
        let unmapped_real = self.unmapped.iter().filter(|p| !p.is_preamble()).count();
        let total = self.pair_count() - usize::from(self.unmapped.iter().any(|p| p.is_preamble()));
        if total == 0 {
            0.0
        } else {
            unmapped_real as f64 / total as f64
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SegmentError {
    #[error("interview {interview_id} contains no clinician speech")]
    NoClinicianSpeech { interview_id: String },
}

/// A per-pair classification problem that degraded to an unmapped label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentationWarning {
    pub question_index: Option<usize>,
    pub question: String,
    pub reason: String,
}

/// Extract one pair per clinician utterance, in interview order.
pub fn extract_pairs(transcript: &Transcript) -> Result<Vec<QuestionResponsePair>, SegmentError> {
    let mut pairs: Vec<QuestionResponsePair> = Vec::new();
    let mut preamble: Vec<String> = Vec::new();
    let mut current: Option<QuestionResponsePair> = None;
    for utterance in &transcript.utterances {
        match utterance.speaker {
            Speaker::Clinician => {
                if let Some(pair) = current.take() {
                    pairs.push(pair);
                }
                current = Some(QuestionResponsePair {
                    question_index: Some(utterance.index),
                    question: utterance.text.clone(),
                    responses: Vec::new(),
                    label: None,
                });
            }
            Speaker::Patient => match current.as_mut() {
                Some(pair) => pair.responses.push(utterance.text.clone()),
                None => preamble.push(utterance.text.clone()),
            },
        }
    }
    if let Some(pair) = current.take() {
        pairs.push(pair);
    }
    if pairs.is_empty() {
        return Err(SegmentError::NoClinicianSpeech {
            interview_id: transcript.meta.interview_id.clone(),
        });
    }
    if !preamble.is_empty() {
        pairs.insert(
            0,
            QuestionResponsePair {
                question_index: None,
                question: String::new(),
                responses: preamble,
                label: None,
            },
        );
    }
    Ok(pairs)
}

/// Classify each real pair's question into an item (or none) via the LLM.
///
/// Unparseable labels and transport failures degrade to unmapped pairs with
/// a warning; segmentation never aborts assessment.
pub fn classify_pairs(
    mut pairs: Vec<QuestionResponsePair>,
    gateway: &Gateway,
    catalog: &Catalog,
) -> (Vec<QuestionResponsePair>, Vec<SegmentationWarning>) {
    let mut warnings = Vec::new();
    let work: Vec<usize> = (0..pairs.len())
        .filter(|&i| !pairs[i].is_preamble())
        .collect();
    let prompts: Vec<String> = work
        .iter()
        .map(|&i| {
            build_segmentation_prompt(&pairs[i].question, catalog)
                .expect("non-preamble questions are non-empty")
        })
        .collect();
    let results = gateway.run_batch(&prompts);
    for (&i, result) in work.iter().zip(results) {
        match result {
            Ok(response) => match parse_item_label(&response.text) {
                LabelParse::Item(item) => pairs[i].label = Some(item),
                LabelParse::None => pairs[i].label = None,
                LabelParse::Unrecognized => {
                    warnings.push(SegmentationWarning {
                        question_index: pairs[i].question_index,
                        question: pairs[i].question.clone(),
                        reason: format!(
                            "unrecognized classification response: {:?}",
                            response.text.chars().take(80).collect::<String>()
                        ),
                    });
                }
            },
            Err(err) => {
                warnings.push(SegmentationWarning {
                    question_index: pairs[i].question_index,
                    question: pairs[i].question.clone(),
                    reason: err.to_string(),
                });
            }
        }
    }
    (pairs, warnings)
}

enum LabelParse {
    Item(MadrsItem),
    None,
    Unrecognized,
}

/// Find the earliest allowed label mentioned in a classification response.
fn parse_item_label(response: &str) -> LabelParse {
    let lowered = response.to_ascii_lowercase();
    let mut best: Option<(usize, Option<MadrsItem>)> = None;
    let mut consider = |position: Option<usize>, label: Option<MadrsItem>| {
        if let Some(position) = position {
            if best.is_none() || position < best.expect("just checked").0 {
                best = Some((position, label));
            }
        }
    };
    for item in MadrsItem::ALL {
        consider(lowered.find(item.canonical_name()), Some(item));
        consider(
            lowered.find(&item.display_name().to_ascii_lowercase()),
            Some(item),
        );
    }
    // "none" must stand alone as a word to count.
    let bytes = lowered.as_bytes();
    let mut from = 0;
    while let Some(offset) = lowered[from..].find(NONE_LABEL) {
        let start = from + offset;
        let end = start + NONE_LABEL.len();
        let boundary_before = start == 0 || !bytes[start - 1].is_ascii_alphanumeric();
        let boundary_after = end == bytes.len() || !bytes[end].is_ascii_alphanumeric();
        if boundary_before && boundary_after {
            consider(Some(start), None);
            break;
        }
        from = end;
    }
    match best {
        Some((_, Some(item))) => LabelParse::Item(item),
        Some((_, None)) => LabelParse::None,
        None => LabelParse::Unrecognized,
    }
}

/// Group labeled pairs into per-item segments, preserving interview order.
pub fn group_segments(pairs: Vec<QuestionResponsePair>, interview_id: &str) -> SegmentedInterview {
    let mut segments: BTreeMap<MadrsItem, Vec<QuestionResponsePair>> = MadrsItem::ALL
        .into_iter()
        .map(|item| (item, Vec::new()))
        .collect();
    let mut unmapped = Vec::new();
    for pair in pairs {
        match pair.label {
            Some(item) => segments
                .get_mut(&item)
                .expect("segments map covers all items")
                .push(pair),
            None => unmapped.push(pair),
        }
    }
    SegmentedInterview {
        interview_id: interview_id.to_string(),
        segments,
        unmapped,
    }
}

/// Extract, classify, and group in one step.
pub fn segment_interview(
    transcript: &Transcript,
    gateway: &Gateway,
    catalog: &Catalog,
) -> Result<(SegmentedInterview, Vec<SegmentationWarning>), SegmentError> {
    let pairs = extract_pairs(transcript)?;
    let (labeled, warnings) = classify_pairs(pairs, gateway, catalog);
    Ok((
        group_segments(labeled, &transcript.meta.interview_id),
        warnings,
    ))
}
