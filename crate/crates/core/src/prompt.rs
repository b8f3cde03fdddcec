//! Assembly of the structured assessment prompt and the
//! question-classification prompt.
//!
//! Rendering is deterministic: identical inputs produce byte-identical
//! prompts. The assessment prompt is built from labeled plain-text sections;
//! which sections appear is governed by the ablation variant and recorded in
//! the section manifest.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, MadrsItem, INTERMEDIATE_NOTE};

/// Prompt-cue ablation variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    AllCues,
    NoDescriptiveCues,
    NoDemonstrativeCues,
    NoCues,
}

impl PromptVariant {
    pub const ALL: [PromptVariant; 4] = [
        PromptVariant::AllCues,
        PromptVariant::NoDescriptiveCues,
        PromptVariant::NoDemonstrativeCues,
        PromptVariant::NoCues,
    ];

    pub fn includes_descriptive(self) -> bool {
        matches!(
            self,
            PromptVariant::AllCues | PromptVariant::NoDemonstrativeCues
        )
    }

    pub fn includes_demonstrative(self) -> bool {
        matches!(
            self,
            PromptVariant::AllCues | PromptVariant::NoDescriptiveCues
        )
    }

    /// CLI flag spelling.
    pub fn flag_name(self) -> &'static str {
        match self {
            PromptVariant::AllCues => "all",
            PromptVariant::NoDescriptiveCues => "no-descriptive",
            PromptVariant::NoDemonstrativeCues => "no-demonstrative",
            PromptVariant::NoCues => "none",
        }
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.flag_name())
    }
}

impl FromStr for PromptVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(PromptVariant::AllCues),
            "no-descriptive" => Ok(PromptVariant::NoDescriptiveCues),
            "no-demonstrative" => Ok(PromptVariant::NoDemonstrativeCues),
            "none" => Ok(PromptVariant::NoCues),
            other => Err(format!(
                "unknown prompt variant {other:?} (expected all|no-descriptive|no-demonstrative|none)"
            )),
        }
    }
}

/// Whether the model sees the full transcript or only mapped segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextScope {
    FullTranscript,
    Segmented,
}

impl ContextScope {
    pub fn flag_name(self) -> &'static str {
        match self {
            ContextScope::FullTranscript => "full",
            ContextScope::Segmented => "segmented",
        }
    }
}

impl fmt::Display for ContextScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.flag_name())
    }
}

impl FromStr for ContextScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(ContextScope::FullTranscript),
            "segmented" => Ok(ContextScope::Segmented),
            other => Err(format!(
                "unknown context scope {other:?} (expected full|segmented)"
            )),
        }
    }
}

/// Labeled sections of the assessment prompt, in render order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SectionTag {
    Task,
    DescriptiveCues,
    RatingScale,
    DemonstrativeCues,
    OutputFormat,
    Context,
}

/// A rendered assessment prompt plus the manifest of included sections.
#[derive(Debug, Clone)]
pub struct AssessmentPrompt {
    pub item: MadrsItem,
    pub variant: PromptVariant,
    pub scope: ContextScope,
    pub rendered_text: String,
    pub section_manifest: Vec<SectionTag>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("assessment context is empty")]
    EmptyContext,
    #[error("segmentation question is empty")]
    EmptyQuestion,
}

const TASK_DESCRIPTION: &str = "Analyze a diarized transcript of a psychiatric session where the \
Montgomery-Åsberg Depression Rating Scale (MADRS) questionnaire is being administered. Predict \
the rating (0-6) that the practitioner would likely give for the specified MADRS item based on \
the patient's responses and the conversation.";

const OUTPUT_FORMAT_BLOCK: &str = "REQUIRED OUTPUT FORMAT:\n\
Rating: [0-6]\n\
Explanation: [2-3 sentences]\n\
Key Utterances: [relevant lines]\n\
Most Relevant Question: [from transcript]";

/// Marker line that precedes the embedded context in assessment prompts.
pub const CONTEXT_HEADER: &str = "TRANSCRIPT:";

/// Marker line that precedes the embedded question in segmentation prompts.
pub const QUESTION_HEADER: &str = "QUESTION:";

/// Marker line that precedes the label list in segmentation prompts.
pub const ALLOWED_LABELS_HEADER: &str = "ALLOWED LABELS:";

/// Label for answering that a question probes no MADRS item.
pub const NONE_LABEL: &str = "none";

/// Build the structured assessment prompt for one item.
///
/// The context appears verbatim exactly once, after [`CONTEXT_HEADER`].
pub fn build_assessment_prompt(
    item: MadrsItem,
    context: &str,
    variant: PromptVariant,
    scope: ContextScope,
    catalog: &Catalog,
) -> Result<AssessmentPrompt, PromptError> {
    if context.trim().is_empty() {
        return Err(PromptError::EmptyContext);
    }
    let def = catalog.definition_of(item);

    let mut sections: Vec<(SectionTag, String)> = Vec::with_capacity(6);

    // The item name is always stated (the model must know what to score);
    // everything beyond the name belongs to the descriptive cues.
    sections.push((
        SectionTag::Task,
        format!(
            "TASK DESCRIPTION:\n{TASK_DESCRIPTION}\nMADRS Item to assess: {}",
            item.display_name()
        ),
    ));

    if variant.includes_descriptive() {
        let mut block = format!(
            "MADRS ITEM COMPONENTS:\nItem Name: {}\nDescription: {}\nKey Questions:",
            item.display_name(),
            def.description
        );
        for q in &def.key_questions {
            block.push_str("\n- ");
            block.push_str(q);
        }
        sections.push((SectionTag::DescriptiveCues, block));
    }

    // The rating scale block always lists the four even scale points and the
    // intermediate-states note; the anchor definitions are descriptive-cue
    // content and drop out with them.
    let mut scale = String::from("RATING SCALE (0-6):");
    for (score, anchor) in def.anchors.entries() {
        if variant.includes_descriptive() {
            scale.push_str(&format!("\n{score}: {anchor}"));
        } else {
            scale.push_str(&format!("\n{score}"));
        }
    }
    scale.push('\n');
    scale.push_str(INTERMEDIATE_NOTE);
    sections.push((SectionTag::RatingScale, scale));

    if variant.includes_demonstrative() {
        let mut block = String::from("EXAMPLE ASSESSMENTS:");
        for exemplar in catalog.exemplars_of(item) {
            block.push_str(&format!(
                "\n[Score {}]\n{}\nRationale: {}",
                exemplar.score, exemplar.exchange, exemplar.rationale
            ));
        }
        sections.push((SectionTag::DemonstrativeCues, block));
    }

    sections.push((SectionTag::OutputFormat, OUTPUT_FORMAT_BLOCK.to_string()));
    sections.push((SectionTag::Context, format!("{CONTEXT_HEADER}\n{context}")));

    let section_manifest = sections.iter().map(|(tag, _)| *tag).collect();
    let rendered_text = sections
        .iter()
        .map(|(_, text)| text.as_str())
        .collect::<Vec<_>>()
        .join("\n\n");

    Ok(AssessmentPrompt {
        item,
        variant,
        scope,
        rendered_text,
        section_manifest,
    })
}

/// Build the prompt that classifies one clinician question into a MADRS
/// item or "none". The answer set has exactly eleven allowed labels.
pub fn build_segmentation_prompt(question: &str, catalog: &Catalog) -> Result<String, PromptError> {
    if question.trim().is_empty() {
        return Err(PromptError::EmptyQuestion);
    }
    let mut prompt = String::from(
        "TASK DESCRIPTION:\nYou are given one clinician question from a psychiatric interview \
administering the MADRS questionnaire. Classify the question into the single MADRS item it \
probes, or answer \"none\" if it does not probe any MADRS item.\n\nMADRS ITEMS:",
    );
    for item in MadrsItem::ALL {
        let def = catalog.definition_of(item);
        let first_sentence = def
            .description
            .split_inclusive('.')
            .next()
            .unwrap_or(def.description.as_str());
        prompt.push_str(&format!(
            "\n{}: {}",
            item.canonical_name(),
            first_sentence.trim()
        ));
    }
    prompt.push_str(&format!("\n\n{ALLOWED_LABELS_HEADER}\n"));
    let labels: Vec<&str> = MadrsItem::ALL
        .iter()
        .map(|item| item.canonical_name())
        .chain(std::iter::once(NONE_LABEL))
        .collect();
    prompt.push_str(&labels.join(", "));
    prompt.push_str("\n\nREQUIRED OUTPUT FORMAT:\nLabel: [exactly one allowed label]\n\n");
    prompt.push_str(QUESTION_HEADER);
    prompt.push('\n');
    prompt.push_str(question);
    Ok(prompt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog() -> Catalog {
        Catalog::builtin()
    }

    fn count_occurrences(haystack: &str, needle: &str) -> usize {
        haystack.match_indices(needle).count()
    }

    #[test]
    fn all_cues_manifest_lists_every_section() {
        let p = build_assessment_prompt(
            MadrsItem::ReportedSadness,
            "CLINICIAN: any context",
            PromptVariant::AllCues,
            ContextScope::Segmented,
            &catalog(),
        )
        .unwrap();
        assert_eq!(
            p.section_manifest,
            vec![
                SectionTag::Task,
                SectionTag::DescriptiveCues,
                SectionTag::RatingScale,
                SectionTag::DemonstrativeCues,
                SectionTag::OutputFormat,
                SectionTag::Context,
            ]
        );
    }

    #[test]
    fn manifest_tracks_variant_for_every_item() {
        let catalog = catalog();
        for item in MadrsItem::ALL {
            for variant in PromptVariant::ALL {
                let p = build_assessment_prompt(
                    item,
                    "some context",
                    variant,
                    ContextScope::FullTranscript,
                    &catalog,
                )
                .unwrap();
                assert_eq!(
                    p.section_manifest.contains(&SectionTag::DescriptiveCues),
                    variant.includes_descriptive()
                );
                assert_eq!(
                    p.section_manifest.contains(&SectionTag::DemonstrativeCues),
                    variant.includes_demonstrative()
                );
                for required in [
                    SectionTag::Task,
                    SectionTag::RatingScale,
                    SectionTag::OutputFormat,
                    SectionTag::Context,
                ] {
                    assert!(p.section_manifest.contains(&required));
                }
            }
        }
    }

    #[test]
    fn no_cues_retains_item_name_and_required_blocks() {
        let p = build_assessment_prompt(
            MadrsItem::ReducedAppetite,
            "ctx",
            PromptVariant::NoCues,
            ContextScope::FullTranscript,
            &catalog(),
        )
        .unwrap();
        assert!(p
            .rendered_text
            .contains("MADRS Item to assess: Reduced Appetite"));
        assert!(p.rendered_text.contains("RATING SCALE (0-6):"));
        assert!(p.rendered_text.contains("Rating: [0-6]"));
        assert!(p.rendered_text.contains(INTERMEDIATE_NOTE));
        assert!(!p.rendered_text.contains("EXAMPLE ASSESSMENTS:"));
        assert!(!p.rendered_text.contains("MADRS ITEM COMPONENTS:"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let make = || {
            build_assessment_prompt(
                MadrsItem::InnerTension,
                "CLINICIAN: q\nPATIENT: a",
                PromptVariant::AllCues,
                ContextScope::Segmented,
                &catalog(),
            )
            .unwrap()
            .rendered_text
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn context_appears_verbatim_exactly_once() {
        let context = "PATIENT: a very distinctive context marker xyzzy";
        for variant in PromptVariant::ALL {
            let p = build_assessment_prompt(
                MadrsItem::Lassitude,
                context,
                variant,
                ContextScope::FullTranscript,
                &catalog(),
            )
            .unwrap();
            assert_eq!(count_occurrences(&p.rendered_text, context), 1);
        }
    }

    #[test]
    fn output_format_mandates_four_fields() {
        let p = build_assessment_prompt(
            MadrsItem::ReducedSleep,
            "ctx",
            PromptVariant::NoCues,
            ContextScope::FullTranscript,
            &catalog(),
        )
        .unwrap();
        for field in [
            "Rating",
            "Explanation",
            "Key Utterances",
            "Most Relevant Question",
        ] {
            assert!(p.rendered_text.contains(field), "missing field {field}");
        }
    }

    #[test]
    fn empty_context_is_rejected() {
        assert_eq!(
            build_assessment_prompt(
                MadrsItem::ReducedSleep,
                "   \n",
                PromptVariant::AllCues,
                ContextScope::Segmented,
                &catalog(),
            )
            .err(),
            Some(PromptError::EmptyContext)
        );
    }

    #[test]
    fn prompt_length_is_monotone_across_variants() {
        let catalog = catalog();
        for item in MadrsItem::ALL {
            let len = |variant| {
                build_assessment_prompt(item, "ctx", variant, ContextScope::Segmented, &catalog)
                    .unwrap()
                    .rendered_text
                    .chars()
                    .count()
            };
            let none = len(PromptVariant::NoCues);
            let no_desc = len(PromptVariant::NoDescriptiveCues);
            let no_demo = len(PromptVariant::NoDemonstrativeCues);
            let all = len(PromptVariant::AllCues);
            assert!(none <= no_desc && no_desc <= all);
            assert!(none <= no_demo && no_demo <= all);
        }
    }

    #[test]
    fn variants_differ_only_in_cue_sections() {
        // Sections shared between two variants are byte-identical, except
        // that the rating scale block may differ when the two variants
        // disagree on descriptive cues (the anchor texts belong to them).
        let catalog = catalog();
        let sections = |variant: PromptVariant| -> Vec<(SectionTag, String)> {
            let p = build_assessment_prompt(
                MadrsItem::PessimisticThoughts,
                "ctx",
                variant,
                ContextScope::Segmented,
                &catalog,
            )
            .unwrap();
            let texts: Vec<String> = p
                .rendered_text
                .split("\n\n")
                .map(|s| s.to_string())
                .collect();
            assert_eq!(texts.len(), p.section_manifest.len());
            p.section_manifest.into_iter().zip(texts).collect()
        };
        for a in PromptVariant::ALL {
            for b in PromptVariant::ALL {
                let sa = sections(a);
                let sb = sections(b);
                for (tag, text_a) in &sa {
                    if let Some((_, text_b)) = sb.iter().find(|(t, _)| t == tag) {
                        if *tag == SectionTag::RatingScale
                            && a.includes_descriptive() != b.includes_descriptive()
                        {
                            continue;
                        }
                        assert_eq!(
                            text_a, text_b,
                            "section {tag:?} differs between {a} and {b}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn rating_scale_lists_even_anchors_in_every_variant() {
        for variant in PromptVariant::ALL {
            let p = build_assessment_prompt(
                MadrsItem::SuicidalThoughts,
                "ctx",
                variant,
                ContextScope::Segmented,
                &catalog(),
            )
            .unwrap();
            let scale_start = p.rendered_text.find("RATING SCALE (0-6):").unwrap();
            let scale = &p.rendered_text[scale_start..];
            let scale = scale.split("\n\n").next().unwrap();
            for point in ["\n0", "\n2", "\n4", "\n6"] {
                assert!(
                    scale.contains(point),
                    "missing scale point {point:?} in {variant}"
                );
            }
            assert!(scale.contains(INTERMEDIATE_NOTE));
        }
    }

    #[test]
    fn segmentation_prompt_enumerates_eleven_labels() {
        let prompt =
            build_segmentation_prompt("Have you been feeling sad or unhappy?", &catalog()).unwrap();
        let labels_line = prompt
            .lines()
            .skip_while(|l| *l != ALLOWED_LABELS_HEADER)
            .nth(1)
            .unwrap();
        let labels: Vec<&str> = labels_line.split(", ").collect();
        assert_eq!(labels.len(), 11);
        for item in MadrsItem::ALL {
            assert!(labels.contains(&item.canonical_name()));
        }
        assert!(labels.contains(&NONE_LABEL));
    }

    #[test]
    fn segmentation_prompt_rejects_empty_question() {
        assert_eq!(
            build_segmentation_prompt("  ", &catalog()).err(),
            Some(PromptError::EmptyQuestion)
        );
    }

    #[test]
    fn segmentation_prompts_differ_only_in_question() {
        let catalog = catalog();
        let a = build_segmentation_prompt("How has your sleep been?", &catalog).unwrap();
        let b = build_segmentation_prompt("How is your appetite?", &catalog).unwrap();
        let prefix_a = a.split(QUESTION_HEADER).next().unwrap();
        let prefix_b = b.split(QUESTION_HEADER).next().unwrap();
        assert_eq!(prefix_a, prefix_b);
        assert_ne!(a, b);
    }
}
