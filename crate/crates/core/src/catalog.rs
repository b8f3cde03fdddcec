//! The MADRS item catalog: the ten scale items, their 0-6 anchor
//! definitions, standardized key questions, and the worked exemplar
//! assessments used as demonstrative prompt cues.
//!
//! Catalog content ships as a JSON data file (a default is embedded in the
//! binary) so the cue wording can be replaced without code changes. Every
//! loaded catalog is hash-stamped; assessment runs record which catalog
//! produced them.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One of the ten MADRS items, in canonical scale order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MadrsItem {
    ApparentSadness,
    ReportedSadness,
    InnerTension,
    ReducedSleep,
    ReducedAppetite,
    ConcentrationDifficulties,
    Lassitude,
    InabilityToFeel,
    PessimisticThoughts,
    SuicidalThoughts,
}

impl MadrsItem {
    /// All ten items in canonical scale order.
    pub const ALL: [MadrsItem; 10] = [
        MadrsItem::ApparentSadness,
        MadrsItem::ReportedSadness,
        MadrsItem::InnerTension,
        MadrsItem::ReducedSleep,
        MadrsItem::ReducedAppetite,
        MadrsItem::ConcentrationDifficulties,
        MadrsItem::Lassitude,
        MadrsItem::InabilityToFeel,
        MadrsItem::PessimisticThoughts,
        MadrsItem::SuicidalThoughts,
    ];

    /// Stable machine-readable identifier (the JSON wire name).
    pub fn canonical_name(self) -> &'static str {
        match self {
            MadrsItem::ApparentSadness => "apparent_sadness",
            MadrsItem::ReportedSadness => "reported_sadness",
            MadrsItem::InnerTension => "inner_tension",
            MadrsItem::ReducedSleep => "reduced_sleep",
            MadrsItem::ReducedAppetite => "reduced_appetite",
            MadrsItem::ConcentrationDifficulties => "concentration_difficulties",
            MadrsItem::Lassitude => "lassitude",
            MadrsItem::InabilityToFeel => "inability_to_feel",
            MadrsItem::PessimisticThoughts => "pessimistic_thoughts",
            MadrsItem::SuicidalThoughts => "suicidal_thoughts",
        }
    }

    /// Human-readable name as it appears on the printed scale.
    pub fn display_name(self) -> &'static str {
        match self {
            MadrsItem::ApparentSadness => "Apparent Sadness",
            MadrsItem::ReportedSadness => "Reported Sadness",
            MadrsItem::InnerTension => "Inner Tension",
            MadrsItem::ReducedSleep => "Reduced Sleep",
            MadrsItem::ReducedAppetite => "Reduced Appetite",
            MadrsItem::ConcentrationDifficulties => "Concentration Difficulties",
            MadrsItem::Lassitude => "Lassitude",
            MadrsItem::InabilityToFeel => "Inability to Feel",
            MadrsItem::PessimisticThoughts => "Pessimistic Thoughts",
            MadrsItem::SuicidalThoughts => "Suicidal Thoughts",
        }
    }

    /// Parse a label in either canonical (`reduced_sleep`) or display
    /// (`Reduced Sleep`) form, case-insensitively.
    pub fn from_label(label: &str) -> Option<MadrsItem> {
        let needle = label.trim().to_ascii_lowercase();
        Self::ALL.into_iter().find(|item| {
            needle == item.canonical_name() || needle == item.display_name().to_ascii_lowercase()
        })
    }
}

impl fmt::Display for MadrsItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical_name())
    }
}

/// Fixed wording of the intermediate-states note shown with the rating scale.
pub const INTERMEDIATE_NOTE: &str = "(Odd numbers represent intermediate states)";

/// Anchor definitions for the four even scale points.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSet {
    #[serde(rename = "0")]
    pub score0: String,
    #[serde(rename = "2")]
    pub score2: String,
    #[serde(rename = "4")]
    pub score4: String,
    #[serde(rename = "6")]
    pub score6: String,
}

impl AnchorSet {
    /// Anchors paired with their scale points, in ascending order.
    pub fn entries(&self) -> [(u8, &str); 4] {
        [
            (0, self.score0.as_str()),
            (2, self.score2.as_str()),
            (4, self.score4.as_str()),
            (6, self.score6.as_str()),
        ]
    }
}

/// Descriptive content for one item: definition, standardized key
/// questions, and the even-point anchors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemDefinition {
    pub item: MadrsItem,
    pub description: String,
    pub key_questions: Vec<String>,
    pub anchors: AnchorSet,
}

/// One worked exemplar assessment: an annotated clinician-patient exchange
/// that demonstrates why a particular score applies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemonstrativeExemplar {
    pub score: u8,
    pub exchange: String,
    pub rationale: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CatalogItemFile {
    item: MadrsItem,
    description: String,
    key_questions: Vec<String>,
    anchors: AnchorSet,
    exemplars: Vec<DemonstrativeExemplar>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    notes: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CatalogFile {
    version: String,
    items: Vec<CatalogItemFile>,
}

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("failed to read catalog file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse catalog JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("catalog is missing item {0}")]
    MissingItem(MadrsItem),
    #[error("catalog defines item {0} more than once")]
    DuplicateItem(MadrsItem),
    #[error("item {item}: {reason}")]
    InvalidItem { item: MadrsItem, reason: String },
    #[error("catalog version must be non-empty")]
    EmptyVersion,
}

/// The validated, immutable item catalog.
///
/// Closed over the ten items: `definition_of` and `exemplars_of` are total.
#[derive(Debug, Clone)]
pub struct Catalog {
    version: String,
    content_hash: String,
    definitions: BTreeMap<MadrsItem, ItemDefinition>,
    exemplars: BTreeMap<MadrsItem, Vec<DemonstrativeExemplar>>,
}

const BUILTIN_CATALOG_JSON: &str = include_str!("../data/catalog.json");

impl Catalog {
    /// The catalog embedded in the binary.
    pub fn builtin() -> Catalog {
        Self::from_json_str(BUILTIN_CATALOG_JSON).expect("embedded catalog data must be valid")
    }

    pub fn from_path(path: &Path) -> Result<Catalog, CatalogError> {
        let raw = std::fs::read_to_string(path).map_err(|source| CatalogError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&raw)
    }

    pub fn from_json_str(raw: &str) -> Result<Catalog, CatalogError> {
        let file: CatalogFile = serde_json::from_str(raw)?;
        if file.version.trim().is_empty() {
            return Err(CatalogError::EmptyVersion);
        }
        let content_hash = hex_digest(raw.as_bytes());

        let mut definitions = BTreeMap::new();
        let mut exemplars = BTreeMap::new();
        for entry in file.items {
            let item = entry.item;
            if definitions.contains_key(&item) {
                return Err(CatalogError::DuplicateItem(item));
            }
            validate_item(&entry)?;
            let mut ex = entry.exemplars;
            ex.sort_by_key(|e| e.score);
            definitions.insert(
                item,
                ItemDefinition {
                    item,
                    description: entry.description,
                    key_questions: entry.key_questions,
                    anchors: entry.anchors,
                },
            );
            exemplars.insert(item, ex);
        }
        for item in MadrsItem::ALL {
            if !definitions.contains_key(&item) {
                return Err(CatalogError::MissingItem(item));
            }
        }

        Ok(Catalog {
            version: file.version,
            content_hash,
            definitions,
            exemplars,
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    /// Hex SHA-256 of the catalog file bytes; recorded with every run.
    pub fn content_hash(&self) -> &str {
        &self.content_hash
    }

    /// Descriptive content for `item`. Total over all ten items.
    pub fn definition_of(&self, item: MadrsItem) -> &ItemDefinition {
        &self.definitions[&item]
    }

    /// The seven exemplars for `item`, sorted by score 0..=6.
    pub fn exemplars_of(&self, item: MadrsItem) -> &[DemonstrativeExemplar] {
        &self.exemplars[&item]
    }
}

fn validate_item(entry: &CatalogItemFile) -> Result<(), CatalogError> {
    let item = entry.item;
    let invalid = |reason: String| CatalogError::InvalidItem { item, reason };
    if entry.description.trim().is_empty() {
        return Err(invalid("description is empty".into()));
    }
    if entry.key_questions.is_empty() || entry.key_questions.iter().any(|q| q.trim().is_empty()) {
        return Err(invalid("key_questions must be non-empty".into()));
    }
    for (_, text) in entry.anchors.entries() {
        if text.trim().is_empty() {
            return Err(invalid("anchor text is empty".into()));
        }
    }
    if entry.exemplars.len() != 7 {
        return Err(invalid(format!(
            "expected 7 exemplars, found {}",
            entry.exemplars.len()
        )));
    }
    let mut seen = [false; 7];
    for ex in &entry.exemplars {
        if ex.score > 6 {
            return Err(invalid(format!("exemplar score {} out of range", ex.score)));
        }
        if std::mem::replace(&mut seen[ex.score as usize], true) {
            return Err(invalid(format!(
                "duplicate exemplar for score {}",
                ex.score
            )));
        }
        if ex.exchange.trim().is_empty() || ex.rationale.trim().is_empty() {
            return Err(invalid(format!("exemplar {} has empty content", ex.score)));
        }
    }
    Ok(())
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for byte in digest {
        use std::fmt::Write;
        write!(out, "{byte:02x}").expect("writing to String cannot fail");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_catalog_is_closed_over_all_items() {
        let catalog = Catalog::builtin();
        for item in MadrsItem::ALL {
            let def = catalog.definition_of(item);
            assert_eq!(def.item, item);
            assert!(!def.description.trim().is_empty());
            assert!(!def.key_questions.is_empty());
            for (_, anchor) in def.anchors.entries() {
                assert!(!anchor.trim().is_empty());
            }
            let exemplars = catalog.exemplars_of(item);
            assert_eq!(exemplars.len(), 7);
            let scores: Vec<u8> = exemplars.iter().map(|e| e.score).collect();
            assert_eq!(scores, vec![0, 1, 2, 3, 4, 5, 6]);
            for ex in exemplars {
                assert!(!ex.exchange.trim().is_empty());
                assert!(!ex.rationale.trim().is_empty());
            }
        }
    }

    #[test]
    fn reported_sadness_definition_matches_scale_wording() {
        let catalog = Catalog::builtin();
        let def = catalog.definition_of(MadrsItem::ReportedSadness);
        assert!(def.description.contains("low spirits"));
        assert!(def
            .key_questions
            .iter()
            .any(|q| q.contains("Does the feeling lift at all")));
    }

    #[test]
    fn exemplar_texts_are_distinct_across_items() {
        let catalog = Catalog::builtin();
        let mut seen = std::collections::BTreeSet::new();
        for item in MadrsItem::ALL {
            for ex in catalog.exemplars_of(item) {
                assert!(
                    seen.insert(ex.exchange.clone()),
                    "duplicate exemplar exchange for {item}"
                );
            }
        }
    }

    #[test]
    fn key_questions_are_unique_across_items() {
        // The segmentation oracle maps questions back to items by pool
        // membership, so cross-item duplicates would be ambiguous.
        let catalog = Catalog::builtin();
        let mut seen = std::collections::BTreeSet::new();
        for item in MadrsItem::ALL {
            for q in &catalog.definition_of(item).key_questions {
                assert!(
                    seen.insert(q.clone()),
                    "key question reused across items: {q}"
                );
            }
        }
    }

    #[test]
    fn catalog_hash_tracks_content() {
        let a = Catalog::builtin();
        let raw = BUILTIN_CATALOG_JSON.replace("1.0.0", "1.0.1");
        let b = Catalog::from_json_str(&raw).unwrap();
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash().len(), 64);
    }

    #[test]
    fn missing_item_is_rejected() {
        let mut file: serde_json::Value = serde_json::from_str(BUILTIN_CATALOG_JSON).unwrap();
        let items = file["items"].as_array_mut().unwrap();
        items.pop();
        let raw = serde_json::to_string(&file).unwrap();
        assert!(matches!(
            Catalog::from_json_str(&raw),
            Err(CatalogError::MissingItem(_))
        ));
    }

    #[test]
    fn incomplete_exemplar_coverage_is_rejected() {
        let mut file: serde_json::Value = serde_json::from_str(BUILTIN_CATALOG_JSON).unwrap();
        file["items"][0]["exemplars"].as_array_mut().unwrap().pop();
        let raw = serde_json::to_string(&file).unwrap();
        assert!(matches!(
            Catalog::from_json_str(&raw),
            Err(CatalogError::InvalidItem { .. })
        ));
    }

    #[test]
    fn item_labels_round_trip() {
        for item in MadrsItem::ALL {
            assert_eq!(MadrsItem::from_label(item.canonical_name()), Some(item));
            assert_eq!(MadrsItem::from_label(item.display_name()), Some(item));
            assert_eq!(
                MadrsItem::from_label(&item.display_name().to_uppercase()),
                Some(item)
            );
        }
        assert_eq!(MadrsItem::from_label("banana"), None);
    }
}
