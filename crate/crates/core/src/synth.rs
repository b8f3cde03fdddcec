//! Synthetic diarized corpora with planted per-item severities, and the
//! oracle mock-backend policy that reads them back.
//!
//! Each generated interview asks at least one key question per item and
//! embeds a severity marker phrase in the patient's reply; the clinician
//! scores are set to the planted severities. The oracle policy decodes the
//! markers from an assessment prompt's context (and maps segmentation
//! questions back to items via the catalog pools), so the full pipeline can
//! be verified end to end without clinical data: with zero noise every
//! predicted score equals the planted score.
//!
//! Markers are distinctive digit-free phrases, so the oracle cannot
//! shortcut the context plumbing by scanning for numerals.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::{Catalog, MadrsItem};
use crate::error_model::ErrorObservation;
use crate::gateway::{Gateway, MockPolicy};
use crate::prompt::{ALLOWED_LABELS_HEADER, CONTEXT_HEADER, NONE_LABEL, QUESTION_HEADER};
use crate::transcript::{Corpus, Gender, RaterId, TranscriptRecord, UtteranceRecord};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("failed to parse marker table: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("marker table is missing item {0}")]
    MissingItem(MadrsItem),
    #[error("marker table item {item} severity {severity} has an empty pool")]
    EmptyPool { item: MadrsItem, severity: u8 },
    #[error("marker phrases collide: {a:?} and {b:?}")]
    PhraseCollision { a: String, b: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MarkerFile {
    items: BTreeMap<MadrsItem, BTreeMap<String, Vec<String>>>,
}

/// Phrase pools keyed by (item, severity). Pools are disjoint across the
/// whole table and no phrase is a substring of another, so severity is
/// recoverable from any embedded phrase.
#[derive(Debug, Clone)]
pub struct MarkerTable {
    pools: BTreeMap<MadrsItem, [Vec<String>; 7]>,
}

const BUILTIN_MARKERS_JSON: &str = include_str!("../data/markers.json");

impl MarkerTable {
    pub fn builtin() -> MarkerTable {
        Self::from_json_str(BUILTIN_MARKERS_JSON).expect("embedded marker table must be valid")
    }

    pub fn from_json_str(raw: &str) -> Result<MarkerTable, SynthError> {
        let file: MarkerFile = serde_json::from_str(raw)?;
        let mut pools = BTreeMap::new();
        for item in MadrsItem::ALL {
            let by_severity = file.items.get(&item).ok_or(SynthError::MissingItem(item))?;
            let mut item_pools: [Vec<String>; 7] = Default::default();
            for severity in 0u8..=6 {
                let pool = by_severity
                    .get(&severity.to_string())
                    .filter(|p| !p.is_empty())
                    .ok_or(SynthError::EmptyPool { item, severity })?;
                item_pools[severity as usize] = pool.clone();
            }
            pools.insert(item, item_pools);
        }
        let table = MarkerTable { pools };
        table.check_disjoint()?;
        Ok(table)
    }

    fn check_disjoint(&self) -> Result<(), SynthError> {
        let all: Vec<&String> = self
            .pools
            .values()
            .flat_map(|pools| pools.iter().flatten())
            .collect();
        for (i, a) in all.iter().enumerate() {
            for b in all.iter().skip(i + 1) {
                if a.contains(b.as_str()) || b.contains(a.as_str()) {
                    return Err(SynthError::PhraseCollision {
                        a: (*a).clone(),
                        b: (*b).clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn phrases(&self, item: MadrsItem, severity: u8) -> &[String] {
        &self.pools[&item][severity as usize]
    }

    /// Find the planted severity for `item` in a rendered context: the
    /// marker whose occurrence starts earliest wins.
    pub fn find_severity(&self, item: MadrsItem, text: &str) -> Option<(u8, &str)> {
        let mut best: Option<(usize, u8, &str)> = None;
        for severity in 0u8..=6 {
            for phrase in self.phrases(item, severity) {
                if let Some(position) = text.find(phrase.as_str()) {
                    if best.is_none() || position < best.expect("checked").0 {
                        best = Some((position, severity, phrase));
                    }
                }
            }
        }
        best.map(|(_, severity, phrase)| (severity, phrase))
    }
}

/// Parameters of one synthetic corpus.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_patients: u32,
    pub visits_per_patient: u32,
    pub seed: u64,
    /// Probability that the oracle perturbs a rating by one step.
    pub noise: f64,
    pub marker_table: MarkerTable,
}

impl SynthSpec {
    pub fn new(n_patients: u32, visits_per_patient: u32, seed: u64, noise: f64) -> SynthSpec {
        SynthSpec {
            n_patients,
            visits_per_patient,
            seed,
            noise,
            marker_table: MarkerTable::builtin(),
        }
    }
}

const REPLY_TEMPLATES: [&str; 3] = [
    "Honestly, {}.",
    "Well, {} — that is the truth of it.",
    "I would say {}, more or less.",
];

/// Generate a deterministic corpus: same spec and catalog, same bytes.
///
/// Every interview opens with a small-talk exchange (mapped to no item),
/// then asks one key question per item in scale order; each patient reply
/// embeds the severity marker for the planted score plus a per-interview
/// session tag that makes cross-interview leakage detectable.
pub fn generate_corpus(spec: &SynthSpec, catalog: &Catalog) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut transcripts = Vec::new();
    for patient_index in 0..spec.n_patients {
        let patient_id = format!("P{:03}", patient_index + 1);
        let education = rng.random_range(8..=20);
        let age = rng.random_range(19..=74);
        let gender = match rng.random_range(0..100) {
            0..=56 => Gender::Male,
            57..=96 => Gender::Female,
            _ => Gender::Other,
        };
        for visit in 1..=spec.visits_per_patient {
            let interview_id = format!("{patient_id}-V{visit}");
            let tag = format!("(session {interview_id})");
            let rater = match rng.random_range(0..3) {
                0 => RaterId::R1,
                1 => RaterId::R2,
                _ => RaterId::R3,
            };
            let mut utterances = vec![
                UtteranceRecord {
                    speaker: crate::transcript::Speaker::Clinician,
                    text: "Thanks for coming in today. How have you been holding up overall?"
                        .to_string(),
                },
                UtteranceRecord {
                    speaker: crate::transcript::Speaker::Patient,
                    text: format!("Getting by, thanks for asking. {tag}"),
                },
            ];
            let mut scores = BTreeMap::new();
            for item in MadrsItem::ALL {
                let severity: u8 = rng.random_range(0..=6);
                scores.insert(item, severity);
                let questions = &catalog.definition_of(item).key_questions;
                let question = questions[rng.random_range(0..questions.len())].clone();
                utterances.push(UtteranceRecord {
                    speaker: crate::transcript::Speaker::Clinician,
                    text: question,
                });
                let pool = spec.marker_table.phrases(item, severity);
                let marker = &pool[rng.random_range(0..pool.len())];
                let template = REPLY_TEMPLATES[rng.random_range(0..REPLY_TEMPLATES.len())];
                let reply = template.replacen("{}", marker, 1);
                utterances.push(UtteranceRecord {
                    speaker: crate::transcript::Speaker::Patient,
                    text: format!("{reply} {tag}"),
                });
                if rng.random_bool(0.3) {
                    utterances.push(UtteranceRecord {
                        speaker: crate::transcript::Speaker::Patient,
                        text: format!("It has been like that for a while now. {tag}"),
                    });
                }
            }
            let record = TranscriptRecord {
                interview_id,
                patient_id: patient_id.clone(),
                visit_number: visit,
                rater_id: rater,
                education,
                gender,
                age,
                utterances,
                madrs_scores: Some(scores),
            };
            transcripts.push(
                record
                    .into_transcript()
                    .expect("generated records are valid"),
            );
        }
    }
    Corpus {
        transcripts,
        source_path: format!("synth(seed={})", spec.seed),
    }
}

/// The deterministic mock policy that decodes planted markers.
pub struct OraclePolicy {
    marker_table: MarkerTable,
    catalog: Catalog,
    noise: f64,
}

impl OraclePolicy {
    pub fn new(marker_table: MarkerTable, catalog: Catalog, noise: f64) -> OraclePolicy {
        OraclePolicy {
            marker_table,
            catalog,
            noise,
        }
    }

    fn classify(&self, prompt: &str) -> String {
        let question = prompt
            .rfind(QUESTION_HEADER)
            .map(|pos| prompt[pos + QUESTION_HEADER.len()..].trim())
            .unwrap_or("");
        for item in MadrsItem::ALL {
            let definition = self.catalog.definition_of(item);
            if definition
                .key_questions
                .iter()
                .any(|q| question.contains(q.as_str()))
            {
                return format!("Label: {}", item.canonical_name());
            }
        }
        format!("Label: {NONE_LABEL}")
    }

    fn assess(&self, prompt: &str, seed: u64) -> String {
        let item = prompt
            .lines()
            .find_map(|line| line.strip_prefix("MADRS Item to assess: "))
            .and_then(MadrsItem::from_label);
        let context = prompt
            .rfind(CONTEXT_HEADER)
            .map(|pos| &prompt[pos + CONTEXT_HEADER.len()..])
            .unwrap_or("");
        let question = context
            .lines()
            .find_map(|line| line.strip_prefix("CLINICIAN: "))
            .unwrap_or("n/a");

        let Some(item) = item else {
            return format!(
                "Rating: 0\nExplanation: The assessed item could not be identified.\n\
                 Key Utterances:\nMost Relevant Question: {question}\nNote: marker-not-found"
            );
        };
        let Some((severity, phrase)) = self.marker_table.find_severity(item, context) else {
            return format!(
                "Rating: 0\nExplanation: No severity marker was found in the provided context.\n\
                 Key Utterances:\nMost Relevant Question: {question}\nNote: marker-not-found"
            );
        };

        let mut score = severity;
        if self.noise > 0.0 {
            let mut rng = prompt_rng(prompt, seed);
            if rng.random::<f64>() < self.noise {
                // Perturb one step away from the boundary so the error
                // magnitude is exactly one.
                score = match score {
                    0 => 1,
                    6 => 5,
                    s => {
                        if rng.random_bool(0.5) {
                            s + 1
                        } else {
                            s - 1
                        }
                    }
                };
            }
        }
        format!(
            "Rating: {score}\nExplanation: The exchanges describe {} at this level.\n\
             Key Utterances: PATIENT: {phrase}\nMost Relevant Question: {question}",
            item.display_name()
        )
    }
}

impl MockPolicy for OraclePolicy {
    fn respond(&self, prompt: &str, seed: u64) -> String {
        if prompt.contains(ALLOWED_LABELS_HEADER) {
            self.classify(prompt)
        } else {
            self.assess(prompt, seed)
        }
    }
}

/// A mock gateway running the oracle policy.
pub fn oracle_gateway(catalog: &Catalog, table: MarkerTable, noise: f64, seed: u64) -> Gateway {
    Gateway::mock(
        Arc::new(OraclePolicy::new(table, catalog.clone(), noise)),
        seed,
    )
}

/// Deterministic per-prompt RNG: ChaCha seeded from SHA-256(seed, prompt).
fn prompt_rng(prompt: &str, seed: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(prompt.as_bytes());
    let digest = hasher.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(first))
}

/// Ground-truth parameters for simulating the error model directly
/// (bypassing the LLM path), in the within/between parametrization the
/// design matrix uses.
#[derive(Debug, Clone)]
pub struct ErrorSim {
    pub n_patients: usize,
    pub obs_per_patient: usize,
    pub seed: u64,
    pub sigma_u: f64,
    pub sigma_e: f64,
    pub intercept: f64,
    pub visit_within: f64,
    pub tokens_within: f64,
    pub rater_r2: f64,
    pub rater_r3: f64,
    pub visit_between: f64,
    pub tokens_between: f64,
    pub education: f64,
    pub male: f64,
    pub other_gender: f64,
    pub age: f64,
}

impl ErrorSim {
    pub fn null(n_patients: usize, obs_per_patient: usize, seed: u64) -> ErrorSim {
        ErrorSim {
            n_patients,
            obs_per_patient,
            seed,
            sigma_u: 1.0,
            sigma_e: 1.0,
            intercept: 0.0,
            visit_within: 0.0,
            tokens_within: 0.0,
            rater_r2: 0.0,
            rater_r3: 0.0,
            visit_between: 0.0,
            tokens_between: 0.0,
            education: 0.0,
            male: 0.0,
            other_gender: 0.0,
            age: 0.0,
        }
    }

    /// Coefficient vector in design-column order (with age).
    pub fn coefficients(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("intercept", self.intercept),
            ("visit_within", self.visit_within),
            ("tokens_within", self.tokens_within),
            ("rater_r2", self.rater_r2),
            ("rater_r3", self.rater_r3),
            ("visit_between", self.visit_between),
            ("tokens_between", self.tokens_between),
            ("education", self.education),
            ("male", self.male),
            ("other_gender", self.other_gender),
            ("age", self.age),
        ]
    }
}

/// Draw observations from the random-intercept model with known
/// parameters. The within/between terms use each patient's own sample
/// means, exactly mirroring the design construction.
pub fn simulate_error_observations(sim: &ErrorSim) -> Vec<ErrorObservation> {
    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    let mut observations = Vec::with_capacity(sim.n_patients * sim.obs_per_patient);
    for patient in 0..sim.n_patients {
        let u = sim.sigma_u * standard_normal(&mut rng);
        let education = rng.random_range(8..=20u32);
        let age = rng.random_range(19..=74u32);
        // Heavier Other share than the corpus generator so the dummy column
        // stays identifiable in moderate simulated samples.
        let gender = match rng.random_range(0..100) {
            0..=44 => Gender::Male,
            45..=84 => Gender::Female,
            _ => Gender::Other,
        };
        // Stagger the first visit per patient so the between-patient visit
        // mean actually varies (a fully balanced design would make it
        // collinear with the intercept).
        let first_visit: u32 = rng.random_range(1..=4);
        let mut drawn: Vec<(u32, u32, RaterId)> = (0..sim.obs_per_patient)
            .map(|visit| {
                (
                    first_visit + visit as u32,
                    rng.random_range(800..5000u32),
                    match rng.random_range(0..3) {
                        0 => RaterId::R1,
                        1 => RaterId::R2,
                        _ => RaterId::R3,
                    },
                )
            })
            .collect();
        let visit_mean =
            drawn.iter().map(|(v, _, _)| f64::from(*v)).sum::<f64>() / drawn.len() as f64;
        let token_mean =
            drawn.iter().map(|(_, t, _)| f64::from(*t)).sum::<f64>() / drawn.len() as f64;
        for (visit, tokens, rater) in drawn.drain(..) {
            let mean = sim.intercept
                + sim.visit_within * (f64::from(visit) - visit_mean)
                + sim.tokens_within * (f64::from(tokens) - token_mean)
                + sim.rater_r2 * f64::from(u8::from(rater == RaterId::R2))
                + sim.rater_r3 * f64::from(u8::from(rater == RaterId::R3))
                + sim.visit_between * visit_mean
                + sim.tokens_between * token_mean
                + sim.education * f64::from(education)
                + sim.male * f64::from(u8::from(gender == Gender::Male))
                + sim.other_gender * f64::from(u8::from(gender == Gender::Other))
                + sim.age * f64::from(age);
            observations.push(ErrorObservation {
                patient_id: format!("P{patient:04}"),
                y: mean + u + sim.sigma_e * standard_normal(&mut rng),
                visit,
                tokens,
                rater,
                education,
                gender,
                age,
            });
        }
    }
    observations
}

/// Box-Muller standard normal draw.
fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
