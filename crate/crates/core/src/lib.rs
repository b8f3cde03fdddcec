//! Batch pipeline that scores depression severity from diarized
//! clinical-interview transcripts by prompting a chat-completion LLM per
//! MADRS item, then evaluates those scores against clinician ratings.
//!
//! The pipeline stages are:
//!
//! 1. [`transcript`] — load the diarized JSONL corpus.
//! 2. [`segmenter`] — classify clinician questions into MADRS items and
//!    group question-response pairs per item.
//! 3. [`assessor`] — run the per-item structured assessment over the corpus
//!    (repeated runs, resumable persistence) and parse the four-field output.
//! 4. [`metrics`] — MAE, R², ICC(3,k), F1, accuracy against clinician
//!    scores, with across-run dispersion.
//! 5. [`error_model`] — random-intercept mixed-effects model of absolute
//!    prediction errors with within/between predictor decomposition.
//!
//! [`catalog`] holds the ten-item scale content used to build prompts
//! ([`prompt`]); [`gateway`] is the chat-completion transport; [`synth`]
//! generates marker-planted synthetic corpora and the oracle mock backend
//! that scores them exactly, enabling deterministic end-to-end verification
//! without clinical data.
//!
//! ```
//! use madrs_core::assessor::{assess_corpus, AssessJob, RunStore};
//! use madrs_core::catalog::Catalog;
//! use madrs_core::prompt::{ContextScope, PromptVariant};
//! use madrs_core::report::evaluate_runset;
//! use madrs_core::synth::{generate_corpus, oracle_gateway, MarkerTable, SynthSpec};
//!
//! let catalog = Catalog::builtin();
//! let corpus = generate_corpus(&SynthSpec::new(3, 1, 42, 0.0), &catalog);
//! let gateway = oracle_gateway(&catalog, MarkerTable::builtin(), 0.0, 42);
//! let job = AssessJob {
//!     corpus: &corpus,
//!     segments: None,
//!     catalog: &catalog,
//!     variant: PromptVariant::AllCues,
//!     scope: ContextScope::FullTranscript,
//!     repetitions: 2,
//! };
//! let mut store = RunStore::in_memory();
//! let runset = assess_corpus(&job, &gateway, &mut store).unwrap();
//! let report = evaluate_runset(&runset, &corpus).unwrap();
//! // The noise-free oracle reproduces the planted scores exactly.
//! assert_eq!(report.total.mae.as_ref().unwrap().mean, 0.0);
//! ```

pub mod assessor;
pub mod catalog;
pub mod error_model;
pub mod gateway;
pub mod metrics;
pub mod prompt;
pub mod report;
pub mod segmenter;
pub mod synth;
pub mod transcript;

pub use catalog::{Catalog, MadrsItem};
pub use gateway::{Backend, Gateway, LlmConfig};
pub use prompt::{ContextScope, PromptVariant};
pub use transcript::{load_corpus, Corpus, Transcript};
