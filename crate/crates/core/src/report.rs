//! Report generation: score a RunSet against clinician ground truth,
//! aggregate across runs, and render the metric panel as JSON, aligned
//! text, and CSV. Also builds the per-item error-model analysis.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::assessor::RunSet;
use crate::catalog::MadrsItem;
use crate::error_model::{
    decompose_within_between, fit_with, significant_effects, Criterion, ErrorObservation,
    FitOptions, MixedModelFit,
};
use crate::metrics::{
    aggregate_runs, compute_run_metrics, AggregatedMetrics, MetricSummary, PairedScores,
};
use crate::prompt::{ContextScope, PromptVariant};
use crate::transcript::Corpus;

/// Severity cutoff for item-level classification metrics.
pub const ITEM_THRESHOLD: i32 = 3;
/// Severity cutoff for total-score classification metrics.
pub const TOTAL_THRESHOLD: i32 = 20;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("corpus has no transcripts with clinician scores; nothing to evaluate")]
    MissingGroundTruth,
    #[error("no run produced at least two scorable pairs for any target")]
    NotEnoughData,
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
}

/// The full evaluation panel: per-item and total-score metrics with
/// across-run dispersion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub variant: PromptVariant,
    pub scope: ContextScope,
    pub repetitions: u32,
    pub item_threshold: i32,
    pub total_threshold: i32,
    /// Interviews carrying ground truth.
    pub labeled_interviews: usize,
    pub per_item: BTreeMap<MadrsItem, AggregatedMetrics>,
    pub total: AggregatedMetrics,
}

fn item_pairs(
    runset: &RunSet,
    corpus: &Corpus,
    item: MadrsItem,
    run_index: u32,
) -> (Vec<String>, Vec<i32>, Vec<i32>, usize) {
    let mut ids = Vec::new();
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    let mut eligible = 0;
    for transcript in &corpus.transcripts {
        let Some(scores) = &transcript.clinician_scores else {
            continue;
        };
        eligible += 1;
        let Some(run) = runset.run_for(&transcript.meta.interview_id, run_index) else {
            continue;
        };
        if let Some(score) = run.items.get(&item).and_then(|o| o.score()) {
            ids.push(transcript.meta.interview_id.clone());
            truth.push(i32::from(scores[&item]));
            pred.push(i32::from(score));
        }
    }
    (ids, truth, pred, eligible)
}

fn total_pairs(
    runset: &RunSet,
    corpus: &Corpus,
    run_index: u32,
) -> (Vec<String>, Vec<i32>, Vec<i32>, usize) {
    let mut ids = Vec::new();
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    let mut eligible = 0;
    for transcript in &corpus.transcripts {
        let Some(total_truth) = transcript.clinician_total() else {
            continue;
        };
        eligible += 1;
        let Some(run) = runset.run_for(&transcript.meta.interview_id, run_index) else {
            continue;
        };
        if let Some(total_pred) = run.total {
            ids.push(transcript.meta.interview_id.clone());
            truth.push(total_truth as i32);
            pred.push(total_pred as i32);
        }
    }
    (ids, truth, pred, eligible)
}

fn aggregate_target(
    runset: &RunSet,
    threshold: i32,
    pairs_for: impl Fn(u32) -> (Vec<String>, Vec<i32>, Vec<i32>, usize),
) -> AggregatedMetrics {
    let mut per_run = Vec::new();
    let mut pooled_ids = Vec::new();
    let mut pooled_truth = Vec::new();
    let mut pooled_pred = Vec::new();
    for run_index in 1..=runset.repetitions {
        let (ids, truth, pred, eligible) = pairs_for(run_index);
        for (i, id) in ids.iter().enumerate() {
            pooled_ids.push(format!("{id}#r{run_index}"));
            pooled_truth.push(truth[i]);
            pooled_pred.push(pred[i]);
        }
        if truth.len() < 2 {
            continue;
        }
        let coverage = if eligible == 0 {
            0.0
        } else {
            truth.len() as f64 / eligible as f64
        };
        let scores = PairedScores::new(ids, truth, pred).expect("validated above");
        per_run.push(compute_run_metrics(run_index, &scores, threshold, coverage));
    }
    let pooled = if pooled_truth.len() >= 2 {
        let coverage =
            per_run.iter().map(|r| r.coverage).sum::<f64>().max(0.0) / per_run.len().max(1) as f64;
        let scores = PairedScores::new(pooled_ids, pooled_truth, pooled_pred)
            .expect("pooled pairs are valid");
        Some(compute_run_metrics(0, &scores, threshold, coverage))
    } else {
        None
    };
    aggregate_runs(per_run, pooled)
}

/// Score a RunSet against the corpus ground truth.
pub fn evaluate_runset(runset: &RunSet, corpus: &Corpus) -> Result<EvaluationReport, ReportError> {
    let labeled = corpus
        .transcripts
        .iter()
        .filter(|t| t.clinician_scores.is_some())
        .count();
    if labeled == 0 {
        return Err(ReportError::MissingGroundTruth);
    }

    let mut per_item = BTreeMap::new();
    for item in MadrsItem::ALL {
        let agg = aggregate_target(runset, ITEM_THRESHOLD, |run| {
            item_pairs(runset, corpus, item, run)
        });
        per_item.insert(item, agg);
    }
    let total = aggregate_target(runset, TOTAL_THRESHOLD, |run| {
        total_pairs(runset, corpus, run)
    });

    if per_item.values().all(|a| a.per_run.is_empty()) && total.per_run.is_empty() {
        return Err(ReportError::NotEnoughData);
    }

    Ok(EvaluationReport {
        variant: runset.variant,
        scope: runset.scope,
        repetitions: runset.repetitions,
        item_threshold: ITEM_THRESHOLD,
        total_threshold: TOTAL_THRESHOLD,
        labeled_interviews: labeled,
        per_item,
        total,
    })
}

fn fmt_summary(summary: &Option<MetricSummary>) -> String {
    match summary {
        Some(s) => format!("{:.2} ± {:.2}", s.mean, s.sd),
        None => "--".to_string(),
    }
}

fn class_dist_of(agg: &AggregatedMetrics) -> String {
    // One run's truth distribution; pooled counts would scale with the
    // number of runs.
    let dist = agg
        .per_run
        .first()
        .or(agg.pooled.as_ref())
        .map(|r| r.class_dist);
    match dist {
        Some((below, above)) => format!("({below}, {above})"),
        None => "--".to_string(),
    }
}

/// Aligned plain-text table: one row per item plus the total-score row.
pub fn metrics_table_text(report: &EvaluationReport) -> String {
    let mut out = String::new();
    let header = format!(
        "{:<28} {:>14} {:>14} {:>14} {:>14} {:>14} {:>14}\n",
        "MADRS Item", "MAE", "R2", "ICC(3,k)", "F1", "Accuracy", "Class Dist."
    );
    out.push_str(&header);
    out.push_str(&"-".repeat(header.len() - 1));
    out.push('\n');
    for item in MadrsItem::ALL {
        let agg = &report.per_item[&item];
        out.push_str(&format!(
            "{:<28} {:>14} {:>14} {:>14} {:>14} {:>14} {:>14}\n",
            item.display_name(),
            fmt_summary(&agg.mae),
            fmt_summary(&agg.r2),
            fmt_summary(&agg.icc3k),
            fmt_summary(&agg.f1),
            fmt_summary(&agg.accuracy),
            class_dist_of(agg),
        ));
    }
    out.push_str(&format!(
        "{:<28} {:>14} {:>14} {:>14} {:>14} {:>14} {:>14}\n",
        "Total (item-wise)",
        fmt_summary(&report.total.mae),
        fmt_summary(&report.total.r2),
        fmt_summary(&report.total.icc3k),
        fmt_summary(&report.total.f1),
        fmt_summary(&report.total.accuracy),
        class_dist_of(&report.total),
    ));
    out
}

fn csv_value(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Per-run CSV for downstream plotting: one row per (target, run).
pub fn metrics_csv(report: &EvaluationReport) -> String {
    let mut out = String::from(
        "target,run,n,coverage,mae,r2,icc3k,f1,accuracy,class_below,class_at_or_above\n",
    );
    let mut push_rows = |target: &str, agg: &AggregatedMetrics| {
        for run in agg.per_run.iter().chain(agg.pooled.iter()) {
            let run_label = if run.run_index == 0 {
                "pooled".to_string()
            } else {
                run.run_index.to_string()
            };
            out.push_str(&format!(
                "{target},{run_label},{},{},{},{},{},{},{},{},{}\n",
                run.n,
                run.coverage,
                run.mae,
                csv_value(run.r2),
                csv_value(run.icc3k),
                csv_value(run.f1),
                run.accuracy,
                run.class_dist.0,
                run.class_dist.1,
            ));
        }
    };
    for item in MadrsItem::ALL {
        push_rows(item.canonical_name(), &report.per_item[&item]);
    }
    push_rows("total", &report.total);
    out
}

fn se_of(summary: &Option<MetricSummary>) -> Option<f64> {
    summary
        .as_ref()
        .map(|s| s.sd / (s.n_runs.max(1) as f64).sqrt())
}

/// Side-by-side per-item MAE comparison of two runsets (one row per item):
/// mean and standard error for each scope.
pub fn comparison_csv(full: &EvaluationReport, segmented: &EvaluationReport) -> String {
    let mut out =
        String::from("item,mae_full_mean,mae_full_se,mae_segmented_mean,mae_segmented_se\n");
    for item in MadrsItem::ALL {
        let f = &full.per_item[&item];
        let s = &segmented.per_item[&item];
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            item.canonical_name(),
            csv_value(f.mae.as_ref().map(|m| m.mean)),
            csv_value(se_of(&f.mae)),
            csv_value(s.mae.as_ref().map(|m| m.mean)),
            csv_value(se_of(&s.mae)),
        ));
    }
    out
}

/// Alternative ICC formulation: the clinician column plus one column per
/// model run (k = repetitions + 1 raters), over interviews scored in every
/// run. The headline report uses the per-run two-rater form instead.
pub fn icc_runs_as_raters(
    runset: &RunSet,
    corpus: &Corpus,
    item: MadrsItem,
) -> Result<f64, crate::metrics::MetricsError> {
    let mut ratings: Vec<Vec<f64>> = Vec::new();
    for transcript in &corpus.transcripts {
        let Some(scores) = &transcript.clinician_scores else {
            continue;
        };
        let mut row = vec![f64::from(scores[&item])];
        for run_index in 1..=runset.repetitions {
            let score = runset
                .run_for(&transcript.meta.interview_id, run_index)
                .and_then(|run| run.items.get(&item))
                .and_then(|outcome| outcome.score());
            match score {
                Some(score) => row.push(f64::from(score)),
                None => break,
            }
        }
        if row.len() == runset.repetitions as usize + 1 {
            ratings.push(row);
        }
    }
    crate::metrics::icc_3k(&ratings)
}

/// Error-model target: one MADRS item or the total score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorTarget {
    Item(MadrsItem),
    Total,
}

impl ErrorTarget {
    pub fn label(&self) -> String {
        match self {
            ErrorTarget::Item(item) => item.canonical_name().to_string(),
            ErrorTarget::Total => "total".to_string(),
        }
    }
}

/// Build error observations (one per scorable (interview, run) pair) for a
/// target: `y = |truth − pred|`, predictors from the interview metadata.
pub fn observations_from_runset(
    runset: &RunSet,
    corpus: &Corpus,
    target: ErrorTarget,
) -> Vec<ErrorObservation> {
    let mut observations = Vec::new();
    for transcript in &corpus.transcripts {
        let Some(scores) = &transcript.clinician_scores else {
            continue;
        };
        for run_index in 1..=runset.repetitions {
            let Some(run) = runset.run_for(&transcript.meta.interview_id, run_index) else {
                continue;
            };
            let error = match target {
                ErrorTarget::Item(item) => run
                    .items
                    .get(&item)
                    .and_then(|o| o.score())
                    .map(|pred| (f64::from(scores[&item]) - f64::from(pred)).abs()),
                ErrorTarget::Total => run.total.map(|pred| {
                    (f64::from(transcript.clinician_total().expect("scores present")) - pred as f64)
                        .abs()
                }),
            };
            if let Some(y) = error {
                observations.push(ErrorObservation {
                    patient_id: transcript.meta.patient_id.clone(),
                    y,
                    visit: transcript.meta.visit_number,
                    tokens: transcript.token_count() as u32,
                    rater: transcript.meta.rater_id,
                    education: transcript.meta.education,
                    gender: transcript.meta.gender,
                    age: transcript.meta.age,
                });
            }
        }
    }
    observations
}

/// One fitted (or failed) error model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ErrorModelOutcome {
    Fitted {
        fit: MixedModelFit,
        dropped_columns: Vec<String>,
        significant: Vec<(String, f64)>,
    },
    Failed {
        reason: String,
    },
}

/// Error-model fits for all ten items plus the total score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorAnalysis {
    pub alpha: f64,
    pub include_age: bool,
    /// Keyed by item canonical name, plus "total".
    pub models: BTreeMap<String, ErrorModelOutcome>,
}

/// Fit one random-intercept model per item and one for the total error.
///
/// Degenerate design columns (for example rater dummies in a single-rater
/// corpus) are dropped and recorded; fit failures are reported per model
/// and never abort the analysis.
pub fn analyze_errors(
    runset: &RunSet,
    corpus: &Corpus,
    alpha: f64,
    include_age: bool,
) -> Result<ErrorAnalysis, ReportError> {
    if !corpus
        .transcripts
        .iter()
        .any(|t| t.clinician_scores.is_some())
    {
        return Err(ReportError::MissingGroundTruth);
    }
    let targets: Vec<ErrorTarget> = MadrsItem::ALL
        .into_iter()
        .map(ErrorTarget::Item)
        .chain(std::iter::once(ErrorTarget::Total))
        .collect();
    let mut models = BTreeMap::new();
    for target in targets {
        let observations = observations_from_runset(runset, corpus, target);
        let outcome = fit_target(&observations, include_age, alpha);
        models.insert(target.label(), outcome);
    }
    Ok(ErrorAnalysis {
        alpha,
        include_age,
        models,
    })
}

fn fit_target(
    observations: &[ErrorObservation],
    include_age: bool,
    alpha: f64,
) -> ErrorModelOutcome {
    let design = match decompose_within_between(observations, include_age) {
        Ok(design) => design,
        Err(e) => {
            return ErrorModelOutcome::Failed {
                reason: e.to_string(),
            }
        }
    };
    let (pruned, dropped_columns) = crate::error_model::prune_degenerate_columns(&design);
    match fit_with(
        &pruned,
        &FitOptions {
            criterion: Criterion::Reml,
            ..FitOptions::default()
        },
    ) {
        Ok(fit) => {
            let significant = significant_effects(&fit, alpha);
            ErrorModelOutcome::Fitted {
                fit,
                dropped_columns,
                significant,
            }
        }
        Err(e) => ErrorModelOutcome::Failed {
            reason: e.to_string(),
        },
    }
}

/// Dash-styled coefficient table: one row per target, one column per
/// predictor; cells show the coefficient when significant at `alpha`, a
/// dash otherwise.
pub fn error_table_text(analysis: &ErrorAnalysis) -> String {
    let mut columns = vec![
        "visit_within".to_string(),
        "tokens_within".to_string(),
        "rater_r2".to_string(),
        "rater_r3".to_string(),
        "visit_between".to_string(),
        "tokens_between".to_string(),
        "education".to_string(),
        "male".to_string(),
        "other_gender".to_string(),
    ];
    if analysis.include_age {
        columns.push("age".to_string());
    }
    let mut out = format!("{:<28}", "Target");
    for column in &columns {
        out.push_str(&format!(" {column:>14}"));
    }
    out.push('\n');
    out.push_str(&"-".repeat(28 + 15 * columns.len()));
    out.push('\n');

    let targets: Vec<String> = MadrsItem::ALL
        .iter()
        .map(|i| i.canonical_name().to_string())
        .chain(std::iter::once("total".to_string()))
        .collect();
    for target in targets {
        let Some(outcome) = analysis.models.get(&target) else {
            continue;
        };
        out.push_str(&format!("{target:<28}"));
        match outcome {
            ErrorModelOutcome::Fitted {
                fit,
                dropped_columns,
                ..
            } => {
                for column in &columns {
                    let cell = if dropped_columns.contains(column) {
                        "dropped".to_string()
                    } else {
                        match fit.coefficient(column) {
                            Some(c) if c.p_value < analysis.alpha => format!("{:.2}", c.estimate),
                            Some(_) => "--".to_string(),
                            None => "dropped".to_string(),
                        }
                    };
                    out.push_str(&format!(" {cell:>14}"));
                }
                if !fit.converged {
                    out.push_str("  [not converged]");
                }
            }
            ErrorModelOutcome::Failed { reason } => {
                out.push_str(&format!(" [failed: {reason}]"));
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assessor::{
        AssessJob, FailureCause, ItemAssessment, ItemOutcome, RunRecord, RunStore,
    };
    use crate::catalog::Catalog;
    use crate::synth::{generate_corpus, oracle_gateway, MarkerTable, SynthSpec};

    fn record(interview: &str, run: u32, item: MadrsItem, outcome: ItemOutcome) -> RunRecord {
        RunRecord {
            interview_id: interview.to_string(),
            run_index: run,
            variant: PromptVariant::AllCues,
            scope: ContextScope::FullTranscript,
            item,
            outcome,
            attempts: 1,
            prompt_sha256: String::new(),
            catalog_version: "test".to_string(),
            catalog_sha256: String::new(),
        }
    }

    fn scored(item: MadrsItem, score: u8) -> ItemOutcome {
        ItemOutcome::Scored {
            assessment: ItemAssessment {
                item,
                score,
                explanation: String::new(),
                key_utterances: Vec::new(),
                most_relevant_question: String::new(),
                raw_response: String::new(),
            },
        }
    }

    fn oracle_runset(corpus: &Corpus, noise: f64, seed: u64, repetitions: u32) -> RunSet {
        let catalog = Catalog::builtin();
        let gateway = oracle_gateway(&catalog, MarkerTable::builtin(), noise, seed);
        let job = AssessJob {
            corpus,
            segments: None,
            catalog: &catalog,
            variant: PromptVariant::AllCues,
            scope: ContextScope::FullTranscript,
            repetitions,
        };
        let mut store = RunStore::in_memory();
        crate::assessor::assess_corpus(&job, &gateway, &mut store).unwrap()
    }

    use crate::transcript::Corpus;

    #[test]
    fn oracle_evaluation_is_perfect_at_zero_noise() {
        let catalog = Catalog::builtin();
        let corpus = generate_corpus(&SynthSpec::new(4, 2, 5, 0.0), &catalog);
        let runset = oracle_runset(&corpus, 0.0, 5, 2);
        let report = evaluate_runset(&runset, &corpus).unwrap();
        for (item, agg) in &report.per_item {
            let mae = agg.mae.as_ref().unwrap();
            assert_eq!(mae.mean, 0.0, "item {item} MAE");
            assert_eq!(agg.accuracy.as_ref().unwrap().mean, 1.0);
            for run in &agg.per_run {
                assert_eq!(run.coverage, 1.0);
                // Non-constant truth must give ICC exactly 1.
                if let Some(icc) = run.icc3k {
                    assert_eq!(icc, 1.0);
                }
            }
        }
        assert_eq!(report.total.mae.as_ref().unwrap().mean, 0.0);
        let table = metrics_table_text(&report);
        assert!(table.contains("Total (item-wise)"));
        let csv = metrics_csv(&report);
        assert!(csv.lines().count() > 11);
    }

    #[test]
    fn unlabeled_corpus_is_rejected() {
        let catalog = Catalog::builtin();
        let mut corpus = generate_corpus(&SynthSpec::new(2, 1, 5, 0.0), &catalog);
        for t in &mut corpus.transcripts {
            t.clinician_scores = None;
        }
        let runset = RunSet::from_records(vec![record(
            "P001-V1",
            1,
            MadrsItem::Lassitude,
            scored(MadrsItem::Lassitude, 1),
        )])
        .unwrap();
        assert!(matches!(
            evaluate_runset(&runset, &corpus),
            Err(ReportError::MissingGroundTruth)
        ));
    }

    #[test]
    fn failed_items_reduce_coverage_and_drop_totals() {
        let catalog = Catalog::builtin();
        let corpus = generate_corpus(&SynthSpec::new(3, 1, 9, 0.0), &catalog);
        let truth = |id: &str, item: MadrsItem| {
            i32::from(corpus.get(id).unwrap().clinician_scores.as_ref().unwrap()[&item])
        };
        let mut records = Vec::new();
        for t in &corpus.transcripts {
            for item in MadrsItem::ALL {
                let id = &t.meta.interview_id;
                // One interview loses one item.
                if id == "P002-V1" && item == MadrsItem::SuicidalThoughts {
                    records.push(record(
                        id,
                        1,
                        item,
                        ItemOutcome::Failed {
                            cause: FailureCause::MissingContext,
                        },
                    ));
                } else {
                    records.push(record(id, 1, item, scored(item, truth(id, item) as u8)));
                }
            }
        }
        let runset = RunSet::from_records(records).unwrap();
        let report = evaluate_runset(&runset, &corpus).unwrap();
        let suicidal = &report.per_item[&MadrsItem::SuicidalThoughts];
        let run = &suicidal.per_run[0];
        assert_eq!(run.n, 2);
        assert!((run.coverage - 2.0 / 3.0).abs() < 1e-12);
        // Totals exclude the incomplete interview.
        assert_eq!(report.total.per_run[0].n, 2);
        assert_eq!(report.total.per_run[0].mae, 0.0);
    }

    #[test]
    fn runs_as_raters_icc_is_one_for_the_exact_oracle() {
        let catalog = Catalog::builtin();
        let corpus = generate_corpus(&SynthSpec::new(5, 1, 71, 0.0), &catalog);
        let runset = oracle_runset(&corpus, 0.0, 71, 3);
        for item in MadrsItem::ALL {
            let icc = icc_runs_as_raters(&runset, &corpus, item).unwrap();
            assert_eq!(icc, 1.0, "item {item}");
        }
    }

    #[test]
    fn comparison_csv_has_ten_item_rows() {
        let catalog = Catalog::builtin();
        let corpus = generate_corpus(&SynthSpec::new(4, 1, 31, 0.0), &catalog);
        let runset = oracle_runset(&corpus, 0.0, 31, 1);
        let report = evaluate_runset(&runset, &corpus).unwrap();
        let csv = comparison_csv(&report, &report);
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 11);
        assert!(lines[0].starts_with("item,"));
        for line in &lines[1..] {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 5);
            assert_eq!(fields[1], fields[3]);
        }
    }

    #[test]
    fn error_analysis_fits_eleven_models() {
        let catalog = Catalog::builtin();
        let corpus = generate_corpus(&SynthSpec::new(30, 2, 77, 0.0), &catalog);
        let runset = oracle_runset(&corpus, 0.3, 77, 1);
        let analysis = analyze_errors(&runset, &corpus, 0.05, true).unwrap();
        assert_eq!(analysis.models.len(), 11);
        let fitted = analysis
            .models
            .values()
            .filter(|m| matches!(m, ErrorModelOutcome::Fitted { .. }))
            .count();
        assert!(fitted >= 10, "only {fitted} models fitted");
        let table = error_table_text(&analysis);
        assert!(table.contains("total"));
        assert!(table.contains("rater_r2"));
    }

    #[test]
    fn planted_rater_effect_is_flagged_significant() {
        // Plant a rater effect on Inner Tension errors: rater R2 instances
        // always err by one, others err by one only on a hash-derived
        // quarter of instances. The R2 coefficient must come out
        // significant for inner_tension and stay quiet elsewhere.
        let catalog = Catalog::builtin();
        let corpus = generate_corpus(&SynthSpec::new(60, 2, 555, 0.0), &catalog);
        let pseudo = |id: &str| -> bool { id.bytes().map(u32::from).sum::<u32>() % 4 == 0 };
        let mut records = Vec::new();
        for t in &corpus.transcripts {
            let id = &t.meta.interview_id;
            for item in MadrsItem::ALL {
                let truth = t.clinician_scores.as_ref().unwrap()[&item];
                let erred = if item == MadrsItem::InnerTension {
                    t.meta.rater_id == crate::transcript::RaterId::R2 || pseudo(id)
                } else {
                    pseudo(id)
                };
                let pred = if erred {
                    if truth == 6 {
                        truth - 1
                    } else {
                        truth + 1
                    }
                } else {
                    truth
                };
                records.push(record(id, 1, item, scored(item, pred)));
            }
        }
        let runset = RunSet::from_records(records).unwrap();
        let analysis = analyze_errors(&runset, &corpus, 0.05, true).unwrap();
        match &analysis.models["inner_tension"] {
            ErrorModelOutcome::Fitted {
                fit, significant, ..
            } => {
                assert!(fit.converged);
                let r2 = fit.coefficient("rater_r2").unwrap();
                assert!(
                    significant.iter().any(|(name, _)| name == "rater_r2"),
                    "rater_r2 not flagged: p = {}",
                    r2.p_value
                );
                assert!(r2.estimate > 0.3, "estimate {}", r2.estimate);
            }
            other => panic!("inner_tension model failed: {other:?}"),
        }
        // A control item without the planted effect stays unflagged.
        match &analysis.models["reduced_appetite"] {
            ErrorModelOutcome::Fitted { significant, .. } => {
                assert!(
                    significant.iter().all(|(name, _)| name != "rater_r2"),
                    "spurious rater flag on the control item"
                );
            }
            other => panic!("reduced_appetite model failed: {other:?}"),
        }
    }

    #[test]
    fn observations_take_absolute_errors_per_run() {
        let catalog = Catalog::builtin();
        let corpus = generate_corpus(&SynthSpec::new(2, 1, 13, 0.0), &catalog);
        let id = corpus.transcripts[0].meta.interview_id.clone();
        let truth =
            corpus.transcripts[0].clinician_scores.as_ref().unwrap()[&MadrsItem::ApparentSadness];
        let shifted = if truth >= 3 { truth - 2 } else { truth + 2 };
        let mut records = Vec::new();
        for t in &corpus.transcripts {
            for item in MadrsItem::ALL {
                let actual = t.clinician_scores.as_ref().unwrap()[&item];
                let pred = if t.meta.interview_id == id && item == MadrsItem::ApparentSadness {
                    shifted
                } else {
                    actual
                };
                records.push(record(&t.meta.interview_id, 1, item, scored(item, pred)));
            }
        }
        let runset = RunSet::from_records(records).unwrap();
        let observations = observations_from_runset(
            &runset,
            &corpus,
            ErrorTarget::Item(MadrsItem::ApparentSadness),
        );
        assert_eq!(observations.len(), 2);
        let shifted_obs = observations
            .iter()
            .find(|o| o.patient_id == corpus.transcripts[0].meta.patient_id)
            .unwrap();
        assert_eq!(shifted_obs.y, 2.0);
        let totals = observations_from_runset(&runset, &corpus, ErrorTarget::Total);
        assert_eq!(totals.len(), 2);
        assert_eq!(
            totals.iter().map(|o| o.y).fold(0.0f64, |a, b| a.max(b)),
            2.0
        );
    }
}
