//! Discrimination metrics, bootstrap intervals, stratified reports and the
//! pairwise LLM judge.

mod judge;
mod metrics;
mod report;

pub use judge::{
    diagnosis_text, judge_pair, parse_verdict, JudgeContext, JudgeError, JudgeRun, JudgeVerdict, PairJudgement, Rubric,
    RubricScore, Winner,
};
pub use metrics::{
    auprc, auroc, bootstrap_ci, curves, trapezoid, write_curves_csv, CurvePoint, Curves, Interval, MetricError,
    ScoredOutcome,
};
pub use report::{evaluate, outcomes_from_predictions, EvalReport, MetricSummary};
