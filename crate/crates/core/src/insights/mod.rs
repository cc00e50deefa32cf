//! Population-level aggregation over many predictions: LLM topic modeling
//! of events or summaries, embedding export for external dimensionality
//! reduction, and age-banded risk-state transition tables.

mod embed;
mod themes;
mod transitions;

pub use embed::{
    cosine, embed_documents, similarity_summary, EmbedError, Embedder, Embeddings, FixedEmbedder, LiveEmbedder,
    SimilaritySummary,
};
pub use themes::{
    assign_themes, documents_from_predictions, generate_themes, parse_theme_list, sample_indices, theme_prevalence,
    DocMode, Document, ThemeAssignment, ThemeError, TopicContext, OTHER,
};
pub use transitions::{
    aggregate_transitions, birth_dates, patient_states, write_details_csv, write_transitions_csv, AgeBand, RiskState,
    RiskTransition, TransitionDetail, TransitionTable,
};
