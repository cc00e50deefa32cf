//! Generate themes from a sample of manager summaries, assign every
//! summary to them and embed the summaries.
//!
//! `cargo run --example topic_modeling`

use std::sync::Arc;

use trajchain::insights::{
    assign_themes, embed_documents, generate_themes, similarity_summary, theme_prevalence, Document, FixedEmbedder,
    TopicContext,
};
use trajchain::llm::{Matcher, Reply, Script};
use trajchain::ScriptedBackend;

fn main() -> anyhow::Result<()> {
    let texts = [
        "2019-01-02: chronic cough; 2019-03-10: chest CT shows nodule",
        "2018-05-01: active smoker; 2019-02-11: hemoptysis",
        "2020-07-21: weight loss; 2020-09-01: chest CT shows mass",
        "2017-11-30: routine physical",
    ];
    let docs: Vec<Document> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| Document {
            doc_id: format!("p{i}"),
            text: t.to_string(),
            cancer_type: "lung cancer".into(),
        })
        .collect();
    let script = Script::new(false)
        .entry(
            Matcher::contains("Patient summaries:"),
            Reply::text(r#"["abnormal chest imaging findings", "respiratory symptoms and smoking"]"#),
        )
        .entry(
            Matcher::any(),
            Reply::text(
                r#"[{"id": 1, "themes": ["Abnormal chest imaging findings", "respiratory symptoms and smoking"]},
                    {"id": 2, "themes": ["respiratory symptoms and smoking"]},
                    {"id": 3, "themes": ["abnormal chest imaging findings"]},
                    {"id": 4, "themes": []}]"#,
            ),
        );
    let ctx = TopicContext::new(Arc::new(ScriptedBackend::new(script)));
    let themes = generate_themes(&ctx, &docs, 4, 2, 1)?;
    let assignments = assign_themes(&ctx, &docs, &themes, 4)?;
    for a in &assignments {
        println!("{} -> {:?}", a.doc_id, a.themes);
    }
    println!("prevalence: {:?}", theme_prevalence(&assignments, &themes));

    let embeddings = embed_documents(&FixedEmbedder::hashing(32), &docs, 16)?;
    println!("embedded {} documents in {} dimensions", embeddings.doc_ids.len(), embeddings.dim());
    println!("{:?}", similarity_summary(&embeddings));
    Ok(())
}
