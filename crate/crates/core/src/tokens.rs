//! Token counting.
//!
//! The default [`WordApprox`] counter is `ceil(1.3 * whitespace_words)`. It is
//! environment-independent, which keeps chunk boundaries reproducible in
//! tests. [`Cl100k`] (feature `cl100k`) gives exact BPE counts for parity with
//! published token statistics.

use std::sync::Arc;

pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;

    fn name(&self) -> &'static str;
}

/// Whitespace-delimited word count times 1.3, rounded up.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordApprox;

impl TokenCounter for WordApprox {
    fn count(&self, text: &str) -> usize {
        let words = text.split_whitespace().count();
        // integer form of ceil(words * 1.3)
        (words * 13).div_ceil(10)
    }

    fn name(&self) -> &'static str {
        "default"
    }
}

#[cfg(feature = "cl100k")]
pub use bpe::Cl100k;

#[cfg(feature = "cl100k")]
mod bpe {
    use super::TokenCounter;
    use std::sync::OnceLock;
    use tiktoken_rs::CoreBPE;

    fn encoder() -> &'static CoreBPE {
        static BPE: OnceLock<CoreBPE> = OnceLock::new();
        BPE.get_or_init(|| tiktoken_rs::cl100k_base().expect("embedded cl100k_base ranks"))
    }

    /// Exact `cl100k_base` BPE token count.
    #[derive(Debug, Clone, Copy, Default)]
    pub struct Cl100k;

    impl TokenCounter for Cl100k {
        fn count(&self, text: &str) -> usize {
            encoder().encode_with_special_tokens(text).len()
        }

        fn name(&self) -> &'static str {
            "cl100k"
        }
    }
}

/// Resolve a counter by its CLI name (`default` or `cl100k`).
pub fn counter_by_name(name: &str) -> Option<Arc<dyn TokenCounter>> {
    match name {
        "default" | "word" | "approx" => Some(Arc::new(WordApprox)),
        #[cfg(feature = "cl100k")]
        "cl100k" | "cl100k_base" => Some(Arc::new(Cl100k)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_zero() {
        assert_eq!(WordApprox.count(""), 0);
        assert_eq!(WordApprox.count("   \n\t"), 0);
    }

    #[test]
    fn three_words_round_up_to_four() {
        assert_eq!(WordApprox.count("a b c"), 4);
        assert_eq!(WordApprox.count("a"), 2);
        assert_eq!(WordApprox.count("a b c d e f g h i j"), 13);
    }

    #[test]
    fn lookup_by_name() {
        assert_eq!(counter_by_name("default").unwrap().name(), "default");
        assert!(counter_by_name("nope").is_none());
    }

    #[cfg(feature = "cl100k")]
    #[test]
    fn cl100k_matches_standalone_encoder() {
        let text = "<visit date=\"2019-03-04\">\n    <condition code=\"J44.9\" display=\"COPD\"/>\n  </visit>";
        let reference = tiktoken_rs::cl100k_base()
            .unwrap()
            .encode_with_special_tokens(text)
            .len();
        assert_eq!(Cl100k.count(text), reference);
        assert_eq!(Cl100k.count("hello world"), 2);
    }
}
