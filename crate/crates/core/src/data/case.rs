//! Case categories, case-factor preprocessing and case-transformed test sets.
//!
//! Casing uses Rust's full Unicode case mapping (`str::to_lowercase`,
//! `char::to_uppercase`), so a single character may map to several.

use serde::{Deserialize, Serialize};

/// Case category of a token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CaseClass {
    Lowercase,
    Capitalized,
    AllUppercase,
    Mixed,
}

impl CaseClass {
    pub const ALL: [CaseClass; 4] = [CaseClass::Lowercase, CaseClass::Capitalized, CaseClass::AllUppercase, CaseClass::Mixed];

    pub fn as_str(self) -> &'static str {
        match self {
            CaseClass::Lowercase => "lowercase",
            CaseClass::Capitalized => "capitalized",
            CaseClass::AllUppercase => "all_uppercase",
            CaseClass::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }

    /// Classifies by the token's letters. Tokens without letters count as
    /// lowercase; a single uppercase letter is capitalized.
    pub fn of(token: &str) -> Self {
        let letters: Vec<char> = token.chars().filter(|c| c.is_alphabetic()).collect();
        let Some((first, rest)) = letters.split_first() else {
            return CaseClass::Lowercase;
        };
        let lower = |c: &char| !c.is_uppercase();
        if letters.iter().all(lower) {
            CaseClass::Lowercase
        } else if first.is_uppercase() && rest.iter().all(lower) {
            CaseClass::Capitalized
        } else if letters.len() >= 2 && letters.iter().all(|c| !c.is_lowercase()) {
            CaseClass::AllUppercase
        } else {
            CaseClass::Mixed
        }
    }

    /// Applies this category to a lowercase word. Mixed alternates
    /// lower/upper starting with lowercase.
    pub fn apply(self, word: &str) -> String {
        match self {
            CaseClass::Lowercase => word.to_lowercase(),
            CaseClass::Capitalized => capitalize(word),
            CaseClass::AllUppercase => word.to_uppercase(),
            CaseClass::Mixed => word
                .chars()
                .enumerate()
                .map(|(i, c)| if i % 2 == 1 { c.to_uppercase().collect::<String>() } else { c.to_lowercase().collect() })
                .collect(),
        }
    }
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars.as_str().to_lowercase().chars()).collect(),
        None => String::new(),
    }
}

/// How source case is presented to the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CaseScheme {
    /// Cased tokens as words, no factors.
    #[default]
    None,
    /// Lowercased words plus a case-category factor.
    SfCase,
    /// Lowercased words plus the original token as a factor.
    SfWord,
    /// As `SfWord`, with the factor sharing the word embedding table.
    SfWordShare,
}

impl CaseScheme {
    pub fn has_factor(self) -> bool {
        self != CaseScheme::None
    }
}

/// Splits a line into word tokens and token-aligned factor streams.
pub fn apply_case_factors(line: &str, scheme: CaseScheme) -> (Vec<String>, Vec<Vec<String>>) {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    let lowered = || tokens.iter().map(|t| t.to_lowercase()).collect::<Vec<_>>();
    match scheme {
        CaseScheme::None => (tokens.iter().map(|t| t.to_string()).collect(), Vec::new()),
        CaseScheme::SfCase => {
            let factor = tokens.iter().map(|t| CaseClass::of(t).as_str().to_string()).collect();
            (lowered(), vec![factor])
        }
        CaseScheme::SfWord | CaseScheme::SfWordShare => {
            let factor = tokens.iter().map(|t| t.to_string()).collect();
            (lowered(), vec![factor])
        }
    }
}

/// Test-set casing variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum TestTransform {
    Ori,
    Lower,
    Cap,
    Upp,
}

/// Rewrites every line: unchanged, lowercased, each word capitalized (rest
/// lowercased), or uppercased. Whitespace is preserved.
pub fn transform_test_set<S: AsRef<str>>(lines: &[S], mode: TestTransform) -> Vec<String> {
    lines
        .iter()
        .map(|l| {
            let l = l.as_ref();
            match mode {
                TestTransform::Ori => l.to_string(),
                TestTransform::Lower => l.to_lowercase(),
                TestTransform::Upp => l.to_uppercase(),
                TestTransform::Cap => {
                    let mut out = String::with_capacity(l.len());
                    let mut word = String::new();
                    for c in l.chars() {
                        if c.is_whitespace() {
                            out.push_str(&capitalize(&word));
                            word.clear();
                            out.push(c);
                        } else {
                            word.push(c);
                        }
                    }
                    out.push_str(&capitalize(&word));
                    out
                }
            }
        })
        .collect()
}
