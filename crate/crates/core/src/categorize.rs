//! Bag-of-words statistics over workplace names and priority-ordered keyword
//! rules mapping a name to an industry category.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const DEFAULT_TABLE: &str = include_str!("../data/keywords.json");

#[derive(Debug, Error)]
pub enum CategorizeError {
    #[error("keyword table is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid keyword table: {0}")]
    InvalidTable(String),
    #[error("unknown category '{0}'")]
    UnknownCategory(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Airport,
    #[serde(rename = "Blue Collar", alias = "BlueCollar")]
    BlueCollar,
    Education,
    Entertainment,
    Government,
    Hotel,
    Medical,
    Mix,
    Recreation,
    Religion,
    Residential,
    Restaurant,
    Retail,
    #[serde(rename = "White Collar", alias = "WhiteCollar")]
    WhiteCollar,
    Other,
}

impl Category {
    pub const ALL: [Category; 15] = [
        Category::Airport,
        Category::BlueCollar,
        Category::Education,
        Category::Entertainment,
        Category::Government,
        Category::Hotel,
        Category::Medical,
        Category::Mix,
        Category::Recreation,
        Category::Religion,
        Category::Residential,
        Category::Restaurant,
        Category::Retail,
        Category::WhiteCollar,
        Category::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Airport => "Airport",
            Category::BlueCollar => "Blue Collar",
            Category::Education => "Education",
            Category::Entertainment => "Entertainment",
            Category::Government => "Government",
            Category::Hotel => "Hotel",
            Category::Medical => "Medical",
            Category::Mix => "Mix",
            Category::Recreation => "Recreation",
            Category::Religion => "Religion",
            Category::Residential => "Residential",
            Category::Restaurant => "Restaurant",
            Category::Retail => "Retail",
            Category::WhiteCollar => "White Collar",
            Category::Other => "Other",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = CategorizeError;

    /// Case-insensitive; spaces, underscores and hyphens are ignored.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let squash = |x: &str| {
            x.chars()
                .filter(|c| !matches!(c, ' ' | '_' | '-'))
                .flat_map(char::to_lowercase)
                .collect::<String>()
        };
        let wanted = squash(s);
        Category::ALL
            .into_iter()
            .find(|c| squash(c.name()) == wanted)
            .ok_or_else(|| CategorizeError::UnknownCategory(s.to_string()))
    }
}

/// Lowercased alphanumeric runs.
pub fn tokenize(name: &str) -> Vec<String> {
    name.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Token counts over a corpus of names.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct WordFrequency {
    pub counts: BTreeMap<String, usize>,
}

impl WordFrequency {
    /// Tokens by descending count, then ascending token.
    pub fn ranked(&self) -> Vec<(&str, usize)> {
        let mut v: Vec<_> = self.counts.iter().map(|(t, c)| (t.as_str(), *c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        v
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), CategorizeError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["token", "count"])?;
        for (t, c) in self.ranked() {
            w.write_record([t, &c.to_string()])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

pub fn word_frequencies<S: AsRef<str>>(names: impl IntoIterator<Item = S>) -> WordFrequency {
    let mut counts = BTreeMap::new();
    for name in names {
        for tok in tokenize(name.as_ref()) {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    WordFrequency { counts }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordRule {
    pub category: Category,
    /// 1 is evaluated first.
    pub priority: u32,
    /// Single tokens or space-separated phrases, lowercase.
    pub keywords: Vec<String>,
}

/// Keyword rules sorted by priority.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordTable {
    rules: Vec<(KeywordRule, Vec<Vec<String>>)>,
}

impl KeywordTable {
    pub fn from_rules(mut rules: Vec<KeywordRule>) -> Result<Self, CategorizeError> {
        rules.sort_by_key(|r| r.priority);
        let invalid = |m: String| Err(CategorizeError::InvalidTable(m));
        for pair in rules.windows(2) {
            if pair[0].priority == pair[1].priority {
                return invalid(format!("duplicate priority {}", pair[0].priority));
            }
        }
        for r in &rules {
            if r.category == Category::Other {
                return invalid("Other is the fallback and cannot carry keywords".into());
            }
            for k in &r.keywords {
                if k.trim().is_empty() || *k != k.to_lowercase() {
                    return invalid(format!("keyword '{k}' for {} must be nonempty lowercase", r.category));
                }
            }
        }
        let rank = |c: Category| rules.iter().find(|r| r.category == c).map(|r| r.priority);
        if let (Some(med), Some(edu)) = (rank(Category::Medical), rank(Category::Education)) {
            if med > edu {
                return invalid("Medical must outrank Education".into());
            }
        }
        let rules = rules
            .into_iter()
            .map(|r| {
                let phrases = r.keywords.iter().map(|k| tokenize(k)).collect();
                (r, phrases)
            })
            .collect();
        Ok(Self { rules })
    }

    pub fn from_json(text: &str) -> Result<Self, CategorizeError> {
        Self::from_rules(serde_json::from_str(text)?)
    }

    pub fn rules(&self) -> impl Iterator<Item = &KeywordRule> {
        self.rules.iter().map(|(r, _)| r)
    }

    pub fn to_json(&self) -> String {
        let rules: Vec<_> = self.rules().collect();
        serde_json::to_string_pretty(&rules).expect("rules serialize")
    }

    /// First category, in priority order, with a keyword present in `tokens`.
    pub fn match_tokens(&self, tokens: &[String]) -> Option<Category> {
        self.rules
            .iter()
            .find(|(_, phrases)| phrases.iter().any(|ph| contains_phrase(tokens, ph)))
            .map(|(r, _)| r.category)
    }
}

impl Default for KeywordTable {
    fn default() -> Self {
        Self::from_json(DEFAULT_TABLE).expect("bundled keyword table is valid")
    }
}

fn contains_phrase(tokens: &[String], phrase: &[String]) -> bool {
    match phrase.len() {
        0 => false,
        1 => tokens.iter().any(|t| *t == phrase[0]),
        n => tokens.windows(n).any(|w| w == phrase),
    }
}

/// Maps a workplace name to a category. Falls back to the POI hint (either a
/// category name or free text run through the same rules), then `Other`.
pub fn categorize(name: &str, table: &KeywordTable, poi_hint: Option<&str>) -> Category {
    if let Some(c) = table.match_tokens(&tokenize(name)) {
        return c;
    }
    let Some(hint) = poi_hint.map(str::trim).filter(|h| !h.is_empty()) else {
        return Category::Other;
    };
    hint.parse::<Category>()
        .ok()
        .or_else(|| table.match_tokens(&tokenize(hint)))
        .unwrap_or(Category::Other)
}
