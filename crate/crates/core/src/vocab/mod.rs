//! Canonical ingredient vocabulary.
//!
//! Pipeline: frequency cut over raw ingredient strings, merge of surface
//! forms sharing an English (Snowball) stem, then embedding-proximity fusion
//! gated by a reviewable decisions file.

mod embedding;
mod fusion;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rust_stemmers::{Algorithm, Stemmer};
use sha2::{Digest, Sha256};

use crate::recipe_data::Recipe;
use crate::{Error, Result};

pub use embedding::{train_embeddings, EmbeddingTable, Word2VecConfig, EMBEDDING_DIM};
pub use fusion::{
    apply_decisions, parse_decisions, proposals_to_review_text, propose_fusions, similar_pairs, Decision,
    DecisionRow, MergeProposal, DEFAULT_FUSION_THRESHOLD,
};

pub const DEFAULT_TOP_K: usize = 4000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenFreq {
    pub token: String,
    pub count: u64,
}

/// Lower-cases, trims and joins inner whitespace with `_` ("Olive Oil" →
/// "olive_oil").
pub fn normalize_raw(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join("_")
}

/// The `top_k` most frequent normalized ingredient strings, counted per
/// occurrence. Ties are broken lexicographically.
pub fn frequency_cut(recipes: &[Recipe], top_k: usize) -> Result<Vec<TokenFreq>> {
    if top_k == 0 {
        return Err(Error::InvalidArgument("top_k must be at least 1".into()));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for r in recipes {
        for raw in &r.ingredients {
            let token = normalize_raw(raw);
            if !token.is_empty() {
                *counts.entry(token).or_default() += 1;
            }
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut freqs: Vec<TokenFreq> = counts.into_iter().map(|(token, count)| TokenFreq { token, count }).collect();
    freqs.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.token.cmp(&b.token)));
    freqs.truncate(top_k);
    Ok(freqs)
}

/// Stem of a normalized token; multi-word tokens are stemmed word by word.
pub fn stem_key(token: &str) -> String {
    let stemmer = Stemmer::create(Algorithm::English);
    token
        .split('_')
        .map(|w| stemmer.stem(w).into_owned())
        .collect::<Vec<_>>()
        .join("_")
}

/// Maps every token to the representative of its stem class: the most
/// frequent surface form, then the shortest, then the lexicographically
/// smallest.
pub fn stem_merge(tokens: &[TokenFreq]) -> BTreeMap<String, String> {
    let mut classes: BTreeMap<String, Vec<&TokenFreq>> = BTreeMap::new();
    for t in tokens {
        classes.entry(stem_key(&t.token)).or_default().push(t);
    }
    let mut out = BTreeMap::new();
    for members in classes.values() {
        let rep = members
            .iter()
            .min_by(|a, b| {
                b.count
                    .cmp(&a.count)
                    .then(a.token.len().cmp(&b.token.len()))
                    .then_with(|| a.token.cmp(&b.token))
            })
            .expect("non-empty class");
        for m in members {
            out.insert(m.token.clone(), rep.token.clone());
        }
    }
    out
}

/// Canonical token table plus the raw → canonical mapping.
///
/// Index `len()` is reserved for padding and for unknown ingredients.
#[derive(Debug, Clone, PartialEq)]
pub struct IngredientVocabulary {
    canonical: Vec<String>,
    counts: Vec<u64>,
    raw_to_canonical: BTreeMap<String, usize>,
    coverage: f64,
}

impl IngredientVocabulary {
    /// Builds the vocabulary from cut tokens and a raw → representative map.
    /// Canonical tokens are ordered by total count, then lexicographically.
    pub fn from_merge(tokens: &[TokenFreq], merge: &BTreeMap<String, String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        let mut totals: BTreeMap<String, u64> = BTreeMap::new();
        for t in tokens {
            let rep = merge.get(&t.token).unwrap_or(&t.token);
            *totals.entry(rep.clone()).or_default() += t.count;
        }
        let mut order: Vec<(String, u64)> = totals.into_iter().collect();
        order.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let index: HashMap<&str, usize> = order.iter().enumerate().map(|(i, (t, _))| (t.as_str(), i)).collect();
        let raw_to_canonical = tokens
            .iter()
            .map(|t| {
                let rep = merge.get(&t.token).unwrap_or(&t.token);
                (t.token.clone(), index[rep.as_str()])
            })
            .collect();
        Ok(Self {
            canonical: order.iter().map(|(t, _)| t.clone()).collect(),
            counts: order.iter().map(|(_, c)| *c).collect(),
            raw_to_canonical,
            coverage: 0.0,
        })
    }

    /// Frequency cut followed by stem merging; coverage measured on `recipes`.
    pub fn build(recipes: &[Recipe], top_k: usize) -> Result<Self> {
        let tokens = frequency_cut(recipes, top_k)?;
        let merge = stem_merge(&tokens);
        let mut vocab = Self::from_merge(&tokens, &merge)?;
        vocab.coverage = vocab.coverage_on(recipes);
        Ok(vocab)
    }

    pub(crate) fn from_parts(
        canonical: Vec<String>,
        counts: Vec<u64>,
        raw_to_canonical: BTreeMap<String, usize>,
        coverage: f64,
    ) -> Self {
        Self {
            canonical,
            counts,
            raw_to_canonical,
            coverage,
        }
    }

    pub fn len(&self) -> usize {
        self.canonical.len()
    }

    pub fn is_empty(&self) -> bool {
        self.canonical.is_empty()
    }

    /// Reserved index for padding and unknown ingredients.
    pub fn pad_index(&self) -> usize {
        self.canonical.len()
    }

    /// Rows in an embedding table for this vocabulary (tokens + pad).
    pub fn table_rows(&self) -> usize {
        self.canonical.len() + 1
    }

    pub fn canonical(&self) -> &[String] {
        &self.canonical
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.canonical.get(index).map(String::as_str)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn raw_to_canonical(&self) -> &BTreeMap<String, usize> {
        &self.raw_to_canonical
    }

    pub fn coverage(&self) -> f64 {
        self.coverage
    }

    pub fn index_of_canonical(&self, token: &str) -> Option<usize> {
        self.canonical.iter().position(|t| t == token)
    }

    /// Canonical index of a raw ingredient; `None` for dropped tokens.
    pub fn lookup(&self, raw: &str) -> Option<usize> {
        self.raw_to_canonical.get(&normalize_raw(raw)).copied()
    }

    /// Encodes a recipe's ingredients; unknown ones map to the pad index.
    pub fn encode(&self, ingredients: &[String]) -> Vec<usize> {
        ingredients
            .iter()
            .map(|raw| self.lookup(raw).unwrap_or_else(|| self.pad_index()))
            .collect()
    }

    /// Distinct canonical indices of a recipe's known ingredients, sorted.
    pub fn canonical_set(&self, ingredients: &[String]) -> Vec<usize> {
        let mut v: Vec<usize> = ingredients.iter().filter_map(|r| self.lookup(r)).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Fraction of recipes whose every ingredient maps to a canonical token.
    pub fn coverage_on(&self, recipes: &[Recipe]) -> f64 {
        if recipes.is_empty() {
            return 0.0;
        }
        let covered = recipes
            .iter()
            .filter(|r| r.ingredients.iter().all(|i| self.lookup(i).is_some()))
            .count();
        covered as f64 / recipes.len() as f64
    }

    pub fn set_coverage(&mut self, coverage: f64) {
        self.coverage = coverage.clamp(0.0, 1.0);
    }

    /// Vocabulary file: `# coverage=<f>` header, then one line per canonical
    /// token in index order: `token<TAB>count<TAB>alias<TAB>alias...`.
    pub fn to_text(&self) -> String {
        let mut aliases: Vec<Vec<&str>> = vec![Vec::new(); self.canonical.len()];
        for (raw, &idx) in &self.raw_to_canonical {
            aliases[idx].push(raw);
        }
        let mut out = format!("# coverage={}\n", self.coverage);
        for (i, token) in self.canonical.iter().enumerate() {
            out.push_str(token);
            out.push('\t');
            out.push_str(&self.counts[i].to_string());
            for a in &aliases[i] {
                out.push('\t');
                out.push_str(a);
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut coverage = 0.0;
        let mut canonical = Vec::new();
        let mut counts = Vec::new();
        let mut raw_to_canonical = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("coverage=") {
                    coverage = v.parse().map_err(|_| Error::MalformedRecord {
                        line: n + 1,
                        id: None,
                        message: format!("bad coverage `{v}`"),
                    })?;
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let token = fields.next().unwrap_or_default().to_owned();
            let count = fields
                .next()
                .and_then(|c| c.parse::<u64>().ok())
                .ok_or_else(|| Error::MalformedRecord {
                    line: n + 1,
                    id: Some(token.clone()),
                    message: "expected `token<TAB>count[<TAB>alias...]`".into(),
                })?;
            let idx = canonical.len();
            for alias in fields.filter(|a| !a.is_empty()) {
                if raw_to_canonical.insert(alias.to_owned(), idx).is_some() {
                    return Err(Error::MalformedRecord {
                        line: n + 1,
                        id: Some(alias.to_owned()),
                        message: "alias mapped twice".into(),
                    });
                }
            }
            canonical.push(token);
            counts.push(count);
        }
        if canonical.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        Ok(Self {
            canonical,
            counts,
            raw_to_canonical,
            coverage,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// SHA-256 of the vocabulary file contents.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}
