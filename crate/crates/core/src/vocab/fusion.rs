use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use super::{EmbeddingTable, IngredientVocabulary};
use crate::recipe_data::Recipe;
use crate::{Error, Result};

pub const DEFAULT_FUSION_THRESHOLD: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Pending,
    Accept,
    Reject,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Pending => "pending",
            Decision::Accept => "accept",
            Decision::Reject => "reject",
        })
    }
}

impl FromStr for Decision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "accept" => Ok(Decision::Accept),
            "reject" => Ok(Decision::Reject),
            "pending" => Ok(Decision::Pending),
            other => Err(Error::InvalidArgument(format!("unknown decision `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeProposal {
    pub token_a: String,
    pub token_b: String,
    pub similarity: f64,
    pub decision: Decision,
}

impl MergeProposal {
    fn matches(&self, a: &str, b: &str) -> bool {
        (self.token_a == a && self.token_b == b) || (self.token_a == b && self.token_b == a)
    }
}

/// Index pairs `(i, j)`, `i < j`, among the first `rows` rows whose cosine
/// similarity is at least `threshold`, sorted by similarity descending then
/// by index. Zero rows never pair.
pub fn similar_pairs(table: &EmbeddingTable, rows: usize, threshold: f64) -> Vec<(usize, usize, f64)> {
    let dim = table.dim();
    let normalized: Vec<Option<Vec<f64>>> = (0..rows)
        .map(|i| {
            let row = table.row(i);
            let norm = row.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            (norm > 0.0).then(|| row.iter().map(|&x| x as f64 / norm).collect())
        })
        .collect();
    let mut pairs: Vec<(usize, usize, f64)> = (0..rows)
        .into_par_iter()
        .flat_map_iter(|i| {
            let normalized = &normalized;
            (i + 1..rows).filter_map(move |j| {
                let (a, b) = (normalized[i].as_ref()?, normalized[j].as_ref()?);
                let s: f64 = (0..dim).map(|k| a[k] * b[k]).sum::<f64>().clamp(-1.0, 1.0);
                (s >= threshold).then_some((i, j, s))
            })
        })
        .collect();
    pairs.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
    pairs
}

/// Candidate fusions among canonical tokens, all pending.
pub fn propose_fusions(
    vocab: &IngredientVocabulary,
    table: &EmbeddingTable,
    threshold: f64,
) -> Result<Vec<MergeProposal>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!("fusion threshold {threshold} not in (0, 1]")));
    }
    if table.rows() < vocab.len() {
        return Err(Error::DimensionMismatch(format!(
            "embedding table has {} rows for {} tokens",
            table.rows(),
            vocab.len()
        )));
    }
    Ok(similar_pairs(table, vocab.len(), threshold)
        .into_iter()
        .map(|(i, j, s)| MergeProposal {
            token_a: vocab.canonical()[i].clone(),
            token_b: vocab.canonical()[j].clone(),
            similarity: s,
            decision: Decision::Pending,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionRow {
    pub token_a: String,
    pub token_b: String,
    pub decision: Decision,
}

/// Parses `token_a<TAB>token_b<TAB>accept|reject` lines; `#` starts a
/// comment line.
pub fn parse_decisions(text: &str) -> Result<Vec<DecisionRow>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::MalformedDecision {
                line: n + 1,
                message: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let decision = fields[2].parse().map_err(|_| Error::MalformedDecision {
            line: n + 1,
            message: format!("decision must be accept or reject, got `{}`", fields[2]),
        })?;
        rows.push(DecisionRow {
            token_a: fields[0].trim().to_owned(),
            token_b: fields[1].trim().to_owned(),
            decision,
        });
    }
    Ok(rows)
}

/// Renders proposals as a decisions file for review. Every row starts as
/// `reject`; the reviewer flips the ones to merge.
pub fn proposals_to_review_text(proposals: &[MergeProposal]) -> String {
    let mut out = String::from("# token_a\ttoken_b\taccept|reject (similarity in trailing comment lines)\n");
    for p in proposals {
        out.push_str(&format!("# similarity {:.6}\n", p.similarity));
        out.push_str(&format!("{}\t{}\treject\n", p.token_a, p.token_b));
    }
    out
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }
}

/// Applies reviewed decisions to the proposals and fuses accepted pairs.
///
/// Accepted pairs are unioned; each class is represented by its most
/// frequent token (ties: lexicographically smaller). Surviving tokens keep
/// their relative order and counts are summed. Coverage is recomputed on
/// `recipes`.
pub fn apply_decisions(
    vocab: &IngredientVocabulary,
    proposals: &mut [MergeProposal],
    decisions: &[DecisionRow],
    recipes: &[Recipe],
) -> Result<IngredientVocabulary> {
    for row in decisions {
        let p = proposals
            .iter_mut()
            .find(|p| p.matches(&row.token_a, &row.token_b))
            .ok_or_else(|| Error::UnknownPair(row.token_a.clone(), row.token_b.clone()))?;
        p.decision = row.decision;
    }

    let n = vocab.len();
    let index: HashMap<&str, usize> = vocab.canonical().iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let counts = vocab.counts();
    let better = |a: usize, b: usize| -> bool {
        counts[a] > counts[b] || (counts[a] == counts[b] && vocab.canonical()[a] < vocab.canonical()[b])
    };
    let mut uf = UnionFind {
        parent: (0..n).collect(),
    };
    for p in proposals.iter().filter(|p| p.decision == Decision::Accept) {
        let (a, b) = match (index.get(p.token_a.as_str()), index.get(p.token_b.as_str())) {
            (Some(&a), Some(&b)) => (a, b),
            _ => return Err(Error::UnknownPair(p.token_a.clone(), p.token_b.clone())),
        };
        let (ra, rb) = (uf.find(a), uf.find(b));
        if ra != rb {
            // The root is always the best token of its class.
            if better(ra, rb) {
                uf.parent[rb] = ra;
            } else {
                uf.parent[ra] = rb;
            }
        }
    }

    let roots: Vec<usize> = (0..n).map(|i| uf.find(i)).collect();
    let mut new_index: BTreeMap<usize, usize> = BTreeMap::new();
    let mut canonical = Vec::new();
    let mut new_counts = Vec::new();
    for i in 0..n {
        if roots[i] == i {
            new_index.insert(i, canonical.len());
            canonical.push(vocab.canonical()[i].clone());
            new_counts.push(0u64);
        }
    }
    for i in 0..n {
        new_counts[new_index[&roots[i]]] += counts[i];
    }
    let raw_to_canonical = vocab
        .raw_to_canonical()
        .iter()
        .map(|(raw, &old)| (raw.clone(), new_index[&roots[old]]))
        .collect();
    let mut out = IngredientVocabulary::from_parts(canonical, new_counts, raw_to_canonical, 0.0);
    let coverage = out.coverage_on(recipes);
    out.set_coverage(coverage);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{frequency_cut, stem_merge, TokenFreq};

    fn vocab_of(pairs: &[(&str, u64)]) -> IngredientVocabulary {
        let tokens: Vec<TokenFreq> = pairs
            .iter()
            .map(|(t, c)| TokenFreq {
                token: t.to_string(),
                count: *c,
            })
            .collect();
        IngredientVocabulary::from_merge(&tokens, &BTreeMap::new()).unwrap()
    }

    fn proposals(pairs: &[(&str, &str)]) -> Vec<MergeProposal> {
        pairs
            .iter()
            .map(|(a, b)| MergeProposal {
                token_a: a.to_string(),
                token_b: b.to_string(),
                similarity: 0.9,
                decision: Decision::Pending,
            })
            .collect()
    }

    fn rows(spec: &[(&str, &str, Decision)]) -> Vec<DecisionRow> {
        spec.iter()
            .map(|(a, b, d)| DecisionRow {
                token_a: a.to_string(),
                token_b: b.to_string(),
                decision: *d,
            })
            .collect()
    }

    #[test]
    fn identical_rows_propose_similarity_one_orthogonal_rows_nothing() {
        let v = vocab_of(&[("a", 3), ("b", 2), ("c", 1)]);
        let table = EmbeddingTable::from_rows(
            3,
            &[vec![1.0, 2.0, 0.0], vec![1.0, 2.0, 0.0], vec![0.0, 0.0, 5.0], vec![0.0; 3]],
        )
        .unwrap();
        let p = propose_fusions(&v, &table, 0.9).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].token_a.as_str(), p[0].token_b.as_str()), ("a", "b"));
        assert!((p[0].similarity - 1.0).abs() < 1e-12);
        assert_eq!(p[0].decision, Decision::Pending);
        assert!(propose_fusions(&v, &table, 0.0).is_err());
    }

    #[test]
    fn all_rejected_leaves_vocabulary_unchanged() {
        let v = vocab_of(&[("a", 3), ("b", 2), ("c", 1)]);
        let mut p = proposals(&[("a", "b"), ("b", "c")]);
        let out = apply_decisions(
            &v,
            &mut p,
            &rows(&[("a", "b", Decision::Reject), ("c", "b", Decision::Reject)]),
            &[],
        )
        .unwrap();
        assert_eq!(out.canonical(), v.canonical());
        assert_eq!(out.raw_to_canonical(), v.raw_to_canonical());
    }

    #[test]
    fn transitive_accepts_share_one_token() {
        let v = vocab_of(&[("a", 1), ("b", 5), ("c", 2)]);
        let mut p = proposals(&[("a", "b"), ("b", "c")]);
        let out = apply_decisions(
            &v,
            &mut p,
            &rows(&[("a", "b", Decision::Accept), ("b", "c", Decision::Accept)]),
            &[],
        )
        .unwrap();
        assert_eq!(out.canonical(), &["b".to_string()]);
        assert_eq!(out.counts(), &[8]);
        for t in ["a", "b", "c"] {
            assert_eq!(out.lookup(t), Some(0));
        }
    }

    #[test]
    fn six_token_fixture_matches_hand_trace() {
        // Counts: onion 9, garlic 7, shallot 4, leek 3, chive 2, scallion 1.
        // Accept (shallot, onion) and (scallion, chive); reject (leek, onion);
        // (garlic, shallot) stays pending.
        //   union(shallot, onion)   -> root onion   (9 > 4)
        //   union(scallion, chive)  -> root chive   (2 > 1)
        // Survivors in original order: onion, garlic, leek, chive.
        let v = vocab_of(&[("onion", 9), ("garlic", 7), ("shallot", 4), ("leek", 3), ("chive", 2), ("scallion", 1)]);
        let mut p = proposals(&[("shallot", "onion"), ("chive", "scallion"), ("leek", "onion"), ("garlic", "shallot")]);
        let out = apply_decisions(
            &v,
            &mut p,
            &parse_decisions("shallot\tonion\taccept\nscallion\tchive\taccept\nleek\tonion\treject\n").unwrap(),
            &[],
        )
        .unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out.canonical(), &["onion", "garlic", "leek", "chive"].map(String::from));
        let expect = [("onion", 0), ("shallot", 0), ("garlic", 1), ("leek", 2), ("chive", 3), ("scallion", 3)];
        for (raw, idx) in expect {
            assert_eq!(out.lookup(raw), Some(idx), "{raw}");
        }
        assert_eq!(out.counts(), &[13, 7, 3, 3]);
        assert_eq!(p[3].decision, Decision::Pending);
        assert_eq!(p[2].decision, Decision::Reject);
    }

    #[test]
    fn unknown_pair_is_named() {
        let v = vocab_of(&[("a", 1), ("b", 1)]);
        let mut p = proposals(&[("a", "b")]);
        let err = apply_decisions(&v, &mut p, &rows(&[("a", "zz", Decision::Accept)]), &[]).unwrap_err();
        assert!(matches!(&err, Error::UnknownPair(a, b) if a == "a" && b == "zz"));
        assert!(err.to_string().contains("zz"));
    }

    #[test]
    fn decisions_file_parsing() {
        let rows = parse_decisions("# header\na\tb\taccept\n\nc\td\treject\n").unwrap();
        assert_eq!(rows.len(), 2);
        assert!(parse_decisions("a\tb\n").is_err());
        assert!(parse_decisions("a\tb\tmaybe\n").is_err());
        let text = proposals_to_review_text(&proposals(&[("x", "y")]));
        assert_eq!(parse_decisions(&text).unwrap()[0].decision, Decision::Reject);
    }

    #[test]
    fn fusion_never_lowers_coverage() {
        let recipes: Vec<Recipe> = [vec!["tomato", "basil"], vec!["tomatoes"], vec!["basil", "cheese"]]
            .iter()
            .enumerate()
            .map(|(i, l)| Recipe {
                id: i.to_string(),
                ingredients: l.iter().map(|s| s.to_string()).collect(),
                instructions_count: 1,
                image_refs: vec!["x".into()],
                split: None,
                category: None,
            })
            .collect();
        let tokens = frequency_cut(&recipes, 3).unwrap();
        let mut v = IngredientVocabulary::from_merge(&tokens, &stem_merge(&tokens)).unwrap();
        v.set_coverage(v.coverage_on(&recipes));
        let mut p = proposals(&[("basil", "tomato")]);
        let fused = apply_decisions(&v, &mut p, &rows(&[("basil", "tomato", Decision::Accept)]), &recipes).unwrap();
        assert!(fused.coverage() >= v.coverage());
    }

    fn brute_force(rows: &[Vec<f32>], threshold: f64) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(&a, &b)| a as f64 * b as f64).sum();
                let na: f64 = rows[i].iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
                let nb: f64 = rows[j].iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
                if dot / (na * nb) >= threshold {
                    out.push((i, j));
                }
            }
        }
        out
    }

    fn random_rows(n: usize, dim: usize, planted: usize, seed: u64) -> Vec<Vec<f32>> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f32>> = (0..n).map(|_| (0..dim).map(|_| rng.random::<f32>() - 0.5).collect()).collect();
        for k in 0..planted {
            let (src, dst) = (rng.random_range(0..n), rng.random_range(0..n));
            let noise = 0.05 * (k % 3) as f32;
            rows[dst] = rows[src].iter().map(|&x| x + noise * (rng.random::<f32>() - 0.5)).collect();
        }
        rows
    }

    #[test]
    fn ten_token_table_matches_pairwise_oracle() {
        let rows = random_rows(10, 3, 3, 1);
        let table = EmbeddingTable::from_rows(3, &rows).unwrap();
        let got: Vec<(usize, usize)> = similar_pairs(&table, 10, 0.9).iter().map(|p| (p.0, p.1)).collect();
        let mut got_sorted = got.clone();
        got_sorted.sort();
        assert_eq!(got_sorted, brute_force(&rows, 0.9));
        assert!(!got.is_empty());
    }

    #[test]
    fn thousand_row_table_matches_pairwise_oracle() {
        let rows = random_rows(1000, 8, 40, 2);
        let table = EmbeddingTable::from_rows(8, &rows).unwrap();
        let pairs = similar_pairs(&table, 1000, 0.8);
        for w in pairs.windows(2) {
            assert!(w[0].2 >= w[1].2);
        }
        let mut got: Vec<(usize, usize)> = pairs.iter().map(|p| (p.0, p.1)).collect();
        got.sort();
        assert_eq!(got, brute_force(&rows, 0.8));
        assert!(got.len() > 40);
    }
}
