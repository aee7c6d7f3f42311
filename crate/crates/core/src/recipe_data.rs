//! Recipe corpora: loading, filtering, split assignment and persistence.
//!
//! The canonical on-disk format is JSON Lines, one recipe per line:
//!
//! ```text
//! {"id":"r0001","ingredients":["tomato","basil"],"instructions_count":3,"image_refs":["images/r0001.png"]}
//! ```
//!
//! `id`, `ingredients`, `instructions_count` and `image_refs` are mandatory;
//! `split` and `category` are optional and unknown fields are ignored.
//! A manifest is the same format preceded by one header line carrying the
//! seed and split fractions.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const MAX_INGREDIENTS: usize = 20;
pub const MAX_INSTRUCTIONS: usize = 20;
pub const MAX_IMAGES_PER_RECIPE: usize = 5;
pub const DEFAULT_SPLIT_FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub id: String,
    pub ingredients: Vec<String>,
    pub instructions_count: u32,
    pub image_refs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    /// The internal JSON-Lines schema.
    JsonLines,
    /// A Recipe1M-style layer pair: the recipe layer at the given path and
    /// the image layer passed alongside, joined on `id`.
    LayeredJson,
}

/// Loads recipes without filtering.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<Recipe>> {
    match format {
        CorpusFormat::JsonLines => load_jsonl(path),
        CorpusFormat::LayeredJson => Err(Error::InvalidArgument(
            "layered corpora need an image layer; use load_layered".into(),
        )),
    }
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Recipe>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, idx + 1)?);
    }
    Ok(out)
}

fn parse_record(line: &str, line_no: usize) -> Result<Recipe> {
    let value: Value = serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
        line: line_no,
        id: None,
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| Error::MalformedRecord {
        line: line_no,
        id: None,
        message: "record is not a JSON object".into(),
    })?;
    let id = match obj.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => {
            return Err(Error::MalformedRecord {
                line: line_no,
                id: None,
                message: "`id` must be a string".into(),
            })
        }
        None => {
            return Err(Error::MissingField {
                line: line_no,
                id: None,
                field: "id",
            })
        }
    };
    let malformed = |message: String| Error::MalformedRecord {
        line: line_no,
        id: Some(id.clone()),
        message,
    };
    let missing = |field: &'static str| Error::MissingField {
        line: line_no,
        id: Some(id.clone()),
        field,
    };
    let strings = |field: &'static str| -> Result<Vec<String>> {
        let arr = obj.get(field).ok_or_else(|| missing(field))?;
        let arr = arr
            .as_array()
            .ok_or_else(|| malformed(format!("`{field}` must be an array of strings")))?;
        arr.iter()
            .map(|v| {
                v.as_str()
                    .map(str::to_owned)
                    .ok_or_else(|| malformed(format!("`{field}` must be an array of strings")))
            })
            .collect()
    };
    let ingredients = strings("ingredients")?;
    let image_refs = strings("image_refs")?;
    let instructions_count = obj
        .get("instructions_count")
        .ok_or_else(|| missing("instructions_count"))?
        .as_u64()
        .and_then(|n| u32::try_from(n).ok())
        .ok_or_else(|| malformed("`instructions_count` must be a non-negative integer".into()))?;
    let split = match obj.get("split") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.parse::<Split>().map_err(|e| malformed(e.to_string()))?),
        Some(_) => return Err(malformed("`split` must be a string".into())),
    };
    let category = match obj.get("category") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(malformed("`category` must be a string".into())),
    };
    Ok(Recipe {
        id,
        ingredients,
        instructions_count,
        image_refs,
        split,
        category,
    })
}

/// Loads a Recipe1M-style layer pair.
///
/// The recipe layer is a JSON array of `{id, ingredients: [{text}],
/// instructions: [{text}], ...}`; the image layer an array of
/// `{id, images: [{id, url}]}`. Image references are the image ids.
/// Recipes absent from the image layer get no image references.
pub fn load_layered(recipe_layer: &Path, image_layer: &Path) -> Result<Vec<Recipe>> {
    let read = |p: &Path| -> Result<Vec<Value>> {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::MalformedRecord {
            line: e.line(),
            id: None,
            message: format!("{}: {e}", p.display()),
        })?;
        match value {
            Value::Array(items) => Ok(items),
            _ => Err(Error::MalformedRecord {
                line: 1,
                id: None,
                message: format!("{}: expected a JSON array of records", p.display()),
            }),
        }
    };

    let mut images: HashMap<String, Vec<String>> = HashMap::new();
    for (idx, item) in read(image_layer)?.into_iter().enumerate() {
        let id = item
            .get("id")
            .and_then(Value::as_str)
            .ok_or(Error::MissingField {
                line: idx + 1,
                id: None,
                field: "id",
            })?
            .to_owned();
        let refs = item
            .get("images")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::MissingField {
                line: idx + 1,
                id: Some(id.clone()),
                field: "images",
            })?
            .iter()
            .filter_map(|img| img.get("id").and_then(Value::as_str).map(str::to_owned))
            .collect();
        images.insert(id, refs);
    }

    let mut out = Vec::new();
    for (idx, item) in read(recipe_layer)?.into_iter().enumerate() {
        let record = idx + 1;
        let id = item
            .get("id")
            .and_then(Value::as_str)
            .ok_or(Error::MissingField {
                line: record,
                id: None,
                field: "id",
            })?
            .to_owned();
        let texts = |field: &'static str| -> Result<Vec<String>> {
            let arr = item
                .get(field)
                .and_then(Value::as_array)
                .ok_or_else(|| Error::MissingField {
                    line: record,
                    id: Some(id.clone()),
                    field,
                })?;
            arr.iter()
                .map(|entry| match entry {
                    Value::String(s) => Ok(s.clone()),
                    other => other
                        .get("text")
                        .and_then(Value::as_str)
                        .map(str::to_owned)
                        .ok_or_else(|| Error::MalformedRecord {
                            line: record,
                            id: Some(id.clone()),
                            message: format!("`{field}` entries need a `text` string"),
                        }),
                })
                .collect()
        };
        let ingredients = texts("ingredients")?;
        let instructions = texts("instructions")?;
        let split = item
            .get("partition")
            .and_then(Value::as_str)
            .and_then(|s| s.parse::<Split>().ok());
        out.push(Recipe {
            image_refs: images.get(&id).cloned().unwrap_or_default(),
            id,
            ingredients,
            instructions_count: instructions.len() as u32,
            split,
            category: None,
        });
    }
    Ok(out)
}

/// Keeps recipes with at least one image and 1..=20 ingredients and
/// instructions, retaining at most five images each.
pub fn filter_recipes(recipes: Vec<Recipe>) -> Vec<Recipe> {
    recipes
        .into_iter()
        .filter(|r| {
            !r.image_refs.is_empty()
                && (1..=MAX_INGREDIENTS).contains(&r.ingredients.len())
                && (1..=MAX_INSTRUCTIONS as u32).contains(&r.instructions_count)
        })
        .map(|mut r| {
            r.image_refs.truncate(MAX_IMAGES_PER_RECIPE);
            r
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub recipes: Vec<Recipe>,
    pub split_fractions: [f64; 3],
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    manifest: u32,
    seed: u64,
    split_fractions: [f64; 3],
    count: usize,
}

fn split_key(seed: u64, id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    h.finalize().into()
}

/// Assigns every recipe to train/val/test.
///
/// Recipes are ordered by `SHA-256(seed, id)` and the ordered list is cut at
/// the rounded fraction boundaries, so counts match the fractions to within
/// one recipe and the relative order of existing recipes never changes when
/// recipes are added. Any split already present on the input is overwritten.
pub fn assign_splits(recipes: Vec<Recipe>, fractions: [f64; 3], seed: u64) -> Result<DatasetManifest> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidFractions(fractions));
    }
    let n = recipes.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let mut order: Vec<(usize, [u8; 32])> = recipes
        .iter()
        .enumerate()
        .map(|(i, r)| (i, split_key(seed, &r.id)))
        .collect();
    order.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut splits = vec![Split::Test; n];
    for (rank, (idx, _)) in order.into_iter().enumerate() {
        splits[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let recipes = recipes
        .into_iter()
        .zip(splits)
        .map(|(mut r, s)| {
            r.split = Some(s);
            r
        })
        .collect();
    Ok(DatasetManifest {
        recipes,
        split_fractions: fractions,
        seed,
    })
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> Vec<&Recipe> {
        self.recipes.iter().filter(|r| r.split == Some(split)).collect()
    }

    pub fn split_owned(&self, split: Split) -> Vec<Recipe> {
        self.recipes.iter().filter(|r| r.split == Some(split)).cloned().collect()
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for r in &self.recipes {
            match r.split {
                Some(Split::Train) => c[0] += 1,
                Some(Split::Val) => c[1] += 1,
                Some(Split::Test) => c[2] += 1,
                None => {}
            }
        }
        c
    }

    /// Recipes restricted to one category; used for per-category training.
    pub fn with_category(&self, category: &str) -> DatasetManifest {
        DatasetManifest {
            recipes: self
                .recipes
                .iter()
                .filter(|r| r.category.as_deref() == Some(category))
                .cloned()
                .collect(),
            split_fractions: self.split_fractions,
            seed: self.seed,
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let header = ManifestHeader {
            manifest: 1,
            seed: self.seed,
            split_fractions: self.split_fractions,
            count: self.recipes.len(),
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for r in &self.recipes {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| Error::MalformedRecord {
            line: 1,
            id: None,
            message: "empty manifest".into(),
        })?;
        let header: ManifestHeader = serde_json::from_str(first).map_err(|e| Error::MalformedRecord {
            line: 1,
            id: None,
            message: format!("bad manifest header: {e}"),
        })?;
        let mut recipes = Vec::with_capacity(header.count);
        for (idx, line) in lines {
            recipes.push(parse_record(line, idx + 1)?);
        }
        if recipes.len() != header.count {
            return Err(Error::MalformedRecord {
                line: text.lines().count(),
                id: None,
                message: format!("header announces {} recipes, found {}", header.count, recipes.len()),
            });
        }
        Ok(DatasetManifest {
            recipes,
            split_fractions: header.split_fractions,
            seed: header.seed,
        })
    }

    pub fn validate_partition(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.recipes {
            if r.split.is_none() {
                return Err(Error::InvalidArgument(format!("recipe {} has no split", r.id)));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::InvalidArgument(format!("recipe id {} appears twice", r.id)));
            }
        }
        Ok(())
    }
}

/// Resolves an image reference against a dataset root.
pub fn resolve_image(root: &Path, image_ref: &str) -> PathBuf {
    let p = Path::new(image_ref);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn recipe(id: &str, n_ingr: usize, n_instr: u32, n_img: usize) -> Recipe {
        Recipe {
            id: id.into(),
            ingredients: (0..n_ingr).map(|i| format!("ingr{i}")).collect(),
            instructions_count: n_instr,
            image_refs: (0..n_img).map(|i| format!("{id}_{i}.jpg")).collect(),
            split: None,
            category: None,
        }
    }

    #[test]
    fn jsonl_loads_valid_records_and_ignores_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(
            &path,
            concat!(
                r#"{"id":"a","ingredients":["x"],"instructions_count":1,"image_refs":["a.png"],"title":"ignored"}"#,
                "\n",
                r#"{"id":"b","ingredients":["x","y"],"instructions_count":2,"image_refs":[]}"#,
                "\n\n",
                r#"{"id":"c","ingredients":[],"instructions_count":0,"image_refs":["c.png"],"split":"test"}"#,
                "\n"
            ),
        )
        .unwrap();
        let rs = load_corpus(&path, CorpusFormat::JsonLines).unwrap();
        assert_eq!(rs.len(), 3);
        assert_eq!(rs[1].ingredients, vec!["x", "y"]);
        assert_eq!(rs[2].split, Some(Split::Test));
    }

    #[test]
    fn missing_ingredients_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(
            &path,
            r#"{"id":"ok","ingredients":["x"],"instructions_count":1,"image_refs":["a"]}
{"id":"r9","instructions_count":1,"image_refs":["a"]}
"#,
        )
        .unwrap();
        let err = load_jsonl(&path).unwrap_err();
        match &err {
            Error::MissingField { line, id, field } => {
                assert_eq!(*line, 2);
                assert_eq!(id.as_deref(), Some("r9"));
                assert_eq!(*field, "ingredients");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("ingredients"));
    }

    #[test]
    fn malformed_json_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(
            &path,
            "{\"id\":\"a\",\"ingredients\":[\"x\"],\"instructions_count\":1,\"image_refs\":[\"a\"]}\n{not json\n",
        )
        .unwrap();
        match load_jsonl(&path).unwrap_err() {
            Error::MalformedRecord { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(
            &path,
            "{\"id\":\"q7\",\"ingredients\":\"salt\",\"instructions_count\":1,\"image_refs\":[\"a\"]}\n",
        )
        .unwrap();
        match load_jsonl(&path).unwrap_err() {
            Error::MalformedRecord { line, id, .. } => {
                assert_eq!(line, 1);
                assert_eq!(id.as_deref(), Some("q7"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn layered_join_populates_images() {
        // Five recipes; the image layer covers three of them, in a different
        // order, plus one id with no recipe.
        let dir = tempfile::tempdir().unwrap();
        let l1 = dir.path().join("layer1.json");
        let l2 = dir.path().join("layer2.json");
        fs::write(
            &l1,
            r#"[
 {"id":"r1","ingredients":[{"text":"tomato"},{"text":"basil"}],"instructions":[{"text":"chop"}],"partition":"train","title":"t"},
 {"id":"r2","ingredients":[{"text":"flour"}],"instructions":[{"text":"mix"},{"text":"bake"}],"partition":"val"},
 {"id":"r3","ingredients":[{"text":"egg"}],"instructions":[{"text":"boil"}],"partition":"test"},
 {"id":"r4","ingredients":[{"text":"rice"}],"instructions":[{"text":"cook"}],"partition":"train"},
 {"id":"r5","ingredients":[{"text":"kale"},{"text":"oil"}],"instructions":[{"text":"toss"}],"partition":"train"}
]"#,
        )
        .unwrap();
        fs::write(
            &l2,
            r#"[
 {"id":"r3","images":[{"id":"c.jpg","url":"u"}]},
 {"id":"zz","images":[{"id":"z.jpg","url":"u"}]},
 {"id":"r1","images":[{"id":"a1.jpg","url":"u"},{"id":"a2.jpg","url":"u"}]},
 {"id":"r5","images":[{"id":"e.jpg","url":"u"}]}
]"#,
        )
        .unwrap();
        let rs = load_layered(&l1, &l2).unwrap();
        let refs: Vec<(&str, Vec<&str>)> = rs
            .iter()
            .map(|r| (r.id.as_str(), r.image_refs.iter().map(String::as_str).collect()))
            .collect();
        assert_eq!(
            refs,
            vec![
                ("r1", vec!["a1.jpg", "a2.jpg"]),
                ("r2", vec![]),
                ("r3", vec!["c.jpg"]),
                ("r4", vec![]),
                ("r5", vec!["e.jpg"]),
            ]
        );
        assert_eq!(rs[1].instructions_count, 2);
        assert_eq!(rs[4].ingredients, vec!["kale", "oil"]);
        assert_eq!(filter_recipes(rs).len(), 3);
    }

    #[test]
    fn filter_rules() {
        let out = filter_recipes(vec![
            recipe("no_images", 3, 2, 0),
            recipe("too_many_ingr", 21, 2, 1),
            recipe("seven_images", 3, 2, 7),
            recipe("no_instr", 3, 0, 1),
            recipe("too_many_instr", 3, 21, 1),
            recipe("edge", 20, 20, 1),
        ]);
        let ids: Vec<&str> = out.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, vec!["seven_images", "edge"]);
        assert_eq!(out[0].image_refs.len(), 5);
    }

    #[test]
    fn splits_70_15_15() {
        let rs: Vec<Recipe> = (0..100).map(|i| recipe(&format!("r{i}"), 2, 2, 1)).collect();
        let m = assign_splits(rs.clone(), DEFAULT_SPLIT_FRACTIONS, 3).unwrap();
        assert_eq!(m.counts(), [70, 15, 15]);
        let again = assign_splits(rs.clone(), DEFAULT_SPLIT_FRACTIONS, 3).unwrap();
        assert_eq!(m, again);
        assert!(matches!(
            assign_splits(rs, [0.5, 0.5, 0.5], 3),
            Err(Error::InvalidFractions(_))
        ));
    }

    #[test]
    fn manifest_round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let rs: Vec<Recipe> = (0..10).map(|i| recipe(&format!("r{i}"), 2, 2, 2)).collect();
        let m = assign_splits(rs, DEFAULT_SPLIT_FRACTIONS, 11).unwrap();
        let path = dir.path().join("m.jsonl");
        m.save(&path).unwrap();
        let loaded = DatasetManifest::load(&path).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(loaded.to_jsonl().unwrap(), fs::read_to_string(&path).unwrap());
    }

    fn arb_recipe() -> impl Strategy<Value = Recipe> {
        ("[a-z]{1,6}[0-9]{0,4}", 0usize..24, 0u32..24, 0usize..8)
            .prop_map(|(id, ni, ns, nm)| recipe(&id, ni, ns, nm))
    }

    proptest! {
        #[test]
        fn filter_is_idempotent(rs in proptest::collection::vec(arb_recipe(), 0..40)) {
            let once = filter_recipes(rs);
            let twice = filter_recipes(once.clone());
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn splits_partition_the_set(n in 1usize..300, seed in any::<u64>()) {
            let rs: Vec<Recipe> = (0..n).map(|i| recipe(&format!("id{i}"), 1, 1, 1)).collect();
            let m = assign_splits(rs, DEFAULT_SPLIT_FRACTIONS, seed).unwrap();
            m.validate_partition().unwrap();
            let c = m.counts();
            prop_assert_eq!(c.iter().sum::<usize>(), n);
            for (k, f) in DEFAULT_SPLIT_FRACTIONS.iter().enumerate() {
                prop_assert!((c[k] as f64 - f * n as f64).abs() <= 1.0 + 1e-9);
            }
        }

        #[test]
        fn adding_recipes_keeps_relative_order(n in 20usize..120, extra in 1usize..5, seed in any::<u64>()) {
            let base: Vec<Recipe> = (0..n).map(|i| recipe(&format!("id{i}"), 1, 1, 1)).collect();
            let mut grown = base.clone();
            grown.extend((0..extra).map(|i| recipe(&format!("new{i}"), 1, 1, 1)));
            let a = assign_splits(base, DEFAULT_SPLIT_FRACTIONS, seed).unwrap();
            let b = assign_splits(grown, DEFAULT_SPLIT_FRACTIONS, seed).unwrap();
            // Only recipes near a cut point can move: at most a few per boundary.
            let moved = a.recipes.iter().zip(&b.recipes).filter(|(x, y)| x.split != y.split).count();
            prop_assert!(moved <= 2 * (extra + 1));
        }
    }
}
