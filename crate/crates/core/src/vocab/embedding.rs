use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub const EMBEDDING_DIM: usize = 300;
const MAGIC: &[u8; 4] = b"IEMB";

/// Row-major `[rows × dim]` f32 matrix; the last row is the pad row.
///
/// Binary layout (little endian): `b"IEMB"`, `u32` rows, `u32` dim, then
/// `rows * dim` f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingTable {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f32>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::DimensionMismatch(format!("row {i} has {} values, expected {dim}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            dim,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn cosine(&self, i: usize, j: usize) -> Option<f64> {
        let (a, b) = (self.row(i), self.row(j));
        let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
        let na: f64 = a.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        (na > 0.0 && nb > 0.0).then(|| dot / (na * nb))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.data.len());
        out.write_all(MAGIC).unwrap();
        out.write_u32::<LittleEndian>(self.rows as u32).unwrap();
        out.write_u32::<LittleEndian>(self.dim as u32).unwrap();
        for v in &self.data {
            out.write_f32::<LittleEndian>(*v).unwrap();
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::MalformedRecord {
            line: 0,
            id: None,
            message: format!("embedding table: {m}"),
        };
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let rows = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
        let dim = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
        if bytes.len() != 12 + 4 * rows * dim {
            return Err(bad(&format!("expected {} bytes of data for {rows}x{dim}", 4 * rows * dim)));
        }
        let mut data = vec![0f32; rows * dim];
        cur.read_f32_into::<LittleEndian>(&mut data).map_err(|_| bad("truncated data"))?;
        Ok(Self { rows, dim, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct Word2VecConfig {
    pub dim: usize,
    pub epochs: usize,
    pub negatives: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for Word2VecConfig {
    fn default() -> Self {
        Self {
            dim: EMBEDDING_DIM,
            epochs: 5,
            negatives: 5,
            learning_rate: 0.025,
            seed: 0,
        }
    }
}

/// Skip-gram with negative sampling where each recipe's ingredient list is
/// one context window: every ordered pair of distinct positions is a
/// (centre, context) example.
///
/// `sequences` hold canonical indices in `0..vocab_size`; other indices
/// (pad/unknown) are skipped. Returns a `(vocab_size + 1) × dim` table whose
/// last row is the zero pad row. Each returned row is the sum of the input
/// and output vectors, so direct co-occurrence raises cosine similarity.
pub fn train_embeddings(sequences: &[Vec<usize>], vocab_size: usize, cfg: &Word2VecConfig) -> Result<EmbeddingTable> {
    if vocab_size == 0 {
        return Err(Error::EmptyVocabulary);
    }
    let dim = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut input = EmbeddingTable::zeros(vocab_size + 1, dim);
    for v in input.data[..vocab_size * dim].iter_mut() {
        *v = (rng.random::<f32>() - 0.5) / dim as f32;
    }
    let mut output = vec![0f32; vocab_size * dim];

    // Unigram^0.75 noise distribution as a cumulative table.
    let mut freq = vec![0f64; vocab_size];
    for seq in sequences {
        for &t in seq {
            if t < vocab_size {
                freq[t] += 1.0;
            }
        }
    }
    let mut cdf: Vec<f64> = freq.iter().map(|f| f.powf(0.75)).collect();
    let total: f64 = cdf.iter().sum();
    if total == 0.0 {
        return Ok(input);
    }
    let mut acc = 0.0;
    for c in cdf.iter_mut() {
        acc += *c / total;
        *c = acc;
    }
    let sample_noise = |rng: &mut ChaCha8Rng| -> usize {
        let u: f64 = rng.random();
        cdf.partition_point(|&c| c < u).min(vocab_size - 1)
    };

    let pairs_per_epoch: usize = sequences
        .iter()
        .map(|s| {
            let k = s.iter().filter(|&&t| t < vocab_size).count();
            k * k.saturating_sub(1)
        })
        .sum();
    let total_steps = (pairs_per_epoch * cfg.epochs).max(1);
    let mut step = 0usize;
    let mut grad = vec![0f32; dim];
    let sigmoid = |x: f32| 1.0 / (1.0 + (-x).exp());

    for _ in 0..cfg.epochs {
        for seq in sequences {
            let toks: Vec<usize> = seq.iter().copied().filter(|&t| t < vocab_size).collect();
            for (i, &centre) in toks.iter().enumerate() {
                for (j, &context) in toks.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    let lr = cfg.learning_rate * (1.0 - step as f32 / total_steps as f32).max(1e-4);
                    step += 1;
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    let c_row = centre * dim;
                    for n in 0..=cfg.negatives {
                        let (target, label) = if n == 0 {
                            (context, 1.0)
                        } else {
                            let t = sample_noise(&mut rng);
                            if t == context {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let o_row = target * dim;
                        let dot: f32 = (0..dim).map(|k| input.data[c_row + k] * output[o_row + k]).sum();
                        let g = (label - sigmoid(dot)) * lr;
                        for k in 0..dim {
                            grad[k] += g * output[o_row + k];
                            output[o_row + k] += g * input.data[c_row + k];
                        }
                    }
                    for k in 0..dim {
                        input.data[c_row + k] += grad[k];
                    }
                }
            }
        }
    }
    for (v, o) in input.data[..vocab_size * dim].iter_mut().zip(&output) {
        *v += o;
    }
    Ok(input)
}
