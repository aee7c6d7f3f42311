use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::image::ImageEncoder;
use super::text::TextEncoder;
use super::HIDDEN_DIM;
use crate::imaging::ImageBank;
use crate::nn::ParamStore;
use crate::recipe_data::Recipe;
use crate::vocab::{EmbeddingTable, IngredientVocabulary};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssocConfig {
    /// Canonical vocabulary size; the table has one extra pad row.
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub hidden_per_direction: usize,
    pub attention: bool,
    pub image_size: usize,
    pub conv_channels: Vec<usize>,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for AssocConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            embedding_dim: crate::vocab::EMBEDDING_DIM,
            hidden_per_direction: HIDDEN_DIM / 2,
            attention: true,
            image_size: 32,
            conv_channels: vec![32, 64, 128],
            feature_dim: 2048,
            seed: 0,
        }
    }
}

/// Per-sequence attention trace.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    /// `[B, N, 300]` hidden states.
    pub states: Tensor,
    /// `[B, 300]` pooled states.
    pub pooled: Tensor,
    /// Weights trimmed to each sequence's length; empty without attention.
    pub weights: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub recipe_id: String,
    pub tokens: Vec<String>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    config: AssocConfig,
    vocabulary_hash: String,
    parameters: usize,
}

pub struct AssociationModel {
    cfg: AssocConfig,
    store: ParamStore,
    text: TextEncoder,
    image: ImageEncoder,
}

impl AssociationModel {
    pub fn new(cfg: AssocConfig) -> Result<Self> {
        Self::with_dtype(cfg, DType::F32)
    }

    pub fn with_dtype(cfg: AssocConfig, dtype: DType) -> Result<Self> {
        if cfg.vocab_size == 0 {
            return Err(Error::EmptyVocabulary);
        }
        let store = ParamStore::with_dtype(cfg.seed, dtype);
        let vb = store.var_builder();
        let text = TextEncoder::new(
            cfg.vocab_size + 1,
            cfg.embedding_dim,
            cfg.hidden_per_direction,
            cfg.attention,
            vb.pp("text"),
        )?;
        let image = ImageEncoder::new(cfg.image_size, &cfg.conv_channels, cfg.feature_dim, vb.pp("image"))?;
        Ok(Self {
            cfg,
            store,
            text,
            image,
        })
    }

    pub fn config(&self) -> &AssocConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn pad_index(&self) -> usize {
        self.cfg.vocab_size
    }

    /// Replaces the ingredient embedding table with pre-trained vectors.
    pub fn set_embeddings(&self, table: &EmbeddingTable) -> Result<()> {
        if table.rows() != self.cfg.vocab_size + 1 || table.dim() != self.cfg.embedding_dim {
            return Err(Error::DimensionMismatch(format!(
                "embedding table {}x{} for a {}x{} model",
                table.rows(),
                table.dim(),
                self.cfg.vocab_size + 1,
                self.cfg.embedding_dim
            )));
        }
        let t = Tensor::from_slice(table.data(), (table.rows(), table.dim()), &candle_core::Device::Cpu)?;
        Ok(self.store.set("text.embedding", &t)?)
    }

    /// `p` vectors `[B, 1024]` with the attention trace.
    pub fn encode_ingredients(&self, seqs: &[Vec<usize>]) -> Result<(Tensor, EncoderTrace)> {
        let out = self.text.forward(seqs)?;
        let weights = match &out.weights {
            Some(w) => w
                .to_dtype(DType::F64)?
                .to_vec2::<f64>()?
                .into_iter()
                .zip(seqs)
                .map(|(row, s)| row[..s.len()].to_vec())
                .collect(),
            None => Vec::new(),
        };
        Ok((
            out.p,
            EncoderTrace {
                states: out.states,
                pooled: out.pooled,
                weights,
            },
        ))
    }

    /// `q` vectors `[B, 1024]`.
    pub fn encode_images(&self, images: &Tensor) -> Result<Tensor> {
        let x = images.to_dtype(self.store.dtype())?;
        self.image.forward(&x)
    }

    pub fn image_encoder(&self) -> &ImageEncoder {
        &self.image
    }

    /// Text embeddings as plain vectors, in chunks.
    pub fn embed_sequences(&self, seqs: &[Vec<usize>]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(256) {
            let (p, _) = self.encode_ingredients(chunk)?;
            out.extend(p.detach().to_dtype(DType::F32)?.to_vec2::<f32>()?);
        }
        Ok(out)
    }

    pub fn embed_images(&self, images: &Tensor) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.dim(0)?);
        let n = images.dim(0)?;
        for start in (0..n).step_by(256) {
            let len = (n - start).min(256);
            let q = self.encode_images(&images.narrow(0, start, len)?)?;
            out.extend(q.detach().to_dtype(DType::F32)?.to_vec2::<f32>()?);
        }
        Ok(out)
    }

    pub fn embed_bank(&self, bank: &ImageBank, indices: &[usize]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(indices.len());
        for chunk in indices.chunks(256) {
            out.extend(self.embed_images(&bank.batch(chunk, self.cfg.image_size)?)?);
        }
        Ok(out)
    }

    pub fn attention_records(&self, vocab: &IngredientVocabulary, recipes: &[Recipe]) -> Result<Vec<AttentionRecord>> {
        let mut out = Vec::with_capacity(recipes.len());
        for chunk in recipes.chunks(256) {
            let seqs: Vec<Vec<usize>> = chunk.iter().map(|r| vocab.encode(&r.ingredients)).collect();
            let (_, trace) = self.encode_ingredients(&seqs)?;
            for (i, r) in chunk.iter().enumerate() {
                out.push(AttentionRecord {
                    recipe_id: r.id.clone(),
                    tokens: seqs[i]
                        .iter()
                        .map(|&t| vocab.token(t).unwrap_or("<unk>").to_string())
                        .collect(),
                    weights: trace.weights.get(i).cloned().unwrap_or_default(),
                });
            }
        }
        Ok(out)
    }

    /// A copy of the image encoder backed by constant tensors, so it takes
    /// no part in any optimizer and accumulates no gradients.
    pub fn frozen_image_encoder(&self) -> Result<ImageEncoder> {
        let weights: std::collections::HashMap<String, Tensor> = self
            .store
            .snapshot()?
            .into_iter()
            .filter_map(|(name, t)| name.strip_prefix("image.").map(|n| (n.to_string(), t.detach())))
            .collect();
        let vb = candle_nn::VarBuilder::from_tensors(weights, self.store.dtype(), &candle_core::Device::Cpu);
        ImageEncoder::new(self.cfg.image_size, &self.cfg.conv_channels, self.cfg.feature_dim, vb)
    }

    pub fn fingerprint(&self) -> Result<String> {
        Ok(self.store.fingerprint()?)
    }

    /// Writes `model.safetensors` and `config.json` into `dir`.
    pub fn save(&self, dir: &Path, vocabulary_hash: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.save(&dir.join("model.safetensors"))?;
        let meta = CheckpointMeta {
            config: self.cfg.clone(),
            vocabulary_hash: vocabulary_hash.to_string(),
            parameters: self.store.num_parameters(),
        };
        let path = dir.join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    /// Loads a checkpoint, returning the model and the vocabulary hash it
    /// was trained with.
    pub fn load(dir: &Path) -> Result<(Self, String)> {
        let path = dir.join("config.json");
        let meta: CheckpointMeta =
            serde_json::from_str(&std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
        let model = Self::new(meta.config)?;
        model.store.load(&dir.join("model.safetensors"))?;
        Ok((model, meta.vocabulary_hash))
    }
}
