use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::ParamId;
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerConfig {
    pub num_items: usize,
    pub embed_dim: usize,
    /// Number of user representations; 1 is the single-representation model.
    pub num_reps: usize,
    pub encoder_layers: usize,
    pub attention_heads: usize,
    pub mlp_layers: usize,
    /// Hidden width of the encoder feed-forward block.
    pub ffn_dim: usize,
    pub max_len: usize,
    /// Use one embedding table for the user-tower input and the item tower.
    pub share_embeddings: bool,
    /// Layer-normalize the encoder output. In two dimensions a layer norm
    /// can only produce two directions, so low-dimensional runs disable it.
    #[serde(default = "yes")]
    pub final_norm: bool,
    pub init_seed: u64,
}

fn yes() -> bool {
    true
}

impl TowerConfig {
    pub fn new(num_items: usize) -> Self {
        Self {
            num_items,
            embed_dim: 16,
            num_reps: 5,
            encoder_layers: 2,
            attention_heads: 4,
            mlp_layers: 2,
            ffn_dim: 16,
            max_len: crate::dataset::MAX_LEN,
            share_embeddings: false,
            final_norm: true,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_items == 0 {
            return bad("num_items must be positive".into());
        }
        if self.embed_dim == 0 || self.attention_heads == 0 {
            return bad("embed_dim and attention_heads must be positive".into());
        }
        if self.embed_dim % self.attention_heads != 0 {
            return bad(format!(
                "embed_dim {} is not divisible by attention_heads {}",
                self.embed_dim, self.attention_heads
            ));
        }
        if self.num_reps == 0 {
            return bad("num_reps must be at least 1".into());
        }
        if self.mlp_layers == 0 {
            return bad("mlp_layers must be at least 1".into());
        }
        if self.ffn_dim == 0 || self.max_len == 0 {
            return bad("ffn_dim and max_len must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerIds {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
}

/// Parameter ids by role.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub item_embedding: ParamId,
    pub item_mlp: Vec<(ParamId, ParamId)>,
    pub user_embedding: ParamId,
    pub positions: ParamId,
    pub layers: Vec<EncoderLayerIds>,
    /// Gain and bias of the output layer norm, when enabled.
    pub final_norm: Option<(ParamId, ParamId)>,
    pub queries: ParamId,
}

#[derive(Clone, Copy)]
enum Init {
    Uniform,
    Zeros,
    Ones,
}

/// Every trainable tensor of both towers, stored flat with names.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerParams {
    pub config: TowerConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Mat>,
    pub layout: Layout,
    item_tower: Vec<bool>,
}

struct Builder {
    names: Vec<String>,
    tensors: Vec<Mat>,
    item_tower: Vec<bool>,
    rng: ChaCha8Rng,
    bound: f64,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init, item: bool) -> ParamId {
        let data = match init {
            Init::Uniform => (0..rows * cols)
                .map(|_| self.rng.gen_range(-self.bound..self.bound))
                .collect(),
            Init::Zeros => vec![0.0; rows * cols],
            Init::Ones => vec![1.0; rows * cols],
        };
        self.names.push(name);
        self.tensors.push(Mat::from_vec(rows, cols, data));
        self.item_tower.push(item);
        self.tensors.len() - 1
    }
}

impl TowerParams {
    /// Embeddings, linear maps and query vectors are drawn from
    /// `U(-1/√d, 1/√d)`; biases start at zero and normalization gains at one.
    pub fn init(config: &TowerConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            item_tower: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
            bound: 1.0 / (d as f64).sqrt(),
        };
        let item_embedding = b.add(
            "item_embedding".into(),
            config.num_items,
            d,
            Init::Uniform,
            true,
        );
        let item_mlp = (0..config.mlp_layers)
            .map(|l| {
                (
                    b.add(format!("item_mlp.{l}.weight"), d, d, Init::Uniform, true),
                    b.add(format!("item_mlp.{l}.bias"), 1, d, Init::Zeros, true),
                )
            })
            .collect();
        let user_embedding = if config.share_embeddings {
            item_embedding
        } else {
            b.add(
                "user_embedding".into(),
                config.num_items,
                d,
                Init::Uniform,
                false,
            )
        };
        let positions = b.add("positions".into(), config.max_len, d, Init::Uniform, false);
        let layers = (0..config.encoder_layers)
            .map(|l| {
                let mut add =
                    |n: &str, r, c, init| b.add(format!("encoder.{l}.{n}"), r, c, init, false);
                EncoderLayerIds {
                    ln1_gain: add("ln1.gain", 1, d, Init::Ones),
                    ln1_bias: add("ln1.bias", 1, d, Init::Zeros),
                    wq: add("attn.wq", d, d, Init::Uniform),
                    bq: add("attn.bq", 1, d, Init::Zeros),
                    wk: add("attn.wk", d, d, Init::Uniform),
                    bk: add("attn.bk", 1, d, Init::Zeros),
                    wv: add("attn.wv", d, d, Init::Uniform),
                    bv: add("attn.bv", 1, d, Init::Zeros),
                    wo: add("attn.wo", d, d, Init::Uniform),
                    bo: add("attn.bo", 1, d, Init::Zeros),
                    ln2_gain: add("ln2.gain", 1, d, Init::Ones),
                    ln2_bias: add("ln2.bias", 1, d, Init::Zeros),
                    ff1_w: add("ffn.w1", d, config.ffn_dim, Init::Uniform),
                    ff1_b: add("ffn.b1", 1, config.ffn_dim, Init::Zeros),
                    ff2_w: add("ffn.w2", config.ffn_dim, d, Init::Uniform),
                    ff2_b: add("ffn.b2", 1, d, Init::Zeros),
                }
            })
            .collect();
        let final_norm = config.final_norm.then(|| {
            (
                b.add("encoder.final.gain".into(), 1, d, Init::Ones, false),
                b.add("encoder.final.bias".into(), 1, d, Init::Zeros, false),
            )
        });
        let queries = b.add("queries".into(), config.num_reps, d, Init::Uniform, false);
        Ok(Self {
            config: config.clone(),
            names: b.names,
            tensors: b.tensors,
            item_tower: b.item_tower,
            layout: Layout {
                item_embedding,
                item_mlp,
                user_embedding,
                positions,
                layers,
                final_norm,
                queries,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.tensors[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    /// Whether the tensor belongs to the item tower (item embedding and MLP).
    pub fn is_item_tower(&self, id: ParamId) -> bool {
        self.item_tower[id]
    }

    pub fn zeros_like(&self) -> Vec<Mat> {
        self.tensors
            .iter()
            .map(|t| Mat::zeros(t.rows, t.cols))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Mat::is_finite)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            config: self.config.clone(),
            tensors: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(n, t)| NamedTensor {
                    name: n.clone(),
                    rows: t.rows,
                    cols: t.cols,
                    data: t.data.clone(),
                })
                .collect(),
        };
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, &ckpt)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let ckpt: Checkpoint = serde_json::from_reader(file)?;
        let mut params = Self::init(&ckpt.config)?;
        if ckpt.tensors.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                params.len(),
                ckpt.tensors.len()
            )));
        }
        for t in ckpt.tensors {
            let id = params
                .id(&t.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", t.name)))?;
            let slot = &mut params.tensors[id];
            if (slot.rows, slot.cols) != (t.rows, t.cols) || t.data.len() != t.rows * t.cols {
                return Err(Error::Checkpoint(format!("shape mismatch for {}", t.name)));
            }
            slot.data = t.data;
        }
        Ok(params)
    }
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: TowerConfig,
    tensors: Vec<NamedTensor>,
}

/// Writes `item_id,<d floats>` rows.
pub fn write_item_csv(path: &Path, reps: &Mat) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for i in 0..reps.rows {
        write!(out, "{i}")?;
        for x in reps.row(i) {
            write!(out, ",{x}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}
