//! The differentiable network: a small strided conv encoder, a frozen text
//! embedder, CLIP-style attention pooling, a transformer-decoder fusion
//! module that grounds per-disease query sets in the image, a shared 2-way
//! classifier over flattened grounded features, and a location projector.
//!
//! All math runs at `f64`. Forward passes for evaluation use the same graph
//! code as training, just with parameters bound as constants.

pub mod checkpoint;
pub mod graph;

use std::sync::Arc;

use indexmap::IndexMap;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ConvGeometry, Tape};
use crate::kb::KnowledgeBase;
use crate::text::{fnv1a_str, TextEmbedder, TextError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("unknown entity {0:?}")]
    UnknownEntity(String),
    #[error("bad model config: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Network dimensions and switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Output channels per stride-2 conv block; the last equals `dim`.
    pub conv_channels: Vec<usize>,
    pub dim: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Softmax temperature for similarity-based heads.
    pub tau: f64,
    pub dropout: f64,
    /// Learned positional embeddings added to the feature-map cells.
    pub positional_embeddings: bool,
    /// Layer-normalize the encoder's cell features (stabilizes attention
    /// logit scale for pooling and grounding).
    pub encoder_norm: bool,
    /// Emit one heatmap per query position instead of the query-averaged map.
    pub per_aspect_heatmaps: bool,
    pub classifier_bias: bool,
    pub init_seed: u64,
    pub text_seed: u64,
    /// Query positions per disease fed to the fusion module and classifier;
    /// the aspect-count ablation shrinks this below the KB's K+1.
    pub query_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            conv_channels: vec![16, 32, 48, 64],
            dim: 64,
            decoder_layers: 2,
            heads: 4,
            ffn_dim: 128,
            tau: 0.7,
            dropout: 0.0,
            positional_embeddings: true,
            encoder_norm: true,
            per_aspect_heatmaps: false,
            classifier_bias: true,
            init_seed: 1,
            text_seed: 1,
            query_positions: 9,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.conv_channels.is_empty() {
            return Err(ModelError::Config("need at least one conv block".into()));
        }
        if *self.conv_channels.last().unwrap() != self.dim {
            return Err(ModelError::Config(format!(
                "last conv channel count {} must equal dim {}",
                self.conv_channels.last().unwrap(),
                self.dim
            )));
        }
        if self.image_size % (1 << self.conv_channels.len()) != 0 {
            return Err(ModelError::Config(format!(
                "image size {} not divisible by stride product {}",
                self.image_size,
                1 << self.conv_channels.len()
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.query_positions == 0 {
            return Err(ModelError::Config("query_positions must be positive".into()));
        }
        if self.tau <= 0.0 {
            return Err(ModelError::Config("tau must be positive".into()));
        }
        Ok(())
    }

    /// Feature-map side length after the conv stack.
    pub fn grid_side(&self) -> usize {
        self.image_size >> self.conv_channels.len()
    }

    pub fn cells(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Input pixels per feature-map cell.
    pub fn stride(&self) -> usize {
        1 << self.conv_channels.len()
    }

    pub fn conv_geometries(&self) -> Vec<ConvGeometry> {
        let mut geoms = Vec::new();
        let mut side = self.image_size;
        let mut in_c = 1;
        for &out_c in &self.conv_channels {
            geoms.push(ConvGeometry {
                in_h: side,
                in_w: side,
                in_c,
                out_c,
                kernel: 3,
                stride: 2,
                pad: 1,
            });
            side /= 2;
            in_c = out_c;
        }
        geoms
    }
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Arc<Array2<f64>>>,
}

impl ParamSet {
    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        self.entries.insert(name.to_string(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> &Arc<Array2<f64>> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arc<Array2<f64>>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Mutate one parameter in place (clones only if a forward pass still
    /// holds the array).
    pub fn update(&mut self, name: &str, f: impl FnOnce(&mut Array2<f64>)) {
        let arc = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        f(Arc::make_mut(arc));
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }
}

/// The model: config, trainable parameters, and the frozen text tower.
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub text: TextEmbedder,
}

/// Per-disease query set: embedded description texts, one row per query
/// position, each row unit-norm.
#[derive(Debug, Clone)]
pub struct AspectQuerySet {
    pub disease: String,
    /// `[query_positions, dim]`.
    pub embeddings: Array2<f64>,
}

/// Encoder output: `[cells, dim]` features over an `side x side` grid.
#[derive(Debug, Clone)]
pub struct VisualFeatureMap {
    pub grid: Array2<f64>,
    pub side: usize,
    pub stride: usize,
}

/// Attention-pooled, unit-norm image feature.
#[derive(Debug, Clone)]
pub struct PooledImageFeature {
    pub vector: Array1<f64>,
    /// Head-averaged attention over cells (sums to one).
    pub attention: Array1<f64>,
}

/// Fusion output for one disease.
#[derive(Debug, Clone)]
pub struct GroundedOutput {
    /// `[query_positions, dim]` grounded features.
    pub features: Array2<f64>,
    /// `[side, side]` head- and query-averaged cross-attention map; rows of
    /// the underlying attention are softmax-normalized, so entries lie in
    /// `[0, 1]` and the map sums to one.
    pub heatmap: Array2<f64>,
    /// Per-query-position heatmaps, populated when configured.
    pub per_query_heatmaps: Option<Vec<Array2<f64>>>,
    /// Unit-norm predicted location embedding.
    pub location_embedding: Array1<f64>,
}

/// Output of a full forward pass over every disease in a query list.
#[derive(Debug, Clone)]
pub struct ForwardAllOutput {
    /// `[N, 2]` presence logits (column 1 = present).
    pub logits: Array2<f64>,
    pub heatmaps: Vec<Array2<f64>>,
    /// `[N, dim]` predicted location embeddings.
    pub location_embeddings: Array2<f64>,
    pub pooled: PooledImageFeature,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let params = init_params(&config);
        let text = TextEmbedder::new(config.text_seed, config.dim);
        Ok(Self { config, params, text })
    }

    /// Embed one description text (frozen tower).
    pub fn encode_text(&self, text: &str) -> Result<Array1<f64>, ModelError> {
        Ok(self.text.encode(text)?)
    }

    /// Build the query set for a disease from its KB texts, truncated to the
    /// configured number of query positions.
    pub fn query_set(&self, kb: &KnowledgeBase, entity: &str) -> Result<AspectQuerySet, ModelError> {
        let texts = kb
            .query_aspects(entity)
            .map_err(|_| ModelError::UnknownEntity(entity.to_string()))?;
        let take = self.config.query_positions.min(texts.len());
        let embeddings = self.text.encode_rows(&texts[..take])?;
        Ok(AspectQuerySet { disease: entity.to_string(), embeddings })
    }

    /// Embeddings of the templated location sentences, `[M, dim]`.
    pub fn location_table(&self, kb: &KnowledgeBase) -> Result<Array2<f64>, ModelError> {
        let mut table = Array2::<f64>::zeros((kb.locations.len(), self.config.dim));
        for (i, name) in kb.locations.iter().enumerate() {
            table.row_mut(i).assign(&self.text.encode_location(name)?);
        }
        Ok(table)
    }

    fn check_image(&self, image: &Array2<f64>) -> Result<(), ModelError> {
        let want = (self.config.image_size, self.config.image_size);
        if image.dim() != want {
            return Err(ModelError::ShapeMismatch {
                expected: format!("{want:?}"),
                got: format!("{:?}", image.dim()),
            });
        }
        Ok(())
    }

    /// Encode an image into its feature map (evaluation path).
    pub fn encode_image(&self, image: &Array2<f64>) -> Result<VisualFeatureMap, ModelError> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let bound = graph::bind(&mut tape, self, false);
        let cells = graph::encode_cells(&mut tape, &bound, image);
        Ok(VisualFeatureMap {
            grid: tape.value(cells).clone(),
            side: self.config.grid_side(),
            stride: self.config.stride(),
        })
    }

    /// Attention-pool a feature map into the contrastive head's image vector.
    pub fn attention_pool(&self, map: &VisualFeatureMap) -> Result<PooledImageFeature, ModelError> {
        if map.grid.dim() != (self.config.cells(), self.config.dim) {
            return Err(ModelError::ShapeMismatch {
                expected: format!("({}, {})", self.config.cells(), self.config.dim),
                got: format!("{:?}", map.grid.dim()),
            });
        }
        let mut tape = Tape::new();
        let bound = graph::bind(&mut tape, self, false);
        let cells = tape.constant(map.grid.clone());
        let pooled = graph::attention_pool(&mut tape, &bound, cells);
        Ok(graph::read_pooled(&tape, &pooled))
    }

    /// Ground one disease's query set in a feature map.
    pub fn ground(
        &self,
        queries: &AspectQuerySet,
        map: &VisualFeatureMap,
    ) -> Result<GroundedOutput, ModelError> {
        if queries.embeddings.ncols() != self.config.dim {
            return Err(ModelError::ShapeMismatch {
                expected: format!("query dim {}", self.config.dim),
                got: format!("{}", queries.embeddings.ncols()),
            });
        }
        let mut tape = Tape::new();
        let bound = graph::bind(&mut tape, self, false);
        let cells = tape.constant(map.grid.clone());
        let grounded = graph::ground(&mut tape, &bound, &queries.embeddings, cells, None);
        Ok(graph::read_grounded(&tape, &grounded, &self.config))
    }

    /// Apply the shared classifier to grounded features: two presence logits.
    pub fn classify(&self, features: &Array2<f64>) -> Result<[f64; 2], ModelError> {
        let expected = (self.config.query_positions, self.config.dim);
        if features.dim() != expected {
            return Err(ModelError::ShapeMismatch {
                expected: format!("{expected:?}"),
                got: format!("{:?}", features.dim()),
            });
        }
        let mut tape = Tape::new();
        let bound = graph::bind(&mut tape, self, false);
        let f = tape.constant(features.clone());
        let logits = graph::classify(&mut tape, &bound, f);
        let v = tape.value(logits);
        Ok([v[(0, 0)], v[(0, 1)]])
    }

    /// Full per-image pass over a list of query sets with shared weights.
    pub fn forward_all(
        &self,
        image: &Array2<f64>,
        query_sets: &[AspectQuerySet],
    ) -> Result<ForwardAllOutput, ModelError> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let bound = graph::bind(&mut tape, self, false);
        let cells = graph::encode_cells(&mut tape, &bound, image);
        let pooled = graph::attention_pool(&mut tape, &bound, cells);
        let kv = graph::precompute_kv(&mut tape, &bound, cells);

        let n = query_sets.len();
        let mut logits = Array2::<f64>::zeros((n, 2));
        let mut heatmaps = Vec::with_capacity(n);
        let mut locations = Array2::<f64>::zeros((n, self.config.dim));
        for (j, q) in query_sets.iter().enumerate() {
            let grounded = graph::ground(&mut tape, &bound, &q.embeddings, cells, Some(&kv));
            let lg = graph::classify(&mut tape, &bound, grounded.features);
            let v = tape.value(lg);
            logits[(j, 0)] = v[(0, 0)];
            logits[(j, 1)] = v[(0, 1)];
            let out = graph::read_grounded(&tape, &grounded, &self.config);
            heatmaps.push(out.heatmap);
            locations.row_mut(j).assign(&out.location_embedding);
        }
        Ok(ForwardAllOutput {
            logits,
            heatmaps,
            location_embeddings: locations,
            pooled: graph::read_pooled(&tape, &pooled),
        })
    }
}

fn init_params(config: &ModelConfig) -> ParamSet {
    let mut params = ParamSet::default();
    let d = config.dim;

    for (i, geom) in config.conv_geometries().iter().enumerate() {
        let fan_in = geom.in_c * geom.kernel * geom.kernel;
        params.insert(
            &format!("enc.conv{i}.w"),
            he_normal(config.init_seed, &format!("enc.conv{i}.w"), fan_in, geom.out_c),
        );
        params.insert(&format!("enc.conv{i}.b"), Array2::zeros((1, geom.out_c)));
    }

    if config.encoder_norm {
        params.insert("enc.norm.g", Array2::ones((1, d)));
        params.insert("enc.norm.b", Array2::zeros((1, d)));
    }
    params.insert(
        "pos.grid",
        gaussian(config.init_seed, "pos.grid", config.cells(), d, 0.5),
    );

    params.insert("pool.q_emb", Array2::zeros((1, d)));
    for name in ["pool.wq", "pool.wk", "pool.wv", "pool.wo"] {
        params.insert(name, xavier(config.init_seed, name, d, d));
    }
    for name in ["pool.bq", "pool.bk", "pool.bv", "pool.bo"] {
        params.insert(name, Array2::zeros((1, d)));
    }

    for l in 0..config.decoder_layers {
        params.insert(&format!("dec{l}.ln1.g"), Array2::ones((1, d)));
        params.insert(&format!("dec{l}.ln1.b"), Array2::zeros((1, d)));
        for suffix in ["wq", "wk", "wv", "wo"] {
            let name = format!("dec{l}.attn.{suffix}");
            params.insert(&name, xavier(config.init_seed, &name, d, d));
        }
        for suffix in ["bq", "bk", "bv", "bo"] {
            params.insert(&format!("dec{l}.attn.{suffix}"), Array2::zeros((1, d)));
        }
        params.insert(&format!("dec{l}.ln2.g"), Array2::ones((1, d)));
        params.insert(&format!("dec{l}.ln2.b"), Array2::zeros((1, d)));
        let w1 = format!("dec{l}.ffn.w1");
        params.insert(&w1, xavier(config.init_seed, &w1, d, config.ffn_dim));
        params.insert(&format!("dec{l}.ffn.b1"), Array2::zeros((1, config.ffn_dim)));
        let w2 = format!("dec{l}.ffn.w2");
        params.insert(&w2, xavier(config.init_seed, &w2, config.ffn_dim, d));
        params.insert(&format!("dec{l}.ffn.b2"), Array2::zeros((1, d)));
    }
    params.insert("dec.final_ln.g", Array2::ones((1, d)));
    params.insert("dec.final_ln.b", Array2::zeros((1, d)));

    params.insert("cls.w", xavier(config.init_seed, "cls.w", config.query_positions * d, 2));
    params.insert("cls.b", Array2::zeros((1, 2)));

    params.insert("loc.w", xavier(config.init_seed, "loc.w", d, d));
    params.insert("loc.b", Array2::zeros((1, d)));

    params
}

fn param_rng(seed: u64, name: &str) -> ChaCha20Rng {
    let mut z = seed ^ fnv1a_str(name);
    z = (z ^ (z >> 33)).wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    z = (z ^ (z >> 33)).wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    ChaCha20Rng::seed_from_u64(z ^ (z >> 33))
}

fn xavier(seed: u64, name: &str, rows: usize, cols: usize) -> Array2<f64> {
    let mut rng = param_rng(seed, name);
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a))
}

fn he_normal(seed: u64, name: &str, fan_in: usize, cols: usize) -> Array2<f64> {
    let mut rng = param_rng(seed, name);
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    Array2::from_shape_fn((fan_in, cols), |_| normal.sample(&mut rng))
}

fn gaussian(seed: u64, name: &str, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let mut rng = param_rng(seed, name);
    let normal = Normal::new(0.0, std).unwrap();
    Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng))
}
