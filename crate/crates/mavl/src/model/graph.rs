//! Tape-level network graph. Training and evaluation share these builders;
//! evaluation binds the parameters as constants and never calls backward.

use std::cell::RefCell;
use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{GroundedOutput, Model, ModelConfig, PooledImageFeature};
use crate::autodiff::{Tape, Var};

/// Parameter vars for one forward pass, plus optional seeded dropout state.
pub struct BoundParams<'m> {
    pub model: &'m Model,
    vars: HashMap<String, Var>,
    dropout: Option<RefCell<ChaCha20Rng>>,
}

impl<'m> BoundParams<'m> {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not bound"))
    }

    /// Iterate `(name, var)` in registration order.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.model
            .params
            .names()
            .map(|n| (n.clone(), self.vars[n]))
            .collect()
    }
}

/// Bind every parameter onto the tape. `trainable` controls whether
/// gradients flow; dropout stays off.
pub fn bind<'m>(tape: &mut Tape, model: &'m Model, trainable: bool) -> BoundParams<'m> {
    bind_with_dropout(tape, model, trainable, None)
}

/// Bind parameters with seeded dropout enabled when `dropout_seed` is set
/// and the configured rate is positive.
pub fn bind_with_dropout<'m>(
    tape: &mut Tape,
    model: &'m Model,
    trainable: bool,
    dropout_seed: Option<u64>,
) -> BoundParams<'m> {
    let mut vars = HashMap::new();
    for (name, value) in model.params.iter() {
        vars.insert(name.clone(), tape.leaf_shared(value.clone(), trainable));
    }
    let dropout = match dropout_seed {
        Some(seed) if model.config.dropout > 0.0 => {
            Some(RefCell::new(ChaCha20Rng::seed_from_u64(seed)))
        }
        _ => None,
    };
    BoundParams { model, vars, dropout }
}

fn maybe_dropout(tape: &mut Tape, bound: &BoundParams, x: Var) -> Var {
    let Some(rng) = &bound.dropout else { return x };
    let p = bound.model.config.dropout;
    let keep = 1.0 - p;
    let mut rng = rng.borrow_mut();
    let mask = Array2::from_shape_fn(tape.value(x).dim(), |_| {
        if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }
    });
    let mask = tape.constant(mask);
    tape.mul(x, mask)
}

/// Run the conv stack: image `[H, W]` to cell features `[cells, dim]`.
pub fn encode_cells(tape: &mut Tape, bound: &BoundParams, image: &Array2<f64>) -> Var {
    let cfg = &bound.model.config;
    let flat = Array2::from_shape_vec(
        (cfg.image_size * cfg.image_size, 1),
        image.iter().cloned().collect(),
    )
    .expect("image reshapes to cells");
    let mut x = tape.constant(flat);
    for (i, geom) in cfg.conv_geometries().iter().enumerate() {
        let w = bound.var(&format!("enc.conv{i}.w"));
        let b = bound.var(&format!("enc.conv{i}.b"));
        let conv = tape.conv2d(x, w, b, *geom);
        x = tape.relu(conv);
    }
    if cfg.encoder_norm {
        let g = bound.var("enc.norm.g");
        let b = bound.var("enc.norm.b");
        x = tape.layer_norm_rows(x, g, b, 1e-5);
    }
    x
}

/// Multi-head scaled-dot-product attention from `queries` onto `(k, v)`.
struct MhaOut {
    out: Var,
    /// Per-head softmax attention, each `[rows(queries), cells]`.
    attn: Vec<Var>,
}

#[allow(clippy::too_many_arguments)]
fn mha(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    queries: Var,
    k_full: Var,
    v_full: Var,
) -> MhaOut {
    let cfg = &bound.model.config;
    let dh = cfg.dim / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let wq = bound.var(&format!("{prefix}.wq"));
    let bq = bound.var(&format!("{prefix}.bq"));
    let q_full = tape.linear(queries, wq, bq);

    let mut ctx_heads = Vec::with_capacity(cfg.heads);
    let mut attn_heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q_full, h * dh, dh);
        let kh = tape.slice_cols(k_full, h * dh, dh);
        let vh = tape.slice_cols(v_full, h * dh, dh);
        let kt = tape.transpose(kh);
        let raw = tape.matmul(qh, kt);
        let scaled = tape.scale(raw, scale);
        let attn = tape.softmax_rows(scaled);
        attn_heads.push(attn);
        ctx_heads.push(tape.matmul(attn, vh));
    }
    let ctx = tape.concat_cols(&ctx_heads);
    let wo = bound.var(&format!("{prefix}.wo"));
    let bo = bound.var(&format!("{prefix}.bo"));
    let out = tape.linear(ctx, wo, bo);
    MhaOut { out, attn: attn_heads }
}

fn project_kv(tape: &mut Tape, bound: &BoundParams, prefix: &str, memory: Var) -> (Var, Var) {
    let wk = bound.var(&format!("{prefix}.wk"));
    let bk = bound.var(&format!("{prefix}.bk"));
    let wv = bound.var(&format!("{prefix}.wv"));
    let bv = bound.var(&format!("{prefix}.bv"));
    (tape.linear(memory, wk, bk), tape.linear(memory, wv, bv))
}

/// Feature-map cells with positional embeddings applied (when enabled).
fn memory(tape: &mut Tape, bound: &BoundParams, cells: Var) -> Var {
    if bound.model.config.positional_embeddings {
        let pos = bound.var("pos.grid");
        tape.add(cells, pos)
    } else {
        cells
    }
}

/// Attention-pool vars: the unit-norm pooled vector and per-head attention.
pub struct PooledVars {
    pub feature: Var,
    pub attn: Vec<Var>,
}

/// CLIP-style attention pooling: one query (mean cell + learned embedding)
/// attends over all cells; output projected and L2-normalized.
pub fn attention_pool(tape: &mut Tape, bound: &BoundParams, cells: Var) -> PooledVars {
    let mem = memory(tape, bound, cells);
    let mean = tape.mean_rows(cells);
    let q_emb = bound.var("pool.q_emb");
    let q_in = tape.add(mean, q_emb);
    let (k, v) = project_kv(tape, bound, "pool", mem);
    let MhaOut { out, attn } = mha(tape, bound, "pool", q_in, k, v);
    let feature = tape.l2_normalize_rows(out);
    PooledVars { feature, attn }
}

/// Per-layer (K, V) projections shared by every disease in one image pass.
pub struct PrecomputedKv {
    layers: Vec<(Var, Var)>,
}

pub fn precompute_kv(tape: &mut Tape, bound: &BoundParams, cells: Var) -> PrecomputedKv {
    let mem = memory(tape, bound, cells);
    let layers = (0..bound.model.config.decoder_layers)
        .map(|l| project_kv(tape, bound, &format!("dec{l}.attn"), mem))
        .collect();
    PrecomputedKv { layers }
}

/// Fusion output vars for one disease.
pub struct GroundedVars {
    pub features: Var,
    /// Per-layer, per-head cross-attention, each `[queries, cells]`.
    pub attn_layers: Vec<Vec<Var>>,
    pub location: Var,
}

impl GroundedVars {
    /// Final-layer attention heads (the heatmap source).
    pub fn final_attn(&self) -> &[Var] {
        self.attn_layers.last().expect("at least one decoder layer")
    }
}

/// Ground a query set in the feature map with the transformer-decoder stack:
/// pre-norm cross-attention and feed-forward sublayers with residuals, then
/// a final layer norm. No self-attention: the query set is unordered.
pub fn ground(
    tape: &mut Tape,
    bound: &BoundParams,
    queries: &Array2<f64>,
    cells: Var,
    kv: Option<&PrecomputedKv>,
) -> GroundedVars {
    let cfg = &bound.model.config;
    let mut x = tape.constant(queries.clone());
    let mut attn_layers = Vec::new();
    let local_kv;
    let kv = match kv {
        Some(kv) => kv,
        None => {
            local_kv = precompute_kv(tape, bound, cells);
            &local_kv
        }
    };

    for l in 0..cfg.decoder_layers {
        let g1 = bound.var(&format!("dec{l}.ln1.g"));
        let b1 = bound.var(&format!("dec{l}.ln1.b"));
        let qn = tape.layer_norm_rows(x, g1, b1, 1e-5);
        let (k, v) = kv.layers[l];
        let MhaOut { out, attn } = mha(tape, bound, &format!("dec{l}.attn"), qn, k, v);
        attn_layers.push(attn);
        let out = maybe_dropout(tape, bound, out);
        x = tape.add(x, out);

        let g2 = bound.var(&format!("dec{l}.ln2.g"));
        let b2 = bound.var(&format!("dec{l}.ln2.b"));
        let fed = tape.layer_norm_rows(x, g2, b2, 1e-5);
        let w1 = bound.var(&format!("dec{l}.ffn.w1"));
        let b1f = bound.var(&format!("dec{l}.ffn.b1"));
        let h = tape.linear(fed, w1, b1f);
        let h = tape.relu(h);
        let w2 = bound.var(&format!("dec{l}.ffn.w2"));
        let b2f = bound.var(&format!("dec{l}.ffn.b2"));
        let ff = tape.linear(h, w2, b2f);
        let ff = maybe_dropout(tape, bound, ff);
        x = tape.add(x, ff);
    }

    let gf = bound.var("dec.final_ln.g");
    let bf = bound.var("dec.final_ln.b");
    let features = tape.layer_norm_rows(x, gf, bf, 1e-5);

    let mean = tape.mean_rows(features);
    let lw = bound.var("loc.w");
    let lb = bound.var("loc.b");
    let proj = tape.linear(mean, lw, lb);
    let location = tape.l2_normalize_rows(proj);

    GroundedVars { features, attn_layers, location }
}

/// Shared two-way classifier over flattened grounded features.
pub fn classify(tape: &mut Tape, bound: &BoundParams, features: Var) -> Var {
    let cfg = &bound.model.config;
    let flat = tape.reshape(features, 1, cfg.query_positions * cfg.dim);
    let w = bound.var("cls.w");
    let xw = tape.matmul(flat, w);
    if cfg.classifier_bias {
        let b = bound.var("cls.b");
        tape.add_row(xw, b)
    } else {
        xw
    }
}

/// Materialize pooled-feature values off the tape.
pub fn read_pooled(tape: &Tape, pooled: &PooledVars) -> PooledImageFeature {
    let vector = Array1::from_iter(tape.value(pooled.feature).row(0).iter().cloned());
    let cells = tape.value(pooled.attn[0]).ncols();
    let mut attention = Array1::<f64>::zeros(cells);
    for &a in &pooled.attn {
        attention += &Array1::from_iter(tape.value(a).row(0).iter().cloned());
    }
    attention /= pooled.attn.len() as f64;
    PooledImageFeature { vector, attention }
}

/// Materialize grounded-output values off the tape, averaging the final
/// cross-attention over heads (and over query positions for the main map).
pub fn read_grounded(tape: &Tape, grounded: &GroundedVars, cfg: &ModelConfig) -> GroundedOutput {
    let side = cfg.grid_side();
    let cells = side * side;
    let final_attn = grounded.final_attn();
    let queries = tape.value(final_attn[0]).nrows();

    let mut head_mean = Array2::<f64>::zeros((queries, cells));
    for &a in final_attn {
        head_mean += tape.value(a);
    }
    head_mean /= final_attn.len() as f64;

    let flat = head_mean.mean_axis(ndarray::Axis(0)).expect("non-empty queries");
    let heatmap = Array2::from_shape_vec((side, side), flat.to_vec()).expect("cells fit grid");

    let per_query_heatmaps = cfg.per_aspect_heatmaps.then(|| {
        (0..queries)
            .map(|q| {
                Array2::from_shape_vec((side, side), head_mean.row(q).to_vec())
                    .expect("cells fit grid")
            })
            .collect()
    });

    GroundedOutput {
        features: tape.value(grounded.features).clone(),
        heatmap,
        per_query_heatmaps,
        location_embedding: Array1::from_iter(tape.value(grounded.location).row(0).iter().cloned()),
    }
}
