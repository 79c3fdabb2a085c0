//! The multi-branch transformer: shared patch embedding, a pattern of
//! traditional and multi-branch encoder blocks, per-branch expert FFNs and
//! heads, and the ensembling of experts on the raw-signal stream.
//!
//! All streams of a batch (raw first, then one per band) are stacked
//! row-wise into a single token matrix so that shared layers run as one
//! matrix product. Attention is computed per `(stream, sample)` group, so
//! streams never mix.

mod checkpoint;
mod config;
mod params;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{BlockKind, EnsembleMode, ModelConfig};
pub use params::{ParamId, ParamStore};

use crate::diffcore::{DiffError, Graph, Scalar, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input shape mismatch: {0}")]
    Shape(String),
    #[error("expected {expected} band signals per window, got {got}")]
    BandCount { expected: usize, got: usize },
    #[error("unknown stream {0}")]
    UnknownStream(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Graph(#[from] DiffError),
}

#[derive(Clone, Debug)]
struct AttnIds {
    ln_g: ParamId,
    ln_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Debug)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct BlockIds {
    attn: AttnIds,
    ln2_g: ParamId,
    ln2_b: ParamId,
    /// One FFN for a traditional block, one expert per branch otherwise.
    ffns: Vec<FfnIds>,
    kind: BlockKind,
}

#[derive(Clone, Debug)]
struct Layout {
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    final_g: ParamId,
    final_b: ParamId,
    heads: Vec<(ParamId, ParamId)>,
    wavelet_w: Option<ParamId>,
    gate: Option<FfnIds>,
    concat: Option<(ParamId, ParamId)>,
}

/// Which stream a token block belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Raw,
    Band(usize),
}

/// One batch of windows, with optional band signals (`bands[sample][branch]`).
pub struct StreamBatch<'a, F> {
    pub raw: Vec<&'a Tensor<F>>,
    pub bands: Option<Vec<Vec<&'a Tensor<F>>>>,
}

/// Graph handles produced by a forward pass (all `batch x K` unless noted).
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub z_data: Var,
    /// Wavelet-branch logits, one per branch; empty without band inputs.
    pub z_branch: Vec<Var>,
    /// Pooled `batch x D` representations: raw first, then each band.
    pub reps: Vec<Var>,
    /// Per-sample gate weights (`batch x B`) in gate-network mode.
    pub gate: Option<Var>,
    /// The raw wavelet-attention vector `w` (`1 x B`).
    pub wavelet_w: Option<Var>,
    pub concat_logits: Option<Var>,
    /// Graph leaves for every parameter, in store order.
    pub params: Vec<Var>,
}

/// Forward results copied out of the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs {
    pub z_data: Vec<Vec<f64>>,
    pub z_branch: Vec<Vec<Vec<f64>>>,
    pub reps: Vec<Vec<Vec<f64>>>,
}

enum Weights {
    Uniform(usize),
    /// `1 x 1` pieces of softmax(w).
    Global(Vec<Var>),
    /// `rows x 1` per-sample pieces, one set for pooled rows and one for token rows.
    PerSample {
        pooled: Vec<Var>,
        tokens: Vec<Var>,
    },
}

pub struct MbmdModel<F: Scalar> {
    config: ModelConfig,
    params: ParamStore<F>,
    layout: Layout,
}

fn linear_init<F: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| F::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("shape product matches")
}

fn build_layout<F: Scalar>(cfg: &ModelConfig, rng: Option<&mut ChaCha8Rng>) -> (ParamStore<F>, Layout) {
    let d = cfg.embed_dim;
    let h = cfg.ffn_hidden;
    let k = cfg.num_classes;
    let mut fallback = ChaCha8Rng::seed_from_u64(0);
    let rng = rng.unwrap_or(&mut fallback);
    let mut ps = ParamStore::new();
    let zeros = |r: usize, c: usize| Tensor::<F>::zeros(&[r, c]);
    let ones = |c: usize| Tensor::<F>::full(&[1, c], F::one());

    let patch_w = ps.add("patch.w", linear_init(rng, cfg.patch_size, d));
    let patch_b = ps.add("patch.b", zeros(1, d));
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let pos_data = (0..cfg.tokens() * d).map(|_| F::lit(normal.sample(rng))).collect();
    let pos = ps.add("pos", Tensor::matrix(cfg.tokens(), d, pos_data).expect("shape"));

    let ffn = |ps: &mut ParamStore<F>, rng: &mut ChaCha8Rng, prefix: String| FfnIds {
        w1: ps.add(format!("{prefix}.w1"), linear_init(rng, d, h)),
        b1: ps.add(format!("{prefix}.b1"), zeros(1, h)),
        w2: ps.add(format!("{prefix}.w2"), linear_init(rng, h, d)),
        b2: ps.add(format!("{prefix}.b2"), zeros(1, d)),
    };

    let branches = cfg.branches();
    let mut blocks = Vec::new();
    for (i, kind) in cfg.blocks().into_iter().enumerate() {
        let p = format!("block{i}");
        let attn = AttnIds {
            ln_g: ps.add(format!("{p}.attn.ln.g"), ones(d)),
            ln_b: ps.add(format!("{p}.attn.ln.b"), zeros(1, d)),
            wq: ps.add(format!("{p}.attn.wq"), linear_init(rng, d, d)),
            bq: ps.add(format!("{p}.attn.bq"), zeros(1, d)),
            wk: ps.add(format!("{p}.attn.wk"), linear_init(rng, d, d)),
            bk: ps.add(format!("{p}.attn.bk"), zeros(1, d)),
            wv: ps.add(format!("{p}.attn.wv"), linear_init(rng, d, d)),
            bv: ps.add(format!("{p}.attn.bv"), zeros(1, d)),
            wo: ps.add(format!("{p}.attn.wo"), linear_init(rng, d, d)),
            bo: ps.add(format!("{p}.attn.bo"), zeros(1, d)),
        };
        let ln2_g = ps.add(format!("{p}.ffn.ln.g"), ones(d));
        let ln2_b = ps.add(format!("{p}.ffn.ln.b"), zeros(1, d));
        let ffns = match kind {
            BlockKind::Traditional => vec![ffn(&mut ps, rng, format!("{p}.ffn"))],
            BlockKind::MultiBranch => (0..branches).map(|b| ffn(&mut ps, rng, format!("{p}.expert{b}"))).collect(),
        };
        blocks.push(BlockIds { attn, ln2_g, ln2_b, ffns, kind });
    }
    let final_g = ps.add("final.ln.g", ones(d));
    let final_b = ps.add("final.ln.b", zeros(1, d));
    let heads = (0..branches.max(1))
        .map(|b| (ps.add(format!("head{b}.w"), linear_init(rng, d, k)), ps.add(format!("head{b}.b"), zeros(1, k))))
        .collect();
    let mut wavelet_w = None;
    let mut gate = None;
    if branches > 0 {
        match cfg.ensemble_mode {
            EnsembleMode::WaveletAttention => wavelet_w = Some(ps.add("wavelet.w", zeros(1, branches))),
            EnsembleMode::GateNetwork => {
                let gh = cfg.gate_hidden();
                gate = Some(FfnIds {
                    w1: ps.add("gate.w1", linear_init(rng, d, gh)),
                    b1: ps.add("gate.b1", zeros(1, gh)),
                    // zero output layer: uniform weights at initialisation
                    w2: ps.add("gate.w2", zeros(gh, branches)),
                    b2: ps.add("gate.b2", zeros(1, branches)),
                });
            }
            EnsembleMode::Average => {}
        }
    }
    let concat = (cfg.concat_head && branches > 0).then(|| {
        let width = (branches + 1) * d;
        (ps.add("concat.w", linear_init(rng, width, k)), ps.add("concat.b", zeros(1, k)))
    });
    (ps, Layout { patch_w, patch_b, pos, blocks, final_g, final_b, heads, wavelet_w, gate, concat })
}

impl<F: Scalar> MbmdModel<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, layout) = build_layout(&config, Some(&mut rng));
        Ok(Self { config, params, layout })
    }

    /// Rebuilds a model around an existing parameter store, checking that
    /// names and shapes match the config.
    pub fn from_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self, ModelError> {
        config.validate()?;
        let (template, layout) = build_layout::<F>(&config, None);
        if template.names() != params.names() {
            return Err(ModelError::Checkpoint(format!(
                "parameter names do not match config ({} vs {} tensors)",
                params.len(),
                template.len()
            )));
        }
        for ((name, a), b) in template.iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(ModelError::Checkpoint(format!("{name}: shape {:?}, config expects {:?}", b.shape(), a.shape())));
            }
        }
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn cast<G: Scalar>(&self) -> MbmdModel<G> {
        MbmdModel { config: self.config.clone(), params: self.params.cast(), layout: self.layout.clone() }
    }

    /// The normalised wavelet-attention weights, when the model has them.
    pub fn wavelet_weights(&self) -> Option<Vec<f64>> {
        self.layout.wavelet_w.map(|id| crate::losses::softmax(&self.params.get(id).to_f64_vec()))
    }

    /// Parameter names touched by one stream. Traditional blocks and the
    /// embedding are shared; multi-branch blocks route a band stream to its
    /// own expert.
    pub fn stream_param_names(&self, stream: Stream) -> Result<Vec<String>, ModelError> {
        let branches = self.config.branches();
        if let Stream::Band(b) = stream {
            if b >= branches {
                return Err(ModelError::UnknownStream(b));
            }
        }
        let mut out = vec!["patch.w".to_string(), "patch.b".into(), "pos".into()];
        for block in &self.layout.blocks {
            for id in [
                block.attn.ln_g,
                block.attn.ln_b,
                block.attn.wq,
                block.attn.bq,
                block.attn.wk,
                block.attn.bk,
                block.attn.wv,
                block.attn.bv,
                block.attn.wo,
                block.attn.bo,
                block.ln2_g,
                block.ln2_b,
            ] {
                out.push(self.params.name(id).to_string());
            }
            let experts: Vec<usize> = match (block.kind, stream) {
                (BlockKind::Traditional, _) => vec![0],
                (BlockKind::MultiBranch, Stream::Raw) => (0..branches).collect(),
                (BlockKind::MultiBranch, Stream::Band(b)) => vec![b],
            };
            for e in experts {
                let f = &block.ffns[e];
                for id in [f.w1, f.b1, f.w2, f.b2] {
                    out.push(self.params.name(id).to_string());
                }
            }
        }
        Ok(out)
    }

    fn bind(&self, g: &mut Graph<F>) -> Result<Vec<Var>, ModelError> {
        Ok(self.params.tensors().iter().map(|t| g.param(t.clone())).collect::<Result<_, _>>()?)
    }

    /// Appends the forward pass for a batch to `g`. With band inputs every
    /// stream is computed; without, only the raw stream (inference path).
    pub fn forward(&self, g: &mut Graph<F>, batch: &StreamBatch<'_, F>) -> Result<ForwardVars, ModelError> {
        let params = self.bind(g)?;
        self.forward_with_params(g, batch, params)
    }

    /// Forward pass over caller-bound parameter leaves (one per store entry).
    pub fn forward_with_params(&self, g: &mut Graph<F>, batch: &StreamBatch<'_, F>, params: Vec<Var>) -> Result<ForwardVars, ModelError> {
        if params.len() != self.params.len() {
            return Err(ModelError::Shape(format!("{} parameter vars for {} tensors", params.len(), self.params.len())));
        }
        let cfg = &self.config;
        let lay = &self.layout;
        let p = |id: ParamId| params[id.0];
        let n = batch.raw.len();
        if n == 0 {
            return Err(ModelError::Shape("empty batch".into()));
        }
        let t = cfg.tokens();
        let branches = cfg.branches();
        let want = [cfg.channels, cfg.window_len];
        for w in &batch.raw {
            if w.shape() != want {
                return Err(ModelError::Shape(format!("window shape {:?}, model expects {want:?}", w.shape())));
            }
        }
        let band_inputs = match (&batch.bands, branches) {
            (Some(bands), b) if b > 0 => {
                if bands.len() != n {
                    return Err(ModelError::Shape(format!("{} band sets for {n} windows", bands.len())));
                }
                for set in bands {
                    if set.len() != b {
                        return Err(ModelError::BandCount { expected: b, got: set.len() });
                    }
                    if let Some(bad) = set.iter().find(|s| s.shape() != want) {
                        return Err(ModelError::Shape(format!("band shape {:?}, expected {want:?}", bad.shape())));
                    }
                }
                Some(bands)
            }
            _ => None,
        };
        let streams = 1 + if band_inputs.is_some() { branches } else { 0 };
        let raw_rows = n * t;
        let rows = streams * raw_rows;

        // patchify: a C x L row-major window is already (C * L / P) x P tokens
        let mut tok = Vec::with_capacity(rows * cfg.patch_size);
        for w in &batch.raw {
            tok.extend_from_slice(w.data());
        }
        if let Some(bands) = band_inputs {
            for b in 0..branches {
                for set in bands.iter() {
                    tok.extend_from_slice(set[b].data());
                }
            }
        }
        let tokens = g.input(Tensor::matrix(rows, cfg.patch_size, tok)?)?;
        let emb = g.linear(tokens, p(lay.patch_w), p(lay.patch_b))?;
        let pos_index: Vec<usize> = (0..rows).map(|r| r % t).collect();
        let pos = g.gather_rows(p(lay.pos), &pos_index)?;
        let mut x = g.add(emb, pos)?;

        let mut wavelet_w = None;
        let mut gate = None;
        let weights = if branches == 0 {
            Weights::Uniform(1)
        } else {
            match cfg.ensemble_mode {
                EnsembleMode::Average => Weights::Uniform(branches),
                EnsembleMode::WaveletAttention => {
                    let w = p(lay.wavelet_w.expect("wavelet vector present"));
                    wavelet_w = Some(w);
                    let sw = g.softmax(w)?;
                    Weights::Global(g.split(sw, 1, &vec![1; branches])?)
                }
                EnsembleMode::GateNetwork => {
                    let ids = lay.gate.as_ref().expect("gate params present");
                    let raw_emb = g.slice(x, 0, 0, raw_rows)?;
                    let pooled = g.mean_groups(raw_emb, t)?;
                    let hid = g.linear(pooled, p(ids.w1), p(ids.b1))?;
                    let hid = g.gelu(hid)?;
                    let logits = g.linear(hid, p(ids.w2), p(ids.b2))?;
                    let gw = g.softmax(logits)?;
                    gate = Some(gw);
                    let pooled_pieces = g.split(gw, 1, &vec![1; branches])?;
                    let expand: Vec<usize> = (0..raw_rows).map(|r| r / t).collect();
                    let token_pieces = pooled_pieces.iter().map(|&piece| g.gather_rows(piece, &expand)).collect::<Result<_, _>>()?;
                    Weights::PerSample { pooled: pooled_pieces, tokens: token_pieces }
                }
            }
        };

        for block in &lay.blocks {
            x = self.attention_sublayer(g, x, &block.attn, &p, streams * n)?;
            let h = g.layer_norm(x, p(block.ln2_g), p(block.ln2_b))?;
            let f = match block.kind {
                BlockKind::Traditional => self.ffn(g, h, &block.ffns[0], &p)?,
                BlockKind::MultiBranch => {
                    let sizes = vec![raw_rows; streams];
                    let parts = if streams > 1 { g.split(h, 0, &sizes)? } else { vec![h] };
                    let mut outs = Vec::with_capacity(streams);
                    let expert_outs = block.ffns.iter().map(|e| self.ffn(g, parts[0], e, &p)).collect::<Result<Vec<_>, _>>()?;
                    outs.push(weighted_sum(g, &expert_outs, &weights, true)?);
                    for (b, &part) in parts.iter().enumerate().skip(1) {
                        outs.push(self.ffn(g, part, &block.ffns[b - 1], &p)?);
                    }
                    if outs.len() > 1 {
                        g.concat(&outs, 0)?
                    } else {
                        outs[0]
                    }
                }
            };
            let f = g.dropout(f, cfg.dropout)?;
            x = g.add(x, f)?;
        }

        let x = g.layer_norm(x, p(lay.final_g), p(lay.final_b))?;
        let pooled = g.mean_groups(x, t)?;
        let reps = if streams > 1 { g.split(pooled, 0, &vec![n; streams])? } else { vec![pooled] };

        let z_data = if branches == 0 {
            let (w, b) = lay.heads[0];
            g.linear(reps[0], p(w), p(b))?
        } else {
            let outs = lay.heads.iter().map(|&(w, b)| g.linear(reps[0], p(w), p(b))).collect::<Result<Vec<_>, _>>()?;
            weighted_sum(g, &outs, &weights, false)?
        };
        let z_branch = reps.iter().skip(1).zip(&lay.heads).map(|(&r, &(w, b))| g.linear(r, p(w), p(b))).collect::<Result<Vec<_>, _>>()?;
        let concat_logits = match (lay.concat, streams > 1) {
            (Some((w, b)), true) => {
                let cat = g.concat(&reps, 1)?;
                Some(g.linear(cat, p(w), p(b))?)
            }
            _ => None,
        };
        Ok(ForwardVars { z_data, z_branch, reps, gate, wavelet_w, concat_logits, params })
    }

    fn attention_sublayer(
        &self,
        g: &mut Graph<F>,
        x: Var,
        ids: &AttnIds,
        p: &impl Fn(ParamId) -> Var,
        groups: usize,
    ) -> Result<Var, ModelError> {
        let h = g.layer_norm(x, p(ids.ln_g), p(ids.ln_b))?;
        let q = g.linear(h, p(ids.wq), p(ids.bq))?;
        let k = g.linear(h, p(ids.wk), p(ids.bk))?;
        let v = g.linear(h, p(ids.wv), p(ids.bv))?;
        let a = g.attention(q, k, v, groups, self.config.num_heads, self.config.dropout)?;
        let o = g.linear(a, p(ids.wo), p(ids.bo))?;
        Ok(g.add(x, o)?)
    }

    fn ffn(&self, g: &mut Graph<F>, h: Var, ids: &FfnIds, p: &impl Fn(ParamId) -> Var) -> Result<Var, ModelError> {
        let a = g.linear(h, p(ids.w1), p(ids.b1))?;
        let a = g.gelu(a)?;
        Ok(g.linear(a, p(ids.w2), p(ids.b2))?)
    }

    /// Training-mode forward over raw windows and their band signals.
    pub fn forward_train(&self, g: &mut Graph<F>, raw: &[&Tensor<F>], bands: &[Vec<&Tensor<F>>]) -> Result<ForwardVars, ModelError> {
        let batch = StreamBatch { raw: raw.to_vec(), bands: Some(bands.to_vec()) };
        self.forward(g, &batch)
    }

    /// Raw-only inference; returns `batch x K` logits.
    pub fn forward_infer(&self, raw: &[&Tensor<F>]) -> Result<Tensor<F>, ModelError> {
        let mut g = Graph::new();
        let batch = StreamBatch { raw: raw.to_vec(), bands: None };
        let out = self.forward(&mut g, &batch)?;
        Ok(g.value(out.z_data).clone())
    }

    /// Copies every output of a forward pass into plain vectors.
    pub fn outputs(g: &Graph<F>, vars: &ForwardVars) -> ForwardOutputs {
        let rows = |v: Var| -> Vec<Vec<f64>> {
            let t = g.value(v);
            (0..t.rows()).map(|r| t.row_slice(r).iter().map(|x| x.as_f64()).collect()).collect()
        };
        ForwardOutputs {
            z_data: rows(vars.z_data),
            z_branch: vars.z_branch.iter().map(|&v| rows(v)).collect(),
            reps: vars.reps.iter().map(|&v| rows(v)).collect(),
        }
    }
}

/// `sum_b weight_b * outs[b]`. `token_rows` selects the per-token expansion of
/// per-sample gate weights.
fn weighted_sum<F: Scalar>(g: &mut Graph<F>, outs: &[Var], weights: &Weights, token_rows: bool) -> Result<Var, DiffError> {
    match weights {
        Weights::Uniform(b) => {
            let mut acc = outs[0];
            for &o in &outs[1..] {
                acc = g.add(acc, o)?;
            }
            if *b > 1 {
                acc = g.scale(acc, F::one() / F::lit(*b as f64))?;
            }
            Ok(acc)
        }
        Weights::Global(pieces) => {
            let mut acc = g.mul(outs[0], pieces[0])?;
            for (&o, &w) in outs.iter().zip(pieces).skip(1) {
                let term = g.mul(o, w)?;
                acc = g.add(acc, term)?;
            }
            Ok(acc)
        }
        Weights::PerSample { pooled, tokens } => {
            let pieces = if token_rows { tokens } else { pooled };
            let mut acc = g.mul(outs[0], pieces[0])?;
            for (&o, &w) in outs.iter().zip(pieces).skip(1) {
                let term = g.mul(o, w)?;
                acc = g.add(acc, term)?;
            }
            Ok(acc)
        }
    }
}

/// Splits a `C x L` window into `(C * L / P) x P` tokens, channel-major.
pub fn patchify<F: Scalar>(window: &Tensor<F>, patch: usize) -> Result<Tensor<F>, ModelError> {
    let (c, l) = window.dims2().ok_or_else(|| ModelError::Shape(format!("window must be C x L, got {:?}", window.shape())))?;
    if patch == 0 || l % patch != 0 {
        return Err(ModelError::Shape(format!("window length {l} not divisible by patch size {patch}")));
    }
    Ok(Tensor::matrix(c * l / patch, patch, window.data().to_vec())?)
}

#[cfg(test)]
mod tests;
