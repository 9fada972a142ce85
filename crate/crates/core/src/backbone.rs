//! Small pre-norm decoder-only transformer over hybrid sequences.
//!
//! Computation happens inside a [`Session`], which owns a tape and the
//! per-layer key/value rows of every position processed so far. Feeding a
//! sequence in one block or in several consecutive blocks gives the same
//! values, which is what lets latent states be generated one position at a
//! time while the whole chain stays on a single differentiable tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interleave::HybridElement;
use crate::ospe::{rotate_rows, FrequencyBasis, PositionPlan, DEFAULT_BASE};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

const LN_EPS: f64 = 1e-5;
pub const INIT_TAU: f64 = 0.07;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub feature_dim_visual: usize,
    pub feature_dim_audio: usize,
    pub max_sequence: usize,
    pub rope_base: f64,
    /// When false, positions are rotated by their integer index instead of
    /// their planned timestamp.
    pub ospe: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            dim: 64,
            ff_dim: 256,
            vocab_size: 64,
            feature_dim_visual: 16,
            feature_dim_audio: 16,
            max_sequence: 512,
            rope_base: DEFAULT_BASE,
            ospe: true,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("dim", self.dim),
            ("ff_dim", self.ff_dim),
            ("feature_dim_visual", self.feature_dim_visual),
            ("feature_dim_audio", self.feature_dim_audio),
            ("max_sequence", self.max_sequence),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Contract(format!("model {name} must be positive")));
        }
        if !self.dim.is_multiple_of(2 * self.heads) {
            return Err(Error::Contract(format!(
                "dim {} must be divisible by 2*heads = {}",
                self.dim,
                2 * self.heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Contract(format!("vocab_size {} < 4", self.vocab_size)));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Contract("init_std must be positive".into()));
        }
        FrequencyBasis::new(self.head_dim(), self.rope_base)?;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIds {
    ln1_gain: usize,
    ln1_bias: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_gain: usize,
    ln2_bias: usize,
    ff_in: usize,
    ff_in_bias: usize,
    ff_out: usize,
    ff_out_bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct ParamIds {
    token_embedding: usize,
    visual_projection: usize,
    audio_projection: usize,
    layers: Vec<LayerIds>,
    final_gain: usize,
    final_bias: usize,
    head: usize,
    head_bias: usize,
    log_tau: usize,
}

/// Every trainable tensor of the model, in a fixed manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    params: Vec<Parameter>,
    ids: ParamIds,
}

struct Builder<'a> {
    params: Vec<Parameter>,
    rng: &'a mut ChaCha8Rng,
    normal: Normal<f64>,
}

impl Builder<'_> {
    fn add(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Parameter { name, value });
        self.params.len() - 1
    }

    fn random(&mut self, name: String, shape: &[usize]) -> usize {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = self.normal.sample(self.rng);
        }
        self.add(name, t)
    }

    fn fill(&mut self, name: String, shape: &[usize], value: f64) -> usize {
        self.add(name, Tensor::filled(shape, value))
    }
}

impl ModelState {
    /// Seeded initialisation: weights ~ N(0, init_std²), norm gains 1,
    /// biases 0, temperature 0.07.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Contract(e.to_string()))?;
        let mut b = Builder {
            params: Vec::new(),
            rng: &mut rng,
            normal,
        };
        let (d, v, f) = (config.dim, config.vocab_size, config.ff_dim);
        let token_embedding = b.random("embed.tokens".into(), &[v, d]);
        let visual_projection = b.random("proj.visual".into(), &[config.feature_dim_visual, d]);
        let audio_projection = b.random("proj.audio".into(), &[config.feature_dim_audio, d]);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerIds {
                ln1_gain: b.fill(p("ln1.gain"), &[1, d], 1.0),
                ln1_bias: b.fill(p("ln1.bias"), &[1, d], 0.0),
                wq: b.random(p("attn.wq"), &[d, d]),
                wk: b.random(p("attn.wk"), &[d, d]),
                wv: b.random(p("attn.wv"), &[d, d]),
                wo: b.random(p("attn.wo"), &[d, d]),
                ln2_gain: b.fill(p("ln2.gain"), &[1, d], 1.0),
                ln2_bias: b.fill(p("ln2.bias"), &[1, d], 0.0),
                ff_in: b.random(p("ff.w_in"), &[d, f]),
                ff_in_bias: b.fill(p("ff.b_in"), &[1, f], 0.0),
                ff_out: b.random(p("ff.w_out"), &[f, d]),
                ff_out_bias: b.fill(p("ff.b_out"), &[1, d], 0.0),
            });
        }
        let final_gain = b.fill("final_norm.gain".into(), &[1, d], 1.0);
        let final_bias = b.fill("final_norm.bias".into(), &[1, d], 0.0);
        let head = b.random("head.weight".into(), &[d, v]);
        let head_bias = b.fill("head.bias".into(), &[1, v], 0.0);
        let log_tau = b.fill("sync.log_tau".into(), &[1, 1], INIT_TAU.ln());
        let ids = ParamIds {
            token_embedding,
            visual_projection,
            audio_projection,
            layers,
            final_gain,
            final_bias,
            head,
            head_bias,
            log_tau,
        };
        Ok(Self {
            config,
            params: b.params,
            ids,
        })
    }

    /// Rebuilds a model from a manifest of named tensors, checking that the
    /// names and shapes match what `config` produces.
    pub fn from_parameters(config: ModelConfig, params: Vec<Parameter>) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (slot, p) in model.params.iter_mut().zip(params) {
            if slot.name != p.name || slot.value.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    slot.name,
                    slot.value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            *slot = p;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    pub fn log_tau(&self) -> f64 {
        self.params[self.ids.log_tau].value.item()
    }

    pub fn token_embedding(&self) -> &Tensor {
        &self.params[self.ids.token_embedding].value
    }

    pub fn token_embedding_mut(&mut self) -> &mut Tensor {
        let i = self.ids.token_embedding;
        &mut self.params[i].value
    }

    pub fn head_bias_mut(&mut self) -> &mut Tensor {
        let i = self.ids.head_bias;
        &mut self.params[i].value
    }

    pub fn visual_projection(&self) -> &Tensor {
        &self.params[self.ids.visual_projection].value
    }

    pub fn audio_projection(&self) -> &Tensor {
        &self.params[self.ids.audio_projection].value
    }

    /// Projects raw feature rows into the model's input space (no tape).
    pub fn project(&self, modality: crate::anchors::Modality, features: &Tensor) -> Result<Tensor> {
        let w = match modality {
            crate::anchors::Modality::Visual => self.visual_projection(),
            crate::anchors::Modality::Audio => self.audio_projection(),
        };
        if features.dims2().1 != w.dims2().0 {
            return Err(Error::shape("project", features.shape(), w.shape()));
        }
        tensor::matmul(features, w)
    }

    /// Input embedding of one element, outside of any tape.
    pub fn embed_element(&self, element: &HybridElement) -> Result<Vec<f64>> {
        use crate::anchors::Modality;
        let d = self.config.dim;
        match element {
            HybridElement::Text(id) => self.token_row(*id as usize),
            HybridElement::Trigger => self.token_row(crate::vocab::TRIGGER as usize),
            HybridElement::Stop => self.token_row(crate::vocab::STOP as usize),
            HybridElement::Latent(z) => {
                if z.len() != d {
                    return Err(Error::shape("embed_element", &[z.len()], &[d]));
                }
                Ok(z.clone())
            }
            HybridElement::Visual(f) => Ok(self
                .project(Modality::Visual, &Tensor::row(f.clone()))?
                .into_data()),
            HybridElement::Audio(f) => Ok(self
                .project(Modality::Audio, &Tensor::row(f.clone()))?
                .into_data()),
        }
    }

    fn token_row(&self, id: usize) -> Result<Vec<f64>> {
        let table = self.token_embedding();
        if id >= self.config.vocab_size {
            return Err(Error::Data(format!(
                "token id {id} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(table.row_slice(id).to_vec())
    }
}

/// Output of a forward pass over one block of positions.
pub struct Chunk {
    pub hidden: Var,
    pub logits: Var,
    /// `attention[layer][head]`: rows are the block's positions, columns
    /// every position seen so far.
    pub attention: Vec<Vec<Var>>,
}

struct LayerCache {
    keys: Option<Var>,
    values: Option<Var>,
}

/// One tape plus the key/value history of the positions fed so far.
pub struct Session<'m> {
    model: &'m ModelState,
    tape: Tape,
    params: Vec<Var>,
    cache: Vec<LayerCache>,
    positions: usize,
    basis: FrequencyBasis,
}

impl<'m> Session<'m> {
    /// `trainable` binds parameters as gradient-carrying leaves.
    pub fn new(model: &'m ModelState, trainable: bool) -> Result<Self> {
        let mut tape = Tape::new();
        let params = model
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        let cfg = &model.config;
        Ok(Self {
            model,
            tape,
            params,
            cache: (0..cfg.layers)
                .map(|_| LayerCache {
                    keys: None,
                    values: None,
                })
                .collect(),
            positions: 0,
            basis: FrequencyBasis::new(cfg.head_dim(), cfg.rope_base)?,
        })
    }

    /// Session over an existing tape whose leaves `params` hold the model's
    /// parameters in manifest order.
    pub fn with_tape(model: &'m ModelState, tape: Tape, params: Vec<Var>) -> Result<Self> {
        if params.len() != model.params.len() {
            return Err(Error::Contract(format!(
                "{} parameter leaves for a model of {}",
                params.len(),
                model.params.len()
            )));
        }
        for (v, p) in params.iter().zip(&model.params) {
            if tape.value(*v).shape() != p.value.shape() {
                return Err(Error::shape("session leaf", tape.value(*v).shape(), p.value.shape()));
            }
        }
        let cfg = &model.config;
        Ok(Self {
            model,
            tape,
            params,
            cache: (0..cfg.layers)
                .map(|_| LayerCache {
                    keys: None,
                    values: None,
                })
                .collect(),
            positions: 0,
            basis: FrequencyBasis::new(cfg.head_dim(), cfg.rope_base)?,
        })
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    pub fn model(&self) -> &'m ModelState {
        self.model
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    /// Parameter leaves in manifest order.
    pub fn parameter_vars(&self) -> &[Var] {
        &self.params
    }

    pub fn log_tau(&self) -> Var {
        self.params[self.model.ids.log_tau]
    }

    pub fn embed_tokens(&mut self, ids: &[u32]) -> Result<Var> {
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let table = self.params[self.model.ids.token_embedding];
        self.tape.gather_rows(table, &ids)
    }

    /// Projects raw feature rows `[n×feature_dim]` to `[n×d]`.
    pub fn embed_features(&mut self, modality: crate::anchors::Modality, rows: &Tensor) -> Result<Var> {
        let w = match modality {
            crate::anchors::Modality::Visual => self.params[self.model.ids.visual_projection],
            crate::anchors::Modality::Audio => self.params[self.model.ids.audio_projection],
        };
        let x = self.tape.constant(rows.clone());
        self.tape.matmul(x, w)
    }

    /// Runs the next `m` positions (rows of `inputs`) through the model.
    pub fn feed(&mut self, inputs: Var, timestamps: &[f64]) -> Result<Chunk> {
        let cfg = &self.model.config;
        let (m, width) = self.tape.shape(inputs);
        if width != cfg.dim {
            return Err(Error::shape("forward", &[m, width], &[m, cfg.dim]));
        }
        if timestamps.len() != m {
            return Err(Error::Contract(format!(
                "position plan has {} entries for {m} positions",
                timestamps.len()
            )));
        }
        let needed = self.positions + m;
        if needed > cfg.max_sequence {
            return Err(Error::Capacity {
                needed,
                limit: cfg.max_sequence,
            });
        }
        let ts: Vec<f64> = if cfg.ospe {
            timestamps.to_vec()
        } else {
            (self.positions..needed).map(|p| p as f64).collect()
        };
        let mut x = inputs;
        let mut attention = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let (next, probs) = self
                .layer(l, x, &ts)
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("layer {l}: {msg}")),
                    other => other,
                })?;
            x = next;
            attention.push(probs);
        }
        let ids = &self.model.ids;
        let (g, b, w, hb) = (
            self.params[ids.final_gain],
            self.params[ids.final_bias],
            self.params[ids.head],
            self.params[ids.head_bias],
        );
        let wrap = |e: Error| match e {
            Error::Numeric(msg) => Error::Numeric(format!("output head: {msg}")),
            other => other,
        };
        let hidden = self.tape.layer_norm(x, g, b, LN_EPS).map_err(wrap)?;
        let raw = self.tape.matmul(hidden, w).map_err(wrap)?;
        let logits = self.tape.add_row(raw, hb).map_err(wrap)?;
        self.positions = needed;
        Ok(Chunk {
            hidden,
            logits,
            attention,
        })
    }

    fn layer(&mut self, l: usize, x: Var, ts: &[f64]) -> Result<(Var, Vec<Var>)> {
        let cfg = &self.model.config;
        let ids = &self.model.ids.layers[l];
        let p = |i: usize| self.params[i];
        let (ln1g, ln1b, wq, wk, wv, wo) = (p(ids.ln1_gain), p(ids.ln1_bias), p(ids.wq), p(ids.wk), p(ids.wv), p(ids.wo));
        let (ln2g, ln2b, w1, b1, w2, b2) = (
            p(ids.ln2_gain),
            p(ids.ln2_bias),
            p(ids.ff_in),
            p(ids.ff_in_bias),
            p(ids.ff_out),
            p(ids.ff_out_bias),
        );
        let t = &mut self.tape;
        let h = t.layer_norm(x, ln1g, ln1b, LN_EPS)?;
        let q = t.matmul(h, wq)?;
        let k = t.matmul(h, wk)?;
        let v = t.matmul(h, wv)?;
        let q = rotate_rows(t, q, ts, &self.basis)?;
        let k = rotate_rows(t, k, ts, &self.basis)?;
        let cache = &mut self.cache[l];
        let keys = match cache.keys {
            Some(prev) => t.concat_rows(&[prev, k])?,
            None => k,
        };
        let values = match cache.values {
            Some(prev) => t.concat_rows(&[prev, v])?,
            None => v,
        };
        cache.keys = Some(keys);
        cache.values = Some(values);

        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(cfg.heads);
        let mut probs = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let (a, b) = (head * hd, (head + 1) * hd);
            let qh = t.slice_cols(q, a, b)?;
            let kh = t.slice_cols(keys, a, b)?;
            let vh = t.slice_cols(values, a, b)?;
            let kt = t.transpose(kh)?;
            let scores = t.matmul(qh, kt)?;
            let scores = t.scale(scores, scale)?;
            let masked = t.causal_mask(scores, self.positions)?;
            let pr = t.softmax_rows(masked)?;
            outs.push(t.matmul(pr, vh)?);
            probs.push(pr);
        }
        let joined = t.concat_cols(&outs)?;
        let attn = t.matmul(joined, wo)?;
        let x = t.add(x, attn)?;

        let h2 = t.layer_norm(x, ln2g, ln2b, LN_EPS)?;
        let f = t.matmul(h2, w1)?;
        let f = t.add_row(f, b1)?;
        let f = t.gelu(f)?;
        let f = t.matmul(f, w2)?;
        let f = t.add_row(f, b2)?;
        let x = t.add(x, f)?;
        Ok((x, probs))
    }
}

/// Values of a whole-sequence forward pass.
pub struct ForwardOutput {
    pub hidden: Tensor,
    pub logits: Tensor,
    pub attention: Vec<Vec<Tensor>>,
}

/// Embeds every element and runs the sequence through the model in a single
/// block.
pub fn forward(model: &ModelState, elements: &[HybridElement], plan: &PositionPlan) -> Result<ForwardOutput> {
    if plan.len() != elements.len() {
        return Err(Error::Contract(format!(
            "plan has {} positions, sequence has {}",
            plan.len(),
            elements.len()
        )));
    }
    let rows: Vec<Vec<f64>> = elements
        .iter()
        .map(|e| model.embed_element(e))
        .collect::<Result<_>>()?;
    let mut session = Session::new(model, false)?;
    let x = session.tape_mut().constant(Tensor::from_rows(&rows)?);
    let chunk = session.feed(x, &plan.timestamps)?;
    let tape = session.tape();
    Ok(ForwardOutput {
        hidden: tape.value(chunk.hidden).clone(),
        logits: tape.value(chunk.logits).clone(),
        attention: chunk
            .attention
            .iter()
            .map(|heads| heads.iter().map(|&v| tape.value(v).clone()).collect())
            .collect(),
    })
}
