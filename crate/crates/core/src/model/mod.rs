//! Pre-norm GPT-style causal decoder.
//!
//! ```text
//! x = tok_emb[ids] + pos_emb[0..T]
//! per layer:  x += Wo·attn(LN1(x))
//!             h  = LN2(x)                       <- mlp_in.input
//!             u  = h·W_in + b_in                <- mlp_in.output
//!             a  = act(u)                       <- act.output
//!             y  = a·W_out + b_out              <- mlp_out.output
//!             x += y
//! logits = LN_f(x)·W_head + b_head
//! ```
//!
//! Hidden unit `j` of a layer owns column `j` of `W_in`, entry `j` of `b_in`
//! and row `j` of `W_out`; nothing else touches it, which is what makes
//! structured removal of hidden units exact.

pub(crate) mod checkpoint;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ActivationKind, Tape, Tensor, Var};
use crate::tokenizer::BpeTokenizer;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Hidden width of each layer's MLP; layers diverge after pruning.
    pub d_ff: Vec<usize>,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub activation: ActivationKind,
    pub tie_lm_head: bool,
    pub layernorm_eps: f32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.vocab_size == 0 || self.max_seq == 0 {
            return bad("d_model, n_heads, vocab_size and max_seq must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff.len() != self.n_layers {
            return bad(format!(
                "d_ff lists {} layers but n_layers is {}",
                self.d_ff.len(),
                self.n_layers
            ));
        }
        if self.d_ff.contains(&0) {
            return bad("every layer needs at least one hidden unit".into());
        }
        if !(self.layernorm_eps > 0.0) {
            return bad("layernorm_eps must be positive".into());
        }
        Ok(())
    }

    /// Exact scalar parameter count implied by the extents.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let v = self.vocab_size;
        let mut n = v * d + self.max_seq * d;
        for &ff in &self.d_ff {
            n += 2 * d; // ln1
            n += 4 * (d * d + d); // q, k, v, o
            n += 2 * d; // ln2
            n += d * ff + ff + ff * d + d;
        }
        n += 2 * d; // final norm
        if !self.tie_lm_head {
            n += d * v;
        }
        n + v // head bias exists in both modes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<S> {
    pub ln1_gain: Tensor<S>,
    pub ln1_bias: Tensor<S>,
    pub q_weight: Tensor<S>,
    pub q_bias: Tensor<S>,
    pub k_weight: Tensor<S>,
    pub k_bias: Tensor<S>,
    pub v_weight: Tensor<S>,
    pub v_bias: Tensor<S>,
    pub o_weight: Tensor<S>,
    pub o_bias: Tensor<S>,
    pub ln2_gain: Tensor<S>,
    pub ln2_bias: Tensor<S>,
    /// `[d_model × d_ff]`
    pub mlp_in_weight: Tensor<S>,
    pub mlp_in_bias: Tensor<S>,
    /// `[d_ff × d_model]`
    pub mlp_out_weight: Tensor<S>,
    pub mlp_out_bias: Tensor<S>,
}

impl<S: Scalar> LayerParams<S> {
    const NAMES: [&'static str; 16] = [
        "ln1.gain",
        "ln1.bias",
        "attn.q.weight",
        "attn.q.bias",
        "attn.k.weight",
        "attn.k.bias",
        "attn.v.weight",
        "attn.v.bias",
        "attn.o.weight",
        "attn.o.bias",
        "ln2.gain",
        "ln2.bias",
        "mlp_in.weight",
        "mlp_in.bias",
        "mlp_out.weight",
        "mlp_out.bias",
    ];

    fn tensors(&self) -> [&Tensor<S>; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.q_weight,
            &self.q_bias,
            &self.k_weight,
            &self.k_bias,
            &self.v_weight,
            &self.v_bias,
            &self.o_weight,
            &self.o_bias,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.mlp_in_weight,
            &self.mlp_in_bias,
            &self.mlp_out_weight,
            &self.mlp_out_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<S>; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.q_weight,
            &mut self.q_bias,
            &mut self.k_weight,
            &mut self.k_bias,
            &mut self.v_weight,
            &mut self.v_bias,
            &mut self.o_weight,
            &mut self.o_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.mlp_in_weight,
            &mut self.mlp_in_bias,
            &mut self.mlp_out_weight,
            &mut self.mlp_out_bias,
        ]
    }

    fn shapes(d: usize, ff: usize) -> [Vec<usize>; 16] {
        [
            vec![d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, ff],
            vec![ff],
            vec![ff, d],
            vec![d],
        ]
    }

    fn from_tensors(t: Vec<Tensor<S>>) -> Self {
        let mut it = t.into_iter();
        let mut next = || it.next().expect("16 layer tensors");
        Self {
            ln1_gain: next(),
            ln1_bias: next(),
            q_weight: next(),
            q_bias: next(),
            k_weight: next(),
            k_bias: next(),
            v_weight: next(),
            v_bias: next(),
            o_weight: next(),
            o_bias: next(),
            ln2_gain: next(),
            ln2_bias: next(),
            mlp_in_weight: next(),
            mlp_in_bias: next(),
            mlp_out_weight: next(),
            mlp_out_bias: next(),
        }
    }
}

/// Config, weights and tokenizer: the unit of checkpointing.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<S> {
    pub config: ModelConfig,
    pub tokenizer: BpeTokenizer,
    pub token_embedding: Tensor<S>,
    pub positional_embedding: Tensor<S>,
    pub layers: Vec<LayerParams<S>>,
    pub final_ln_gain: Tensor<S>,
    pub final_ln_bias: Tensor<S>,
    /// `[d_model × vocab]`; `None` when tied to the token embedding.
    pub lm_head: Option<Tensor<S>>,
    pub lm_head_bias: Tensor<S>,
}

/// Parameter kind, used to pick initializers.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zero,
    One,
}

fn init_kind(name: &str) -> Init {
    if name.ends_with(".gain") {
        Init::One
    } else if name.ends_with(".bias") {
        Init::Zero
    } else {
        Init::Normal
    }
}

impl<S: Scalar> ModelBundle<S> {
    /// Canonical `(name, shape)` list for a config. This order is the
    /// checkpoint order, the optimizer order and the tape registration order.
    pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.d_model;
        let v = config.vocab_size;
        let mut out = vec![
            ("token_embedding".to_string(), vec![v, d]),
            ("positional_embedding".to_string(), vec![config.max_seq, d]),
        ];
        for (l, &ff) in config.d_ff.iter().enumerate() {
            for (name, shape) in LayerParams::<S>::NAMES.iter().zip(LayerParams::<S>::shapes(d, ff)) {
                out.push((format!("layers.{l}.{name}"), shape));
            }
        }
        out.push(("final_ln.gain".into(), vec![d]));
        out.push(("final_ln.bias".into(), vec![d]));
        if !config.tie_lm_head {
            out.push(("lm_head.weight".into(), vec![d, v]));
        }
        out.push(("lm_head.bias".into(), vec![v]));
        out
    }

    /// Assembles a bundle from tensors in [`layout`](Self::layout) order.
    pub fn from_tensors(
        config: ModelConfig,
        tokenizer: BpeTokenizer,
        tensors: Vec<Tensor<S>>,
    ) -> Result<Self> {
        config.validate()?;
        let layout = Self::layout(&config);
        if tensors.len() != layout.len() {
            return Err(Error::Inconsistent(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Inconsistent(format!(
                    "{name} has shape {:?}, config implies {shape:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let token_embedding = it.next().expect("layout checked");
        let positional_embedding = it.next().expect("layout checked");
        let layers = (0..config.n_layers)
            .map(|_| LayerParams::from_tensors(it.by_ref().take(16).collect()))
            .collect();
        let final_ln_gain = it.next().expect("layout checked");
        let final_ln_bias = it.next().expect("layout checked");
        let lm_head = (!config.tie_lm_head).then(|| it.next().expect("layout checked"));
        let lm_head_bias = it.next().expect("layout checked");
        let bundle = Self {
            config,
            tokenizer,
            token_embedding,
            positional_embedding,
            layers,
            final_ln_gain,
            final_ln_bias,
            lm_head,
            lm_head_bias,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Normal(0, 0.02) weights, zero biases, unit norm gains.
    pub fn init(config: ModelConfig, tokenizer: BpeTokenizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 0.02).expect("valid std");
        let tensors = Self::layout(&config)
            .into_iter()
            .map(|(name, shape)| match init_kind(&name) {
                Init::One => Tensor::filled(&shape, S::one()),
                Init::Zero => Tensor::zeros(&shape),
                Init::Normal => Tensor::from_fn(&shape, |_| S::from_f64c(normal.sample(&mut rng))),
            })
            .collect();
        Self::from_tensors(config, tokenizer, tensors)
    }

    /// Every parameter (norm gains included) set to zero.
    pub fn zeros(config: ModelConfig, tokenizer: BpeTokenizer) -> Result<Self> {
        config.validate()?;
        let tensors = Self::layout(&config)
            .into_iter()
            .map(|(_, shape)| Tensor::zeros(&shape))
            .collect();
        Self::from_tensors(config, tokenizer, tensors)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.tokenizer.vocab_size() != self.config.vocab_size {
            return Err(Error::Inconsistent(format!(
                "tokenizer has {} ids, config vocab_size is {}",
                self.tokenizer.vocab_size(),
                self.config.vocab_size
            )));
        }
        if self.layers.len() != self.config.n_layers {
            return Err(Error::Inconsistent("layer count differs from config".into()));
        }
        if self.lm_head.is_some() == self.config.tie_lm_head {
            return Err(Error::Inconsistent("lm_head presence contradicts tie_lm_head".into()));
        }
        for ((name, shape), (_, t)) in Self::layout(&self.config).iter().zip(self.named_tensors()) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Inconsistent(format!(
                    "{name} has shape {:?}, config implies {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Parameters in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let names = Self::layout(&self.config).into_iter().map(|(n, _)| n);
        names.zip(self.tensors()).collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut out = vec![&self.token_embedding, &self.positional_embedding];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.push(&self.final_ln_gain);
        out.push(&self.final_ln_bias);
        if let Some(h) = &self.lm_head {
            out.push(h);
        }
        out.push(&self.lm_head_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.token_embedding, &mut self.positional_embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_ln_gain);
        out.push(&mut self.final_ln_bias);
        if let Some(h) = &mut self.lm_head {
            out.push(h);
        }
        out.push(&mut self.lm_head_bias);
        out
    }

    /// Exact count of scalar parameters; a tied head is counted once.
    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Bytes of parameter payload at 4 bytes per parameter.
    pub fn size_bytes(&self) -> usize {
        4 * self.param_count()
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<T: Scalar>(&self) -> ModelBundle<T> {
        let tensors = self.tensors().into_iter().map(Tensor::cast).collect();
        ModelBundle::from_tensors(self.config.clone(), self.tokenizer.clone(), tensors)
            .expect("cast preserves shapes")
    }

    /// Observer sites in canonical order with their widths.
    pub fn sites(&self) -> Vec<(SiteId, usize)> {
        let d = self.config.d_model;
        let mut out = vec![(SiteId::global(SiteKind::EmbedOutput), d)];
        for (l, &ff) in self.config.d_ff.iter().enumerate() {
            out.push((SiteId::layer(l, SiteKind::AttnOutput), d));
            out.push((SiteId::layer(l, SiteKind::MlpInInput), d));
            out.push((SiteId::layer(l, SiteKind::MlpInOutput), ff));
            out.push((SiteId::layer(l, SiteKind::ActOutput), ff));
            out.push((SiteId::layer(l, SiteKind::MlpOutOutput), d));
        }
        out
    }

    /// Puts every parameter on `tape` in canonical order.
    pub fn register(&self, tape: &mut Tape<S>, tracked: bool) -> ModelVars {
        let ordered: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| tape.leaf(t.clone(), tracked))
            .collect();
        ModelVars::from_ordered(ordered, &self.config)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Contract("forward needs at least one token".into()));
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::Index {
                what: "sequence length",
                index: tokens.len(),
                bound: self.config.max_seq,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Index {
                what: "token id",
                index: bad as usize,
                bound: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records the forward pass on `tape` and returns the `[T×V]` logits node.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<S>,
        vars: &ModelVars,
        tokens: &[u32],
        mut observer: Option<&mut dyn ActivationObserver<S>>,
    ) -> Result<Var> {
        self.check_tokens(tokens)?;
        let eps = S::from_f32c(self.config.layernorm_eps);
        let positions: Vec<u32> = (0..tokens.len() as u32).collect();
        let tok = tape.embedding(vars.token_embedding, tokens)?;
        let pos = tape.embedding(vars.positional_embedding, &positions)?;
        let mut x = tape.add(tok, pos)?;
        let mut emit = |tape: &Tape<S>, site: SiteId, v: Var| {
            if let Some(obs) = observer.as_deref_mut() {
                obs.observe(site, tape.value(v));
            }
        };
        emit(tape, SiteId::global(SiteKind::EmbedOutput), x);

        for (l, lv) in vars.layers.iter().enumerate() {
            let h = tape.layernorm(x, lv.ln1_gain, lv.ln1_bias, eps)?;
            let q = tape.linear(h, lv.q_weight, lv.q_bias)?;
            let k = tape.linear(h, lv.k_weight, lv.k_bias)?;
            let v = tape.linear(h, lv.v_weight, lv.v_bias)?;
            let att = tape.causal_attention(q, k, v, self.config.n_heads)?;
            let o = tape.linear(att, lv.o_weight, lv.o_bias)?;
            emit(tape, SiteId::layer(l, SiteKind::AttnOutput), o);
            x = tape.add(x, o)?;

            let h2 = tape.layernorm(x, lv.ln2_gain, lv.ln2_bias, eps)?;
            emit(tape, SiteId::layer(l, SiteKind::MlpInInput), h2);
            let u = tape.linear(h2, lv.mlp_in_weight, lv.mlp_in_bias)?;
            emit(tape, SiteId::layer(l, SiteKind::MlpInOutput), u);
            let a = tape.activation(u, self.config.activation)?;
            emit(tape, SiteId::layer(l, SiteKind::ActOutput), a);
            let y = tape.linear(a, lv.mlp_out_weight, lv.mlp_out_bias)?;
            emit(tape, SiteId::layer(l, SiteKind::MlpOutOutput), y);
            x = tape.add(x, y)?;
        }

        let xf = tape.layernorm(x, vars.final_ln_gain, vars.final_ln_bias, eps)?;
        let head = match vars.lm_head {
            Some(h) => h,
            None => tape.transpose(vars.token_embedding)?,
        };
        tape.linear(xf, head, vars.lm_head_bias)
    }

    /// Inference forward pass: `[T×V]` logits.
    pub fn forward(
        &self,
        tokens: &[u32],
        observer: Option<&mut dyn ActivationObserver<S>>,
    ) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let logits = self.forward_on_tape(&mut tape, &vars, tokens, observer)?;
        Ok(tape.value(logits).clone())
    }
}

/// Tape handles for each parameter, mirroring [`ModelBundle`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    /// Canonical order, aligned with [`ModelBundle::tensors`].
    pub ordered: Vec<Var>,
    token_embedding: Var,
    positional_embedding: Var,
    layers: Vec<LayerVars>,
    final_ln_gain: Var,
    final_ln_bias: Var,
    lm_head: Option<Var>,
    lm_head_bias: Var,
}

#[derive(Clone, Debug)]
struct LayerVars {
    ln1_gain: Var,
    ln1_bias: Var,
    q_weight: Var,
    q_bias: Var,
    k_weight: Var,
    k_bias: Var,
    v_weight: Var,
    v_bias: Var,
    o_weight: Var,
    o_bias: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    mlp_in_weight: Var,
    mlp_in_bias: Var,
    mlp_out_weight: Var,
    mlp_out_bias: Var,
}

impl ModelVars {
    fn from_ordered(ordered: Vec<Var>, config: &ModelConfig) -> Self {
        let mut it = ordered.iter().copied();
        let mut next = || it.next().expect("registered in layout order");
        let token_embedding = next();
        let positional_embedding = next();
        let layers = (0..config.n_layers)
            .map(|_| LayerVars {
                ln1_gain: next(),
                ln1_bias: next(),
                q_weight: next(),
                q_bias: next(),
                k_weight: next(),
                k_bias: next(),
                v_weight: next(),
                v_bias: next(),
                o_weight: next(),
                o_bias: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                mlp_in_weight: next(),
                mlp_in_bias: next(),
                mlp_out_weight: next(),
                mlp_out_bias: next(),
            })
            .collect();
        let final_ln_gain = next();
        let final_ln_bias = next();
        let lm_head = (!config.tie_lm_head).then(&mut next);
        let lm_head_bias = next();
        Self {
            ordered,
            token_embedding,
            positional_embedding,
            layers,
            final_ln_gain,
            final_ln_bias,
            lm_head,
            lm_head_bias,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SiteKind {
    #[serde(rename = "embed.output")]
    EmbedOutput,
    #[serde(rename = "attn.output")]
    AttnOutput,
    /// Normalized residual stream entering the first MLP linear.
    #[serde(rename = "mlp_in.input")]
    MlpInInput,
    /// Pre-activation.
    #[serde(rename = "mlp_in.output")]
    MlpInOutput,
    /// Post-activation.
    #[serde(rename = "act.output")]
    ActOutput,
    #[serde(rename = "mlp_out.output")]
    MlpOutOutput,
}

impl SiteKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SiteKind::EmbedOutput => "embed.output",
            SiteKind::AttnOutput => "attn.output",
            SiteKind::MlpInInput => "mlp_in.input",
            SiteKind::MlpInOutput => "mlp_in.output",
            SiteKind::ActOutput => "act.output",
            SiteKind::MlpOutOutput => "mlp_out.output",
        }
    }
}

/// A named observation point: a site kind, optionally within a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteId {
    pub layer: Option<usize>,
    pub kind: SiteKind,
}

impl SiteId {
    pub fn global(kind: SiteKind) -> Self {
        Self { layer: None, kind }
    }

    pub fn layer(layer: usize, kind: SiteKind) -> Self {
        Self {
            layer: Some(layer),
            kind,
        }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "layers.{l}.{}", self.kind.as_str()),
            None => f.write_str(self.kind.as_str()),
        }
    }
}

/// Receives the `[T×width]` activation matrix of every site during a forward pass.
pub trait ActivationObserver<S> {
    fn observe(&mut self, site: SiteId, activations: &Tensor<S>);
}
