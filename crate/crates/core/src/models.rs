//! Task classifier and rationale extractor.
//!
//! Both are small from-scratch encoders over token embeddings. The task
//! model pools the encoder's per-position hidden states and applies a linear
//! head; the extractor applies a linear head per position and emits raw score
//! logits. In the `dual` variant each has its own encoder (embedding table
//! included); in `shared` both heads read one encoder.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::data::{self, MASK};
use crate::error::{Error, Result};

/// Longest sequence any model accepts.
pub const MAX_SEQ_LEN: usize = 512;
/// Additive attention bias on excluded keys.
const KEY_BIAS: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Per-position `relu(E[x] W + b)`; pooling does the mixing.
    MeanPoolMlp,
    /// One attention layer, `relu(softmax(Q K^T / sqrt(d) + bias) V + b)`,
    /// with excluded keys biased out.
    SingleHeadAttention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Shared,
    Dual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Includes the reserved PAD and MASK ids.
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub encoder: EncoderKind,
    pub variant: Variant,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            embed_dim: 32,
            hidden_dim: 64,
            num_classes: 2,
            encoder: EncoderKind::MeanPoolMlp,
            variant: Variant::Dual,
            max_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("model.num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return bad("model.embed_dim and model.hidden_dim must be >= 1".into());
        }
        if self.vocab_size <= data::FIRST_TOKEN_ID as usize {
            return bad(format!(
                "model.vocab_size {} leaves no room beside the reserved ids",
                self.vocab_size
            ));
        }
        if self.max_len == 0 || self.max_len > MAX_SEQ_LEN {
            return bad(format!("model.max_len must be in 1..={MAX_SEQ_LEN}, got {}", self.max_len));
        }
        Ok(())
    }

    fn encoder_shapes(&self, prefix: &str) -> Vec<(String, [usize; 2])> {
        let (v, d, h) = (self.vocab_size, self.embed_dim, self.hidden_dim);
        let mut out = vec![(format!("{prefix}.embedding"), [v, d])];
        match self.encoder {
            EncoderKind::MeanPoolMlp => {
                out.push((format!("{prefix}.w"), [d, h]));
            }
            EncoderKind::SingleHeadAttention => {
                out.push((format!("{prefix}.wq"), [d, d]));
                out.push((format!("{prefix}.wk"), [d, d]));
                out.push((format!("{prefix}.wv"), [d, h]));
            }
        }
        out.push((format!("{prefix}.b"), [1, h]));
        out
    }

    /// Parameter names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, [usize; 2])> {
        let mut out = self.encoder_shapes("task_encoder");
        if self.variant == Variant::Dual {
            out.extend(self.encoder_shapes("extractor_encoder"));
        }
        let (h, m) = (self.hidden_dim, self.num_classes);
        out.push(("task_head.w".into(), [h, m]));
        out.push(("task_head.b".into(), [1, m]));
        out.push(("extractor_head.w".into(), [h, 1]));
        out.push(("extractor_head.b".into(), [1, 1]));
        out
    }

    fn encoder_len(&self) -> usize {
        match self.encoder {
            EncoderKind::MeanPoolMlp => 3,
            EncoderKind::SingleHeadAttention => 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
}

/// Which encoder a forward pass reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Task,
    Extractor,
}

impl ModelParams {
    /// Deterministic initialization: weight matrices uniform in
    /// `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = data::rng(seed, 1);
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, [r, c])| {
                let value = if name.ends_with(".b") {
                    Tensor::zeros(r, c)
                } else {
                    let bound = (6.0 / (r + c) as f64).sqrt();
                    let v = (0..r * c).map(|_| rng.random_range(-bound..bound)).collect();
                    Tensor::new(r, c, v)?
                };
                Ok(NamedTensor { name, value })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name).map(|t| &mut t.value)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.is_finite())
    }

    /// Index range of the parameters each role's forward pass reads.
    pub fn role_indices(&self, role: Role) -> Vec<usize> {
        let e = self.config.encoder_len();
        let heads = match self.config.variant {
            Variant::Shared => e,
            Variant::Dual => 2 * e,
        };
        let (enc, head) = match (role, self.config.variant) {
            (Role::Task, _) => (0..e, heads..heads + 2),
            (Role::Extractor, Variant::Shared) => (0..e, heads + 2..heads + 4),
            (Role::Extractor, Variant::Dual) => (e..2 * e, heads + 2..heads + 4),
        };
        enc.chain(head).collect()
    }

    /// Places every tensor on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let ids = self.tensors.iter().map(|t| tape.leaf(t.value.clone())).collect();
        Bound {
            ids,
            config: self.config.clone(),
        }
    }

    /// As [`bind`](Self::bind), with tensor `index` represented by an
    /// existing node instead of a fresh leaf.
    pub fn bind_replacing(&self, tape: &mut Tape, index: usize, node: NodeId) -> Bound {
        let ids = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| if i == index { node } else { tape.leaf(t.value.clone()) })
            .collect();
        Bound {
            ids,
            config: self.config.clone(),
        }
    }

    /// Task logits for one input with positions outside `attend` excluded.
    pub fn task_forward(&self, tokens: &[u32], attend: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let logits = bound.task_logits(&mut tape, tokens, attend)?;
        Ok(tape.value(logits).values().to_vec())
    }

    /// Extractor score logits, one per token.
    pub fn extractor_forward(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let s = bound.scores(&mut tape, tokens)?;
        Ok(tape.value(s).values().to_vec())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            params: self.clone(),
        };
        let mut text = serde_json::to_string(&ck)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let p = ck.params;
        p.config.validate()?;
        let layout = p.config.layout();
        if layout.len() != p.tensors.len()
            || layout
                .iter()
                .zip(&p.tensors)
                .any(|((n, s), t)| *n != t.name || *s != t.value.shape())
        {
            return Err(Error::Config("checkpoint tensors do not match its config".into()));
        }
        if !p.is_finite() {
            return Err(Error::NonFinite("checkpoint holds non-finite parameters".into()));
        }
        Ok(p)
    }
}

const CHECKPOINT_FORMAT: &str = "refer-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    params: ModelParams,
}

/// Parameter leaves of one model on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    pub ids: Vec<NodeId>,
    config: ModelConfig,
}

impl Bound {
    fn encoder(&self, role: Role) -> &[NodeId] {
        let e = self.config.encoder_len();
        match (role, self.config.variant) {
            (Role::Extractor, Variant::Dual) => &self.ids[e..2 * e],
            _ => &self.ids[..e],
        }
    }

    fn head(&self, role: Role) -> (NodeId, NodeId) {
        let base = match self.config.variant {
            Variant::Shared => self.config.encoder_len(),
            Variant::Dual => 2 * self.config.encoder_len(),
        };
        match role {
            Role::Task => (self.ids[base], self.ids[base + 1]),
            Role::Extractor => (self.ids[base + 2], self.ids[base + 3]),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::degenerate("empty token sequence"));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::contract(format!(
                "sequence length {} exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::contract(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Per-position hidden states `n x hidden` of one encoder. Positions
    /// with `attend` 0 are MASK-substituted and, for attention, excluded as
    /// keys. `None` attends everywhere.
    pub fn hidden(&self, tape: &mut Tape, role: Role, tokens: &[u32], attend: Option<&[f64]>) -> Result<NodeId> {
        self.check_tokens(tokens)?;
        if let Some(a) = attend {
            if a.len() != tokens.len() {
                return Err(Error::contract(format!(
                    "attend mask length {} != token count {}",
                    a.len(),
                    tokens.len()
                )));
            }
            if a.iter().all(|&m| m == 0.0) {
                return Err(Error::degenerate("attend mask excludes every position"));
            }
        }
        let ids: Vec<usize> = tokens
            .iter()
            .enumerate()
            .map(|(t, &id)| match attend {
                Some(a) if a[t] == 0.0 => MASK as usize,
                _ => id as usize,
            })
            .collect();
        let p = self.encoder(role).to_vec();
        let x = tape.embedding(p[0], &ids)?;
        let pre = match self.config.encoder {
            EncoderKind::MeanPoolMlp => tape.matmul(x, p[1])?,
            EncoderKind::SingleHeadAttention => {
                let q = tape.matmul(x, p[1])?;
                let k = tape.matmul(x, p[2])?;
                let v = tape.matmul(x, p[3])?;
                let raw = tape.matmul_nt(q, k)?;
                let scaled = tape.mul_scalar(raw, 1.0 / (self.config.embed_dim as f64).sqrt())?;
                let logits = match attend {
                    Some(a) => {
                        let bias = a.iter().map(|&m| if m == 0.0 { KEY_BIAS } else { 0.0 }).collect();
                        let bias = tape.constant(Tensor::row(bias));
                        tape.add(scaled, bias)?
                    }
                    None => scaled,
                };
                let w = tape.row_softmax(logits)?;
                tape.matmul(w, v)?
            }
        };
        let biased = tape.add(pre, p[p.len() - 1])?;
        tape.relu(biased)
    }

    /// `1 x M` logits from hidden states pooled under `pool` (an `n x 1`
    /// node of nonnegative weights).
    pub fn task_head(&self, tape: &mut Tape, hidden: NodeId, pool: NodeId) -> Result<NodeId> {
        let pooled = tape.mean_pool_masked(hidden, pool)?;
        let (w, b) = self.head(Role::Task);
        let z = tape.matmul(pooled, w)?;
        tape.add(z, b)
    }

    /// `n x 1` score logits from extractor hidden states.
    pub fn extractor_head(&self, tape: &mut Tape, hidden: NodeId) -> Result<NodeId> {
        let (w, b) = self.head(Role::Extractor);
        let z = tape.matmul(hidden, w)?;
        tape.add(z, b)
    }

    /// Whether pooling full-input hidden states under a mask equals
    /// re-encoding the MASK-substituted input. True for the per-position
    /// encoder, whose hidden state at a kept position ignores the rest.
    pub fn pooling_is_substitution(&self) -> bool {
        self.config.encoder == EncoderKind::MeanPoolMlp
    }

    pub fn task_logits(&self, tape: &mut Tape, tokens: &[u32], attend: &[f64]) -> Result<NodeId> {
        let h = self.hidden(tape, Role::Task, tokens, Some(attend))?;
        let m = tape.constant(Tensor::column(attend.to_vec()));
        self.task_head(tape, h, m)
    }

    pub fn scores(&self, tape: &mut Tape, tokens: &[u32]) -> Result<NodeId> {
        let h = self.hidden(tape, Role::Extractor, tokens, None)?;
        self.extractor_head(tape, h)
    }
}
