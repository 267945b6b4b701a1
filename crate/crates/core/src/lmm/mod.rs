//! Decoder-only multimodal transformer over projected visual tokens.

mod generate;
mod train;

pub use generate::{AttentionTrace, Generation, TraceEntry};
pub use train::{pretrain_loss_report, train_lmm, LossSummary, TrainConfig, TrainLog};

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::encoders::{FeatureMap, NoiseDraw, VisualInput, VisualStack};
use crate::error::{Error, Result};
use crate::numerics::nn::{LayerNorm, Linear, Mlp};
use crate::numerics::{Graph, ParamId, ParamStore, Sampler, Tensor, Var};
use crate::scene::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    TextPre,
    Visual,
    TextPost,
}

/// Fixed text around the visual block: `<bos>` before it, `describe :` after it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptLayout {
    pub pre: Vec<usize>,
    pub post: Vec<usize>,
}

impl PromptLayout {
    pub fn standard(vocab: &Vocabulary) -> Self {
        Self {
            pre: vec![vocab.bos()],
            post: vec![vocab.id("describe").expect("closed vocabulary"), vocab.id(":").expect("closed vocabulary")],
        }
    }

    /// Prompt length for `hw` visual tokens.
    pub fn prompt_len(&self, hw: usize) -> usize {
        self.pre.len() + hw + self.post.len()
    }
}

/// Prompt with the visual block already projected into the language space.
#[derive(Clone, Debug)]
pub struct InputSequence {
    pub pre_text: Vec<usize>,
    /// `[hw, d_model]`, row-major cell order.
    pub visual: Tensor,
    pub post_text: Vec<usize>,
    pub roles: Vec<Role>,
}

impl InputSequence {
    pub fn new(pre_text: Vec<usize>, visual: Tensor, post_text: Vec<usize>) -> Self {
        let hw = visual.rows();
        let roles = std::iter::repeat_n(Role::TextPre, pre_text.len())
            .chain(std::iter::repeat_n(Role::Visual, hw))
            .chain(std::iter::repeat_n(Role::TextPost, post_text.len()))
            .collect();
        Self {
            pre_text,
            visual,
            post_text,
            roles,
        }
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn visual_range(&self) -> Range<usize> {
        self.pre_text.len()..self.pre_text.len() + self.visual.rows()
    }
}

/// Two-layer MLP mapping each feature-map cell into the language space.
#[derive(Clone, Debug)]
pub struct Projector {
    pub mlp: Mlp,
    pub d_in: usize,
    pub d_out: usize,
}

impl Projector {
    pub const PREFIX: &'static str = "proj.";

    pub fn new(store: &mut ParamStore, d_in: usize, d_out: usize, rng: &mut Sampler) -> Self {
        Self {
            mlp: Mlp::new(store, "proj", d_in, d_out, d_out, rng),
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        self.mlp.forward(g, x)
    }
}

/// Builds the prompt `pre, v_1..v_hw, post` from a feature map.
pub fn assemble_input(
    store: &ParamStore,
    projector: &Projector,
    pre_text: &[usize],
    features: &FeatureMap,
    post_text: &[usize],
    grid: (usize, usize),
) -> Result<InputSequence> {
    if (features.h, features.w) != grid || features.channels != projector.d_in {
        return Err(Error::Dimension {
            op: "assemble_input",
            left: vec![grid.0, grid.1, projector.d_in],
            right: vec![features.h, features.w, features.channels],
        });
    }
    let hw = features.h * features.w;
    let v = projector.mlp.apply(store, features.values.data(), hw);
    Ok(InputSequence::new(
        pre_text.to_vec(),
        Tensor::new(vec![hw, projector.d_out], v)?,
        post_text.to_vec(),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_layer: usize,
    pub n_head: usize,
    pub d_mlp: usize,
    pub vocab: usize,
    pub max_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layer: 4,
            n_head: 4,
            d_mlp: 512,
            vocab: 36,
            max_len: 128,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_head == 0 || !self.d_model.is_multiple_of(self.n_head) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_head {}",
                self.d_model, self.n_head
            )));
        }
        if self.n_layer == 0 || self.vocab == 0 || self.max_len == 0 {
            return Err(Error::Config("n_layer, vocab and max_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

/// Output of one layer on the graph: new residual stream, attention node, keys and values.
pub struct LayerOutput {
    pub x: Var,
    pub attn: Var,
    pub k: Var,
    pub v: Var,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &LmConfig, rng: &mut Sampler) -> Self {
        let d = cfg.d_model;
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            qkv: Linear::new(store, &format!("{name}.qkv"), d, 3 * d, true, rng),
            proj: Linear::new(store, &format!("{name}.proj"), d, d, true, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, cfg.d_mlp, d, rng),
        }
    }

    /// Causal pre-norm block over `batch` sequences stacked as `[batch * len, d]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, heads: usize, batch: usize) -> Result<LayerOutput> {
        let d = g.value(x).cols();
        let h = self.ln1.forward(g, x)?;
        let qkv = self.qkv.forward(g, h)?;
        let q = g.slice_cols(qkv, 0, d)?;
        let k = g.slice_cols(qkv, d, d)?;
        let v = g.slice_cols(qkv, 2 * d, d)?;
        let attn = g.attention(q, k, v, heads, batch, true)?;
        let o = self.proj.forward(g, attn)?;
        let x = g.add(x, o)?;
        let h = self.ln2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        let x = g.add(x, m)?;
        Ok(LayerOutput { x, attn, k, v })
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLM {
    pub config: LmConfig,
    pub tok: ParamId,
    pub pos: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

/// Graph outputs of a full-sequence pass.
pub struct SequenceForward {
    /// Final normalized hidden states `[batch * len, d]`.
    pub hidden: Var,
    pub len: usize,
    pub layers: Vec<LayerOutput>,
}

impl DecoderLM {
    pub const PREFIX: &'static str = "lm.";

    pub fn new(store: &mut ParamStore, config: LmConfig, rng: &mut Sampler) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let tok = store.add("lm.tok", rng.gaussian_tensor(&[config.vocab, d], 0.1));
        let pos = store.add("lm.pos", rng.gaussian_tensor(&[config.max_len, d], 0.02));
        let layers = (0..config.n_layer)
            .map(|l| DecoderLayer::new(store, &format!("lm.layer{l}"), &config, rng))
            .collect();
        let ln_f = LayerNorm::new(store, "lm.ln_f", d);
        let head = Linear::new(store, "lm.head", d, config.vocab, true, rng);
        // small output weights keep the initial distribution close to uniform
        store.tensor_mut(head.weight).data_mut().iter_mut().for_each(|w| *w *= 0.1);
        Ok(Self {
            config,
            tok,
            pos,
            layers,
            ln_f,
            head,
        })
    }

    /// Token embeddings plus learned positions for text at absolute positions `positions`.
    pub fn embed_text(&self, g: &mut Graph<'_>, ids: &[usize], positions: &[usize]) -> Result<Var> {
        if let Some(&p) = positions.iter().find(|&&p| p >= self.config.max_len) {
            return Err(Error::Argument(format!("position {p} exceeds max_len {}", self.config.max_len)));
        }
        if let Some(&t) = ids.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Argument(format!("token {t} outside the vocabulary")));
        }
        let tok = g.param(self.tok);
        let e = g.embedding(tok, ids)?;
        let pos = g.param(self.pos);
        let p = g.gather_rows(pos, positions)?;
        g.add(e, p)
    }

    /// Runs all layers on already embedded sequences `[batch * len, d]`.
    pub fn forward_embedded(&self, g: &mut Graph<'_>, x: Var, batch: usize) -> Result<SequenceForward> {
        let rows = g.value(x).rows();
        if batch == 0 || !rows.is_multiple_of(batch) {
            return Err(Error::Argument(format!("{rows} rows do not split into {batch} sequences")));
        }
        let mut x = x;
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let o = layer.forward(g, x, self.config.n_head, batch)?;
            x = o.x;
            outs.push(o);
        }
        let hidden = self.ln_f.forward(g, x)?;
        Ok(SequenceForward {
            hidden,
            len: rows / batch,
            layers: outs,
        })
    }

    pub fn logits(&self, g: &mut Graph<'_>, hidden: Var) -> Result<Var> {
        self.head.forward(g, hidden)
    }
}

/// Visual stack, projector and language model sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Lmm {
    pub visual: VisualStack,
    pub projector: Projector,
    pub lm: DecoderLM,
    pub layout: PromptLayout,
}

impl Lmm {
    pub fn new(store: &mut ParamStore, visual: VisualStack, lm: LmConfig, layout: PromptLayout, rng: &mut Sampler) -> Result<Self> {
        let projector = Projector::new(store, visual.channels(), lm.d_model, rng);
        let lm = DecoderLM::new(store, lm, rng)?;
        Ok(Self {
            visual,
            projector,
            lm,
            layout,
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.layout.prompt_len(self.visual.tokens())
    }

    /// Projected visual tokens `[batch * hw, d_model]`.
    pub fn visual_tokens(&self, g: &mut Graph<'_>, inputs: &[&VisualInput], noise: &NoiseDraw) -> Result<Var> {
        let f = self.visual.features(g, inputs, noise)?;
        self.projector.forward(g, f)
    }

    /// Full forward of prompt plus `suffixes` (all of equal length) given projected visual tokens.
    pub fn sequence_forward(&self, g: &mut Graph<'_>, visual: Var, suffixes: &[Vec<usize>]) -> Result<SequenceForward> {
        let batch = suffixes.len();
        let hw = self.visual.tokens();
        let s = suffixes.first().map_or(0, |x| x.len());
        if suffixes.iter().any(|x| x.len() != s) {
            return Err(Error::Argument("suffixes must share one length".into()));
        }
        if g.value(visual).rows() != batch * hw {
            return Err(Error::Dimension {
                op: "sequence_forward",
                left: vec![batch * hw],
                right: g.value(visual).shape().to_vec(),
            });
        }
        let (p, q) = (self.layout.pre.len(), self.layout.post.len());
        let len = p + hw + q + s;
        let text_per = p + q + s;
        let mut ids = Vec::with_capacity(batch * text_per);
        let mut positions = Vec::with_capacity(batch * text_per);
        for suffix in suffixes {
            for (i, &t) in self.layout.pre.iter().enumerate() {
                ids.push(t);
                positions.push(i);
            }
            for (i, &t) in self.layout.post.iter().chain(suffix).enumerate() {
                ids.push(t);
                positions.push(p + hw + i);
            }
        }
        let text = self.lm.embed_text(g, &ids, &positions)?;
        let stacked = g.concat_rows(&[text, visual])?;
        // text rows come first in `stacked`, visual rows after
        let vis_base = batch * text_per;
        let mut order = Vec::with_capacity(batch * len);
        for b in 0..batch {
            let t0 = b * text_per;
            order.extend(t0..t0 + p);
            order.extend(vis_base + b * hw..vis_base + (b + 1) * hw);
            order.extend(t0 + p..t0 + text_per);
        }
        let x = g.gather_rows(stacked, &order)?;
        self.lm.forward_embedded(g, x, batch)
    }

    /// Inference-only prompt for one prepared image under the pinned evaluation noise.
    pub fn input_sequence(&self, store: &ParamStore, input: &VisualInput) -> Result<InputSequence> {
        let mut g = Graph::inference(store);
        let v = self.visual_tokens(&mut g, &[input], &NoiseDraw::Evaluation)?;
        Ok(InputSequence::new(
            self.layout.pre.clone(),
            g.value(v).clone(),
            self.layout.post.clone(),
        ))
    }
}
