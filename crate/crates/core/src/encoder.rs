//! Frozen toy dual encoders with per-layer prefix prompt injection.
//!
//! Each tower is a pre-LN transformer. Before frozen block `l` runs, a
//! prompted forward adds a cross-attention residual over the layer's prefix:
//!
//! ```text
//! h ← h + s_l · Attn(h, K_l, V_l)
//! h ← Block_l(h)
//! ```
//!
//! where `s_l` is the effective gate (gate value times prompting weight).
//! Queries come from `h` through the block's frozen query projection; the
//! prefix key and value matrices are used directly and the frozen output
//! projection maps the attended values back into the residual stream.
//! A scale of exactly zero skips the branch, so closed gates reproduce the
//! frozen forward bit for bit.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{lit, Embedding, Mat, Rng, Scalar};
use crate::tape::{NodeId, Tape};
use crate::TaskId;

/// Shape of both towers and their prompts.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Shared embedding dimension `d`.
    pub embed_dim: usize,
    pub image_width: usize,
    pub text_width: usize,
    pub image_layers: usize,
    pub text_layers: usize,
    /// Prefix length `l`.
    pub prompt_len: usize,
    pub heads: usize,
    /// Patch tokens per image.
    pub image_tokens: usize,
    pub patch_dim: usize,
    /// Tokens per class-name sequence.
    pub text_tokens: usize,
    pub vocab_size: usize,
    pub mlp_ratio: usize,
    /// Seed of the frozen weights.
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embed_dim: 32,
            image_width: 32,
            text_width: 32,
            image_layers: 3,
            text_layers: 2,
            prompt_len: 4,
            heads: 2,
            image_tokens: 4,
            patch_dim: 32,
            text_tokens: 6,
            vocab_size: 512,
            mlp_ratio: 2,
            seed: 0x5eed,
        }
    }
}

impl EncoderConfig {
    /// ViT-B/16-sized shapes: 768-wide image tower at depth 12, 512-wide
    /// text tower at depth 8, prefix length 8, shared dimension 512.
    pub fn full_scale() -> Self {
        EncoderConfig {
            embed_dim: 512,
            image_width: 768,
            text_width: 512,
            image_layers: 12,
            text_layers: 8,
            prompt_len: 8,
            heads: 8,
            image_tokens: 196,
            patch_dim: 768,
            text_tokens: 77,
            vocab_size: 49408,
            mlp_ratio: 4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("image_width", self.image_width),
            ("text_width", self.text_width),
            ("image_layers", self.image_layers),
            ("text_layers", self.text_layers),
            ("prompt_len", self.prompt_len),
            ("heads", self.heads),
            ("image_tokens", self.image_tokens),
            ("patch_dim", self.patch_dim),
            ("text_tokens", self.text_tokens),
            ("vocab_size", self.vocab_size),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("encoder.{name} must be at least 1")));
            }
        }
        if !self.image_width.is_multiple_of(self.heads)
            || !self.text_width.is_multiple_of(self.heads)
        {
            return Err(Error::Config(format!(
                "tower widths ({}, {}) must be divisible by heads ({})",
                self.image_width, self.text_width, self.heads
            )));
        }
        Ok(())
    }

    pub fn layers(&self, side: Side) -> usize {
        match side {
            Side::Image => self.image_layers,
            Side::Text => self.text_layers,
        }
    }

    pub fn width(&self, side: Side) -> usize {
        match side {
            Side::Image => self.image_width,
            Side::Text => self.text_width,
        }
    }

    /// Learnable prefix weights per task (key and value prefix per layer, both towers).
    pub fn prompt_params_per_task(&self) -> usize {
        2 * self.prompt_len
            * (self.image_layers * self.image_width + self.text_layers * self.text_width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Image,
    Text,
}

#[derive(Clone, Debug)]
struct Block<T> {
    wq: Mat<T>,
    wk: Mat<T>,
    wv: Mat<T>,
    wo: Mat<T>,
    w1: Mat<T>,
    w2: Mat<T>,
}

#[derive(Clone, Debug)]
enum Input<T> {
    /// `patch_dim × width` linear patch embedding.
    Patch(Mat<T>),
    /// `vocab × width` token table.
    Tokens(Mat<T>),
}

/// One frozen transformer tower.
#[derive(Clone, Debug)]
pub struct Tower<T> {
    width: usize,
    heads: usize,
    seq_len: usize,
    input: Input<T>,
    pos: Mat<T>,
    blocks: Vec<Block<T>>,
    proj: Mat<T>,
}

/// Tower weights placed on a tape as constants.
#[derive(Clone, Debug)]
pub struct BoundTower {
    input: Option<NodeId>,
    pos: NodeId,
    blocks: Vec<[NodeId; 6]>,
    proj: NodeId,
}

/// Scale applied to one layer's prompt residual.
#[derive(Clone, Copy, Debug)]
pub enum Scale<T> {
    Const(T),
    /// 1×1 tape node (e.g. a straight-through gate sample).
    Node(NodeId),
}

/// Prefix and scale for one prompted layer.
#[derive(Clone, Copy, Debug)]
pub struct Injection<T> {
    pub key: NodeId,
    pub value: NodeId,
    pub scale: Scale<T>,
}

impl<T: Scalar> Tower<T> {
    fn new(
        width: usize,
        heads: usize,
        layers: usize,
        seq_len: usize,
        input_rows: usize,
        patch: bool,
        cfg: &EncoderConfig,
        rng: &mut Rng,
    ) -> Self {
        let residual = 1.0 / (2.0 * layers as f64).sqrt();
        let std_w = 1.0 / (width as f64).sqrt();
        let hidden = cfg.mlp_ratio * width;
        let input = if patch {
            if input_rows == width {
                Input::Patch(Mat::random_orthogonal(width, rng))
            } else {
                Input::Patch(Mat::random_normal(
                    input_rows,
                    width,
                    1.0 / (input_rows as f64).sqrt(),
                    rng,
                ))
            }
        } else {
            Input::Tokens(Mat::random_normal(input_rows, width, 1.0, rng))
        };
        let pos = Mat::random_normal(seq_len, width, 0.1, rng);
        let blocks = (0..layers)
            .map(|_| Block {
                wq: Mat::random_normal(width, width, std_w, rng),
                wk: Mat::random_normal(width, width, std_w, rng),
                wv: Mat::random_normal(width, width, std_w, rng),
                wo: Mat::random_normal(width, width, std_w * residual, rng),
                w1: Mat::random_normal(width, hidden, std_w, rng),
                w2: Mat::random_normal(hidden, width, residual / (hidden as f64).sqrt(), rng),
            })
            .collect();
        let proj = if width == cfg.embed_dim {
            Mat::random_orthogonal(width, rng)
        } else {
            Mat::random_normal(width, cfg.embed_dim, 1.0 / (width as f64).sqrt(), rng)
        };
        Tower {
            width,
            heads,
            seq_len,
            input,
            pos,
            blocks,
            proj,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundTower {
        let input = match &self.input {
            Input::Patch(m) => Some(tape.constant(m.clone())),
            Input::Tokens(_) => None,
        };
        let pos = tape.constant(self.pos.clone());
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                [
                    tape.constant(b.wq.clone()),
                    tape.constant(b.wk.clone()),
                    tape.constant(b.wv.clone()),
                    tape.constant(b.wo.clone()),
                    tape.constant(b.w1.clone()),
                    tape.constant(b.w2.clone()),
                ]
            })
            .collect();
        let proj = tape.constant(self.proj.clone());
        BoundTower {
            input,
            pos,
            blocks,
            proj,
        }
    }

    /// Initial hidden state from a patch matrix node.
    pub fn embed_patches(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundTower,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = bound
            .input
            .ok_or_else(|| Error::Parameter("text tower has no patch embedding".into()))?;
        let (r, c) = tape.value(x).shape();
        let expected = (self.seq_len, tape.value(w).rows());
        if (r, c) != expected {
            return Err(Error::shape(
                "image input",
                format!("{expected:?}"),
                format!("{:?}", (r, c)),
            ));
        }
        let e = tape.matmul(x, w);
        Ok(tape.add(e, bound.pos))
    }

    /// Initial hidden state from token ids.
    pub fn embed_tokens(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundTower,
        tokens: &[u32],
    ) -> Result<NodeId> {
        let Input::Tokens(table) = &self.input else {
            return Err(Error::Parameter("image tower has no token table".into()));
        };
        if tokens.len() != self.seq_len {
            return Err(Error::shape("text input", self.seq_len, tokens.len()));
        }
        let mut m = Mat::zeros(self.seq_len, self.width);
        for (i, &t) in tokens.iter().enumerate() {
            let t = t as usize;
            if t >= table.rows() {
                return Err(Error::Parameter(format!(
                    "token {t} outside vocabulary of {}",
                    table.rows()
                )));
            }
            m.row_mut(i).copy_from_slice(table.row(t));
        }
        let e = tape.constant(m);
        Ok(tape.add(e, bound.pos))
    }

    /// Multi-head cross-attention of `h` (queries) over a prefix.
    pub fn prompt_attention(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundTower,
        layer: usize,
        h: NodeId,
        key: NodeId,
        value: NodeId,
    ) -> Result<NodeId> {
        let kv = tape.value(key).shape();
        if kv.1 != self.width || tape.value(value).shape() != kv {
            return Err(Error::shape(
                "prompt prefix",
                format!("(l, {})", self.width),
                format!("{:?} / {:?}", kv, tape.value(value).shape()),
            ));
        }
        let [wq, _, _, wo, _, _] = bound.blocks[layer];
        let q = tape.matmul(h, wq);
        let heads = self.attend(tape, q, key, value);
        Ok(tape.matmul(heads, wo))
    }

    fn attend(&self, tape: &mut Tape<T>, q: NodeId, k: NodeId, v: NodeId) -> NodeId {
        let dh = self.width / self.heads;
        let scale = lit::<T>(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let qh = tape.col_slice(q, hd * dh, dh);
            let kh = tape.col_slice(k, hd * dh, dh);
            let vh = tape.col_slice(v, hd * dh, dh);
            let s = tape.matmul_nt(qh, kh);
            let p = tape.softmax_rows(s, scale);
            outs.push(tape.matmul(p, vh));
        }
        if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)
        }
    }

    /// Adds the scaled prompt residual for `layer` to `h`.
    pub fn inject(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundTower,
        layer: usize,
        h: NodeId,
        inj: &Injection<T>,
    ) -> Result<NodeId> {
        if let Scale::Const(s) = inj.scale {
            if s == T::zero() {
                return Ok(h);
            }
        }
        let r = self.prompt_attention(tape, bound, layer, h, inj.key, inj.value)?;
        let r = match inj.scale {
            Scale::Const(s) if s == T::one() => r,
            Scale::Const(s) => tape.scale(r, s),
            Scale::Node(n) => tape.scale_by(r, n),
        };
        Ok(tape.add(h, r))
    }

    fn block(&self, tape: &mut Tape<T>, bound: &BoundTower, layer: usize, h: NodeId) -> NodeId {
        let [wq, wk, wv, wo, w1, w2] = bound.blocks[layer];
        let a = tape.layer_norm(h);
        let q = tape.matmul(a, wq);
        let k = tape.matmul(a, wk);
        let v = tape.matmul(a, wv);
        let att = self.attend(tape, q, k, v);
        let o = tape.matmul(att, wo);
        let h = tape.add(h, o);
        let m = tape.layer_norm(h);
        let u = tape.matmul(m, w1);
        let u = tape.gelu(u);
        let u = tape.matmul(u, w2);
        tape.add(h, u)
    }

    /// Runs every layer and returns the unnormalized 1×d feature.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundTower,
        h0: NodeId,
        injections: &[Option<Injection<T>>],
    ) -> Result<NodeId> {
        if !injections.is_empty() && injections.len() != self.layers() {
            return Err(Error::shape(
                "layer injections",
                self.layers(),
                injections.len(),
            ));
        }
        let mut h = h0;
        for l in 0..self.layers() {
            if let Some(Some(inj)) = injections.get(l) {
                h = self.inject(tape, bound, l, h, inj)?;
            }
            h = self.block(tape, bound, l, h);
        }
        let pooled = tape.mean_rows(h);
        let pooled = tape.layer_norm(pooled);
        Ok(tape.matmul(pooled, bound.proj))
    }

    fn digest_into(&self, hasher: &mut Sha256) {
        let mut feed = |m: &Mat<T>| {
            for &v in m.data() {
                hasher.update(v.bits().to_le_bytes());
            }
        };
        match &self.input {
            Input::Patch(m) | Input::Tokens(m) => feed(m),
        }
        feed(&self.pos);
        for b in &self.blocks {
            for m in [&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2] {
                feed(m);
            }
        }
        feed(&self.proj);
    }

    fn weight_count(&self) -> usize {
        let input = match &self.input {
            Input::Patch(m) | Input::Tokens(m) => m.data().len(),
        };
        input
            + self.pos.data().len()
            + self.proj.data().len()
            + self
                .blocks
                .iter()
                .map(|b| {
                    [&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2]
                        .iter()
                        .map(|m| m.data().len())
                        .sum::<usize>()
                })
                .sum::<usize>()
    }
}

/// Learnable per-layer prefixes of one encoder side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSide<T> {
    pub keys: Vec<Mat<T>>,
    pub values: Vec<Mat<T>>,
}

impl<T: Scalar> PromptSide<T> {
    pub fn zeros(layers: usize, len: usize, width: usize) -> Self {
        PromptSide {
            keys: vec![Mat::zeros(len, width); layers],
            values: vec![Mat::zeros(len, width); layers],
        }
    }

    pub fn random(layers: usize, len: usize, width: usize, std: f64, rng: &mut Rng) -> Self {
        let mut keys = Vec::with_capacity(layers);
        let mut values = Vec::with_capacity(layers);
        for _ in 0..layers {
            keys.push(Mat::random_normal(len, width, std, rng));
            values.push(Mat::random_normal(len, width, std, rng));
        }
        PromptSide { keys, values }
    }

    pub fn layers(&self) -> usize {
        self.keys.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.keys
            .iter()
            .chain(&self.values)
            .map(|m| m.data().len())
            .sum()
    }
}

/// One task's prompt pool for both encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptPool<T> {
    pub task: TaskId,
    pub image: PromptSide<T>,
    pub text: PromptSide<T>,
    pub trainable: bool,
}

impl<T: Scalar> PromptPool<T> {
    pub fn random(task: TaskId, cfg: &EncoderConfig, std: f64, rng: &mut Rng) -> Self {
        PromptPool {
            task,
            image: PromptSide::random(cfg.image_layers, cfg.prompt_len, cfg.image_width, std, rng),
            text: PromptSide::random(cfg.text_layers, cfg.prompt_len, cfg.text_width, std, rng),
            trainable: true,
        }
    }

    pub fn zeros(task: TaskId, cfg: &EncoderConfig) -> Self {
        PromptPool {
            task,
            image: PromptSide::zeros(cfg.image_layers, cfg.prompt_len, cfg.image_width),
            text: PromptSide::zeros(cfg.text_layers, cfg.prompt_len, cfg.text_width),
            trainable: true,
        }
    }

    pub fn side(&self, side: Side) -> &PromptSide<T> {
        match side {
            Side::Image => &self.image,
            Side::Text => &self.text,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.image.parameter_count() + self.text.parameter_count()
    }
}

/// The frozen image and text towers.
#[derive(Clone, Debug)]
pub struct FrozenBackbone<T> {
    config: EncoderConfig,
    image: Tower<T>,
    text: Tower<T>,
}

impl<T: Scalar> FrozenBackbone<T> {
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(config.seed, 0xbac_b0e);
        let image = Tower::new(
            config.image_width,
            config.heads,
            config.image_layers,
            config.image_tokens,
            config.patch_dim,
            true,
            config,
            &mut rng,
        );
        let text = Tower::new(
            config.text_width,
            config.heads,
            config.text_layers,
            config.text_tokens,
            config.vocab_size,
            false,
            config,
            &mut rng,
        );
        Ok(FrozenBackbone {
            config: config.clone(),
            image,
            text,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tower(&self, side: Side) -> &Tower<T> {
        match side {
            Side::Image => &self.image,
            Side::Text => &self.text,
        }
    }

    pub fn image(&self) -> &Tower<T> {
        &self.image
    }

    pub fn text(&self) -> &Tower<T> {
        &self.text
    }

    fn check_gates(&self, side: Side, prompts: Option<&PromptSide<T>>, gates: &[T]) -> Result<()> {
        let Some(p) = prompts else { return Ok(()) };
        let layers = self.config.layers(side);
        if gates.len() != layers {
            return Err(Error::shape("gate vector", layers, gates.len()));
        }
        if p.layers() != layers {
            return Err(Error::shape("prompt pool depth", layers, p.layers()));
        }
        if let Some(g) = gates
            .iter()
            .find(|g| !(**g >= T::zero() && **g <= T::one()))
        {
            return Err(Error::Parameter(format!("gate value {g} outside [0, 1]")));
        }
        Ok(())
    }

    fn injections(
        tape: &mut Tape<T>,
        prompts: Option<&PromptSide<T>>,
        gates: &[T],
    ) -> Vec<Option<Injection<T>>> {
        let Some(p) = prompts else { return Vec::new() };
        gates
            .iter()
            .enumerate()
            .map(|(l, &g)| {
                (g != T::zero()).then(|| Injection {
                    key: tape.constant(p.keys[l].clone()),
                    value: tape.constant(p.values[l].clone()),
                    scale: Scale::Const(g),
                })
            })
            .collect()
    }

    /// Image feature; with no pool (or all-zero gates) this is the frozen forward.
    pub fn encode_image(
        &self,
        x: &Mat<T>,
        pool: Option<&PromptPool<T>>,
        gates: &[T],
    ) -> Result<Embedding<T>> {
        let side = pool.map(|p| &p.image);
        self.check_gates(Side::Image, side, gates)?;
        let mut tape = Tape::new();
        let bound = self.image.bind(&mut tape);
        let xin = tape.constant(x.clone());
        let h0 = self.image.embed_patches(&mut tape, &bound, xin)?;
        let inj = Self::injections(&mut tape, side, gates);
        let out = self.image.forward(&mut tape, &bound, h0, &inj)?;
        Ok(Embedding(tape.value(out).data().to_vec()))
    }

    /// Text feature of a class-name token sequence.
    pub fn encode_text(
        &self,
        tokens: &[u32],
        pool: Option<&PromptPool<T>>,
        gates: &[T],
    ) -> Result<Embedding<T>> {
        let side = pool.map(|p| &p.text);
        self.check_gates(Side::Text, side, gates)?;
        let mut tape = Tape::new();
        let bound = self.text.bind(&mut tape);
        let h0 = self.text.embed_tokens(&mut tape, &bound, tokens)?;
        let inj = Self::injections(&mut tape, side, gates);
        let out = self.text.forward(&mut tape, &bound, h0, &inj)?;
        Ok(Embedding(tape.value(out).data().to_vec()))
    }

    pub fn frozen_image(&self, x: &Mat<T>) -> Result<Embedding<T>> {
        self.encode_image(x, None, &[])
    }

    pub fn frozen_text(&self, tokens: &[u32]) -> Result<Embedding<T>> {
        self.encode_text(tokens, None, &[])
    }

    /// SHA-256 over every frozen weight.
    pub fn parameter_digest(&self) -> String {
        let mut hasher = Sha256::new();
        self.image.digest_into(&mut hasher);
        self.text.digest_into(&mut hasher);
        hex::encode(hasher.finalize())
    }

    pub fn frozen_weight_count(&self) -> usize {
        self.image.weight_count() + self.text.weight_count()
    }
}
