//! Parameter containers and transformer building blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamKey, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named parameter tensors belonging to one model component.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<S> {
    group: u8,
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new(group: u8) -> Self {
        Self { group, names: Vec::new(), tensors: Vec::new() }
    }

    pub fn group(&self) -> u8 {
        self.group
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<S>) -> u32 {
        self.names.push(name.into());
        self.tensors.push(t);
        (self.tensors.len() - 1) as u32
    }

    pub fn key(&self, index: u32) -> ParamKey {
        ParamKey { group: self.group, index }
    }

    pub fn get(&self, index: u32) -> &Tensor<S> {
        &self.tensors[index as usize]
    }

    pub fn get_mut(&mut self, index: u32) -> &mut Tensor<S> {
        &mut self.tensors[index as usize]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn index_of(&self, name: &str) -> Option<u32> {
        self.names.iter().position(|n| n == name).map(|i| i as u32)
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            group: self.group,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// A parameter set viewed through a graph with a fixed trainability flag.
#[derive(Clone, Copy)]
pub struct Bound<'p, S> {
    pub params: &'p ParamSet<S>,
    pub trainable: bool,
}

impl<'p, S: Scalar> Bound<'p, S> {
    pub fn new(params: &'p ParamSet<S>, trainable: bool) -> Self {
        Self { params, trainable }
    }

    pub fn var(&self, g: &mut Graph<'p, S>, index: u32) -> Var {
        g.param(self.params.key(index), self.params.get(index), self.trainable)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// N(0, 1/fan_in).
    Scaled,
    /// N(0, std^2).
    Normal(f64),
    Zeros,
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: u32,
    b: u32,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = match init {
            Init::Scaled => Tensor::randn(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng),
            Init::Normal(std) => Tensor::randn(fan_in, fan_out, std, rng),
            Init::Zeros => Tensor::zeros(fan_in, fan_out),
        };
        let w = ps.add(format!("{name}.weight"), w);
        let b = ps.add(format!("{name}.bias"), Tensor::zeros(1, fan_out));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward<'p, S: Scalar>(&self, g: &mut Graph<'p, S>, p: Bound<'p, S>, x: Var) -> Var {
        let w = p.var(g, self.w);
        let b = p.var(g, self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn weight_index(&self) -> u32 {
        self.w
    }

    pub fn bias_index(&self) -> u32 {
        self.b
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: u32,
    beta: u32,
}

impl LayerNorm {
    pub fn new<S: Scalar>(ps: &mut ParamSet<S>, name: &str, width: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Tensor::filled(1, width, S::one()));
        let beta = ps.add(format!("{name}.beta"), Tensor::zeros(1, width));
        Self { gamma, beta }
    }

    pub fn forward<'p, S: Scalar>(&self, g: &mut Graph<'p, S>, p: Bound<'p, S>, x: Var) -> Var {
        let gamma = p.var(g, self.gamma);
        let beta = p.var(g, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<S>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(ps, &format!("{name}.q"), width, width, Init::Scaled, rng),
            k: Linear::new(ps, &format!("{name}.k"), width, width, Init::Scaled, rng),
            v: Linear::new(ps, &format!("{name}.v"), width, width, Init::Scaled, rng),
            o: Linear::new(ps, &format!("{name}.o"), width, width, Init::Scaled, rng),
            heads,
        }
    }

    /// `queries` attend over `memory`; pass the same node for self-attention.
    pub fn forward<'p, S: Scalar>(
        &self,
        g: &mut Graph<'p, S>,
        p: Bound<'p, S>,
        queries: Var,
        memory: Var,
        causal: bool,
    ) -> Var {
        let q = self.q.forward(g, p, queries);
        let k = self.k.forward(g, p, memory);
        let v = self.v.forward(g, p, memory);
        let a = g.attention(q, k, v, self.heads, causal);
        self.o.forward(g, p, a)
    }

    /// Self-attention for decoding: new rows attend over cached keys/values plus themselves.
    /// A multi-row call is only valid on an empty cache.
    pub fn forward_cached<'p, S: Scalar>(
        &self,
        g: &mut Graph<'p, S>,
        p: Bound<'p, S>,
        x: Var,
        cache: &mut LayerCache<S>,
    ) -> Var {
        let n = g.value(x).rows();
        assert!(cache.keys.is_none() || n == 1, "multi-row step on a warm cache");
        let q = self.q.forward(g, p, x);
        let k = self.k.forward(g, p, x);
        let v = self.v.forward(g, p, x);
        let (k, v) = match (cache.keys.take(), cache.values.take()) {
            (Some(ck), Some(cv)) => {
                let ck = g.constant(ck);
                let cv = g.constant(cv);
                (g.concat_rows(&[ck, k]), g.concat_rows(&[cv, v]))
            }
            _ => (k, v),
        };
        cache.keys = Some(g.value(k).clone());
        cache.values = Some(g.value(v).clone());
        let a = g.attention(q, k, v, self.heads, n > 1);
        self.o.forward(g, p, a)
    }

    pub fn projections(&self) -> [&Linear; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<S>,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(ps, &format!("{name}.up"), width, hidden, Init::Scaled, rng),
            down: Linear::new(ps, &format!("{name}.down"), hidden, width, Init::Scaled, rng),
        }
    }

    pub fn forward<'p, S: Scalar>(&self, g: &mut Graph<'p, S>, p: Bound<'p, S>, x: Var) -> Var {
        let h = self.up.forward(g, p, x);
        let h = g.gelu(h);
        self.down.forward(g, p, h)
    }

    pub fn layers(&self) -> [&Linear; 2] {
        [&self.up, &self.down]
    }
}

/// Pre-norm transformer block with an optional cross-attention sublayer.
#[derive(Clone, Debug)]
pub struct Block {
    ln_self: LayerNorm,
    self_attn: Attention,
    cross: Option<(LayerNorm, Attention)>,
    ln_ff: LayerNorm,
    ff: FeedForward,
    causal: bool,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<S>,
        name: &str,
        width: usize,
        heads: usize,
        ff_hidden: usize,
        causal: bool,
        with_cross: bool,
        rng: &mut R,
    ) -> Self {
        let ln_self = LayerNorm::new(ps, &format!("{name}.ln_self"), width);
        let self_attn = Attention::new(ps, &format!("{name}.self_attn"), width, heads, rng);
        let cross = with_cross.then(|| {
            (
                LayerNorm::new(ps, &format!("{name}.ln_cross"), width),
                Attention::new(ps, &format!("{name}.cross_attn"), width, heads, rng),
            )
        });
        let ln_ff = LayerNorm::new(ps, &format!("{name}.ln_ff"), width);
        let ff = FeedForward::new(ps, &format!("{name}.ff"), width, ff_hidden, rng);
        Self { ln_self, self_attn, cross, ln_ff, ff, causal }
    }

    pub fn forward<'p, S: Scalar>(
        &self,
        g: &mut Graph<'p, S>,
        p: Bound<'p, S>,
        x: Var,
        memory: Option<Var>,
    ) -> Var {
        let h = self.ln_self.forward(g, p, x);
        let a = self.self_attn.forward(g, p, h, h, self.causal);
        let mut x = g.add(x, a);
        if let (Some((ln, attn)), Some(mem)) = (&self.cross, memory) {
            let h = ln.forward(g, p, x);
            let a = attn.forward(g, p, h, mem, false);
            x = g.add(x, a);
        }
        let h = self.ln_ff.forward(g, p, x);
        let f = self.ff.forward(g, p, h);
        g.add(x, f)
    }

    /// Causal decoding step without cross-attention.
    pub fn forward_cached<'p, S: Scalar>(
        &self,
        g: &mut Graph<'p, S>,
        p: Bound<'p, S>,
        x: Var,
        cache: &mut LayerCache<S>,
    ) -> Var {
        let h = self.ln_self.forward(g, p, x);
        let a = self.self_attn.forward_cached(g, p, h, cache);
        let x = g.add(x, a);
        let h = self.ln_ff.forward(g, p, x);
        let f = self.ff.forward(g, p, h);
        g.add(x, f)
    }

    pub fn parts(&self) -> (&LayerNorm, &Attention, &LayerNorm, &FeedForward) {
        (&self.ln_self, &self.self_attn, &self.ln_ff, &self.ff)
    }
}

/// Token + position embeddings followed by a stack of blocks and a final norm.
#[derive(Clone, Debug)]
pub struct TransformerStack {
    tok: u32,
    pos: u32,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    pub width: usize,
    pub max_len: usize,
}

impl TransformerStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<S>,
        name: &str,
        vocab: usize,
        max_len: usize,
        width: usize,
        heads: usize,
        layers: usize,
        causal: bool,
        rng: &mut R,
    ) -> Self {
        let tok = ps.add(format!("{name}.tok_emb"), Tensor::randn(vocab, width, 0.02, rng));
        let pos = ps.add(format!("{name}.pos_emb"), Tensor::randn(max_len, width, 0.02, rng));
        let blocks = (0..layers)
            .map(|i| {
                Block::new(ps, &format!("{name}.block{i}"), width, heads, 4 * width, causal, false, rng)
            })
            .collect();
        let ln_f = LayerNorm::new(ps, &format!("{name}.ln_f"), width);
        Self { tok, pos, blocks, ln_f, width, max_len }
    }

    /// Embeds `ids` and appends them after `prefix` rows (if any), then runs the stack.
    pub fn forward<'p, S: Scalar>(
        &self,
        g: &mut Graph<'p, S>,
        p: Bound<'p, S>,
        prefix: Option<Var>,
        ids: &[usize],
    ) -> Var {
        let table = p.var(g, self.tok);
        let tokens = g.embedding(table, ids);
        let x = match prefix {
            Some(pre) => g.concat_rows(&[pre, tokens]),
            None => tokens,
        };
        let n = g.value(x).rows();
        assert!(n <= self.max_len, "sequence of {n} exceeds position table {}", self.max_len);
        let pos_table = p.var(g, self.pos);
        let pos = g.slice_rows(pos_table, 0, n);
        let mut x = g.add(x, pos);
        for b in &self.blocks {
            x = b.forward(g, p, x, None);
        }
        self.ln_f.forward(g, p, x)
    }

    /// Incremental forward for decoding. The first call may pass a prefix and
    /// several ids; later calls pass one id at a time.
    pub fn forward_cached<'p, S: Scalar>(
        &self,
        g: &mut Graph<'p, S>,
        p: Bound<'p, S>,
        prefix: Option<Var>,
        ids: &[usize],
        cache: &mut StackCache<S>,
    ) -> Var {
        if cache.layers.is_empty() {
            cache.layers = vec![LayerCache::default(); self.blocks.len()];
        }
        let table = p.var(g, self.tok);
        let tokens = g.embedding(table, ids);
        let x = match prefix {
            Some(pre) => g.concat_rows(&[pre, tokens]),
            None => tokens,
        };
        let n = g.value(x).rows();
        let start = cache.len;
        assert!(start + n <= self.max_len, "sequence of {} exceeds position table {}", start + n, self.max_len);
        let pos_table = p.var(g, self.pos);
        let pos = g.slice_rows(pos_table, start, n);
        let mut x = g.add(x, pos);
        for (b, c) in self.blocks.iter().zip(cache.layers.iter_mut()) {
            x = b.forward_cached(g, p, x, c);
        }
        cache.len += n;
        self.ln_f.forward(g, p, x)
    }

    pub fn token_table(&self) -> u32 {
        self.tok
    }

    pub fn position_table(&self) -> u32 {
        self.pos
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn final_norm(&self) -> &LayerNorm {
        &self.ln_f
    }
}

#[derive(Clone, Debug)]
pub struct LayerCache<S> {
    keys: Option<Tensor<S>>,
    values: Option<Tensor<S>>,
}

impl<S> Default for LayerCache<S> {
    fn default() -> Self {
        Self { keys: None, values: None }
    }
}

/// Per-layer key/value rows seen so far by [`TransformerStack::forward_cached`].
#[derive(Clone, Debug)]
pub struct StackCache<S> {
    layers: Vec<LayerCache<S>>,
    len: usize,
}

impl<S> Default for StackCache<S> {
    fn default() -> Self {
        Self { layers: Vec::new(), len: 0 }
    }
}

impl<S> StackCache<S> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}
