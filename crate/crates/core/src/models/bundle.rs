//! The five learnable components and their forward passes.

use log::warn;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::policy::{mix_latent, Codebook, LatentPolicy, PolicyDistribution};
use super::tokenizer::Tokenizer;
use crate::autograd::{Graph, Var};
use crate::corpus::{Role, Turn};
use crate::error::{Error, Result};
use crate::nn::{Block, Bound, Init, LayerNorm, Linear, ParamSet, StackCache, TransformerStack};
use crate::rng::rng_for;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ENCODER: u8 = 0;
pub const PLANNER: u8 = 1;
pub const CODEBOOK: u8 = 2;
pub const PFORMER: u8 = 3;
pub const GENERATOR: u8 = 4;
pub const Q_HEAD: u8 = 5;
pub const V_HEAD: u8 = 6;

pub const COMPONENTS: [(&str, u8); 7] = [
    ("encoder", ENCODER),
    ("planner", PLANNER),
    ("codebook", CODEBOOK),
    ("pformer", PFORMER),
    ("generator", GENERATOR),
    ("q_head", Q_HEAD),
    ("v_head", V_HEAD),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Codebook size.
    pub num_codes: usize,
    /// Number of policy tokens produced by the P-Former.
    pub policy_tokens: usize,
    pub pformer_layers: usize,
    pub latent_dim: usize,
    pub width: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub generator_layers: usize,
    pub head_hidden: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_codes: 24,
            policy_tokens: 8,
            pformer_layers: 6,
            latent_dim: 64,
            width: 128,
            heads: 4,
            encoder_layers: 2,
            generator_layers: 2,
            head_hidden: 128,
            max_seq_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("K", self.num_codes),
            ("T", self.policy_tokens),
            ("L", self.pformer_layers),
            ("d", self.latent_dim),
            ("d_model", self.width),
            ("heads", self.heads),
            ("encoder_layers", self.encoder_layers),
            ("generator_layers", self.generator_layers),
            ("head_hidden", self.head_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::config("d_model", format!("{} is not divisible by {} heads", self.width, self.heads)));
        }
        if self.max_seq_len < 2 {
            return Err(Error::config("max_seq_len", "must be at least 2"));
        }
        Ok(())
    }

    /// Generator positions: policy tokens, history, the reply marker and the target.
    pub fn generator_positions(&self) -> usize {
        self.policy_tokens + 2 * self.max_seq_len + 1
    }
}

/// Which components receive gradients in a graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Trainable {
    pub encoder: bool,
    pub planner: bool,
    pub codebook: bool,
    pub pformer: bool,
    pub generator: bool,
    pub q_head: bool,
    pub v_head: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        encoder: false,
        planner: false,
        codebook: false,
        pformer: false,
        generator: false,
        q_head: false,
        v_head: false,
    };
}

#[derive(Clone, Debug)]
struct Mlp {
    hidden: Linear,
    out: Linear,
}

impl Mlp {
    fn new<S: Scalar, R: Rng + ?Sized>(ps: &mut ParamSet<S>, name: &str, width: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(ps, &format!("{name}.hidden"), width, hidden, Init::Scaled, rng),
            out: Linear::new(ps, &format!("{name}.out"), hidden, out, Init::Zeros, rng),
        }
    }

    fn forward<'p, S: Scalar>(&self, g: &mut Graph<'p, S>, p: Bound<'p, S>, x: Var) -> Var {
        let h = self.hidden.forward(g, p, x);
        let h = g.gelu(h);
        self.out.forward(g, p, h)
    }
}

#[derive(Clone, Debug)]
struct Classifier {
    trunk: TransformerStack,
    head: Linear,
}

#[derive(Clone, Debug)]
struct PFormerLayout {
    queries: u32,
    latent_proj: Linear,
    latent_norm: LayerNorm,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    out: Linear,
}

#[derive(Clone, Debug)]
struct GeneratorLayout {
    stack: TransformerStack,
    lm_head: Linear,
}

/// T x d_model soft prefix for the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTokens<S> {
    pub tokens: Tensor<S>,
}

/// Teacher-forcing layout of one generator example.
#[derive(Clone, Debug)]
pub struct GeneratorExample {
    pub ids: Vec<usize>,
    /// Index in `ids` of the reply marker; its row predicts the first target token.
    pub start: usize,
    pub targets: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeStrategy {
    Greedy,
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub strategy: DecodeStrategy,
    pub max_new_tokens: usize,
    pub temperature: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self { strategy: DecodeStrategy::Greedy, max_new_tokens: 32, temperature: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub turn: Turn,
    /// No end-of-sequence token within the budget.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlannerOutput {
    pub policy: PolicyDistribution,
    pub q: Vec<f64>,
    pub v: f64,
}

/// All parameters plus the tokenizer and the architecture they were built for.
#[derive(Clone, Debug)]
pub struct ModelBundle<S> {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    /// Set once the generator has been pretrained; no later graph may update it.
    pub generator_frozen: bool,
    params: Vec<ParamSet<S>>,
    encoder: Classifier,
    planner: Classifier,
    q_head: Mlp,
    v_head: Mlp,
    pformer: PFormerLayout,
    generator: GeneratorLayout,
}

impl<S: Scalar> ModelBundle<S> {
    pub fn new(config: ModelConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = tokenizer.len();
        let c = &config;
        let mut params: Vec<ParamSet<S>> = (0..COMPONENTS.len() as u8).map(ParamSet::new).collect();

        let mut rng = rng_for(seed, "init/encoder");
        let ps = &mut params[ENCODER as usize];
        let trunk = TransformerStack::new(ps, "trunk", vocab, c.max_seq_len, c.width, c.heads, c.encoder_layers, false, &mut rng);
        let head = Linear::new(ps, "head", c.width, c.num_codes, Init::Zeros, &mut rng);
        let encoder = Classifier { trunk, head };

        let mut rng = rng_for(seed, "init/planner");
        let ps = &mut params[PLANNER as usize];
        let trunk = TransformerStack::new(ps, "trunk", vocab, c.max_seq_len, c.width, c.heads, c.encoder_layers, false, &mut rng);
        let head = Linear::new(ps, "policy_head", c.width, c.num_codes, Init::Zeros, &mut rng);
        let planner = Classifier { trunk, head };
        let q_head = Mlp::new(&mut params[Q_HEAD as usize], "q", c.width, c.head_hidden, c.num_codes, &mut rng);
        let v_head = Mlp::new(&mut params[V_HEAD as usize], "v", c.width, c.head_hidden, 1, &mut rng);

        let mut rng = rng_for(seed, "init/codebook");
        params[CODEBOOK as usize].add("vectors", Tensor::randn(c.num_codes, c.latent_dim, 0.02, &mut rng));

        let mut rng = rng_for(seed, "init/pformer");
        let ps = &mut params[PFORMER as usize];
        let queries = ps.add("queries", Tensor::randn(c.policy_tokens, c.width, 0.02, &mut rng));
        let latent_proj = Linear::new(ps, "latent_proj", c.latent_dim, c.width, Init::Scaled, &mut rng);
        let latent_norm = LayerNorm::new(ps, "latent_norm", c.width);
        let blocks = (0..c.pformer_layers)
            .map(|i| Block::new(ps, &format!("block{i}"), c.width, c.heads, 4 * c.width, false, true, &mut rng))
            .collect();
        let final_norm = LayerNorm::new(ps, "final_norm", c.width);
        let out = Linear::new(ps, "out", c.width, c.width, Init::Scaled, &mut rng);
        let pformer = PFormerLayout { queries, latent_proj, latent_norm, blocks, final_norm, out };

        let mut rng = rng_for(seed, "init/generator");
        let ps = &mut params[GENERATOR as usize];
        let stack = TransformerStack::new(ps, "decoder", vocab, c.generator_positions(), c.width, c.heads, c.generator_layers, true, &mut rng);
        let lm_head = Linear::new(ps, "lm_head", c.width, vocab, Init::Scaled, &mut rng);
        let generator = GeneratorLayout { stack, lm_head };

        Ok(Self { config, tokenizer, generator_frozen: false, params, encoder, planner, q_head, v_head, pformer, generator })
    }

    pub fn params(&self, group: u8) -> &ParamSet<S> {
        &self.params[group as usize]
    }

    pub fn params_mut(&mut self, group: u8) -> &mut ParamSet<S> {
        &mut self.params[group as usize]
    }

    pub fn all_params(&self) -> &[ParamSet<S>] {
        &self.params
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(ParamSet::all_finite)
    }

    /// Same architecture and values in another precision.
    pub fn cast<T: Scalar>(&self) -> ModelBundle<T> {
        ModelBundle {
            config: self.config.clone(),
            tokenizer: self.tokenizer.clone(),
            generator_frozen: self.generator_frozen,
            params: self.params.iter().map(ParamSet::cast).collect(),
            encoder: self.encoder.clone(),
            planner: self.planner.clone(),
            q_head: self.q_head.clone(),
            v_head: self.v_head.clone(),
            pformer: self.pformer.clone(),
            generator: self.generator.clone(),
        }
    }

    pub fn codebook(&self) -> Codebook<S> {
        Codebook::new(self.params(CODEBOOK).get(0).clone()).expect("codebook shape fixed at construction")
    }

    pub fn num_codes(&self) -> usize {
        self.config.num_codes
    }

    fn bound(&self, group: u8, trainable: bool) -> Bound<'_, S> {
        let trainable = trainable && !(group == GENERATOR && self.generator_frozen);
        Bound::new(&self.params[group as usize], trainable)
    }

    pub fn encoder_ids(&self, utterance: &Turn) -> Vec<usize> {
        let mut words = self.tokenizer.encode_text(&utterance.text);
        let room = self.config.max_seq_len - 1;
        if words.len() > room {
            warn!("utterance of {} tokens truncated to {room}", words.len());
            words.truncate(room);
        }
        let mut ids = vec![self.tokenizer.cls()];
        ids.extend(words);
        ids
    }

    pub fn planner_ids(&self, history: &[Turn]) -> Vec<usize> {
        let mut ids = vec![self.tokenizer.cls()];
        ids.extend(self.tokenizer.encode_history(history, self.config.max_seq_len - 1));
        ids
    }

    /// Layout for scoring `target` after `history`; errors if the target does not fit.
    pub fn generator_example(&self, history: &[Turn], target: &Turn) -> Result<GeneratorExample> {
        let mut targets = self.tokenizer.encode_text(&target.text);
        targets.push(self.tokenizer.eos());
        if targets.len() > self.config.max_seq_len {
            return Err(Error::TooLong { len: targets.len(), max: self.config.max_seq_len });
        }
        let mut ids = self.tokenizer.encode_history(history, self.config.max_seq_len);
        let start = ids.len();
        ids.push(self.tokenizer.marker(target.role));
        ids.extend_from_slice(&targets[..targets.len() - 1]);
        Ok(GeneratorExample { ids, start, targets })
    }

    // ---- graph builders -------------------------------------------------

    /// 1 x K encoder logits.
    pub fn encoder_logits<'p>(&'p self, g: &mut Graph<'p, S>, ids: &[usize], tr: Trainable) -> Var {
        let p = self.bound(ENCODER, tr.encoder);
        let h = self.encoder.trunk.forward(g, p, None, ids);
        let pooled = g.slice_rows(h, 0, 1);
        self.encoder.head.forward(g, p, pooled)
    }

    /// 1 x d_model pooled planner state.
    pub fn planner_state<'p>(&'p self, g: &mut Graph<'p, S>, ids: &[usize], tr: Trainable) -> Var {
        let p = self.bound(PLANNER, tr.planner);
        let h = self.planner.trunk.forward(g, p, None, ids);
        g.slice_rows(h, 0, 1)
    }

    pub fn policy_logits<'p>(&'p self, g: &mut Graph<'p, S>, state: Var, tr: Trainable) -> Var {
        let p = self.bound(PLANNER, tr.planner);
        self.planner.head.forward(g, p, state)
    }

    /// 1 x K Q values. The heads read a detached copy of the planner state.
    pub fn q_head<'p>(&'p self, g: &mut Graph<'p, S>, state: Var, tr: Trainable) -> Var {
        let s = g.detach(state);
        self.q_head.forward(g, self.bound(Q_HEAD, tr.q_head), s)
    }

    pub fn v_head<'p>(&'p self, g: &mut Graph<'p, S>, state: Var, tr: Trainable) -> Var {
        let s = g.detach(state);
        self.v_head.forward(g, self.bound(V_HEAD, tr.v_head), s)
    }

    /// 1 x d mixture of codebook rows weighted by the 1 x K `probs`.
    pub fn mix<'p>(&'p self, g: &mut Graph<'p, S>, probs: Var, tr: Trainable) -> Var {
        let z = self.bound(CODEBOOK, tr.codebook).var(g, 0);
        g.matmul(probs, z)
    }

    /// T x d_model policy tokens from a 1 x d latent.
    pub fn pformer<'p>(&'p self, g: &mut Graph<'p, S>, latent: Var, tr: Trainable) -> Var {
        let pf = &self.pformer;
        let p = self.bound(PFORMER, tr.pformer);
        let m = pf.latent_proj.forward(g, p, latent);
        let memory = pf.latent_norm.forward(g, p, m);
        let mut x = p.var(g, pf.queries);
        for b in &pf.blocks {
            x = b.forward(g, p, x, Some(memory));
        }
        let x = pf.final_norm.forward(g, p, x);
        pf.out.forward(g, p, x)
    }

    /// Summed next-token NLL of the example's targets given the soft prefix.
    pub fn generator_nll_sum<'p>(&'p self, g: &mut Graph<'p, S>, prefix: Var, ex: &GeneratorExample, tr: Trainable) -> Var {
        let p = self.bound(GENERATOR, tr.generator);
        let t = g.value(prefix).rows();
        let h = self.generator.stack.forward(g, p, Some(prefix), &ex.ids);
        let rows = g.slice_rows(h, t + ex.start, ex.targets.len());
        let logits = self.generator.lm_head.forward(g, p, rows);
        g.nll(logits, &ex.targets)
    }

    /// Zero-valued stand-in prefix used while pretraining the generator.
    pub fn zero_prefix(&self) -> Tensor<S> {
        Tensor::zeros(self.config.policy_tokens, self.config.width)
    }

    // ---- eval-mode operations ------------------------------------------

    pub fn encode_utterance(&self, utterance: &Turn) -> PolicyDistribution {
        let mut g = Graph::new();
        let ids = self.encoder_ids(utterance);
        let logits = self.encoder_logits(&mut g, &ids, Trainable::NONE);
        softmax_dist(g.value(logits).data())
    }

    pub fn planner_outputs(&self, history: &[Turn]) -> PlannerOutput {
        let mut g = Graph::new();
        let ids = self.planner_ids(history);
        let state = self.planner_state(&mut g, &ids, Trainable::NONE);
        let logits = self.policy_logits(&mut g, state, Trainable::NONE);
        let q = self.q_head(&mut g, state, Trainable::NONE);
        let v = self.v_head(&mut g, state, Trainable::NONE);
        PlannerOutput {
            policy: softmax_dist(g.value(logits).data()),
            q: g.value(q).to_f64_vec(),
            v: g.value(v).item().as_f64(),
        }
    }

    pub fn plan_policy(&self, history: &[Turn]) -> PolicyDistribution {
        self.planner_outputs(history).policy
    }

    pub fn q_values(&self, history: &[Turn]) -> Vec<f64> {
        self.planner_outputs(history).q
    }

    pub fn v_value(&self, history: &[Turn]) -> f64 {
        self.planner_outputs(history).v
    }

    pub fn mix_latent(&self, dist: &PolicyDistribution) -> Result<LatentPolicy> {
        mix_latent(&self.codebook(), dist)
    }

    pub fn pformer_transform(&self, latent: &LatentPolicy) -> Result<PolicyTokens<S>> {
        if latent.vector.len() != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latent of length {} for latent_dim {}",
                latent.vector.len(),
                self.config.latent_dim
            )));
        }
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_f64(1, latent.vector.len(), &latent.vector)?);
        let out = self.pformer(&mut g, z, Trainable::NONE);
        Ok(PolicyTokens { tokens: g.value(out).clone() })
    }

    fn check_tokens(&self, tokens: &PolicyTokens<S>) -> Result<()> {
        let want = (self.config.policy_tokens, self.config.width);
        if tokens.tokens.shape() != want {
            return Err(Error::Shape(format!("policy tokens {:?}, expected {want:?}", tokens.tokens.shape())));
        }
        Ok(())
    }

    /// Mean NLL per target token (end-of-sequence included).
    pub fn generator_nll(&self, tokens: &PolicyTokens<S>, history: &[Turn], target: &Turn) -> Result<f64> {
        self.check_tokens(tokens)?;
        let ex = self.generator_example(history, target)?;
        let mut g = Graph::new();
        let prefix = g.constant(tokens.tokens.clone());
        let nll = self.generator_nll_sum(&mut g, prefix, &ex, Trainable::NONE);
        Ok(g.scalar(nll).as_f64() / ex.targets.len() as f64)
    }

    /// Log-probability of each target token (end-of-sequence included), fed one
    /// token at a time through the decoding cache.
    pub fn target_log_probs(&self, tokens: &PolicyTokens<S>, history: &[Turn], target: &Turn) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let ex = self.generator_example(history, target)?;
        let p = self.bound(GENERATOR, false);
        let mut cache = StackCache::default();
        let mut prefix = Some(tokens.tokens.clone());
        let mut step_ids = ex.ids[..=ex.start].to_vec();
        let mut out = Vec::with_capacity(ex.targets.len());
        for &t in &ex.targets {
            let mut g = Graph::new();
            let pre = prefix.take().map(|x| g.constant(x));
            let h = self.generator.stack.forward_cached(&mut g, p, pre, &step_ids, &mut cache);
            let n = g.value(h).rows();
            let last = g.slice_rows(h, n - 1, 1);
            let logits = self.generator.lm_head.forward(&mut g, p, last);
            let row: Vec<f64> = g.value(logits).to_f64_vec();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            out.push(row[t] - lse);
            step_ids = vec![t];
        }
        Ok(out)
    }

    /// Decodes a system reply. `rng` is only consulted when sampling.
    pub fn generate_response(
        &self,
        tokens: &PolicyTokens<S>,
        history: &[Turn],
        decode: &DecodeParams,
        rng: &mut impl Rng,
    ) -> Result<Generation> {
        self.check_tokens(tokens)?;
        if decode.max_new_tokens == 0 {
            return Err(Error::EmptyGeneration);
        }
        let budget = decode.max_new_tokens.min(self.config.max_seq_len);
        let mut ids = self.tokenizer.encode_history(history, self.config.max_seq_len);
        ids.push(self.tokenizer.marker(Role::System));
        let p = self.bound(GENERATOR, false);
        let mut cache = StackCache::default();
        let mut out = Vec::new();
        let mut step_ids = ids;
        let mut prefix = Some(tokens.tokens.clone());
        let mut truncated = true;
        for _ in 0..budget {
            let mut g = Graph::new();
            let pre = prefix.take().map(|t| g.constant(t));
            let h = self.generator.stack.forward_cached(&mut g, p, pre, &step_ids, &mut cache);
            let n = g.value(h).rows();
            let last = g.slice_rows(h, n - 1, 1);
            let logits = self.generator.lm_head.forward(&mut g, p, last);
            let next = pick_token(g.value(logits).data(), decode, rng);
            if next == self.tokenizer.eos() {
                truncated = false;
                break;
            }
            out.push(next);
            step_ids = vec![next];
        }
        if out.is_empty() {
            return Err(Error::EmptyGeneration);
        }
        Ok(Generation { turn: Turn::system(self.tokenizer.decode(&out)), truncated })
    }

    /// Planner-guided reply: plan, mix, transform, decode.
    pub fn respond(
        &self,
        history: &[Turn],
        policy: &PolicyDistribution,
        decode: &DecodeParams,
        rng: &mut impl Rng,
    ) -> Result<Generation> {
        let latent = self.mix_latent(policy)?;
        let tokens = self.pformer_transform(&latent)?;
        self.generate_response(&tokens, history, decode, rng)
    }

    pub(crate) fn replace_params(&mut self, group: u8, loaded: ParamSet<S>) -> Result<()> {
        let current = &self.params[group as usize];
        if current.names() != loaded.names() {
            return Err(Error::Validation(format!("component {group}: parameter names differ from the configured architecture")));
        }
        for (name, (a, b)) in current.names().iter().zip(current.tensors().iter().zip(loaded.tensors())) {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!("{name}: stored {:?}, expected {:?}", b.shape(), a.shape())));
            }
        }
        self.params[group as usize] = loaded;
        Ok(())
    }
}

/// Softmax in f64 so the simplex tolerance holds regardless of the model precision.
pub fn softmax_dist<S: Scalar>(logits: &[S]) -> PolicyDistribution {
    let xs: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    PolicyDistribution::new(exps.into_iter().map(|e| e / total).collect()).expect("softmax is a simplex")
}

fn pick_token<S: Scalar>(logits: &[S], decode: &DecodeParams, rng: &mut impl Rng) -> usize {
    let xs: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
    match decode.strategy {
        DecodeStrategy::Greedy => super::policy::argmax(&xs),
        DecodeStrategy::Sample => {
            let t = decode.temperature.max(1e-6);
            let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = xs.iter().map(|x| ((x - max) / t).exp()).collect();
            WeightedIndex::new(&w).map(|d| d.sample(rng)).unwrap_or_else(|_| super::policy::argmax(&xs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelBundle<f64> {
        let tok = Tokenizer::build(["hello there how are you", "i feel bad today"]);
        let cfg = ModelConfig {
            num_codes: 5,
            policy_tokens: 3,
            pformer_layers: 2,
            latent_dim: 6,
            width: 8,
            heads: 2,
            head_hidden: 8,
            max_seq_len: 12,
            ..ModelConfig::default()
        };
        ModelBundle::new(cfg, tok, 1).unwrap()
    }

    fn history() -> Vec<Turn> {
        vec![Turn::user("i feel bad today"), Turn::system("hello there")]
    }

    #[test]
    fn zero_heads_give_uniform_policies_and_zero_values() {
        let b = tiny();
        let p = b.encode_utterance(&Turn::system("how are you"));
        assert!(p.probs().iter().all(|&x| (x - 0.2).abs() < 1e-12));
        let out = b.planner_outputs(&[]);
        assert!(out.policy.probs().iter().all(|&x| (x - 0.2).abs() < 1e-12));
        assert!(out.q.iter().all(|&q| q == 0.0));
        assert_eq!(out.v, 0.0);
        assert_eq!(out.q.len(), 5);
    }

    #[test]
    fn pformer_shape_and_determinism() {
        let b = tiny();
        let z = b.mix_latent(&PolicyDistribution::one_hot(5, 2)).unwrap();
        let a = b.pformer_transform(&z).unwrap();
        assert_eq!(a.tokens.shape(), (3, 8));
        assert_eq!(a, b.pformer_transform(&z).unwrap());
        assert!(b.pformer_transform(&LatentPolicy { vector: vec![0.0; 5] }).is_err());
    }

    #[test]
    fn uniform_generator_head_costs_log_vocab() {
        let mut b = tiny();
        let v = b.tokenizer.len();
        for t in b.params_mut(GENERATOR).tensors_mut().iter_mut().rev().take(2) {
            t.fill(0.0);
        }
        let tokens = b.pformer_transform(&b.mix_latent(&PolicyDistribution::uniform(5)).unwrap()).unwrap();
        let nll = b.generator_nll(&tokens, &history(), &Turn::system("how are you")).unwrap();
        assert!((nll - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn single_class_logits_cost_nothing() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::from_vec(3, 1, vec![0.3, -2.0, 5.0]).unwrap());
        let nll = g.nll(logits, &[0, 0, 0]);
        assert_eq!(g.scalar(nll), 0.0);
    }

    #[test]
    fn overlong_target_is_rejected() {
        let b = tiny();
        let long = Turn::system(["hello"; 12].join(" "));
        let tokens = PolicyTokens { tokens: b.zero_prefix() };
        assert!(matches!(b.generator_nll(&tokens, &[], &long), Err(Error::TooLong { .. })));
    }

    #[test]
    fn freezing_does_not_change_the_forward() {
        let mut b = tiny();
        let ex = b.generator_example(&history(), &Turn::system("how are you")).unwrap();
        let run = |b: &ModelBundle<f64>, tr: Trainable| {
            let mut g = Graph::new();
            let pre = g.constant(b.zero_prefix());
            let v = b.generator_nll_sum(&mut g, pre, &ex, tr);
            (g.scalar(v), g.backward(v).len())
        };
        let all = Trainable { generator: true, ..Trainable::NONE };
        let (open, n_open) = run(&b, all);
        b.generator_frozen = true;
        let (frozen, n_frozen) = run(&b, all);
        assert_eq!(open, frozen);
        assert!(n_open > 0);
        assert_eq!(n_frozen, 0);
    }

    #[test]
    fn decoding_is_deterministic_and_bounded() {
        let b = tiny();
        let tokens = b.pformer_transform(&b.mix_latent(&PolicyDistribution::uniform(5)).unwrap()).unwrap();
        let mut rng = rng_for(0, "dec");
        let d = DecodeParams { max_new_tokens: 4, ..DecodeParams::default() };
        let a = b.generate_response(&tokens, &history(), &d, &mut rng);
        let c = b.generate_response(&tokens, &history(), &d, &mut rng);
        match (a, c) {
            (Ok(a), Ok(c)) => {
                assert_eq!(a, c);
                assert!(a.turn.text.split_whitespace().count() <= 4);
                assert_eq!(a.turn.role, Role::System);
            }
            (Err(Error::EmptyGeneration), Err(Error::EmptyGeneration)) => {}
            other => panic!("{other:?}"),
        }
        let zero = DecodeParams { max_new_tokens: 0, ..DecodeParams::default() };
        assert!(matches!(b.generate_response(&tokens, &[], &zero, &mut rng), Err(Error::EmptyGeneration)));
    }

    #[test]
    fn reconstruction_gradient_reaches_latent_and_codebook() {
        let b = tiny();
        let ex = b.generator_example(&history(), &Turn::system("how are you")).unwrap();
        let mut g = Graph::new();
        let tr = Trainable { codebook: true, pformer: true, ..Trainable::NONE };
        let probs = g.constant(Tensor::from_vec(1, 5, vec![0.1, 0.2, 0.3, 0.2, 0.2]).unwrap());
        let z = b.mix(&mut g, probs, tr);
        let tokens = b.pformer(&mut g, z, tr);
        let nll = b.generator_nll_sum(&mut g, tokens, &ex, tr);
        let dz = g.grad_of(nll, z).unwrap();
        assert!(dz.data().iter().any(|v| v.abs() > 0.0));
        let grads = g.backward(nll);
        let dcode = grads.get(&b.params(CODEBOOK).key(0)).unwrap();
        assert!(dcode.data().iter().any(|v| v.abs() > 0.0));
    }
}
