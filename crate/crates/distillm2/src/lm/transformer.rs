//! Small trainable causal transformer.
//!
//! One forward implementation serves both training and inference: the pure
//! evaluation path builds a throwaway graph with constant parameters, so
//! sampled probabilities and trained probabilities can never drift apart.
//! Every input is conditioned on an implicit leading BOS embedding, which
//! gives the model a well-defined next-token distribution for the empty
//! prefix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var, MASK_LOGIT};
use crate::error::{Error, Result};
use crate::lm::{LanguageModel, TokenId, BOS};

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct TransformerConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    /// Maximum input length including the implicit BOS position.
    pub max_len: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Parameter("vocab must be >= 2".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Parameter(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.max_len < 2 || self.ffn_hidden == 0 {
            return Err(Error::Parameter("degenerate transformer config".into()));
        }
        Ok(())
    }
}

/// Trainable causal transformer LM with named parameter tensors.
#[derive(Debug, Clone)]
pub struct TinyTransformerLM {
    cfg: TransformerConfig,
    params: Vec<(String, Tensor)>,
}

impl TinyTransformerLM {
    pub fn new(cfg: TransformerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let d = cfg.d_model;
        let emb_std = 0.5;
        let w_std = 0.4 / (d as f64).sqrt();

        fn push_normal(
            params: &mut Vec<(String, Tensor)>,
            name: String,
            shape: &[usize],
            std: f64,
            rng: &mut ChaCha8Rng,
        ) {
            let n: usize = shape.iter().product();
            let values = (0..n).map(|_| std * normal(rng)).collect();
            params.push((name, Tensor::new(shape.to_vec(), values).expect("finite init")));
        }

        push_normal(&mut params, "tok_emb".into(), &[cfg.vocab, d], emb_std, &mut rng);
        push_normal(&mut params, "pos_emb".into(), &[cfg.max_len, d], emb_std, &mut rng);
        for l in 0..cfg.n_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                push_normal(&mut params, format!("l{l}.attn.{w}"), &[d, d], w_std, &mut rng);
            }
            params.push((format!("l{l}.ln1"), Tensor::filled(&[d], 1.0)));
            params.push((format!("l{l}.ln2"), Tensor::filled(&[d], 1.0)));
            push_normal(&mut params, format!("l{l}.ffn.w1"), &[d, cfg.ffn_hidden], w_std, &mut rng);
            params.push((format!("l{l}.ffn.b1"), Tensor::zeros(&[cfg.ffn_hidden])));
            push_normal(
                &mut params,
                format!("l{l}.ffn.w2"),
                &[cfg.ffn_hidden, d],
                0.4 / (cfg.ffn_hidden as f64).sqrt(),
                &mut rng,
            );
            params.push((format!("l{l}.ffn.b2"), Tensor::zeros(&[d])));
        }
        params.push(("ln_f".into(), Tensor::filled(&[d], 1.0)));
        push_normal(&mut params, "lm_head".into(), &[d, cfg.vocab], w_std, &mut rng);

        Ok(TinyTransformerLM { cfg, params })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    pub fn named_params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Bind all parameters into a graph as leaves.
    pub fn bind<'m>(&'m self, g: &mut Graph, trainable: bool) -> Result<Session<'m>> {
        let mut vars = Vec::with_capacity(self.params.len());
        for (_, t) in &self.params {
            let v = if trainable { g.param(t)? } else { g.constant(t.clone())? };
            vars.push(v);
        }
        Ok(Session { model: self, vars })
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, t) in &self.params {
            out.extend_from_slice(t.values());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "flat parameter vector {} vs {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for (_, t) in &mut self.params {
            let n = t.numel();
            t.values_mut().copy_from_slice(&flat[offset..offset + n]);
            t.check_finite("set_flat_params")?;
            offset += n;
        }
        Ok(())
    }

    /// One SGD step: params -= lr * grads, with per-parameter gradient
    /// vectors in binding order (zeros where a parameter was unused).
    pub fn apply_gradients(&mut self, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} gradient vectors for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for ((name, t), grad) in self.params.iter_mut().zip(grads) {
            if grad.len() != t.numel() {
                return Err(Error::Shape(format!("gradient size mismatch for {name}")));
            }
            for (v, g) in t.values_mut().iter_mut().zip(grad) {
                *v -= lr * g;
            }
            t.check_finite(name)?;
        }
        Ok(())
    }

    /// Named tensors in checkpoint order.
    pub fn to_checkpoint(&self) -> Vec<(String, Tensor)> {
        self.params.clone()
    }

    /// Restore parameters from checkpoint tensors (names must match).
    pub fn load_checkpoint(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                self.params.len()
            )));
        }
        for ((name, t), (cname, ct)) in self.params.iter_mut().zip(tensors) {
            if name != cname {
                return Err(Error::Format(format!(
                    "checkpoint tensor {cname} where {name} expected"
                )));
            }
            if t.shape() != ct.shape() {
                return Err(Error::Format(format!("shape mismatch for {name}")));
            }
            *t = ct.clone();
        }
        Ok(())
    }
}

/// Box-Muller standard normal.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// A transformer bound to one graph: parameter vars plus forward builders.
pub struct Session<'m> {
    model: &'m TinyTransformerLM,
    vars: Vec<Var>,
}

impl<'m> Session<'m> {
    fn var(&self, name: &str) -> Var {
        let idx = self
            .model
            .params
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[idx]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Log-probability rows for the implicit-BOS input `[BOS] ++ tokens`:
    /// shape [len+1, vocab], row t = log P(. | tokens[..t]).
    pub fn full_rows(&self, g: &mut Graph, tokens: &[TokenId]) -> Result<Var> {
        let cfg = &self.model.cfg;
        let n = tokens.len() + 1;
        if n > cfg.max_len {
            return Err(Error::Length(format!(
                "input of {n} tokens exceeds context {}",
                cfg.max_len
            )));
        }
        let mut ids = Vec::with_capacity(n);
        ids.push(BOS as usize);
        for &t in tokens {
            if (t as usize) >= cfg.vocab {
                return Err(Error::Index(format!(
                    "token {t} outside vocabulary {}",
                    cfg.vocab
                )));
            }
            ids.push(t as usize);
        }

        let tok = g.select_rows(self.var("tok_emb"), &ids)?;
        let pos: Vec<usize> = (0..n).collect();
        let pe = g.select_rows(self.var("pos_emb"), &pos)?;
        let mut h = g.add(tok, pe)?;

        let mask = causal_mask(n);
        for l in 0..cfg.n_layers {
            let normed = g.rms_norm(h, RMS_EPS)?;
            let a_in = g.scale_cols(normed, self.var(&format!("l{l}.ln1")))?;
            let a_out = self.attention(g, a_in, l, &mask)?;
            h = g.add(h, a_out)?;

            let normed = g.rms_norm(h, RMS_EPS)?;
            let f_in = g.scale_cols(normed, self.var(&format!("l{l}.ln2")))?;
            let z1 = g.matmul(f_in, self.var(&format!("l{l}.ffn.w1")))?;
            let z1 = g.add_bias(z1, self.var(&format!("l{l}.ffn.b1")))?;
            let a1 = g.tanh(z1)?;
            let z2 = g.matmul(a1, self.var(&format!("l{l}.ffn.w2")))?;
            let f_out = g.add_bias(z2, self.var(&format!("l{l}.ffn.b2")))?;
            h = g.add(h, f_out)?;
        }

        let normed = g.rms_norm(h, RMS_EPS)?;
        let hf = g.scale_cols(normed, self.var("ln_f"))?;
        let logits = g.matmul(hf, self.var("lm_head"))?;
        g.log_softmax(logits)
    }

    fn attention(&self, g: &mut Graph, x: Var, layer: usize, mask: &Tensor) -> Result<Var> {
        let cfg = &self.model.cfg;
        let dh = cfg.d_model / cfg.n_heads;
        let q = g.matmul(x, self.var(&format!("l{layer}.attn.wq")))?;
        let k = g.matmul(x, self.var(&format!("l{layer}.attn.wk")))?;
        let v = g.matmul(x, self.var(&format!("l{layer}.attn.wv")))?;
        let mask_var = g.constant(mask.clone())?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let qh = g.slice_cols(q, hd * dh, dh)?;
            let kh = g.slice_cols(k, hd * dh, dh)?;
            let vh = g.slice_cols(v, hd * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let scores = g.add(scores, mask_var)?;
            let logw = g.log_softmax(scores)?;
            let w = g.exp(logw)?;
            heads.push(g.matmul(w, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        g.matmul(cat, self.var(&format!("l{layer}.attn.wo")))
    }

    /// Rows along a response: shape [response_len, vocab],
    /// row t = log P(. | prompt ++ response[..t]).
    pub fn response_rows(
        &self,
        g: &mut Graph,
        prompt: &[TokenId],
        response: &[TokenId],
    ) -> Result<Var> {
        if response.is_empty() {
            return Err(Error::Contract("response_rows: empty response".into()));
        }
        let mut tokens = Vec::with_capacity(prompt.len() + response.len() - 1);
        tokens.extend_from_slice(prompt);
        tokens.extend_from_slice(&response[..response.len() - 1]);
        let rows = self.full_rows(g, &tokens)?;
        let wanted: Vec<usize> = (prompt.len()..prompt.len() + response.len()).collect();
        g.select_rows(rows, &wanted)
    }

    /// Differentiable sequence log-probability of a response (sum over
    /// realized tokens, no length normalization).
    pub fn response_logprob(
        &self,
        g: &mut Graph,
        prompt: &[TokenId],
        response: &[TokenId],
    ) -> Result<Var> {
        let rows = self.response_rows(g, prompt, response)?;
        let ids: Vec<usize> = response.iter().map(|&t| t as usize).collect();
        let picked = g.gather(rows, &ids)?;
        g.sum(picked)
    }

    /// Per-parameter gradients in binding order after a backward pass;
    /// zeros for parameters the loss never touched.
    pub fn grads(&self, g: &Graph) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(&self.model.params)
            .map(|(v, (_, t))| match g.grad(*v) {
                Some(gr) => gr.to_vec(),
                None => vec![0.0; t.numel()],
            })
            .collect()
    }
}

fn causal_mask(n: usize) -> Tensor {
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            values[i * n + j] = MASK_LOGIT;
        }
    }
    Tensor::new(vec![n, n], values).expect("mask is finite")
}

impl LanguageModel for TinyTransformerLM {
    fn vocab_size(&self) -> usize {
        self.cfg.vocab
    }

    fn context_limit(&self) -> usize {
        // one position is taken by the implicit BOS
        self.cfg.max_len - 1
    }

    fn log_rows_inclusive(&self, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let sess = self.bind(&mut g, false)?;
        let rows = sess.full_rows(&mut g, tokens)?;
        let v = g.value(rows);
        let vocab = self.cfg.vocab;
        Ok((0..tokens.len() + 1)
            .map(|t| v[t * vocab..(t + 1) * vocab].to_vec())
            .collect())
    }
}

/// Plain SGD supervised fine-tuning on next-token NLL.
#[derive(Debug, Clone, Copy)]
pub struct SftConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Minimize mean next-token NLL of the responses by SGD. Returns the
/// per-step training losses.
pub fn train_sft(
    model: &mut TinyTransformerLM,
    corpus: &[(crate::lm::TokenSeq, crate::lm::TokenSeq)],
    cfg: &SftConfig,
) -> Result<Vec<f64>> {
    use rand::seq::SliceRandom;
    if corpus.is_empty() {
        return Err(Error::Data("train_sft: empty corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len(); // force an initial shuffle
    let batch = cfg.batch_size.max(1).min(corpus.len());
    let mut losses = Vec::with_capacity(cfg.steps);

    for _ in 0..cfg.steps {
        let mut picked = Vec::with_capacity(batch);
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }

        let mut g = Graph::new();
        let sess = model.bind(&mut g, true)?;
        let mut total = None;
        let mut tokens = 0usize;
        for &i in &picked {
            let (prompt, response) = &corpus[i];
            let lp = sess.response_logprob(&mut g, prompt.as_slice(), response.as_slice())?;
            tokens += response.len();
            total = Some(match total {
                None => lp,
                Some(acc) => g.add(acc, lp)?,
            });
        }
        let total = total.expect("batch is non-empty");
        let loss = g.scale(total, -1.0 / tokens as f64)?;
        losses.push(g.item(loss));
        g.backward(loss)?;
        let grads = sess.grads(&g);
        drop(g);
        model.apply_gradients(&grads, cfg.learning_rate)?;
    }
    Ok(losses)
}

/// Mean per-token NLL of a corpus under a model (pure evaluation).
pub fn corpus_nll(
    model: &dyn LanguageModel,
    corpus: &[(crate::lm::TokenSeq, crate::lm::TokenSeq)],
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Data("corpus_nll: empty corpus".into()));
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for (p, r) in corpus {
        total += crate::lm::sequence_logprob(model, p.as_slice(), r.as_slice())?;
        tokens += r.len();
    }
    Ok(-total / tokens as f64)
}
