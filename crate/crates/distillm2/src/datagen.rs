//! Training-data construction: batched on-policy sampling of
//! (prompt, teacher response, student response) triples, the replay buffer,
//! the typical-acceptance speculative filter, and synthetic corpora.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{
    derive_seed, prob_row, sample, sample_from_log_row, DecodeConfig, LanguageModel, TokenId,
    TokenSeq, BOS, EOS,
};

/// One training record. The teacher response is sampled from the teacher
/// and the student response from the student snapshot of the tagged epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleTriple {
    pub prompt: TokenSeq,
    pub teacher_response: TokenSeq,
    pub student_response: TokenSeq,
    pub epoch: u32,
}

/// Speculative filter settings: draft length and typicality threshold.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SpecConfig {
    pub k: usize,
    pub epsilon: f64,
}

impl SpecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Parameter("draft length k must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Parameter(format!(
                "epsilon {} outside [0, 1]",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Settings for one epoch of batched on-policy sampling.
#[derive(Debug, Clone, Copy)]
pub struct OnPolicyConfig {
    pub temperature: f64,
    pub max_length: usize,
    pub seed: u64,
    pub epoch: u32,
}

fn worker_count(jobs: usize) -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut workers = available.min(4);
    if let Ok(v) = std::env::var("DLM2_THREADS") {
        if let Ok(cap) = v.trim().parse::<usize>() {
            workers = workers.min(cap.max(1));
        }
    }
    workers.min(jobs).max(1)
}

/// Sample one (teacher, student) response pair per prompt from frozen
/// models. Per-prompt seeds are derived from the base seed and the prompt
/// index and results are ordered by prompt index, so the output is
/// identical for any worker count.
pub fn batched_onpolicy_sample(
    prompts: &[TokenSeq],
    teacher: &(dyn LanguageModel + Sync),
    student_snapshot: &(dyn LanguageModel + Sync),
    cfg: &OnPolicyConfig,
) -> Result<Vec<SampleTriple>> {
    if prompts.is_empty() {
        return Err(Error::Data("batched_onpolicy_sample: no prompts".into()));
    }
    let one = |i: usize| -> Result<SampleTriple> {
        let prompt = &prompts[i];
        let t_cfg = DecodeConfig::new(cfg.temperature, cfg.max_length, derive_seed(cfg.seed, 2 * i as u64));
        let s_cfg = DecodeConfig::new(cfg.temperature, cfg.max_length, derive_seed(cfg.seed, 2 * i as u64 + 1));
        Ok(SampleTriple {
            prompt: prompt.clone(),
            teacher_response: sample(teacher, prompt.as_slice(), &t_cfg)?,
            student_response: sample(student_snapshot, prompt.as_slice(), &s_cfg)?,
            epoch: cfg.epoch,
        })
    };

    let workers = worker_count(prompts.len());
    if workers == 1 {
        return (0..prompts.len()).map(one).collect();
    }

    let mut slots: Vec<Option<Result<SampleTriple>>> = (0..prompts.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunk = prompts.len().div_ceil(workers);
        for (w, part) in slots.chunks_mut(chunk).enumerate() {
            let one = &one;
            scope.spawn(move || {
                for (j, slot) in part.iter_mut().enumerate() {
                    *slot = Some(one(w * chunk + j));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every slot filled"))
        .collect()
}

/// Shannon entropy of a probability row, in nats.
pub fn entropy_nats(row: &[f64]) -> f64 {
    row.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Typical-acceptance test for one drafted token: accept iff the student
/// probability of the draft exceeds min(eps^2, eps * exp(-H(teacher row)))
/// where H is the teacher row entropy in nats.
pub fn typical_accept(q_draft_prob: f64, teacher_row: &[f64], epsilon: f64) -> bool {
    debug_assert!((0.0..=1.0).contains(&epsilon), "epsilon {epsilon}");
    let threshold = (epsilon * epsilon).min(epsilon * (-entropy_nats(teacher_row)).exp());
    q_draft_prob > threshold
}

/// Speculative generation with the typical-acceptance rule: the student
/// drafts up to `k` tokens, the teacher verifies each in order, and the
/// first rejected position is replaced by a token sampled from the
/// unmodified teacher row, discarding the rest of the draft.
///
/// With epsilon = 0 every draft is accepted and the output distribution is
/// pure student sampling.
pub fn speculative_generate(
    teacher: &dyn LanguageModel,
    student: &dyn LanguageModel,
    prompt: &[TokenId],
    spec: &SpecConfig,
    decode: &DecodeConfig,
) -> Result<TokenSeq> {
    spec.validate()?;
    if !(decode.temperature > 0.0) {
        return Err(Error::Parameter(format!(
            "temperature {} must be > 0",
            decode.temperature
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(decode.seed);
    let limit = teacher.context_limit().min(student.context_limit());
    let mut out: Vec<TokenId> = Vec::new();

    'outer: while out.len() < decode.max_length {
        // student drafts up to k tokens ahead
        let mut draft: Vec<(TokenId, f64)> = Vec::with_capacity(spec.k);
        {
            let mut ctx: Vec<TokenId> = prompt.iter().chain(out.iter()).copied().collect();
            for _ in 0..spec.k {
                if out.len() + draft.len() >= decode.max_length || ctx.len() >= limit {
                    break;
                }
                let row = student.next_log_row(&ctx)?;
                let tok = sample_from_log_row(&row, decode.temperature, &mut rng);
                draft.push((tok, row[tok as usize].exp()));
                ctx.push(tok);
                if tok == EOS {
                    break;
                }
            }
        }
        if draft.is_empty() {
            break;
        }

        // teacher verifies in draft order
        for (tok, q_prob) in draft {
            let ctx: Vec<TokenId> = prompt.iter().chain(out.iter()).copied().collect();
            let teacher_row = prob_row(teacher, &ctx)?;
            if typical_accept(q_prob, &teacher_row, spec.epsilon) {
                out.push(tok);
                if tok == EOS {
                    break 'outer;
                }
            } else {
                let logs: Vec<f64> = teacher_row.iter().map(|p| p.ln()).collect();
                let replacement = sample_from_log_row(&logs, 1.0, &mut rng);
                out.push(replacement);
                if replacement == EOS {
                    break 'outer;
                }
                continue 'outer;
            }
        }
    }
    Ok(TokenSeq::new(out))
}

/// FIFO replay buffer holding up to `cap_epochs` epochs of triples.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    epochs: VecDeque<Vec<SampleTriple>>,
    cap_epochs: usize,
}

impl Default for ReplayBuffer {
    fn default() -> Self {
        ReplayBuffer::new(4)
    }
}

impl ReplayBuffer {
    pub fn new(cap_epochs: usize) -> Self {
        ReplayBuffer { epochs: VecDeque::new(), cap_epochs: cap_epochs.max(1) }
    }

    pub fn push_epoch(&mut self, data: Vec<SampleTriple>) {
        self.epochs.push_back(data);
        while self.epochs.len() > self.cap_epochs {
            self.epochs.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.epochs.iter().map(|e| e.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, mut idx: usize) -> &SampleTriple {
        for epoch in &self.epochs {
            if idx < epoch.len() {
                return &epoch[idx];
            }
            idx -= epoch.len();
        }
        unreachable!("replay index within len()")
    }
}

/// Mix ceil(ratio * N) uniformly drawn buffered triples with fresh ones,
/// then append the full fresh epoch to the buffer. With an empty buffer and
/// a positive ratio the fresh data is returned unchanged with a logged
/// warning.
pub fn replay_mix(
    fresh: Vec<SampleTriple>,
    buffer: &mut ReplayBuffer,
    mix_ratio: f64,
    seed: u64,
) -> Result<Vec<SampleTriple>> {
    if !(0.0..=1.0).contains(&mix_ratio) {
        return Err(Error::Parameter(format!("mix_ratio {mix_ratio} outside [0, 1]")));
    }
    let n = fresh.len();
    let k = (mix_ratio * n as f64).ceil() as usize;
    let mixed = if k == 0 {
        fresh.clone()
    } else if buffer.is_empty() {
        log::warn!("replay_mix: ratio {mix_ratio} requested but buffer is empty, using fresh data");
        fresh.clone()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mixed = Vec::with_capacity(n);
        for _ in 0..k.min(n) {
            let idx = rng.random_range(0..buffer.len());
            mixed.push(buffer.get(idx).clone());
        }
        // the rest is a random subset of the fresh epoch
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for &i in order.iter().take(n - k.min(n)) {
            mixed.push(fresh[i].clone());
        }
        mixed
    };
    buffer.push_epoch(fresh);
    Ok(mixed)
}

/// Long-tailed categorical: `head_mass` on bin 0, geometrically decaying
/// mass on the remaining bins. `decay` = 1 gives a uniform tail.
pub fn make_longtail_target(v: usize, head_mass: f64, decay: f64) -> Result<Vec<f64>> {
    if v < 4 {
        return Err(Error::Parameter(format!("vocabulary {v} must be >= 4")));
    }
    if !(0.0 < head_mass && head_mass < 1.0) {
        return Err(Error::Parameter(format!("head_mass {head_mass} outside (0, 1)")));
    }
    if !(0.0 < decay && decay <= 1.0) {
        return Err(Error::Parameter(format!("decay {decay} outside (0, 1]")));
    }
    let mut row = Vec::with_capacity(v);
    row.push(head_mass);
    let weights: Vec<f64> = (0..v - 1).map(|i| decay.powi(i as i32)).collect();
    let wsum: f64 = weights.iter().sum();
    for w in weights {
        row.push((1.0 - head_mass) * w / wsum);
    }
    Ok(row)
}

/// First-order Markov chain over the vocabulary acting as a stochastic
/// regular grammar: row BOS is the start distribution, every content row
/// includes an EOS probability so sequences terminate.
#[derive(Debug, Clone)]
pub struct Grammar {
    vocab: usize,
    max_len: usize,
    transition: Vec<Vec<f64>>,
}

impl Grammar {
    pub fn random(vocab: usize, max_len: usize, rule_seed: u64) -> Result<Self> {
        if vocab < 4 {
            return Err(Error::Parameter(format!("grammar vocabulary {vocab} must be >= 4")));
        }
        if max_len < 4 {
            return Err(Error::Parameter(format!("grammar max_len {max_len} must be >= 4")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rule_seed);
        let mut transition = Vec::with_capacity(vocab);
        for src in 0..vocab {
            let mut row = vec![0.0; vocab];
            if src == EOS as usize {
                row[EOS as usize] = 1.0; // absorbing
            } else {
                // skewed random weights over content tokens
                for (t, slot) in row.iter_mut().enumerate().skip(2) {
                    let _ = t;
                    let u: f64 = rng.random::<f64>().max(1e-16);
                    *slot = (-u.ln()).powf(2.0);
                }
                let wsum: f64 = row.iter().sum();
                for slot in row.iter_mut() {
                    *slot /= wsum;
                }
                if src != BOS as usize {
                    // reserve a termination share on content rows
                    let eos_p = 0.10 + 0.15 * rng.random::<f64>();
                    for slot in row.iter_mut() {
                        *slot *= 1.0 - eos_p;
                    }
                    row[EOS as usize] = eos_p;
                }
            }
            transition.push(row);
        }
        Ok(Grammar { vocab, max_len, transition })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Next-token distribution from a source token.
    pub fn transition_row(&self, from: TokenId) -> &[f64] {
        &self.transition[from as usize]
    }

    fn step(&self, from: TokenId, rng: &mut ChaCha8Rng, allow_eos: bool) -> TokenId {
        let row = &self.transition[from as usize];
        let mut probs = row.clone();
        if !allow_eos {
            probs[EOS as usize] = 0.0;
        }
        let total: f64 = probs.iter().sum();
        let u: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i as TokenId;
            }
        }
        (self.vocab - 1) as TokenId
    }

    /// One prompt/response pair: a short EOS-free prompt walk followed by a
    /// response walk that ends at EOS or the total length cap.
    pub fn sample_pair(&self, rng: &mut ChaCha8Rng) -> (TokenSeq, TokenSeq) {
        let prompt_len = 1 + (rng.random::<u32>() % 3) as usize;
        let mut prompt = Vec::with_capacity(prompt_len);
        let mut last = BOS;
        for _ in 0..prompt_len {
            last = self.step(last, rng, false);
            prompt.push(last);
        }
        let mut response = Vec::new();
        while prompt.len() + response.len() < self.max_len {
            last = self.step(last, rng, true);
            response.push(last);
            if last == EOS {
                break;
            }
        }
        if response.is_empty() {
            response.push(EOS);
        }
        (TokenSeq::new(prompt), TokenSeq::new(response))
    }

    /// Prompts alone, for on-policy response generation.
    pub fn sample_prompts(&self, n: usize, seed: u64) -> Vec<TokenSeq> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample_pair(&mut rng).0).collect()
    }
}

/// Seeded synthetic corpus of prompt/response pairs from a random grammar.
pub fn make_grammar_corpus(
    vocab: usize,
    max_len: usize,
    rule_seed: u64,
    n: usize,
) -> Result<Vec<(TokenSeq, TokenSeq)>> {
    if n == 0 {
        return Err(Error::Parameter("corpus size must be >= 1".into()));
    }
    let grammar = Grammar::random(vocab, max_len, rule_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rule_seed, 0x5eed));
    Ok((0..n).map(|_| grammar.sample_pair(&mut rng)).collect())
}

// ---------------------------------------------------------------------------
// JSONL dataset persistence
// ---------------------------------------------------------------------------

/// Optional first line of a trainer-written dataset file, recording which
/// parameter snapshot generated the epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub dataset_header: u32,
    pub epoch: u32,
    pub snapshot_sha256: String,
}

/// Serialize triples as JSON lines, one triple per line, preceded by an
/// optional header line.
pub fn write_jsonl(
    path: &std::path::Path,
    header: Option<&DatasetHeader>,
    triples: &[SampleTriple],
) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    if let Some(h) = header {
        serde_json::to_writer(&mut out, h).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    for t in triples {
        serde_json::to_writer(&mut out, t).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Load a JSONL dataset, accepting and returning an optional header line.
pub fn read_jsonl(path: &std::path::Path) -> Result<(Option<DatasetHeader>, Vec<SampleTriple>)> {
    let text = std::fs::read_to_string(path)?;
    let mut header = None;
    let mut triples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 && line.contains("\"dataset_header\"") {
            header = Some(
                serde_json::from_str(line)
                    .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?,
            );
            continue;
        }
        triples.push(
            serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok((header, triples))
}
