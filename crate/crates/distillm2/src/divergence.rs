//! Divergence losses: token/sequence KL, RKL, their skew variants, the
//! contrastive objective pairing SKL on teacher responses with SRKL on
//! student responses, the scheduled two-coefficient main loss, and the
//! DPO / DPKD / single-response interpolation baselines.
//!
//! Skew mixtures are always formed in log space with log_add_exp:
//!
//! ```text
//! SKL_a(p || q)  = KL(p || a*p + (1-a)*q)
//! SRKL_a(p || q) = KL(q || (1-a)*p + a*q)
//! ```
//!
//! Teacher rows enter the graph as constants; gradients flow only into the
//! student. Every function here is pure over its inputs, so separate
//! batches can be evaluated concurrently on separate graphs.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_add_exp, Graph, Tensor, Var};
use crate::datagen::SampleTriple;
use crate::error::{Error, Result};
use crate::lm::{response_logprob_rows, sequence_logprob, LanguageModel, Session, TokenId};

/// Which divergence to evaluate on a row or sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivKind {
    Kl,
    Rkl,
    Skl,
    Srkl,
}

/// Token composition mode for sequence divergences.
///
/// `FullSupport` sums the full per-position row divergence along the given
/// response (the standard implementation, and the one the chain-rule
/// enumeration oracle can verify). `Realized` keeps only the single-token
/// term at each realized token, the literal token-wise decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenMode {
    FullSupport,
    Realized,
}

impl TokenMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "FULL_SUPPORT" => Ok(TokenMode::FullSupport),
            "REALIZED" => Ok(TokenMode::Realized),
            other => Err(Error::Config(format!("unknown token_mode {other}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TokenMode::FullSupport => "FULL_SUPPORT",
            TokenMode::Realized => "REALIZED",
        }
    }
}

/// Per-sample sequence values are divided by token count before batch
/// averaging by default; `Sum` keeps the literal per-token sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeqReduce {
    TokenMean,
    Sum,
}

impl SeqReduce {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "MEAN" => Ok(SeqReduce::TokenMean),
            "SUM" => Ok(SeqReduce::Sum),
            other => Err(Error::Config(format!("unknown seq_reduce {other}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SeqReduce::TokenMean => "MEAN",
            SeqReduce::Sum => "SUM",
        }
    }
}

/// Which response of a triple an operation applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResponseKind {
    Teacher,
    Student,
}

impl ResponseKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "TEACHER" => Ok(ResponseKind::Teacher),
            "STUDENT" => Ok(ResponseKind::Student),
            other => Err(Error::Config(format!("unknown response kind {other}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ResponseKind::Teacher => "TEACHER",
            ResponseKind::Student => "STUDENT",
        }
    }
}

/// Loss selector with every coefficient used by the loss family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    Kl,
    Rkl,
    Skl,
    Srkl,
    Cald,
    Distillm2,
    Dpo,
    Dpkd,
    Interp,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "KL" => LossKind::Kl,
            "RKL" => LossKind::Rkl,
            "SKL" => LossKind::Skl,
            "SRKL" => LossKind::Srkl,
            "CALD" => LossKind::Cald,
            "DISTILLM2" => LossKind::Distillm2,
            "DPO" => LossKind::Dpo,
            "DPKD" => LossKind::Dpkd,
            "INTERP" => LossKind::Interp,
            other => return Err(Error::Config(format!("unknown loss kind {other}"))),
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Kl => "KL",
            LossKind::Rkl => "RKL",
            LossKind::Skl => "SKL",
            LossKind::Srkl => "SRKL",
            LossKind::Cald => "CALD",
            LossKind::Distillm2 => "DISTILLM2",
            LossKind::Dpo => "DPO",
            LossKind::Dpkd => "DPKD",
            LossKind::Interp => "INTERP",
        }
    }
}

/// Full loss specification. `alpha_t` skews terms evaluated on teacher
/// responses, `alpha_s` terms on student responses; `beta` weights the SRKL
/// side of the scheduled main loss; `gamma` is the single-response
/// interpolation weight; `lambda` is the contrastive scale of DPO / DPKD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub alpha_t: f64,
    pub alpha_s: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub token_mode: TokenMode,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        LossSpec {
            kind,
            alpha_t: 0.1,
            alpha_s: 0.1,
            beta: 0.5,
            gamma: 0.5,
            lambda: 1.0,
            token_mode: TokenMode::FullSupport,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha_t = alpha;
        self.alpha_s = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_t", self.alpha_t),
            ("alpha_s", self.alpha_s),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(Error::Parameter(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Parameter(format!("lambda = {} must be > 0", self.lambda)));
        }
        Ok(())
    }
}

/// Aligned per-position inputs along one response.
#[derive(Debug, Clone)]
pub struct TokenDivergenceInputs<'a> {
    pub teacher_logrows: &'a [Vec<f64>],
    pub student_logrows: &'a [Vec<f64>],
    pub tokens: &'a [TokenId],
    /// Positions with `false` are excluded from sums. `None` means all
    /// positions are valid.
    pub mask: Option<&'a [bool]>,
}

impl<'a> TokenDivergenceInputs<'a> {
    pub fn new(
        teacher_logrows: &'a [Vec<f64>],
        student_logrows: &'a [Vec<f64>],
        tokens: &'a [TokenId],
        mask: Option<&'a [bool]>,
    ) -> Result<Self> {
        let n = tokens.len();
        if teacher_logrows.len() != n || student_logrows.len() != n {
            return Err(Error::Contract(format!(
                "aligned inputs required: {} teacher rows, {} student rows, {} tokens",
                teacher_logrows.len(),
                student_logrows.len(),
                n
            )));
        }
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::Contract(format!("mask of {} for {} positions", m.len(), n)));
            }
        }
        Ok(TokenDivergenceInputs { teacher_logrows, student_logrows, tokens, mask })
    }

    fn active(&self, t: usize) -> bool {
        self.mask.map_or(true, |m| m[t])
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
        return Err(Error::Parameter(format!("alpha = {alpha} outside [0, 1]")));
    }
    Ok(())
}

fn check_prob_row(name: &str, row: &[f64]) -> Result<()> {
    let mut sum = 0.0;
    for &p in row {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::Parameter(format!("{name} entry {p} is not a probability")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Parameter(format!("{name} sums to {sum}")));
    }
    Ok(())
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{name} evaluated to {v}")))
    }
}

/// Forward KL between rows: sum p log(p/q).
pub fn kl_row(p: &[f64], q: &[f64]) -> Result<f64> {
    skl_row(p, q, 0.0)
}

/// Reverse KL between rows: sum q log(q/p).
pub fn rkl_row(p: &[f64], q: &[f64]) -> Result<f64> {
    srkl_row(p, q, 0.0)
}

/// Skew KL: KL(p || a*p + (1-a)*q), mixture in log space.
pub fn skl_row(p: &[f64], q: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if p.len() != q.len() {
        return Err(Error::Shape(format!("rows of {} vs {}", p.len(), q.len())));
    }
    check_prob_row("p", p)?;
    check_prob_row("q", q)?;
    if alpha == 1.0 {
        return Ok(0.0);
    }
    let (la, l1a) = (alpha.ln(), (1.0 - alpha).ln());
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        let lp = pi.ln();
        let mix = if alpha == 0.0 { qi.ln() } else { log_add_exp(la + lp, l1a + qi.ln()) };
        acc += pi * (lp - mix);
    }
    finite("skl_row", acc)
}

/// Skew RKL: KL(q || (1-a)*p + a*q), mixture in log space.
pub fn srkl_row(p: &[f64], q: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if p.len() != q.len() {
        return Err(Error::Shape(format!("rows of {} vs {}", p.len(), q.len())));
    }
    check_prob_row("p", p)?;
    check_prob_row("q", q)?;
    if alpha == 1.0 {
        return Ok(0.0);
    }
    let (la, l1a) = (alpha.ln(), (1.0 - alpha).ln());
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if qi == 0.0 {
            continue;
        }
        let lq = qi.ln();
        let mix = if alpha == 0.0 { pi.ln() } else { log_add_exp(l1a + pi.ln(), la + lq) };
        acc += qi * (lq - mix);
    }
    finite("srkl_row", acc)
}

/// Row divergence dispatch on linear-probability rows.
pub fn row_divergence(kind: DivKind, p: &[f64], q: &[f64], alpha: f64) -> Result<f64> {
    match kind {
        DivKind::Kl => kl_row(p, q),
        DivKind::Rkl => rkl_row(p, q),
        DivKind::Skl => skl_row(p, q, alpha),
        DivKind::Srkl => srkl_row(p, q, alpha),
    }
}

/// Per-sample sequence divergence along one response, before any batch
/// normalization.
pub fn seq_divergence(
    inputs: &TokenDivergenceInputs,
    kind: DivKind,
    alpha: f64,
    mode: TokenMode,
) -> Result<f64> {
    check_alpha(alpha)?;
    let mut acc = 0.0;
    for t in 0..inputs.tokens.len() {
        if !inputs.active(t) {
            continue;
        }
        let tl = &inputs.teacher_logrows[t];
        let sl = &inputs.student_logrows[t];
        if tl.len() != sl.len() {
            return Err(Error::Contract(format!(
                "row width mismatch at position {t}: {} vs {}",
                tl.len(),
                sl.len()
            )));
        }
        match mode {
            TokenMode::FullSupport => {
                let p: Vec<f64> = tl.iter().map(|l| l.exp()).collect();
                let q: Vec<f64> = sl.iter().map(|l| l.exp()).collect();
                acc += row_divergence(kind, &p, &q, alpha)?;
            }
            TokenMode::Realized => {
                let y = inputs.tokens[t] as usize;
                if y >= tl.len() {
                    return Err(Error::Index(format!("token {y} outside row width {}", tl.len())));
                }
                acc += realized_term(kind, tl[y], sl[y], alpha);
            }
        }
    }
    finite("seq_divergence", acc)
}

/// Single-token term of the literal token-wise decomposition at one
/// realized token, from log probabilities.
fn realized_term(kind: DivKind, lp: f64, lq: f64, alpha: f64) -> f64 {
    match kind {
        DivKind::Kl => lp.exp() * (lp - lq),
        DivKind::Rkl => lq.exp() * (lq - lp),
        DivKind::Skl => {
            let mix = skew_log_mix(lp, lq, alpha);
            lp.exp() * (lp - mix)
        }
        DivKind::Srkl => {
            let mix = rskew_log_mix(lp, lq, alpha);
            lq.exp() * (lq - mix)
        }
    }
}

/// log(a*p + (1-a)*q) from log p, log q.
fn skew_log_mix(lp: f64, lq: f64, alpha: f64) -> f64 {
    if alpha == 0.0 {
        lq
    } else if alpha == 1.0 {
        lp
    } else {
        log_add_exp(alpha.ln() + lp, (1.0 - alpha).ln() + lq)
    }
}

/// log((1-a)*p + a*q) from log p, log q.
fn rskew_log_mix(lp: f64, lq: f64, alpha: f64) -> f64 {
    if alpha == 0.0 {
        lp
    } else if alpha == 1.0 {
        lq
    } else {
        log_add_exp((1.0 - alpha).ln() + lp, alpha.ln() + lq)
    }
}

/// Sum of realized log ratios along a response: the single-sample estimate
/// of the sequence divergence when the response is drawn from the kind's
/// outer distribution (p for KL/SKL, q for RKL/SRKL). This is the form the
/// contrastive rewriting of the objective is stated in.
pub fn seq_log_ratio(inputs: &TokenDivergenceInputs, kind: DivKind, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let mut acc = 0.0;
    for t in 0..inputs.tokens.len() {
        if !inputs.active(t) {
            continue;
        }
        let y = inputs.tokens[t] as usize;
        let tl = &inputs.teacher_logrows[t];
        let sl = &inputs.student_logrows[t];
        if y >= tl.len() || y >= sl.len() {
            return Err(Error::Index(format!("token {y} outside row width")));
        }
        let (lp, lq) = (tl[y], sl[y]);
        acc += match kind {
            DivKind::Kl => lp - lq,
            DivKind::Rkl => lq - lp,
            DivKind::Skl => lp - skew_log_mix(lp, lq, alpha),
            DivKind::Srkl => lq - rskew_log_mix(lp, lq, alpha),
        };
    }
    finite("seq_log_ratio", acc)
}

// ---------------------------------------------------------------------------
// Differentiable graph-side terms
// ---------------------------------------------------------------------------

/// One per-sample divergence term on the graph. `teacher_logrows` holds the
/// constant teacher conditionals along the response; `student_rows` is the
/// [k, V] variable of student log rows at the same positions.
pub fn divergence_term(
    g: &mut Graph,
    teacher_logrows: &[Vec<f64>],
    student_rows: Var,
    tokens: &[TokenId],
    kind: DivKind,
    alpha: f64,
    mode: TokenMode,
) -> Result<Var> {
    check_alpha(alpha)?;
    let k = tokens.len();
    if teacher_logrows.len() != k {
        return Err(Error::Contract(format!(
            "{} teacher rows for {k} tokens",
            teacher_logrows.len()
        )));
    }
    if g.shape(student_rows) != [k, teacher_logrows.first().map_or(0, |r| r.len())] {
        return Err(Error::Shape(format!(
            "student rows {:?} vs {k} x {}",
            g.shape(student_rows),
            teacher_logrows.first().map_or(0, |r| r.len())
        )));
    }

    let lp = Tensor::from_rows(teacher_logrows)?;
    let p = lp.map(|l| l.exp());
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();

    // endpoint alpha = 1 makes both skew divergences identically zero
    if alpha == 1.0 && matches!(kind, DivKind::Skl | DivKind::Srkl) {
        return g.scalar_const(0.0);
    }

    match mode {
        TokenMode::FullSupport => {
            let lp_var = g.constant(lp.clone())?;
            match kind {
                DivKind::Kl | DivKind::Skl => {
                    let p_var = g.constant(p)?;
                    let mix = if kind == DivKind::Kl || alpha == 0.0 {
                        student_rows
                    } else {
                        let skewed_teacher = g.constant(lp.map(|l| l + alpha.ln()))?;
                        let scaled_student = g.add_scalar(student_rows, (1.0 - alpha).ln())?;
                        g.log_add_exp(skewed_teacher, scaled_student)?
                    };
                    let diff = g.sub(lp_var, mix)?;
                    let weighted = g.mul(p_var, diff)?;
                    g.sum(weighted)
                }
                DivKind::Rkl | DivKind::Srkl => {
                    let q_var = g.exp(student_rows)?;
                    let mix = if kind == DivKind::Rkl || alpha == 0.0 {
                        lp_var
                    } else {
                        let skewed_teacher = g.constant(lp.map(|l| l + (1.0 - alpha).ln()))?;
                        let scaled_student = g.add_scalar(student_rows, alpha.ln())?;
                        g.log_add_exp(skewed_teacher, scaled_student)?
                    };
                    let diff = g.sub(student_rows, mix)?;
                    let weighted = g.mul(q_var, diff)?;
                    g.sum(weighted)
                }
            }
        }
        TokenMode::Realized => {
            let lp_g = gather_rows(&lp, &ids)?;
            let p_g = lp_g.map(|l| l.exp());
            let s_g = g.gather(student_rows, &ids)?;
            match kind {
                DivKind::Kl | DivKind::Skl => {
                    let lp_var = g.constant(lp_g.clone())?;
                    let p_var = g.constant(p_g)?;
                    let mix = if kind == DivKind::Kl || alpha == 0.0 {
                        s_g
                    } else {
                        let skewed_teacher = g.constant(lp_g.map(|l| l + alpha.ln()))?;
                        let scaled_student = g.add_scalar(s_g, (1.0 - alpha).ln())?;
                        g.log_add_exp(skewed_teacher, scaled_student)?
                    };
                    let diff = g.sub(lp_var, mix)?;
                    let weighted = g.mul(p_var, diff)?;
                    g.sum(weighted)
                }
                DivKind::Rkl | DivKind::Srkl => {
                    let q_var = g.exp(s_g)?;
                    let mix = if kind == DivKind::Rkl || alpha == 0.0 {
                        g.constant(lp_g)?
                    } else {
                        let skewed_teacher = g.constant(lp_g.map(|l| l + (1.0 - alpha).ln()))?;
                        let scaled_student = g.add_scalar(s_g, alpha.ln())?;
                        g.log_add_exp(skewed_teacher, scaled_student)?
                    };
                    let diff = g.sub(s_g, mix)?;
                    let weighted = g.mul(q_var, diff)?;
                    g.sum(weighted)
                }
            }
        }
    }
}

fn gather_rows(rows: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let cols = rows.shape()[1];
    let mut out = Vec::with_capacity(ids.len());
    for (t, &id) in ids.iter().enumerate() {
        if id >= cols {
            return Err(Error::Index(format!("token {id} outside row width {cols}")));
        }
        out.push(rows.values()[t * cols + id]);
    }
    Tensor::new(vec![ids.len()], out)
}

/// Per-sample divergence of one response of a triple, on the graph, with
/// the teacher conditionals recomputed as constants.
fn response_term(
    g: &mut Graph,
    sess: &Session,
    teacher: &dyn LanguageModel,
    triple: &SampleTriple,
    which: ResponseKind,
    kind: DivKind,
    alpha: f64,
    mode: TokenMode,
    reduce: SeqReduce,
) -> Result<Var> {
    let response = match which {
        ResponseKind::Teacher => &triple.teacher_response,
        ResponseKind::Student => &triple.student_response,
    };
    if response.is_empty() {
        return Err(Error::Data("triple with empty response".into()));
    }
    let prompt = triple.prompt.as_slice();
    let teacher_rows = response_logprob_rows(teacher, prompt, response.as_slice())?;
    let student_rows = sess.response_rows(g, prompt, response.as_slice())?;
    let term = divergence_term(g, &teacher_rows, student_rows, response.as_slice(), kind, alpha, mode)?;
    match reduce {
        SeqReduce::Sum => Ok(term),
        SeqReduce::TokenMean => g.scale(term, 1.0 / response.len() as f64),
    }
}

/// Contrastive loss: (1 / 2|D|) * sum over triples of
/// SKL(prompt, teacher response) + SRKL(prompt, student response).
pub fn cald_loss(
    g: &mut Graph,
    sess: &Session,
    teacher: &dyn LanguageModel,
    batch: &[SampleTriple],
    alpha: f64,
    mode: TokenMode,
    reduce: SeqReduce,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Data("cald_loss: empty batch".into()));
    }
    let mut acc = None;
    for triple in batch {
        let skl = response_term(g, sess, teacher, triple, ResponseKind::Teacher, DivKind::Skl, alpha, mode, reduce)?;
        let srkl = response_term(g, sess, teacher, triple, ResponseKind::Student, DivKind::Srkl, alpha, mode, reduce)?;
        let both = g.add(skl, srkl)?;
        acc = Some(match acc {
            None => both,
            Some(a) => g.add(a, both)?,
        });
    }
    g.scale(acc.expect("non-empty batch"), 1.0 / (2.0 * batch.len() as f64))
}

/// Scheduled main loss: (1 / 2|D|) * sum of
/// (1 - beta) * SKL_{alpha_t}(prompt, teacher response)
///   + beta * SRKL_{alpha_s}(prompt, student response).
#[allow(clippy::too_many_arguments)]
pub fn distillm2_loss(
    g: &mut Graph,
    sess: &Session,
    teacher: &dyn LanguageModel,
    batch: &[SampleTriple],
    alpha_t: f64,
    alpha_s: f64,
    beta: f64,
    mode: TokenMode,
    reduce: SeqReduce,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Data("distillm2_loss: empty batch".into()));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Parameter(format!("beta = {beta} outside [0, 1]")));
    }
    let mut acc = None;
    for triple in batch {
        let skl = response_term(g, sess, teacher, triple, ResponseKind::Teacher, DivKind::Skl, alpha_t, mode, reduce)?;
        let srkl = response_term(g, sess, teacher, triple, ResponseKind::Student, DivKind::Srkl, alpha_s, mode, reduce)?;
        let skl_w = g.scale(skl, 1.0 - beta)?;
        let srkl_w = g.scale(srkl, beta)?;
        let both = g.add(skl_w, srkl_w)?;
        acc = Some(match acc {
            None => both,
            Some(a) => g.add(a, both)?,
        });
    }
    g.scale(acc.expect("non-empty batch"), 1.0 / (2.0 * batch.len() as f64))
}

/// Preference-style contrastive loss with an explicit reference model:
/// mean of -log sigmoid(lambda * (log q/q_ref at the teacher response
/// minus log q/q_ref at the student response)), with length-unnormalized
/// sequence log-probabilities.
pub fn dpo_loss(
    g: &mut Graph,
    sess: &Session,
    reference: &dyn LanguageModel,
    batch: &[SampleTriple],
    lambda: f64,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Data("dpo_loss: empty batch".into()));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Parameter(format!("lambda = {lambda} must be > 0")));
    }
    let mut acc = None;
    for triple in batch {
        let prompt = triple.prompt.as_slice();
        if triple.teacher_response.is_empty() || triple.student_response.is_empty() {
            return Err(Error::Data("triple with empty response".into()));
        }
        let s_w = sess.response_logprob(g, prompt, triple.teacher_response.as_slice())?;
        let s_l = sess.response_logprob(g, prompt, triple.student_response.as_slice())?;
        let ref_w = sequence_logprob(reference, prompt, triple.teacher_response.as_slice())?;
        let ref_l = sequence_logprob(reference, prompt, triple.student_response.as_slice())?;
        let margin = g.sub(s_w, s_l)?;
        let centered = g.add_scalar(margin, ref_l - ref_w)?;
        let z = g.scale(centered, lambda)?;
        // -log sigmoid(z) = softplus(-z) = log_add_exp(0, -z)
        let neg_z = g.scale(z, -1.0)?;
        let zero = g.scalar_const(0.0)?;
        let nl = g.log_add_exp(zero, neg_z)?;
        acc = Some(match acc {
            None => nl,
            Some(a) => g.add(a, nl)?,
        });
    }
    g.scale(acc.expect("non-empty batch"), 1.0 / batch.len() as f64)
}

/// DPO with the teacher substituted for the reference model.
pub fn dpkd_loss(
    g: &mut Graph,
    sess: &Session,
    teacher: &dyn LanguageModel,
    batch: &[SampleTriple],
    lambda: f64,
) -> Result<Var> {
    dpo_loss(g, sess, teacher, batch, lambda)
}

/// Single-response interpolation baseline:
/// mean of gamma * SKL + (1 - gamma) * SRKL, both on the same response.
#[allow(clippy::too_many_arguments)]
pub fn interp_single_response_loss(
    g: &mut Graph,
    sess: &Session,
    teacher: &dyn LanguageModel,
    batch: &[SampleTriple],
    gamma: f64,
    alpha: f64,
    which: ResponseKind,
    mode: TokenMode,
    reduce: SeqReduce,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Data("interp loss: empty batch".into()));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Parameter(format!("gamma = {gamma} outside [0, 1]")));
    }
    let mut acc = None;
    for triple in batch {
        let skl = response_term(g, sess, teacher, triple, which, DivKind::Skl, alpha, mode, reduce)?;
        let srkl = response_term(g, sess, teacher, triple, which, DivKind::Srkl, alpha, mode, reduce)?;
        let skl_w = g.scale(skl, gamma)?;
        let srkl_w = g.scale(srkl, 1.0 - gamma)?;
        let both = g.add(skl_w, srkl_w)?;
        acc = Some(match acc {
            None => both,
            Some(a) => g.add(a, both)?,
        });
    }
    g.scale(acc.expect("non-empty batch"), 1.0 / batch.len() as f64)
}

/// Single-divergence baselines: KL/SKL are taken on the teacher response,
/// RKL/SRKL on the student response, averaged over the batch.
#[allow(clippy::too_many_arguments)]
pub fn single_divergence_loss(
    g: &mut Graph,
    sess: &Session,
    teacher: &dyn LanguageModel,
    batch: &[SampleTriple],
    kind: DivKind,
    alpha: f64,
    mode: TokenMode,
    reduce: SeqReduce,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Data("single divergence loss: empty batch".into()));
    }
    let which = match kind {
        DivKind::Kl | DivKind::Skl => ResponseKind::Teacher,
        DivKind::Rkl | DivKind::Srkl => ResponseKind::Student,
    };
    let mut acc = None;
    for triple in batch {
        let term = response_term(g, sess, teacher, triple, which, kind, alpha, mode, reduce)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    g.scale(acc.expect("non-empty batch"), 1.0 / batch.len() as f64)
}

/// Extra knobs that select how the batch losses compose.
#[derive(Debug, Clone, Copy)]
pub struct LossOptions {
    pub reduce: SeqReduce,
    pub interp_response: ResponseKind,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions { reduce: SeqReduce::TokenMean, interp_response: ResponseKind::Teacher }
    }
}

/// Dispatch a [`LossSpec`] to the concrete batch loss. DPO requires a
/// reference model; DPKD substitutes the teacher.
pub fn batch_loss(
    g: &mut Graph,
    sess: &Session,
    teacher: &dyn LanguageModel,
    reference: Option<&dyn LanguageModel>,
    batch: &[SampleTriple],
    spec: &LossSpec,
    opts: &LossOptions,
) -> Result<Var> {
    spec.validate()?;
    match spec.kind {
        LossKind::Kl => single_divergence_loss(g, sess, teacher, batch, DivKind::Kl, 0.0, spec.token_mode, opts.reduce),
        LossKind::Rkl => single_divergence_loss(g, sess, teacher, batch, DivKind::Rkl, 0.0, spec.token_mode, opts.reduce),
        LossKind::Skl => single_divergence_loss(g, sess, teacher, batch, DivKind::Skl, spec.alpha_t, spec.token_mode, opts.reduce),
        LossKind::Srkl => single_divergence_loss(g, sess, teacher, batch, DivKind::Srkl, spec.alpha_s, spec.token_mode, opts.reduce),
        LossKind::Cald => cald_loss(g, sess, teacher, batch, spec.alpha_t, spec.token_mode, opts.reduce),
        LossKind::Distillm2 => distillm2_loss(
            g, sess, teacher, batch, spec.alpha_t, spec.alpha_s, spec.beta, spec.token_mode, opts.reduce,
        ),
        LossKind::Dpo => {
            let reference = reference.ok_or_else(|| {
                Error::Config("DPO needs a reference model".into())
            })?;
            dpo_loss(g, sess, reference, batch, spec.lambda)
        }
        LossKind::Dpkd => dpkd_loss(g, sess, teacher, batch, spec.lambda),
        LossKind::Interp => {
            let alpha = match opts.interp_response {
                ResponseKind::Teacher => spec.alpha_t,
                ResponseKind::Student => spec.alpha_s,
            };
            interp_single_response_loss(
                g, sess, teacher, batch, spec.gamma, alpha, opts.interp_response, spec.token_mode, opts.reduce,
            )
        }
    }
}
