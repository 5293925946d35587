//! Curriculum schedule for the skew coefficient and the gradually
//! increasing SRKL weight.
//!
//! Per mini-batch the skew coefficients are set from the teacher/student
//! probability gap relative to a per-epoch reference gap m:
//!
//! ```text
//! alpha <- 1 - (1 - alpha0) * m / gap,   then clipped into [clip_lo, clip_hi]
//! ```
//!
//! As written the algorithm cross-pairs the sides: alpha_t (used by the SKL
//! term on teacher responses) is driven by the gap on student responses and
//! vice versa. A straight-pairing mode is provided behind a flag; neither
//! is asserted as the intended pairing.

use crate::datagen::SampleTriple;
use crate::divergence::ResponseKind;
use crate::error::{Error, Result};
use crate::lm::{response_logprob_rows, LanguageModel};

/// Floor applied to the gap statistic, keeping the update rule finite.
pub const GAP_FLOOR: f64 = 1e-6;

/// Which gap drives which coefficient in [`ScheduleState::update_alpha`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaPairing {
    /// As the update rule is written: alpha_t from the student-response
    /// gap, alpha_s from the teacher-response gap.
    CrossAsWritten,
    /// alpha_t from the teacher-response gap, alpha_s from the student one.
    Straight,
}

/// Mutable schedule state owned by the trainer.
#[derive(Debug, Clone)]
pub struct ScheduleState {
    pub alpha0: f64,
    pub alpha_t: f64,
    pub alpha_s: f64,
    pub beta0: f64,
    pub beta: f64,
    /// Per-epoch reference gap, set from the first mini-batch of the epoch.
    pub m: Option<f64>,
    pub clip_lo: f64,
    pub clip_hi: f64,
}

impl ScheduleState {
    pub fn new(alpha0: f64, beta0: f64, clip_lo: f64, clip_hi: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha0) {
            return Err(Error::Parameter(format!("alpha0 {alpha0} outside [0, 1]")));
        }
        if !(0.0..=1.0).contains(&beta0) {
            return Err(Error::Parameter(format!("beta0 {beta0} outside [0, 1]")));
        }
        if !(clip_lo > 0.0 && clip_lo <= clip_hi && clip_hi <= 1.0) {
            return Err(Error::Parameter(format!(
                "clip band [{clip_lo}, {clip_hi}] invalid"
            )));
        }
        Ok(ScheduleState {
            alpha0,
            alpha_t: alpha0.clamp(clip_lo, clip_hi),
            alpha_s: alpha0.clamp(clip_lo, clip_hi),
            beta0,
            beta: beta0,
            m: None,
            clip_lo,
            clip_hi,
        })
    }

    /// Freeze the per-epoch reference gap as the mean gap of the first
    /// mini-batch of the epoch.
    pub fn set_reference_gap(&mut self, first_batch_gaps: &[f64]) -> Result<()> {
        if first_batch_gaps.is_empty() {
            return Err(Error::Data("set_reference_gap: no gaps".into()));
        }
        let m = first_batch_gaps.iter().sum::<f64>() / first_batch_gaps.len() as f64;
        if !(m > 0.0) || !m.is_finite() {
            return Err(Error::Parameter(format!("reference gap {m} must be positive")));
        }
        self.m = Some(m);
        Ok(())
    }

    /// Clear the reference gap at an epoch boundary.
    pub fn reset_epoch(&mut self) {
        self.m = None;
    }

    /// Curriculum update of both skew coefficients from the current batch
    /// gaps. Returns the clipped (alpha_t, alpha_s).
    pub fn update_alpha(
        &mut self,
        gap_t: f64,
        gap_s: f64,
        pairing: AlphaPairing,
    ) -> Result<(f64, f64)> {
        let m = self.m.ok_or_else(|| {
            Error::State("update_alpha called before set_reference_gap".into())
        })?;
        if !(gap_t > 0.0) || !(gap_s > 0.0) {
            return Err(Error::Parameter(format!(
                "gaps must be positive, got ({gap_t}, {gap_s})"
            )));
        }
        let raw = |gap: f64| 1.0 - (1.0 - self.alpha0) * m / gap;
        let (raw_t, raw_s) = match pairing {
            AlphaPairing::CrossAsWritten => (raw(gap_s), raw(gap_t)),
            AlphaPairing::Straight => (raw(gap_t), raw(gap_s)),
        };
        self.alpha_t = raw_t.clamp(self.clip_lo, self.clip_hi);
        self.alpha_s = raw_s.clamp(self.clip_lo, self.clip_hi);
        Ok((self.alpha_t, self.alpha_s))
    }

    /// Advance beta monotonically: the raw linear schedule dips at epoch
    /// boundaries, so the trainer keeps the running maximum, which is what
    /// makes the logged beta nondecreasing over a multi-epoch run.
    pub fn advance_beta(&mut self, raw: f64) -> f64 {
        self.beta = self.beta.max(raw).clamp(self.beta0, 1.0);
        self.beta
    }
}

/// Verbatim linear schedule: clip(e/E + tau/T, beta0, 1).
pub fn update_beta(e: usize, epochs: usize, tau: usize, iters: usize, beta0: f64) -> f64 {
    let progress = e as f64 / epochs.max(1) as f64 + tau as f64 / iters.max(1) as f64;
    progress.clamp(beta0, 1.0)
}

/// Alternative normalized progress mode: clip((e-1)/E + tau/(E*T), beta0, 1),
/// continuous across epoch boundaries. Off by default.
pub fn update_beta_normalized(e: usize, epochs: usize, tau: usize, iters: usize, beta0: f64) -> f64 {
    let epochs = epochs.max(1) as f64;
    let progress = (e.saturating_sub(1)) as f64 / epochs
        + tau as f64 / (epochs * iters.max(1) as f64);
    progress.clamp(beta0, 1.0)
}

/// Mean over the batch of per-position average probability gaps
/// p(token|prefix) - q(token|prefix) along the chosen response, clamped
/// below at [`GAP_FLOOR`].
pub fn gap_statistic(
    teacher: &dyn LanguageModel,
    student: &dyn LanguageModel,
    batch: &[SampleTriple],
    which: ResponseKind,
) -> Result<f64> {
    let per_sample = per_sample_gaps(teacher, student, batch, which)?;
    Ok((per_sample.iter().sum::<f64>() / per_sample.len() as f64).max(GAP_FLOOR))
}

/// Unclamped per-sample gaps, used to build the reference statistic.
pub fn per_sample_gaps(
    teacher: &dyn LanguageModel,
    student: &dyn LanguageModel,
    batch: &[SampleTriple],
    which: ResponseKind,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Data("gap statistic over an empty batch".into()));
    }
    let mut out = Vec::with_capacity(batch.len());
    for triple in batch {
        let response = match which {
            ResponseKind::Teacher => &triple.teacher_response,
            ResponseKind::Student => &triple.student_response,
        };
        if response.is_empty() {
            return Err(Error::Data("gap statistic over an empty response".into()));
        }
        let prompt = triple.prompt.as_slice();
        let trows = response_logprob_rows(teacher, prompt, response.as_slice())?;
        let srows = response_logprob_rows(student, prompt, response.as_slice())?;
        let mut acc = 0.0;
        for (t, &tok) in response.as_slice().iter().enumerate() {
            let y = tok as usize;
            acc += trows[t][y].exp() - srows[t][y].exp();
        }
        out.push(acc / response.len() as f64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{TabularLM, TokenSeq};

    fn state() -> ScheduleState {
        ScheduleState::new(0.1, 0.5, 0.01, 0.1).unwrap()
    }

    #[test]
    fn alpha_at_reference_gap_is_alpha0() {
        let mut s = state();
        s.set_reference_gap(&[0.3]).unwrap();
        let (at, as_) = s.update_alpha(0.3, 0.3, AlphaPairing::CrossAsWritten).unwrap();
        assert!((at - 0.1).abs() < 1e-12);
        assert!((as_ - 0.1).abs() < 1e-12);
    }

    #[test]
    fn alpha_large_gap_clips_to_upper_band() {
        let mut s = state();
        s.set_reference_gap(&[0.05]).unwrap();
        // gap = 10 m: raw = 1 - 0.9/10 = 0.91, clipped to 0.1
        let (at, _) = s.update_alpha(0.5, 0.5, AlphaPairing::CrossAsWritten).unwrap();
        assert!((at - 0.1).abs() < 1e-12);
    }

    #[test]
    fn alpha_inside_band_follows_formula() {
        let mut s = state();
        let m = 0.2;
        s.set_reference_gap(&[m]).unwrap();
        // gap = 0.9 m / 0.95: raw = 1 - 0.9 * 0.95/0.9 = 0.05
        let gap = 0.9 * m / 0.95;
        let (at, as_) = s.update_alpha(gap, gap, AlphaPairing::CrossAsWritten).unwrap();
        assert!((at - 0.05).abs() < 1e-12, "{at}");
        assert!((as_ - 0.05).abs() < 1e-12);
    }

    #[test]
    fn alpha_cross_pairing_swaps_gaps() {
        let mut s = state();
        s.set_reference_gap(&[0.2]).unwrap();
        let gap_t = 0.9 * 0.2 / 0.95; // raw 0.05
        let gap_s = 0.9 * 0.2 / 0.97; // raw 0.03
        let (at, as_) = s.update_alpha(gap_t, gap_s, AlphaPairing::CrossAsWritten).unwrap();
        assert!((at - 0.03).abs() < 1e-12);
        assert!((as_ - 0.05).abs() < 1e-12);
        let (at2, as2) = s.update_alpha(gap_t, gap_s, AlphaPairing::Straight).unwrap();
        assert!((at2 - 0.05).abs() < 1e-12);
        assert!((as2 - 0.03).abs() < 1e-12);
    }

    #[test]
    fn alpha_monotone_in_gap_before_clipping() {
        let mut s = ScheduleState::new(0.1, 0.5, 0.0001, 0.9999).unwrap();
        s.set_reference_gap(&[0.2]).unwrap();
        let mut prev = -1.0;
        for gap in [0.05, 0.1, 0.2, 0.4, 0.8] {
            let (_, as_) = s.update_alpha(gap, gap, AlphaPairing::CrossAsWritten).unwrap();
            assert!(as_ > prev, "alpha not increasing at gap {gap}");
            prev = as_;
        }
    }

    #[test]
    fn alpha_requires_reference_gap() {
        let mut s = state();
        assert!(matches!(
            s.update_alpha(0.1, 0.1, AlphaPairing::CrossAsWritten),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn alpha_outputs_always_inside_band() {
        let mut s = state();
        s.set_reference_gap(&[0.1]).unwrap();
        for gap_t in [1e-6, 1e-3, 0.05, 0.1, 0.5, 1.0] {
            for gap_s in [1e-6, 0.02, 0.2, 0.9] {
                let (at, as_) = s.update_alpha(gap_t, gap_s, AlphaPairing::CrossAsWritten).unwrap();
                assert!((0.01..=0.1).contains(&at));
                assert!((0.01..=0.1).contains(&as_));
            }
        }
    }

    #[test]
    fn reference_gap_examples() {
        let mut s = state();
        s.set_reference_gap(&[0.2, 0.4]).unwrap();
        assert!((s.m.unwrap() - 0.3).abs() < 1e-15);
        s.set_reference_gap(&[0.17]).unwrap();
        assert!((s.m.unwrap() - 0.17).abs() < 1e-15);
        // permutation invariance
        let mut s2 = state();
        s2.set_reference_gap(&[0.4, 0.2]).unwrap();
        assert!((s2.m.unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn beta_tabulated_examples() {
        // e = E, tau = T: clip(2, b0, 1) = 1
        assert_eq!(update_beta(3, 3, 100, 100, 0.5), 1.0);
        // e = 1, tau = 0, E = 3: clip(1/3, 0.5, 1) = 0.5
        assert_eq!(update_beta(1, 3, 0, 100, 0.5), 0.5);
        // e = 1, tau = T/4, E = 3: 1/3 + 1/4 = 0.5833...
        let b = update_beta(1, 3, 25, 100, 0.5);
        assert!((b - (1.0 / 3.0 + 0.25)).abs() < 1e-12);
    }

    #[test]
    fn beta_normalized_mode_reaches_one_only_at_the_end() {
        let b_mid = update_beta_normalized(2, 3, 50, 100, 0.0);
        assert!((b_mid - (1.0 / 3.0 + 50.0 / 300.0)).abs() < 1e-12);
        assert_eq!(update_beta_normalized(3, 3, 100, 100, 0.5), 1.0);
        // continuous across the boundary
        let end_1 = update_beta_normalized(1, 3, 100, 100, 0.0);
        let start_2 = update_beta_normalized(2, 3, 1, 100, 0.0);
        assert!(start_2 >= end_1 - 1e-12);
    }

    #[test]
    fn beta_nondecreasing_within_epoch_and_enveloped_across() {
        let mut s = state();
        let mut prev = 0.0;
        for e in 1..=3 {
            for tau in 1..=50 {
                let b = s.advance_beta(update_beta(e, 3, tau, 50, 0.5));
                assert!(b >= prev, "beta decreased at ({e}, {tau})");
                assert!((0.5..=1.0).contains(&b));
                prev = b;
            }
        }
        assert_eq!(prev, 1.0);
    }

    #[test]
    fn gap_statistic_identical_models_hits_floor() {
        let m = TabularLM::random(4, 1, 1, 1.0).unwrap();
        let batch = vec![SampleTriple {
            prompt: TokenSeq::new(vec![2]),
            teacher_response: TokenSeq::new(vec![3, 1]),
            student_response: TokenSeq::new(vec![2, 1]),
            epoch: 1,
        }];
        let g = gap_statistic(&m, &m, &batch, ResponseKind::Teacher).unwrap();
        assert_eq!(g, GAP_FLOOR);
    }

    #[test]
    fn gap_statistic_onehot_vs_uniform() {
        // teacher puts all mass on the realized token, student is uniform
        let teacher = TabularLM::deterministic(4, 1, |ctx| match ctx.last() {
            Some(&2) => 3,
            _ => 3,
        })
        .unwrap();
        let student = TabularLM::uniform(4, 1).unwrap();
        let batch = vec![SampleTriple {
            prompt: TokenSeq::new(vec![2]),
            teacher_response: TokenSeq::new(vec![3]),
            student_response: TokenSeq::new(vec![3]),
            epoch: 1,
        }];
        let g = gap_statistic(&teacher, &student, &batch, ResponseKind::Teacher).unwrap();
        assert!((g - 0.75).abs() < 1e-9, "{g}");
    }

    #[test]
    fn gap_statistic_matches_table_lookup_oracle() {
        let teacher = TabularLM::random(5, 1, 61, 1.2).unwrap();
        let student = TabularLM::random(5, 1, 62, 1.2).unwrap();
        let batch = vec![
            SampleTriple {
                prompt: TokenSeq::new(vec![2]),
                teacher_response: TokenSeq::new(vec![3, 4, 1]),
                student_response: TokenSeq::new(vec![2, 1]),
                epoch: 1,
            },
            SampleTriple {
                prompt: TokenSeq::new(vec![4]),
                teacher_response: TokenSeq::new(vec![2, 1]),
                student_response: TokenSeq::new(vec![3, 1]),
                epoch: 1,
            },
        ];
        let got = gap_statistic(&teacher, &student, &batch, ResponseKind::Student).unwrap();
        // independent recomputation by direct table lookup
        let mut means = Vec::new();
        for t in &batch {
            let mut ctx = t.prompt.as_slice().to_vec();
            let mut acc = 0.0;
            for &tok in t.student_response.as_slice() {
                let p = teacher.prob_row_for(&ctx).unwrap()[tok as usize];
                let q = student.prob_row_for(&ctx).unwrap()[tok as usize];
                acc += p - q;
                ctx.push(tok);
            }
            means.push(acc / t.student_response.len() as f64);
        }
        let expect = (means.iter().sum::<f64>() / means.len() as f64).max(GAP_FLOOR);
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn gap_statistic_empty_batch_is_data_error() {
        let m = TabularLM::uniform(4, 0).unwrap();
        assert!(matches!(
            gap_statistic(&m, &m, &[], ResponseKind::Teacher),
            Err(Error::Data(_))
        ));
    }
}
