//! Exact tabular n-gram model backing the enumeration oracles.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lm::{LanguageModel, TokenId, PROB_FLOOR};

const MAX_TABLE_CELLS: usize = 4_000_000;

/// Autoregressive model with an explicit conditional table: every context of
/// length <= `order` maps to a full next-token distribution. All rows are
/// floored at [`PROB_FLOOR`] and renormalized, so every conditional is
/// strictly positive and sums to one.
#[derive(Debug, Clone)]
pub struct TabularLM {
    vocab: usize,
    order: usize,
    rows: HashMap<Vec<TokenId>, Vec<f64>>,
}

impl TabularLM {
    /// Build from a row constructor invoked for every context of length
    /// 0..=order. The returned weights may be unnormalized; they are
    /// floored and normalized here.
    pub fn from_fn(
        vocab: usize,
        order: usize,
        mut row_for: impl FnMut(&[TokenId]) -> Vec<f64>,
    ) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::Parameter(format!("vocab {vocab} must be >= 2")));
        }
        let mut cells = 0usize;
        for k in 0..=order {
            cells = cells.saturating_add(vocab.pow(k as u32).saturating_mul(vocab));
            if cells > MAX_TABLE_CELLS {
                return Err(Error::Parameter(format!(
                    "table for vocab {vocab} order {order} exceeds {MAX_TABLE_CELLS} cells"
                )));
            }
        }
        let mut rows = HashMap::new();
        let mut ctx: Vec<TokenId> = Vec::with_capacity(order);
        fill_contexts(vocab, order, &mut ctx, &mut rows, &mut row_for)?;
        Ok(TabularLM { vocab, order, rows })
    }

    pub fn uniform(vocab: usize, order: usize) -> Result<Self> {
        Self::from_fn(vocab, order, |_| vec![1.0; vocab])
    }

    /// Random conditionals: unit exponential weights raised to `sharpness`,
    /// so larger sharpness gives more peaked rows.
    pub fn random(vocab: usize, order: usize, seed: u64, sharpness: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_fn(vocab, order, |_| {
            (0..vocab)
                .map(|_| {
                    let u: f64 = rng.random::<f64>().max(1e-16);
                    (-u.ln()).powf(sharpness)
                })
                .collect()
        })
    }

    /// Near-one-hot rows: the forced token holds all mass up to the floor.
    pub fn deterministic(
        vocab: usize,
        order: usize,
        mut next: impl FnMut(&[TokenId]) -> TokenId,
    ) -> Result<Self> {
        Self::from_fn(vocab, order, |ctx| {
            let forced = next(ctx) as usize;
            let mut row = vec![0.0; vocab];
            row[forced.min(vocab - 1)] = 1.0;
            row
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Linear-probability conditional for a prefix (looks up the last
    /// `order` tokens).
    pub fn prob_row_for(&self, prefix: &[TokenId]) -> Result<&[f64]> {
        for &t in prefix {
            if (t as usize) >= self.vocab {
                return Err(Error::Index(format!(
                    "token {t} outside vocabulary {}",
                    self.vocab
                )));
            }
        }
        let start = prefix.len().saturating_sub(self.order);
        let ctx = &prefix[start..];
        self.rows
            .get(ctx)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Contract(format!("missing context {ctx:?}")))
    }
}

fn fill_contexts(
    vocab: usize,
    order: usize,
    ctx: &mut Vec<TokenId>,
    rows: &mut HashMap<Vec<TokenId>, Vec<f64>>,
    row_for: &mut impl FnMut(&[TokenId]) -> Vec<f64>,
) -> Result<()> {
    let raw = row_for(ctx);
    rows.insert(ctx.clone(), normalize_row(vocab, &raw)?);
    if ctx.len() == order {
        return Ok(());
    }
    for t in 0..vocab {
        ctx.push(t as TokenId);
        fill_contexts(vocab, order, ctx, rows, row_for)?;
        ctx.pop();
    }
    Ok(())
}

fn normalize_row(vocab: usize, raw: &[f64]) -> Result<Vec<f64>> {
    if raw.len() != vocab {
        return Err(Error::Shape(format!(
            "row length {} for vocabulary {vocab}",
            raw.len()
        )));
    }
    let mut row: Vec<f64> = raw
        .iter()
        .map(|&w| {
            if !w.is_finite() || w < 0.0 {
                Err(Error::Parameter(format!("row weight {w}")))
            } else {
                Ok(w.max(PROB_FLOOR))
            }
        })
        .collect::<Result<_>>()?;
    let sum: f64 = row.iter().sum();
    for v in &mut row {
        *v /= sum;
    }
    Ok(row)
}

impl LanguageModel for TabularLM {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn context_limit(&self) -> usize {
        usize::MAX
    }

    fn log_rows_inclusive(&self, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        let mut rows = Vec::with_capacity(tokens.len() + 1);
        for t in 0..=tokens.len() {
            let row = self.prob_row_for(&tokens[..t])?;
            rows.push(row.iter().map(|p| p.ln()).collect());
        }
        Ok(rows)
    }

    fn next_log_row(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.prob_row_for(prefix)?.iter().map(|p| p.ln()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_normalized_and_positive() {
        let m = TabularLM::random(5, 2, 11, 2.0).unwrap();
        for prefix in [vec![], vec![3u32], vec![2, 4]] {
            let row = m.prob_row_for(&prefix).unwrap();
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn context_uses_last_order_tokens() {
        let m = TabularLM::random(4, 1, 5, 1.0).unwrap();
        let a = m.prob_row_for(&[2, 3]).unwrap().to_vec();
        let b = m.prob_row_for(&[0, 1, 3]).unwrap().to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_out_of_range_token() {
        let m = TabularLM::uniform(4, 1).unwrap();
        assert!(matches!(m.prob_row_for(&[9]), Err(Error::Index(_))));
    }
}
