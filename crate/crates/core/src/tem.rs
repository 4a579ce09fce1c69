//! Text enrichment: resample masked words from the MLM head's top-m list
//! and, with probability `p_tem`, train on the rewritten sentence.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::agm::{Action, MaskedText};
use crate::corpus::special;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{softmax_slice, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Persistence {
    /// The rewritten sentence is used for the current step only.
    Ephemeral,
    /// An accepted rewrite replaces the stored sentence for later epochs.
    Persistent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemConfig {
    /// Size of the candidate list.
    pub m: usize,
    pub p_tem: f64,
    pub temperature: f64,
    pub persistence: Persistence,
}

impl Default for TemConfig {
    fn default() -> Self {
        Self {
            m: 5,
            p_tem: 0.3,
            temperature: 1.0,
            persistence: Persistence::Ephemeral,
        }
    }
}

impl TemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Config {
                path: "tem.m".into(),
                message: format!("{} < 2 leaves nothing to sample once the original is excluded", self.m),
            });
        }
        if !(0.0..=1.0).contains(&self.p_tem) {
            return Err(Error::Config {
                path: "tem.p_tem".into(),
                message: format!("{} outside [0, 1]", self.p_tem),
            });
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::Config {
                path: "tem.temperature".into(),
                message: format!("{} must be positive", self.temperature),
            });
        }
        Ok(())
    }
}

/// The `m` highest logits (ties to the lower id) and their softmax.
pub fn top_m_distribution(logits: &[f64], m: usize, temperature: f64) -> Result<(Vec<usize>, Vec<f64>)> {
    if m < 2 {
        return Err(Error::Config {
            path: "tem.m".into(),
            message: format!("{m} < 2"),
        });
    }
    if m > logits.len() {
        return Err(Error::Parameter(format!("m = {m} exceeds vocabulary of {}", logits.len())));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(m);
    let top: Vec<f64> = order.iter().map(|&i| logits[i]).collect();
    Ok((order, softmax_slice(&top, temperature)))
}

/// One draw from the candidate distribution with `original` removed and the
/// rest renormalized. Returns the token and its rank in the candidate list.
pub fn sample_replacement(candidates: &[usize], probs: &[f64], original: usize, rng: &mut Rng) -> Result<(usize, usize)> {
    let total: f64 = candidates
        .iter()
        .zip(probs)
        .filter(|(&c, _)| c != original)
        .map(|(_, &p)| p)
        .sum();
    if total <= 0.0 || total.is_nan() {
        return Err(Error::Contract(format!(
            "no candidate other than the original token {original}"
        )));
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (rank, (&c, &p)) in candidates.iter().zip(probs).enumerate() {
        if c == original || p <= 0.0 {
            continue;
        }
        acc += p;
        last = Some((c, rank));
        if u < acc {
            return Ok((c, rank));
        }
    }
    // rounding left u just above the accumulated mass
    Ok(last.expect("positive mass implies a candidate"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnrichedText {
    /// Token ids to train on: the rewritten sentence when accepted, the
    /// original otherwise.
    pub ids: Vec<usize>,
    /// Positions that were rewritten in the candidate sentence.
    pub positions: Vec<usize>,
    /// `(original, replacement)` per rewritten position.
    pub pairs: Vec<(usize, usize)>,
    /// Rank of each replacement within its top-m list.
    pub ranks: Vec<usize>,
    pub accepted: bool,
}

/// Builds the rewritten sentence from `logits` (`[masked.positions.len(), V]`,
/// one row per masked position) and flips the `p_tem` coin. Only positions
/// whose action was [`Action::Mask`] are rewritten; special tokens are never
/// proposed.
pub fn enrich_text(original: &[usize], masked: &MaskedText, logits: &Tensor, config: &TemConfig, rng: &mut Rng) -> Result<EnrichedText> {
    if logits.shape().len() != 2 || logits.rows() < masked.positions.len() {
        return Err(Error::Contract(format!(
            "logits {:?} do not cover {} masked positions",
            logits.shape(),
            masked.positions.len()
        )));
    }
    let mut candidate = original.to_vec();
    let (mut positions, mut pairs, mut ranks) = (Vec::new(), Vec::new(), Vec::new());
    for (k, (&pos, &action)) in masked.positions.iter().zip(&masked.actions).enumerate() {
        if action != Action::Mask {
            continue;
        }
        let mut row = logits.row(k).to_vec();
        let n_special = special::COUNT.min(row.len());
        row[..n_special].fill(f64::NEG_INFINITY);
        let (cands, probs) = top_m_distribution(&row, config.m, config.temperature)?;
        let (replacement, rank) = sample_replacement(&cands, &probs, original[pos], rng)?;
        candidate[pos] = replacement;
        positions.push(pos);
        pairs.push((original[pos], replacement));
        ranks.push(rank);
    }
    let accepted = rng.random::<f64>() < config.p_tem;
    Ok(EnrichedText {
        ids: if accepted { candidate } else { original.to_vec() },
        positions,
        pairs,
        ranks,
        accepted,
    })
}

/// One line of the optional replacement log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplacementRecord {
    pub sentence_id: usize,
    pub position: usize,
    pub original_word: String,
    pub replacement_word: String,
    pub logit_rank: usize,
    pub accepted: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn top_m_ties_prefer_lower_ids() {
        let (c, p) = top_m_distribution(&[1.0, 2.0, 2.0, 0.0], 2, 1.0).unwrap();
        assert_eq!(c, vec![1, 2]);
        assert_eq!(p, vec![0.5, 0.5]);
        assert!(top_m_distribution(&[1.0, 2.0], 1, 1.0).is_err());
    }

    #[test]
    fn exclusion_forces_the_other_candidate() {
        let mut r = rng::stream(3, "t");
        for _ in 0..100 {
            assert_eq!(sample_replacement(&[7, 9], &[0.9, 0.1], 7, &mut r).unwrap().0, 9);
        }
        assert!(sample_replacement(&[7, 9], &[1.0, 0.0], 7, &mut r).is_err());
    }
}
