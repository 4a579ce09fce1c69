//! Attention-guided masking: class-attention trace → per-token masking
//! probabilities → masked text. Also hosts the random and picked baselines
//! used by the ablation harness.

use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{special, Vocabulary, WordClass};
use crate::encoders::AttentionTrace;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::softmax_slice;

/// Proportions of MASK / random-word / keep among selected positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplaceScheme {
    pub mask_token: f64,
    pub random_word: f64,
    pub keep: f64,
}

impl Default for ReplaceScheme {
    fn default() -> Self {
        Self {
            mask_token: 0.8,
            random_word: 0.1,
            keep: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgmConfig {
    /// EMA coefficient over layers.
    pub beta: f64,
    /// Softmax temperature used to renormalize the aggregated attention.
    pub tau: f64,
    /// Probability offset (lower bound) for every content token.
    pub alpha1: f64,
    /// Probability amplitude spread by the normalized attention.
    pub alpha2: f64,
    pub replace: ReplaceScheme,
    /// Scale `alpha2` by the number of content tokens so the expected
    /// masked fraction is `alpha1 + alpha2` instead of `alpha1 + alpha2 / n`.
    pub target_mask_rate: bool,
    /// Selection rate of the random baseline (and the picked baseline's budget).
    pub baseline_rate: f64,
}

impl Default for AgmConfig {
    fn default() -> Self {
        Self {
            beta: 0.95,
            tau: 0.02,
            alpha1: 0.05,
            alpha2: 0.15,
            replace: ReplaceScheme::default(),
            target_mask_rate: false,
            baseline_rate: 0.15,
        }
    }
}

fn config_err(path: &str, message: String) -> Error {
    Error::Config {
        path: format!("agm.{path}"),
        message,
    }
}

impl AgmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(config_err("beta", format!("{} outside [0, 1]", self.beta)));
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(config_err("tau", format!("{} must be positive", self.tau)));
        }
        if self.alpha1.is_nan() || self.alpha1 < 0.0 {
            return Err(config_err("alpha1", format!("{} must be non-negative", self.alpha1)));
        }
        if self.alpha2.is_nan() || self.alpha2 < 0.0 || self.alpha1 + self.alpha2 > 1.0 {
            return Err(config_err(
                "alpha2",
                format!("alpha1 + alpha2 = {} must lie in [0, 1]", self.alpha1 + self.alpha2),
            ));
        }
        let r = self.replace;
        if [r.mask_token, r.random_word, r.keep].iter().any(|&x| x.is_nan() || x < 0.0)
            || (r.mask_token + r.random_word + r.keep - 1.0).abs() > 1e-9
        {
            return Err(config_err(
                "replace",
                format!("proportions {} / {} / {} must be non-negative and sum to 1", r.mask_token, r.random_word, r.keep),
            ));
        }
        if !(0.0..=1.0).contains(&self.baseline_rate) {
            return Err(config_err("baseline_rate", format!("{} outside [0, 1]", self.baseline_rate)));
        }
        Ok(())
    }

    /// Aggregated attention `ā` and masking probabilities `p` for one text.
    pub fn probabilities(&self, trace: &AttentionTrace, content: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
        let abar = aggregate_class_attention(trace, self.beta)?;
        let norm = normalize_attention(&abar, self.tau, content)?;
        let alpha2 = if self.target_mask_rate {
            self.alpha2 * content.iter().filter(|&&c| c).count() as f64
        } else {
            self.alpha2
        };
        Ok((abar, mask_probabilities(&norm, self.alpha1, alpha2, content)))
    }
}

/// Exponential moving average of the head-averaged class-attention rows over
/// layers, starting from zero: `ā_k = β ā_{k−1} + (1 − β) a_k`.
pub fn aggregate_class_attention(trace: &AttentionTrace, beta: f64) -> Result<Vec<f64>> {
    if trace.num_layers() == 0 || trace.seq_len() == 0 {
        return Err(Error::Contract("empty attention trace".into()));
    }
    let mut abar = vec![0.0; trace.seq_len()];
    for k in 0..trace.num_layers() {
        let row = trace.head_mean(k);
        for (a, r) in abar.iter_mut().zip(row) {
            *a = beta * *a + (1.0 - beta) * r;
        }
    }
    Ok(abar)
}

/// Softmax of `ā / τ` restricted to content positions; every other
/// position gets exactly 0.
pub fn normalize_attention(abar: &[f64], tau: f64, content: &[bool]) -> Result<Vec<f64>> {
    if abar.len() != content.len() {
        return Err(Error::shape("normalize_attention", &[abar.len()], &[content.len()]));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let idx: Vec<usize> = (0..abar.len()).filter(|&i| content[i]).collect();
    if idx.is_empty() {
        return Err(Error::EmptyText);
    }
    let logits: Vec<f64> = idx.iter().map(|&i| abar[i]).collect();
    let probs = softmax_slice(&logits, tau);
    let mut out = vec![0.0; abar.len()];
    for (&i, p) in idx.iter().zip(probs) {
        out[i] = p;
    }
    Ok(out)
}

static CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

/// `p_i = α₁ + α₂ ā_i` on content positions, 0 elsewhere; values above 1 are
/// clamped (warned about once per process).
pub fn mask_probabilities(normalized: &[f64], alpha1: f64, alpha2: f64, content: &[bool]) -> Vec<f64> {
    normalized
        .iter()
        .zip(content)
        .map(|(&a, &c)| {
            if !c {
                return 0.0;
            }
            let p = alpha1 + alpha2 * a;
            if p > 1.0 {
                if !CLAMP_WARNED.swap(true, Ordering::Relaxed) {
                    log::warn!("masking probability {p:.4} clamped to 1");
                }
                1.0
            } else {
                p
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Picked,
    Agm,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Picked => "picked",
            Strategy::Agm => "agm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Mask,
    Random,
    Keep,
}

/// Text after masking, with everything needed to undo it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedText {
    pub ids: Vec<usize>,
    /// Masked positions in increasing order.
    pub positions: Vec<usize>,
    /// Input ids at `positions`.
    pub originals: Vec<usize>,
    pub actions: Vec<Action>,
    /// Selection probability of every position.
    pub probabilities: Vec<f64>,
    pub strategy: Strategy,
    /// True when no token was drawn and the guard forced one.
    pub forced: bool,
    /// Picked strategy only: the text had no vacuous word, so an arbitrary
    /// content token was masked instead.
    pub fallback: bool,
}

impl MaskedText {
    pub fn reconstruct(&self) -> Vec<usize> {
        let mut ids = self.ids.clone();
        for (&p, &o) in self.positions.iter().zip(&self.originals) {
            ids[p] = o;
        }
        ids
    }
}

/// Which position the guard masks when no Bernoulli draw succeeds.
#[derive(Debug, Clone, Copy)]
enum Guard {
    /// Highest probability, ties to the lowest index.
    ArgMax,
    /// Uniform over the listed positions.
    Uniform,
}

fn select(
    ids: &[usize],
    p: &[f64],
    guard: Guard,
    guard_pool: &[usize],
    rng: &mut Rng,
) -> (Vec<usize>, bool) {
    let mut chosen: Vec<usize> = (0..ids.len())
        .filter(|&i| p[i] > 0.0 && rng.random::<f64>() < p[i])
        .collect();
    let forced = chosen.is_empty();
    if forced {
        let pick = match guard {
            Guard::ArgMax => guard_pool
                .iter()
                .copied()
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if p[b] >= p[i] => Some(b),
                    _ => Some(i),
                }),
            Guard::Uniform => Some(guard_pool[rng.random_range(0..guard_pool.len())]),
        };
        chosen.extend(pick);
    }
    (chosen, forced)
}

fn replace(
    ids: &[usize],
    chosen: Vec<usize>,
    scheme: ReplaceScheme,
    words: Range<usize>,
    rng: &mut Rng,
) -> (Vec<usize>, Vec<usize>, Vec<Action>) {
    let mut out = ids.to_vec();
    let mut originals = Vec::with_capacity(chosen.len());
    let mut actions = Vec::with_capacity(chosen.len());
    for &i in &chosen {
        originals.push(ids[i]);
        let u: f64 = rng.random();
        let action = if u < scheme.mask_token {
            out[i] = special::MASK;
            Action::Mask
        } else if u < scheme.mask_token + scheme.random_word {
            out[i] = rng.random_range(words.clone());
            Action::Random
        } else {
            Action::Keep
        };
        actions.push(action);
    }
    (out, originals, actions)
}

fn content_positions(content: &[bool]) -> Result<Vec<usize>> {
    let pool: Vec<usize> = (0..content.len()).filter(|&i| content[i]).collect();
    if pool.is_empty() {
        return Err(Error::EmptyText);
    }
    Ok(pool)
}

/// Independent Bernoulli(`p_i`) selection followed by the replacement
/// scheme. If nothing is drawn, the content token with the highest `p` is
/// masked (ties to the lowest index). Random words come from `words`.
pub fn apply_mask(
    ids: &[usize],
    p: &[f64],
    content: &[bool],
    scheme: ReplaceScheme,
    words: Range<usize>,
    rng: &mut Rng,
) -> Result<MaskedText> {
    if p.len() != ids.len() || content.len() != ids.len() {
        return Err(Error::shape("apply_mask", &[ids.len()], &[p.len(), content.len()]));
    }
    let pool = content_positions(content)?;
    let p: Vec<f64> = p.iter().zip(content).map(|(&x, &c)| if c { x } else { 0.0 }).collect();
    let (chosen, forced) = select(ids, &p, Guard::ArgMax, &pool, rng);
    let (out, originals, actions) = replace(ids, chosen.clone(), scheme, words, rng);
    Ok(MaskedText {
        ids: out,
        positions: chosen,
        originals,
        actions,
        probabilities: p,
        strategy: Strategy::Agm,
        forced,
        fallback: false,
    })
}

/// Uniform-rate baseline. The guard picks a uniformly random content token
/// so it does not favour any position.
pub fn random_mask(
    ids: &[usize],
    content: &[bool],
    rate: f64,
    scheme: ReplaceScheme,
    words: Range<usize>,
    rng: &mut Rng,
) -> Result<MaskedText> {
    if content.len() != ids.len() {
        return Err(Error::shape("random_mask", &[ids.len()], &[content.len()]));
    }
    let pool = content_positions(content)?;
    let p: Vec<f64> = content.iter().map(|&c| if c { rate } else { 0.0 }).collect();
    let (chosen, forced) = select(ids, &p, Guard::Uniform, &pool, rng);
    let (out, originals, actions) = replace(ids, chosen.clone(), scheme, words, rng);
    Ok(MaskedText {
        ids: out,
        positions: chosen,
        originals,
        actions,
        probabilities: p,
        strategy: Strategy::Random,
        forced,
        fallback: false,
    })
}

/// Masks only vacuous words. The per-token rate is raised to
/// `rate · n / n_vacuous` (capped at 1) so the expected number of masked
/// tokens matches the random baseline. A text without vacuous words gets
/// one random content token and `fallback = true`.
pub fn picked_mask(
    ids: &[usize],
    content: &[bool],
    vocab: &Vocabulary,
    rate: f64,
    scheme: ReplaceScheme,
    rng: &mut Rng,
) -> Result<MaskedText> {
    if content.len() != ids.len() {
        return Err(Error::shape("picked_mask", &[ids.len()], &[content.len()]));
    }
    let pool = content_positions(content)?;
    let vacuous: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|&i| vocab.class(ids[i]) == WordClass::Vacuous)
        .collect();
    let words = vocab.word_ids();
    if vacuous.is_empty() {
        let chosen = vec![pool[rng.random_range(0..pool.len())]];
        let (out, originals, actions) = replace(ids, chosen.clone(), scheme, words, rng);
        return Ok(MaskedText {
            ids: out,
            positions: chosen,
            originals,
            actions,
            probabilities: vec![0.0; ids.len()],
            strategy: Strategy::Picked,
            forced: true,
            fallback: true,
        });
    }
    let r = (rate * pool.len() as f64 / vacuous.len() as f64).min(1.0);
    let mut p = vec![0.0; ids.len()];
    for &i in &vacuous {
        p[i] = r;
    }
    let (chosen, forced) = select(ids, &p, Guard::Uniform, &vacuous, rng);
    let (out, originals, actions) = replace(ids, chosen.clone(), scheme, words, rng);
    Ok(MaskedText {
        ids: out,
        positions: chosen,
        originals,
        actions,
        probabilities: p,
        strategy: Strategy::Picked,
        forced,
        fallback: false,
    })
}

/// One line of the mask-analysis dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub sentence_id: usize,
    pub position: usize,
    pub token: String,
    pub token_id: usize,
    pub abar: f64,
    pub p: f64,
    pub masked: bool,
    pub action: Option<Action>,
}

/// Records for every content token of one masked text.
pub fn mask_records(
    sentence_id: usize,
    original: &[usize],
    abar: &[f64],
    masked: &MaskedText,
    vocab: &Vocabulary,
) -> Vec<MaskRecord> {
    (0..original.len())
        .filter(|&i| !vocab.is_special(original[i]))
        .map(|i| {
            let k = masked.positions.iter().position(|&q| q == i);
            MaskRecord {
                sentence_id,
                position: i,
                token: vocab.word(original[i]).to_string(),
                token_id: original[i],
                abar: abar[i],
                p: masked.probabilities[i],
                masked: k.is_some(),
                action: k.map(|k| masked.actions[k]),
            }
        })
        .collect()
}

pub fn write_mask_records(path: &Path, records: &[MaskRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::format("mask dump", e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_mask_records(path: &Path) -> Result<Vec<MaskRecord>> {
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format("mask dump", format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}
