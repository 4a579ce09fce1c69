//! Training objectives: image-text contrast (with momentum distillation and
//! a feature queue), image-text matching, masked language modeling, plus the
//! momentum model pair and the optimizer.

mod momentum;
mod optim;
mod queue;

pub use momentum::{momentum_update, ModelPair};
pub use optim::AdamW;
pub use queue::{multi_hot_targets, FeatureQueue, NORM_TOL};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{softmax_slice, Tape, Tensor, Var};
use queue::check_unit_rows;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub itc: f64,
    pub itc_distill: f64,
    pub itm: f64,
    pub mlm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            itc: 1.0,
            itc_distill: 1.0,
            itm: 1.0,
            mlm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectivesConfig {
    /// Contrastive temperature.
    pub tau_itc: f64,
    pub m_ema: f64,
    pub queue_capacity: usize,
    pub weights: LossWeights,
    /// Mine ITM negatives by contrastive similarity; otherwise draw them at random.
    pub hard_negatives: bool,
}

impl Default for ObjectivesConfig {
    fn default() -> Self {
        Self {
            tau_itc: 0.07,
            m_ema: 0.995,
            queue_capacity: 1024,
            weights: LossWeights::default(),
            hard_negatives: true,
        }
    }
}

impl ObjectivesConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |path: &str, message: String| Error::Config {
            path: format!("objectives.{path}"),
            message,
        };
        if self.tau_itc.is_nan() || self.tau_itc <= 0.0 {
            return Err(err("tau_itc", format!("{} must be positive", self.tau_itc)));
        }
        if !(0.0..=1.0).contains(&self.m_ema) {
            return Err(err("m_ema", format!("{} outside [0, 1]", self.m_ema)));
        }
        let w = self.weights;
        for (name, v) in [("itc", w.itc), ("itc_distill", w.itc_distill), ("itm", w.itm), ("mlm", w.mlm)] {
            if v.is_nan() || v < 0.0 {
                return Err(err(&format!("weights.{name}"), format!("{v} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Scalar values of one step's losses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub itc: f64,
    pub itc_distill: f64,
    pub itm: f64,
    pub mlm: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(itc: f64, itc_distill: f64, itm: f64, mlm: f64, w: &LossWeights) -> Self {
        Self {
            itc,
            itc_distill,
            itm,
            mlm,
            total: w.itc * itc + w.itc_distill * itc_distill + w.itm * itm + w.mlm * mlm,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.itc, self.itc_distill, self.itm, self.mlm, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Contrastive logits and loss for one batch.
#[derive(Debug, Clone)]
pub struct ItcOutput {
    pub loss: Var,
    /// `[B, B + Q]` text-to-image logits (already divided by τ).
    pub t2i: Var,
    /// `[B, B + Q]` image-to-text logits.
    pub i2t: Var,
    pub candidate_labels: Vec<usize>,
}

fn candidates(tape: &mut Tape, batch: Var, queued: Option<Tensor>) -> Result<Var> {
    match queued {
        Some(q) => {
            let q = tape.constant(q);
            tape.concat_rows(&[batch, q])
        }
        None => Ok(batch),
    }
}

/// Symmetric contrastive loss over in-batch plus queued candidates. Targets
/// put equal mass on every candidate of the same identity.
pub fn itc_loss(tape: &mut Tape, text: Var, image: Var, labels: &[usize], queue: &FeatureQueue, tau: f64) -> Result<ItcOutput> {
    if tape.shape(text) != tape.shape(image) || tape.value(text).rows() != labels.len() {
        return Err(Error::shape("itc_loss", tape.shape(text), tape.shape(image)));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Parameter(format!("contrastive temperature must be positive, got {tau}")));
    }
    check_unit_rows(tape.value(text), "text feature")?;
    check_unit_rows(tape.value(image), "image feature")?;
    let image_cands = candidates(tape, image, queue.image())?;
    let text_cands = candidates(tape, text, queue.text())?;
    let t2i = tape.matmul_nt(text, image_cands)?;
    let t2i = tape.scale(t2i, 1.0 / tau);
    let i2t = tape.matmul_nt(image, text_cands)?;
    let i2t = tape.scale(i2t, 1.0 / tau);
    let candidate_labels = queue.candidate_labels(labels);
    let target = multi_hot_targets(labels, &candidate_labels);
    let a = tape.cross_entropy(t2i, &target)?;
    let b = tape.cross_entropy(i2t, &target)?;
    let sum = tape.add(a, b)?;
    Ok(ItcOutput {
        loss: tape.scale(sum, 0.5),
        t2i,
        i2t,
        candidate_labels,
    })
}

/// Momentum-side soft targets `(q_t2i, q_i2t)` over batch + queue candidates.
pub fn itc_soft_targets(text: &Tensor, image: &Tensor, queue: &FeatureQueue, tau: f64) -> Result<(Tensor, Tensor)> {
    check_unit_rows(text, "momentum text feature")?;
    check_unit_rows(image, "momentum image feature")?;
    let probs = |a: &Tensor, b: &Tensor, queued: Option<Tensor>| -> Result<Tensor> {
        let cands = match queued {
            Some(q) => {
                let mut rows: Vec<Vec<f64>> = (0..b.rows()).map(|r| b.row(r).to_vec()).collect();
                rows.extend((0..q.rows()).map(|r| q.row(r).to_vec()));
                Tensor::from_rows(&rows)?
            }
            None => b.clone(),
        };
        let sims = a.matmul_nt(&cands)?;
        let c = sims.cols();
        let data = sims.data().chunks(c).flat_map(|row| softmax_slice(row, tau)).collect();
        Tensor::matrix(sims.rows(), c, data)
    };
    Ok((probs(text, image, queue.image())?, probs(image, text, queue.text())?))
}

/// Mean of `KL(q_t2i ‖ p_t2i)` and `KL(q_i2t ‖ p_i2t)`, where `p` is the
/// softmax of the online logits from [`itc_loss`].
pub fn itc_distill_loss(tape: &mut Tape, itc: &ItcOutput, q_t2i: &Tensor, q_i2t: &Tensor) -> Result<Var> {
    for (logits, q) in [(itc.t2i, q_t2i), (itc.i2t, q_i2t)] {
        if tape.shape(logits) != q.shape() {
            return Err(Error::Contract(format!(
                "distillation candidates differ: online {:?} vs momentum {:?}",
                tape.shape(logits),
                q.shape()
            )));
        }
    }
    let p = tape.softmax(itc.t2i, 1.0, 1)?;
    let a = tape.kl_divergence(q_t2i, p)?;
    let p = tape.softmax(itc.i2t, 1.0, 1)?;
    let b = tape.kl_divergence(q_i2t, p)?;
    let sum = tape.add(a, b)?;
    Ok(tape.scale(sum, 0.5))
}

/// For each text `i`, the image `j` of a different identity with the highest
/// similarity `sim[i][j]` (ties to the lower index). Batches smaller than 3,
/// or `hard = false`, draw uniformly among different-identity images. `None`
/// when no image of another identity is in the batch.
pub fn select_negatives(sim: &Tensor, labels: &[usize], hard: bool, rng: &mut Rng) -> Vec<Option<usize>> {
    let b = labels.len();
    (0..b)
        .map(|i| {
            let pool: Vec<usize> = (0..b).filter(|&j| labels[j] != labels[i]).collect();
            if pool.is_empty() {
                return None;
            }
            if !hard || b < 3 {
                return Some(pool[rng.random_range(0..pool.len())]);
            }
            pool.into_iter().fold(None, |best: Option<usize>, j| match best {
                Some(k) if sim.at(i, k) >= sim.at(i, j) => Some(k),
                _ => Some(j),
            })
        })
        .collect()
}

/// Binary cross-entropy over matched (`target = 1`) and mismatched rows;
/// every logit node is `[1, 2]` with index 1 meaning "matched".
pub fn itm_loss(tape: &mut Tape, positives: &[Var], negatives: &[Var]) -> Result<Var> {
    let rows: Vec<Var> = positives.iter().chain(negatives).copied().collect();
    if rows.is_empty() {
        return Err(Error::Contract("ITM needs at least one pair".into()));
    }
    let logits = tape.concat_rows(&rows)?;
    let mut target = Vec::with_capacity(rows.len() * 2);
    for k in 0..rows.len() {
        if k < positives.len() {
            target.extend([0.0, 1.0]);
        } else {
            target.extend([1.0, 0.0]);
        }
    }
    let target = Tensor::matrix(rows.len(), 2, target)?;
    tape.cross_entropy(logits, &target)
}

/// Mean cross-entropy of `[P, V]` logits against the original ids.
pub fn mlm_loss(tape: &mut Tape, logits: Var, originals: &[usize]) -> Result<Var> {
    let (p, v) = (tape.value(logits).rows(), tape.value(logits).cols());
    if p != originals.len() {
        return Err(Error::Contract(format!(
            "{p} masked logit rows for {} original ids",
            originals.len()
        )));
    }
    let mut target = vec![0.0; p * v];
    for (r, &id) in originals.iter().enumerate() {
        if id >= v {
            return Err(Error::Contract(format!("original id {id} outside vocabulary of {v}")));
        }
        target[r * v + id] = 1.0;
    }
    tape.cross_entropy(logits, &Tensor::matrix(p, v, target)?)
}

/// `Σ wᵢ·lossᵢ` on the tape, skipping zero weights.
pub fn weighted_total(tape: &mut Tape, parts: &[(Option<Var>, f64)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(loss, w) in parts {
        let Some(loss) = loss else { continue };
        if w == 0.0 {
            continue;
        }
        let term = if w == 1.0 { loss } else { tape.scale(loss, w) };
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Contract("no active loss term".into()))
}
