use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Unit-norm tolerance for queued and contrasted features.
pub const NORM_TOL: f64 = 1e-6;

pub(crate) fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    for r in 0..t.rows() {
        let n = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > NORM_TOL {
            return Err(Error::Contract(format!("{what} row {r} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    text: Vec<f64>,
    image: Vec<f64>,
    label: usize,
}

/// Fixed-capacity FIFO of momentum text/image features with identity labels.
/// Capacity 0 keeps contrast in-batch only.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Entry>,
}

impl FeatureQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends one batch row by row, evicting the oldest entries beyond capacity.
    pub fn push(&mut self, text: &Tensor, image: &Tensor, labels: &[usize]) -> Result<()> {
        if text.shape() != image.shape() || text.rows() != labels.len() || text.cols() != self.dim {
            return Err(Error::shape("queue_push", text.shape(), image.shape()));
        }
        check_unit_rows(text, "queued text feature")?;
        check_unit_rows(image, "queued image feature")?;
        if self.capacity == 0 {
            return Ok(());
        }
        for (i, &label) in labels.iter().enumerate() {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(Entry {
                text: text.row(i).to_vec(),
                image: image.row(i).to_vec(),
                label,
            });
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    /// Queued text features `[len, dim]`, oldest first; `None` when empty.
    pub fn text(&self) -> Option<Tensor> {
        self.stack(|e| &e.text)
    }

    pub fn image(&self) -> Option<Tensor> {
        self.stack(|e| &e.image)
    }

    fn stack(&self, f: impl Fn(&Entry) -> &Vec<f64>) -> Option<Tensor> {
        if self.entries.is_empty() {
            return None;
        }
        let data = self.entries.iter().flat_map(|e| f(e).iter().copied()).collect();
        Some(Tensor::matrix(self.entries.len(), self.dim, data).expect("queue rows"))
    }

    /// Candidate labels for a batch: batch labels followed by queued labels.
    pub fn candidate_labels(&self, batch: &[usize]) -> Vec<usize> {
        batch.iter().copied().chain(self.entries.iter().map(|e| e.label)).collect()
    }
}

/// Row `i` puts equal mass on every candidate sharing `labels[i]`.
pub fn multi_hot_targets(labels: &[usize], candidate_labels: &[usize]) -> Tensor {
    let c = candidate_labels.len();
    let mut data = vec![0.0; labels.len() * c];
    for (i, &l) in labels.iter().enumerate() {
        let row = &mut data[i * c..(i + 1) * c];
        let hits: Vec<usize> = (0..c).filter(|&j| candidate_labels[j] == l).collect();
        for &j in &hits {
            row[j] = 1.0 / hits.len() as f64;
        }
    }
    Tensor::matrix(labels.len(), c, data).expect("target shape")
}
