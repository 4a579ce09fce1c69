use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::attributes::AttributeSpec;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusOptions {
    pub num_identities: usize,
    pub pairs_per_identity: usize,
    /// Expected share of filler words among sentence tokens, in `[0.3, 0.7]`.
    pub vacuous_fraction: f64,
    /// Probability that a sentence names one attribute wrongly.
    pub noise_rate: f64,
    /// Standard deviation of the Gaussian noise added to patch codes.
    pub patch_noise: f64,
    pub patch_side: usize,
    pub patch_dim: usize,
    pub seed: u64,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            num_identities: 200,
            pairs_per_identity: 3,
            vacuous_fraction: 0.5,
            noise_rate: 0.0,
            patch_noise: 0.1,
            patch_side: 4,
            patch_dim: 16,
            seed: 0,
        }
    }
}

impl CorpusOptions {
    pub fn num_patches(&self) -> usize {
        self.patch_side * self.patch_side
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub identity: usize,
    /// Value index per slot, as encoded in the patch grid.
    pub attributes: Vec<usize>,
    /// Slot whose word was corrupted in label-noise mode.
    pub noisy_slot: Option<usize>,
    pub sentence: String,
}

/// Paired sentences and patch grids with their ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: AttributeSpec,
    pub vocab: Vocabulary,
    pub records: Vec<SampleRecord>,
    /// `records.len() × M × patch_dim`, row-major.
    pub patches: Vec<f64>,
    pub num_patches: usize,
    pub patch_dim: usize,
    /// Noise-free code of every `(slot, value)`; absent for corpora read from disk.
    pub codes: Option<Vec<Vec<Vec<f64>>>>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn patch_grid(&self, i: usize) -> Tensor {
        let n = self.num_patches * self.patch_dim;
        Tensor::matrix(
            self.num_patches,
            self.patch_dim,
            self.patches[i * n..(i + 1) * n].to_vec(),
        )
        .expect("grid shape")
    }

    pub fn num_identities(&self) -> usize {
        self.records.iter().map(|r| r.identity + 1).max().unwrap_or(0)
    }

    /// Sample indices of the training identities and the held-out ones.
    /// The last `test_identities` identities are held out.
    pub fn split(&self, test_identities: usize) -> (Vec<usize>, Vec<usize>) {
        let cut = self.num_identities().saturating_sub(test_identities);
        let (test, train): (Vec<usize>, Vec<usize>) =
            (0..self.len()).partition(|&i| self.records[i].identity >= cut);
        (train, test)
    }

    /// Nearest-code decoding of sample `i`'s grid: per slot, the value whose
    /// code is closest to the mean of the slot's patches.
    pub fn decode_grid(&self, i: usize) -> Option<Vec<usize>> {
        let codes = self.codes.as_ref()?;
        let n = self.num_patches * self.patch_dim;
        let grid = &self.patches[i * n..(i + 1) * n];
        let decoded = (0..self.spec.num_slots())
            .map(|s| {
                let patches = self.spec.patches_of_slot(s, self.num_patches);
                let mut mean = vec![0.0; self.patch_dim];
                for &p in &patches {
                    for (m, v) in mean.iter_mut().zip(&grid[p * self.patch_dim..(p + 1) * self.patch_dim]) {
                        *m += v / patches.len() as f64;
                    }
                }
                let dist = |c: &Vec<f64>| c.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                (0..codes[s].len())
                    .min_by(|&a, &b| dist(&codes[s][a]).total_cmp(&dist(&codes[s][b])))
                    .expect("slot has values")
            })
            .collect();
        Some(decoded)
    }

    /// Attribute values named in sample `i`'s sentence, per slot.
    pub fn decode_sentence(&self, i: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; self.spec.num_slots()];
        for w in self.records[i].sentence.split_whitespace() {
            if let Some((s, v)) = self.spec.lookup(w) {
                out[s] = Some(v);
            }
        }
        out
    }

    /// Fraction of sentence tokens that are filler words.
    pub fn vacuous_token_fraction(&self) -> f64 {
        let (mut vac, mut total) = (0usize, 0usize);
        for r in &self.records {
            for w in r.sentence.split_whitespace() {
                total += 1;
                if self.spec.lookup(w).is_none() {
                    vac += 1;
                }
            }
        }
        vac as f64 / total as f64
    }
}

/// Builds the synthetic corpus. Deterministic in `opts.seed`; identities are
/// generated in parallel from per-identity streams.
pub fn generate_corpus(spec: &AttributeSpec, opts: &CorpusOptions, exec: Exec) -> Result<Corpus> {
    spec.validate()?;
    if !(0.3..=0.7).contains(&opts.vacuous_fraction) {
        return Err(Error::Config {
            path: "corpus.vacuous_fraction".into(),
            message: format!("{} outside [0.3, 0.7]", opts.vacuous_fraction),
        });
    }
    if !(0.0..=1.0).contains(&opts.noise_rate) {
        return Err(Error::Config {
            path: "corpus.noise_rate".into(),
            message: format!("{} outside [0, 1]", opts.noise_rate),
        });
    }
    if opts.num_identities == 0 || opts.pairs_per_identity == 0 {
        return Err(Error::Config {
            path: "corpus.num_identities".into(),
            message: "need at least one identity and one pair".into(),
        });
    }
    let available = spec.combinations();
    if opts.num_identities > available {
        return Err(Error::IdentityCollision {
            requested: opts.num_identities,
            available,
        });
    }
    let m = opts.num_patches();
    if m < spec.num_slots() {
        return Err(Error::Config {
            path: "encoder.patch_side".into(),
            message: format!("{m} patches cannot hold {} slots", spec.num_slots()),
        });
    }

    let mut root = rng::stream(opts.seed, rng::CORPUS);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let codes: Vec<Vec<Vec<f64>>> = spec
        .slots
        .iter()
        .map(|s| {
            (0..s.values.len())
                .map(|_| (0..opts.patch_dim).map(|_| std_normal.sample(&mut root)).collect())
                .collect()
        })
        .collect();
    let tuples: Vec<Vec<usize>> = sample(&mut root, available, opts.num_identities)
        .into_iter()
        .map(|i| spec.tuple(i))
        .collect();

    let per_identity = exec.try_map(opts.num_identities, |identity| {
        let mut rng = rng::substream(opts.seed, rng::CORPUS, identity as u64 + 1);
        (0..opts.pairs_per_identity)
            .map(|_| make_pair(spec, opts, &codes, &tuples[identity], &mut rng))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut records = Vec::with_capacity(opts.num_identities * opts.pairs_per_identity);
    let mut patches = Vec::with_capacity(records.capacity() * m * opts.patch_dim);
    for (identity, pairs) in per_identity.into_iter().enumerate() {
        for (sentence, noisy_slot, grid) in pairs {
            records.push(SampleRecord {
                id: records.len(),
                identity,
                attributes: tuples[identity].clone(),
                noisy_slot,
                sentence,
            });
            patches.extend(grid);
        }
    }
    let vocab = Vocabulary::new(&spec.meaningful_words(), &spec.fillers)?;
    Ok(Corpus {
        spec: spec.clone(),
        vocab,
        records,
        patches,
        num_patches: m,
        patch_dim: opts.patch_dim,
        codes: Some(codes),
    })
}

type Pair = (String, Option<usize>, Vec<f64>);

fn make_pair(
    spec: &AttributeSpec,
    opts: &CorpusOptions,
    codes: &[Vec<Vec<f64>>],
    tuple: &[usize],
    rng: &mut Rng,
) -> Result<Pair> {
    let slots = spec.num_slots();
    let mut words: Vec<&str> = tuple
        .iter()
        .zip(&spec.slots)
        .map(|(&v, s)| {
            let syn = &s.values[v];
            syn[rng.random_range(0..syn.len())].as_str()
        })
        .collect();

    let noisy_slot = if opts.noise_rate > 0.0 && rng.random_bool(opts.noise_rate) {
        let s = rng.random_range(0..slots);
        let n_values = spec.slots[s].values.len();
        let wrong = (tuple[s] + 1 + rng.random_range(0..n_values - 1)) % n_values;
        let syn = &spec.slots[s].values[wrong];
        words[s] = syn[rng.random_range(0..syn.len())].as_str();
        Some(s)
    } else {
        None
    };

    // filler count with mean slots·f/(1-f), so fillers make up fraction f of tokens
    let f = opts.vacuous_fraction;
    let mean = slots as f64 * f / (1.0 - f);
    let base = mean.floor() as i64 + i64::from(rng.random_bool(mean.fract()));
    let n_fill = (base + rng.random_range(-1..=1)).max(0) as usize;
    let mut gaps = vec![Vec::new(); slots + 1];
    for _ in 0..n_fill {
        let w = spec.fillers[rng.random_range(0..spec.fillers.len())].as_str();
        gaps[rng.random_range(0..=slots)].push(w);
    }
    let mut sentence: Vec<&str> = Vec::with_capacity(slots + n_fill);
    for (s, word) in words.iter().enumerate() {
        sentence.extend(&gaps[s]);
        sentence.push(word);
    }
    sentence.extend(&gaps[slots]);

    let m = opts.num_patches();
    let noise = Normal::new(0.0, opts.patch_noise.max(0.0))
        .map_err(|e| Error::Parameter(format!("patch noise: {e}")))?;
    let mut grid = Vec::with_capacity(m * opts.patch_dim);
    for p in 0..m {
        let s = spec.slot_of_patch(p, m);
        for &c in &codes[s][tuple[s]] {
            grid.push(c + noise.sample(rng));
        }
    }
    Ok((sentence.join(" "), noisy_slot, grid))
}
