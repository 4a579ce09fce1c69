//! The training loop: masking, enrichment, the four losses, AdamW, the
//! momentum update and the feature queue, one batch at a time.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::agm::{self, apply_mask, mask_records, picked_mask, random_mask, MaskRecord, MaskedText};
use crate::config::{MaskStrategy, RunConfig};
use crate::corpus::{ratio_vacuous, Corpus, Vocabulary, WordClass};
use crate::encoders::{Checkpoint, Graph, Model, ParamStore};
use crate::error::{Error, Result};
use crate::objectives::{
    itc_distill_loss, itc_loss, itc_soft_targets, itm_loss, mlm_loss, select_negatives, weighted_total, AdamW,
    FeatureQueue, LossReport, ModelPair,
};
use crate::rng::{self, Rng};
use crate::tem::{enrich_text, Persistence, ReplacementRecord};
use crate::tensor::{Tensor, Var};

pub const CHECKPOINT_FORMAT: &str = "aga-checkpoint";
pub const TRAIN_LOG_HEADER: &str = "step,itc,itc_distill,itm,mlm,total,mask_rate,ratio_v,tem_accept_rate";

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub losses: LossReport,
    /// Masked tokens over content tokens in the batch.
    pub mask_rate: Option<f64>,
    pub ratio_v: Option<f64>,
    pub tem_accept_rate: Option<f64>,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            l.itc,
            l.itc_distill,
            l.itm,
            l.mlm,
            l.total,
            opt_cell(self.mask_rate),
            opt_cell(self.ratio_v),
            opt_cell(self.tem_accept_rate)
        )
    }
}

pub fn write_train_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{TRAIN_LOG_HEADER}")?;
    for row in log {
        writeln!(out, "{}", row.csv_row())?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    version: u32,
    step: u64,
    config: RunConfig,
}

/// Everything a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<StepLog>,
    /// Mask decisions of the final epoch, one record per content token.
    pub final_masks: Vec<MaskRecord>,
    /// Enrichment proposals of the final epoch.
    pub final_replacements: Vec<ReplacementRecord>,
}

impl TrainOutcome {
    /// Vacuous share of the final epoch's masked tokens.
    pub fn ratio_v(&self, vocab: &Vocabulary) -> Option<f64> {
        ratio_vacuous(self.final_masks.iter().filter(|r| r.masked).map(|r| r.token_id), vocab)
    }
}

/// Random and discrete choices of one step, recorded so the same loss can
/// be re-evaluated at other parameter values.
#[derive(Debug, Clone, Default)]
pub struct StepDecisions {
    recorded: bool,
    samples: Vec<SampleDecision>,
    negatives: Vec<Option<usize>>,
    soft_targets: Option<(Tensor, Tensor)>,
    momentum_features: Option<(Tensor, Tensor)>,
}

#[derive(Debug, Clone, Default)]
struct SampleDecision {
    mask: Option<(Vec<f64>, MaskedText)>,
    enriched: Option<crate::tem::EnrichedText>,
}

#[derive(Debug, Default)]
pub struct StepStats {
    pub content: usize,
    pub masked: usize,
    pub vacuous: usize,
    pub enriched: usize,
    pub accepted: usize,
    pub masks: Vec<MaskRecord>,
    pub replacements: Vec<ReplacementRecord>,
    rewrites: Vec<(usize, Vec<usize>)>,
}

/// The loss graph of one batch.
pub struct BatchLoss<'p> {
    pub graph: Graph<'p>,
    pub total: Var,
    pub losses: LossReport,
    pub stats: StepStats,
}

struct Streams {
    mask: Rng,
    tem: Rng,
    shuffle: Rng,
    negatives: Rng,
}

pub struct Trainer<'c> {
    pub config: RunConfig,
    pub model: Model,
    pub pair: ModelPair,
    corpus: &'c Corpus,
    opt: AdamW,
    queue: FeatureQueue,
    /// Encoded sentence per corpus record; rewritten in persistent enrichment mode.
    texts: Vec<Vec<usize>>,
    train: Vec<usize>,
    streams: Streams,
    step: u64,
    total_steps: u64,
}

/// Per-sample tape nodes kept for the batch-level losses.
struct SampleNodes {
    text: crate::encoders::TextEmbedding,
    image: crate::encoders::ImageEmbedding,
    text_feature: Var,
    image_feature: Var,
    ids_used: Vec<usize>,
}

fn encode_corpus_texts(corpus: &Corpus, max_len: usize) -> Result<Vec<Vec<usize>>> {
    corpus
        .records
        .iter()
        .map(|r| {
            let ids = corpus.vocab.encode(&r.sentence)?;
            if ids.len() > max_len {
                return Err(Error::Length { len: ids.len(), max: max_len });
            }
            Ok(ids)
        })
        .collect()
}

/// Builds the model layout for `config` against `corpus` and checks that the
/// two agree on vocabulary and patch geometry.
pub fn build_model(config: &RunConfig, corpus: &Corpus) -> Result<(Model, ParamStore)> {
    let mut enc = config.encoder.clone();
    enc.vocab_size = corpus.vocab.len();
    if corpus.num_patches != enc.num_patches() || corpus.patch_dim != enc.patch_dim {
        return Err(Error::Config {
            path: "encoder.patch_side".into(),
            message: format!(
                "corpus grids are {}×{}, encoder expects {}×{}",
                corpus.num_patches,
                corpus.patch_dim,
                enc.num_patches(),
                enc.patch_dim
            ),
        });
    }
    let mut init = rng::stream(config.train.seed, rng::INIT);
    Model::init(&enc, &mut init)
}

impl<'c> Trainer<'c> {
    pub fn new(config: &RunConfig, corpus: &'c Corpus) -> Result<Self> {
        config.validate()?;
        let (model, params) = build_model(config, corpus)?;
        let texts = encode_corpus_texts(corpus, model.config.max_text_len)?;
        let (train, _) = corpus.split(config.eval.test_identities);
        if train.is_empty() {
            return Err(Error::Config {
                path: "eval.test_identities".into(),
                message: "no training identities left".into(),
            });
        }
        let seed = config.train.seed;
        let batches = train.len().div_ceil(config.train.batch_size) as u64;
        Ok(Self {
            opt: AdamW::new(&params, config.train.lr, config.train.weight_decay),
            queue: FeatureQueue::new(config.objectives.queue_capacity, model.config.embed_dim),
            pair: ModelPair::new(params, config.objectives.m_ema),
            model,
            corpus,
            texts,
            train,
            streams: Streams {
                mask: rng::stream(seed, rng::MASK),
                tem: rng::stream(seed, rng::TEM),
                shuffle: rng::stream(seed, rng::SHUFFLE),
                negatives: rng::stream(seed, rng::NEGATIVES),
            },
            step: 0,
            total_steps: batches * config.train.epochs as u64,
            config: config.clone(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    /// Current encoded sentence of corpus record `i`.
    pub fn text(&self, i: usize) -> &[usize] {
        &self.texts[i]
    }

    /// Linear warm-up, then cosine decay to a tenth of the base rate.
    fn learning_rate(&self) -> f64 {
        let base = self.config.train.lr;
        let warm = self.config.train.warmup_steps as u64;
        let s = self.step + 1;
        if s <= warm {
            return base * s as f64 / warm as f64;
        }
        let span = self.total_steps.saturating_sub(warm).max(1) as f64;
        let t = ((s - warm) as f64 / span).min(1.0);
        base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }

    fn mask_text(&mut self, ids: &[usize], trace: &crate::encoders::AttentionTrace) -> Result<(Vec<f64>, MaskedText)> {
        let cfg = &self.config.agm;
        let vocab = &self.corpus.vocab;
        let content = vocab.content_mask(ids);
        let rng = &mut self.streams.mask;
        match self.config.train.strategy {
            MaskStrategy::Agm => {
                let (abar, p) = cfg.probabilities(trace, &content)?;
                let m = apply_mask(ids, &p, &content, cfg.replace, vocab.word_ids(), rng)?;
                Ok((abar, m))
            }
            MaskStrategy::Random => {
                let abar = agm::aggregate_class_attention(trace, cfg.beta)?;
                let m = random_mask(ids, &content, cfg.baseline_rate, cfg.replace, vocab.word_ids(), rng)?;
                Ok((abar, m))
            }
            MaskStrategy::Picked => {
                let abar = agm::aggregate_class_attention(trace, cfg.beta)?;
                let m = picked_mask(ids, &content, vocab, cfg.baseline_rate, cfg.replace, rng)?;
                Ok((abar, m))
            }
            MaskStrategy::Baseline => Err(Error::Contract("the baseline strategy does not mask".into())),
        }
    }

    /// Builds the full loss graph for `batch` over `params`.
    ///
    /// Random and discrete choices (masks, enrichment, ITM negatives) and the
    /// momentum soft targets are drawn on the first call and stored in
    /// `decisions`; when `decisions` is already filled they are replayed, so
    /// the loss becomes a smooth function of `params` alone.
    pub fn loss_graph<'p>(
        &mut self,
        params: &'p ParamStore,
        batch: &[usize],
        decisions: &mut StepDecisions,
    ) -> Result<BatchLoss<'p>> {
        let replay = decisions.recorded;
        let weights = self.config.objectives.weights;
        let mlm_on = self.config.train.strategy != MaskStrategy::Baseline && weights.mlm > 0.0;
        let tem_on = mlm_on && self.config.tem.p_tem > 0.0;
        let tau = self.config.objectives.tau_itc;
        let corpus = self.corpus;
        let vocab = &corpus.vocab;
        let labels: Vec<usize> = batch.iter().map(|&i| corpus.records[i].identity).collect();
        if replay && decisions.samples.len() != batch.len() {
            return Err(Error::Contract("recorded decisions belong to another batch".into()));
        }

        let mut g = Graph::new(params, true);
        let mut nodes = Vec::with_capacity(batch.len());
        let mut mlm_rows = Vec::new();
        let mut originals = Vec::new();
        let mut stats = StepStats::default();

        for (k, &i) in batch.iter().enumerate() {
            let ids = self.texts[i].clone();
            let image = self.model.encode_image(&mut g, &corpus.patch_grid(i))?;
            let (text, trace) = self.model.encode_text(&mut g, &ids, None)?;
            if !replay {
                decisions.samples.push(SampleDecision::default());
            }
            let mut text_used = text;
            let mut ids_used = ids.clone();
            if mlm_on {
                if !replay {
                    let (abar, masked) = self.mask_text(&ids, &trace)?;
                    decisions.samples[k].mask = Some((abar, masked));
                }
                let (abar, masked) = decisions.samples[k]
                    .mask
                    .as_ref()
                    .ok_or_else(|| Error::Contract("missing recorded mask".into()))?;
                stats.content += ids.iter().filter(|&&t| !vocab.is_special(t)).count();
                stats.masked += masked.positions.len();
                stats.vacuous += masked
                    .originals
                    .iter()
                    .filter(|&&t| vocab.class(t) == WordClass::Vacuous)
                    .count();
                stats.masks.extend(mask_records(i, &ids, abar, masked, vocab));
                let (masked_text, _) = self.model.encode_text(&mut g, &masked.ids, None)?;
                let (hidden, _) = self.model.cross_encode(&mut g, &masked_text, &image)?;
                let logits = self.model.mlm_head(&mut g, &hidden, &masked.positions)?;
                mlm_rows.push(logits);
                originals.extend_from_slice(&masked.originals);
                if tem_on {
                    if !replay {
                        let lv = g.value(logits).clone();
                        let e = enrich_text(&ids, masked, &lv, &self.config.tem, &mut self.streams.tem)?;
                        decisions.samples[k].enriched = Some(e);
                    }
                    let e = decisions.samples[k]
                        .enriched
                        .as_ref()
                        .ok_or_else(|| Error::Contract("missing recorded enrichment".into()))?;
                    stats.enriched += 1;
                    for (n, &pos) in e.positions.iter().enumerate() {
                        stats.replacements.push(ReplacementRecord {
                            sentence_id: i,
                            position: pos,
                            original_word: vocab.word(e.pairs[n].0).to_string(),
                            replacement_word: vocab.word(e.pairs[n].1).to_string(),
                            logit_rank: e.ranks[n],
                            accepted: e.accepted,
                        });
                    }
                    if e.accepted {
                        stats.accepted += 1;
                        if !e.positions.is_empty() {
                            text_used = self.model.encode_text(&mut g, &e.ids, None)?.0;
                            ids_used = e.ids.clone();
                            if self.config.tem.persistence == Persistence::Persistent {
                                stats.rewrites.push((i, e.ids.clone()));
                            }
                        }
                    }
                }
            }
            let text_feature = self.model.text_feature(&mut g, &text_used)?;
            let image_feature = self.model.image_feature(&mut g, &image)?;
            nodes.push(SampleNodes {
                text: text_used,
                image,
                text_feature,
                image_feature,
                ids_used,
            });
        }

        let tf_rows: Vec<Var> = nodes.iter().map(|n| n.text_feature).collect();
        let if_rows: Vec<Var> = nodes.iter().map(|n| n.image_feature).collect();
        let tf = g.tape.concat_rows(&tf_rows)?;
        let imf = g.tape.concat_rows(&if_rows)?;
        let itc = itc_loss(&mut g.tape, tf, imf, &labels, &self.queue, tau)?;

        if !replay {
            let (mt, mi) = self.momentum_features(batch, &nodes)?;
            let (q_t2i, q_i2t) = itc_soft_targets(&mt, &mi, &self.queue, tau)?;
            decisions.momentum_features = Some((mt, mi));
            decisions.soft_targets = Some((q_t2i, q_i2t));
        }
        let (q_t2i, q_i2t) = decisions
            .soft_targets
            .as_ref()
            .ok_or_else(|| Error::Contract("missing recorded soft targets".into()))?;
        let distill = itc_distill_loss(&mut g.tape, &itc, q_t2i, q_i2t)?;

        let itm = if weights.itm > 0.0 {
            if !replay {
                let sim = g.value(tf).matmul_nt(g.value(imf))?;
                decisions.negatives = select_negatives(
                    &sim,
                    &labels,
                    self.config.objectives.hard_negatives,
                    &mut self.streams.negatives,
                );
            }
            let mut pos = Vec::with_capacity(nodes.len());
            let mut neg = Vec::with_capacity(nodes.len());
            for (k, n) in nodes.iter().enumerate() {
                let (h, _) = self.model.cross_encode(&mut g, &n.text, &n.image)?;
                pos.push(self.model.itm_logits(&mut g, &h)?);
                if let Some(j) = decisions.negatives[k] {
                    let (h, _) = self.model.cross_encode(&mut g, &n.text, &nodes[j].image)?;
                    neg.push(self.model.itm_logits(&mut g, &h)?);
                }
            }
            Some(itm_loss(&mut g.tape, &pos, &neg)?)
        } else {
            None
        };

        let mlm = if mlm_on {
            let logits = g.tape.concat_rows(&mlm_rows)?;
            Some(mlm_loss(&mut g.tape, logits, &originals)?)
        } else {
            None
        };

        let total = weighted_total(
            &mut g.tape,
            &[
                (Some(itc.loss), weights.itc),
                (Some(distill), weights.itc_distill),
                (itm, weights.itm),
                (mlm, weights.mlm),
            ],
        )?;
        let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        let losses = LossReport::new(value(Some(itc.loss)), value(Some(distill)), value(itm), value(mlm), &weights);
        decisions.recorded = true;
        Ok(BatchLoss {
            graph: g,
            total,
            losses,
            stats,
        })
    }

    /// One optimizer step on `batch` (corpus record indices).
    pub fn step(
        &mut self,
        batch: &[usize],
        masks_out: Option<&mut Vec<MaskRecord>>,
        replacements_out: Option<&mut Vec<ReplacementRecord>>,
    ) -> Result<StepLog> {
        let labels: Vec<usize> = batch.iter().map(|&i| self.corpus.records[i].identity).collect();
        let mut decisions = StepDecisions::default();
        let online = std::mem::take(&mut self.pair.online);
        let result = (|| {
            let out = self.loss_graph(&online, batch, &mut decisions)?;
            if !out.losses.is_finite() || !out.graph.value(out.total).item().is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at step {}: {:?}",
                    self.step + 1,
                    out.losses
                )));
            }
            let grads = out.graph.tape.backward(out.total)?;
            Ok((out.graph.param_grads(&grads), out.losses, out.stats))
        })();
        self.pair.online = online;
        let (grads, losses, stats) = result?;

        self.opt.lr = self.learning_rate();
        self.opt.step(&mut self.pair.online, &grads)?;
        self.pair.momentum_update()?;
        let (mt, mi) = decisions.momentum_features.take().expect("recorded with the loss");
        self.queue.push(&mt, &mi, &labels)?;
        self.step += 1;

        for (i, ids) in stats.rewrites {
            self.texts[i] = ids;
        }
        if let Some(out) = masks_out {
            out.extend(stats.masks);
        }
        if let Some(out) = replacements_out {
            out.extend(stats.replacements);
        }
        Ok(StepLog {
            step: self.step,
            losses,
            mask_rate: (stats.content > 0).then(|| stats.masked as f64 / stats.content as f64),
            ratio_v: (stats.masked > 0).then(|| stats.vacuous as f64 / stats.masked as f64),
            tem_accept_rate: (stats.enriched > 0).then(|| stats.accepted as f64 / stats.enriched as f64),
        })
    }

    /// Momentum-model features of the texts actually trained on and their images.
    fn momentum_features(&self, batch: &[usize], nodes: &[SampleNodes]) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new(&self.pair.momentum, false);
        let mut t_rows = Vec::with_capacity(batch.len());
        let mut i_rows = Vec::with_capacity(batch.len());
        for (&i, n) in batch.iter().zip(nodes) {
            let image = self.model.encode_image(&mut g, &self.corpus.patch_grid(i))?;
            let (text, _) = self.model.encode_text(&mut g, &n.ids_used, None)?;
            let tf = self.model.text_feature(&mut g, &text)?;
            let imf = self.model.image_feature(&mut g, &image)?;
            t_rows.push(g.value(tf).data().to_vec());
            i_rows.push(g.value(imf).data().to_vec());
        }
        Ok((Tensor::from_rows(&t_rows)?, Tensor::from_rows(&i_rows)?))
    }

    /// Runs one epoch over the shuffled training split.
    pub fn epoch(
        &mut self,
        log: &mut Vec<StepLog>,
        mut masks: Option<&mut Vec<MaskRecord>>,
        mut replacements: Option<&mut Vec<ReplacementRecord>>,
    ) -> Result<()> {
        let mut order = self.train.clone();
        order.shuffle(&mut self.streams.shuffle);
        for batch in order.chunks(self.config.train.batch_size) {
            let row = self.step(batch, masks.as_deref_mut(), replacements.as_deref_mut())?;
            log::debug!("step {} total {:.4}", row.step, row.losses.total);
            log.push(row);
        }
        Ok(())
    }

    /// Trains for the configured number of epochs.
    pub fn fit(&mut self) -> Result<TrainOutcome> {
        let epochs = self.config.train.epochs;
        let mut log = Vec::new();
        let mut final_masks = Vec::new();
        let mut final_replacements = Vec::new();
        for e in 0..epochs {
            let last = e + 1 == epochs;
            self.epoch(
                &mut log,
                last.then_some(&mut final_masks),
                last.then_some(&mut final_replacements),
            )?;
            if let Some(row) = log.last() {
                log::info!("epoch {}/{} total loss {:.4}", e + 1, epochs, row.losses.total);
            }
        }
        Ok(TrainOutcome {
            log,
            final_masks,
            final_replacements,
        })
    }

    /// Masks every training sentence `passes` more times under the current
    /// weights, without updating them. The ablation harness pools these draws
    /// with the final epoch's records so Ratio_v rests on enough tokens.
    pub fn mask_dump(&mut self, passes: usize) -> Result<Vec<MaskRecord>> {
        if passes == 0 || self.config.train.strategy == MaskStrategy::Baseline {
            return Ok(Vec::new());
        }
        let params = self.pair.online.clone();
        let mut g = Graph::new(&params, false);
        let mut traces = Vec::with_capacity(self.train.len());
        for &i in &self.train {
            let (_, trace) = self.model.encode_text(&mut g, &self.texts[i], None)?;
            traces.push(trace);
        }
        let mut out = Vec::new();
        for _ in 0..passes {
            for (k, &i) in self.train.clone().iter().enumerate() {
                let ids = self.texts[i].clone();
                let (abar, masked) = self.mask_text(&ids, &traces[k])?;
                out.extend(mask_records(i, &ids, &abar, &masked, &self.corpus.vocab));
            }
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            step: self.step,
            config: self.config.clone(),
        };
        checkpoint_from(&meta, &self.pair)
    }
}

fn checkpoint_from(meta: &CheckpointMeta, pair: &ModelPair) -> Checkpoint {
    let mut tensors = Vec::with_capacity(pair.online.len() * 2);
    for (prefix, store) in [("online", &pair.online), ("momentum", &pair.momentum)] {
        tensors.extend(store.iter().map(|(n, t)| (format!("{prefix}/{n}"), t.clone())));
    }
    Checkpoint {
        meta: serde_json::to_string(meta).expect("meta serializes"),
        tensors,
    }
}

/// A checkpoint turned back into a usable model.
pub struct LoadedModel {
    pub config: RunConfig,
    pub model: Model,
    pub pair: ModelPair,
    pub step: u64,
}

fn read_meta(ck: &Checkpoint) -> Result<CheckpointMeta> {
    let meta: CheckpointMeta = serde_json::from_str(&ck.meta).map_err(|e| Error::format("checkpoint", e.to_string()))?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(Error::format("checkpoint", format!("unknown format {:?}", meta.format)));
    }
    Ok(meta)
}

/// The run config a checkpoint was trained with.
pub fn checkpoint_config(ck: &Checkpoint) -> Result<RunConfig> {
    Ok(read_meta(ck)?.config)
}

pub fn load_checkpoint(path: &Path, corpus: &Corpus) -> Result<LoadedModel> {
    let ck = Checkpoint::load(path)?;
    let meta = read_meta(&ck)?;
    let (model, mut online) = build_model(&meta.config, corpus)?;
    let mut momentum = online.clone();
    let split = |prefix: &str| -> Vec<(String, Tensor)> {
        ck.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    };
    online.load_from(&split("online/"))?;
    momentum.load_from(&split("momentum/"))?;
    Ok(LoadedModel {
        pair: ModelPair {
            online,
            momentum,
            m_ema: meta.config.objectives.m_ema,
        },
        config: meta.config,
        model,
        step: meta.step,
    })
}

/// Writes a freshly initialized (untrained) model as a checkpoint.
pub fn init_checkpoint(config: &RunConfig, corpus: &Corpus) -> Result<Checkpoint> {
    let (_, params) = build_model(config, corpus)?;
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        step: 0,
        config: config.clone(),
    };
    Ok(checkpoint_from(&meta, &ModelPair::new(params, config.objectives.m_ema)))
}
