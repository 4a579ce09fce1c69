//! Text → image retrieval metrics, the masking-strategy ablation harness and
//! cross-attention dumps.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agm::{apply_mask, mask_records, MaskRecord};
use crate::config::{MaskStrategy, RunConfig};
use crate::corpus::Corpus;
use crate::encoders::{Graph, Model, ParamStore};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::rng::{self, Rng};
use crate::tensor::{softmax_slice, Tensor};
use crate::train::Trainer;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub map: f64,
    /// Queries that had at least one gallery match.
    pub queries: usize,
    /// Queries dropped because their identity is absent from the gallery.
    pub excluded: usize,
}

/// Gallery indices of one similarity row, best first; equal scores keep
/// gallery order.
pub fn rank_gallery(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order
}

/// `(first-match rank, average precision)` of one query, `None` without matches.
fn query_stats(row: &[f64], label: usize, gallery_labels: &[usize]) -> Option<(usize, f64)> {
    let order = rank_gallery(row);
    let mut first = None;
    let (mut hits, mut ap) = (0usize, 0.0);
    for (rank, &j) in order.iter().enumerate() {
        if gallery_labels[j] == label {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
            first.get_or_insert(rank);
        }
    }
    first.map(|r| (r, ap / hits as f64))
}

/// CMC rank-1/5/10 and mAP of a `[queries, gallery]` similarity matrix.
pub fn cmc_map(similarity: &Tensor, query_labels: &[usize], gallery_labels: &[usize], exec: Exec) -> Result<Metrics> {
    let (q, g) = (similarity.rows(), similarity.cols());
    if similarity.shape().len() != 2 || q != query_labels.len() || g != gallery_labels.len() {
        return Err(Error::shape("cmc_map", similarity.shape(), &[query_labels.len(), gallery_labels.len()]));
    }
    let stats = exec.map(q, |i| query_stats(similarity.row(i), query_labels[i], gallery_labels));
    let found: Vec<(usize, f64)> = stats.iter().flatten().copied().collect();
    let n = found.len();
    if n == 0 {
        return Ok(Metrics {
            excluded: q,
            ..Default::default()
        });
    }
    let cmc = |k: usize| found.iter().filter(|(r, _)| *r < k).count() as f64 / n as f64;
    Ok(Metrics {
        r1: cmc(1),
        r5: cmc(5),
        r10: cmc(10),
        map: found.iter().map(|(_, ap)| ap).sum::<f64>() / n as f64,
        queries: n,
        excluded: q - n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub similarity: Tensor,
    pub query_labels: Vec<usize>,
    pub gallery_labels: Vec<usize>,
    pub query_ids: Vec<usize>,
    pub gallery_ids: Vec<usize>,
    pub metrics: Metrics,
}

/// Query sentences and one gallery image per held-out identity (its
/// lowest-numbered sample).
pub fn test_split(corpus: &Corpus, test_identities: usize) -> (Vec<usize>, Vec<usize>) {
    let (_, queries) = corpus.split(test_identities);
    let mut gallery: Vec<usize> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for &i in &queries {
        if seen.insert(corpus.records[i].identity) {
            gallery.push(i);
        }
    }
    (queries, gallery)
}

fn feature_rows(rows: Vec<Vec<f64>>) -> Result<Tensor> {
    Tensor::from_rows(&rows)
}

/// Contrastive text features of corpus sentences `ids`.
pub fn text_features(model: &Model, params: &ParamStore, corpus: &Corpus, ids: &[usize], exec: Exec) -> Result<Tensor> {
    let rows = exec.try_map(ids.len(), |k| {
        let tokens = corpus.vocab.encode(&corpus.records[ids[k]].sentence)?;
        let mut g = Graph::new(params, false);
        let (text, _) = model.encode_text(&mut g, &tokens, None)?;
        let f = model.text_feature(&mut g, &text)?;
        Ok::<_, Error>(g.value(f).data().to_vec())
    })?;
    feature_rows(rows)
}

pub fn image_features(model: &Model, params: &ParamStore, corpus: &Corpus, ids: &[usize], exec: Exec) -> Result<Tensor> {
    let rows = exec.try_map(ids.len(), |k| {
        let mut g = Graph::new(params, false);
        let image = model.encode_image(&mut g, &corpus.patch_grid(ids[k]))?;
        let f = model.image_feature(&mut g, &image)?;
        Ok::<_, Error>(g.value(f).data().to_vec())
    })?;
    feature_rows(rows)
}

/// Probability of "matched" from the cross encoder for one pair.
pub fn match_probability(model: &Model, params: &ParamStore, corpus: &Corpus, text: usize, image: usize) -> Result<f64> {
    let tokens = corpus.vocab.encode(&corpus.records[text].sentence)?;
    let mut g = Graph::new(params, false);
    let (t, _) = model.encode_text(&mut g, &tokens, None)?;
    let i = model.encode_image(&mut g, &corpus.patch_grid(image))?;
    let (h, _) = model.cross_encode(&mut g, &t, &i)?;
    let logits = model.itm_logits(&mut g, &h)?;
    Ok(softmax_slice(g.value(logits).data(), 1.0)[1])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RerankOptions {
    pub top_k: usize,
}

/// Text → image retrieval over the held-out identities using contrastive
/// features; optionally re-ranks each query's top `k` by the matching head.
pub fn evaluate_retrieval(
    model: &Model,
    params: &ParamStore,
    corpus: &Corpus,
    test_identities: usize,
    rerank: Option<RerankOptions>,
    exec: Exec,
) -> Result<RetrievalResult> {
    let (queries, gallery) = test_split(corpus, test_identities);
    let t = text_features(model, params, corpus, &queries, exec)?;
    let v = image_features(model, params, corpus, &gallery, exec)?;
    let mut similarity = t.matmul_nt(&v)?;
    if let Some(opts) = rerank {
        let g = gallery.len();
        let rows = exec.try_map(queries.len(), |qi| {
            let mut row = similarity.row(qi).to_vec();
            for &j in rank_gallery(&row.clone()).iter().take(opts.top_k) {
                // cosine scores are ≤ 1, so the re-ranked block stays on top
                row[j] = 2.0 + match_probability(model, params, corpus, queries[qi], gallery[j])?;
            }
            Ok::<_, Error>(row)
        })?;
        similarity = Tensor::matrix(queries.len(), g, rows.concat())?;
    }
    let query_labels: Vec<usize> = queries.iter().map(|&i| corpus.records[i].identity).collect();
    let gallery_labels: Vec<usize> = gallery.iter().map(|&i| corpus.records[i].identity).collect();
    let metrics = cmc_map(&similarity, &query_labels, &gallery_labels, exec)?;
    Ok(RetrievalResult {
        similarity,
        query_labels,
        gallery_labels,
        query_ids: queries,
        gallery_ids: gallery,
        metrics,
    })
}

pub fn write_metrics(path: &Path, m: &Metrics) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "metric,value")?;
    writeln!(out, "r1,{}", m.r1)?;
    writeln!(out, "r5,{}", m.r5)?;
    writeln!(out, "r10,{}", m.r10)?;
    writeln!(out, "map,{}", m.map)?;
    writeln!(out, "queries,{}", m.queries)?;
    writeln!(out, "excluded,{}", m.excluded)?;
    out.flush()?;
    Ok(())
}

/// One training run of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub strategy: MaskStrategy,
    pub seed: u64,
    pub ratio_v: Option<f64>,
    pub metrics: Option<Metrics>,
    /// The first attempt diverged and the run was repeated at half the learning rate.
    pub retried: bool,
    /// Both attempts diverged.
    pub failed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample mean and (n − 1) standard deviation; `None` for an empty slice.
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some(Self { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: MaskStrategy,
    pub seeds: usize,
    pub ratio_v: Option<MeanStd>,
    pub r1: Option<MeanStd>,
    pub r5: Option<MeanStd>,
    pub r10: Option<MeanStd>,
    pub map: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
    pub summary: Vec<StrategySummary>,
}

impl AblationReport {
    pub fn summary_for(&self, s: MaskStrategy) -> Option<&StrategySummary> {
        self.summary.iter().find(|r| r.strategy == s)
    }

    pub fn cells_for(&self, s: MaskStrategy) -> impl Iterator<Item = &AblationCell> {
        self.cells.iter().filter(move |c| c.strategy == s)
    }

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
        let mut s = String::from("strategy,seed,ratio_v,r1,r5,r10,map,retried,failed\n");
        for c in &self.cells {
            let m = c.metrics;
            s += &format!(
                "{},{},{},{},{},{},{},{},{}\n",
                c.strategy.as_str(),
                c.seed,
                f(c.ratio_v),
                f(m.map(|m| m.r1)),
                f(m.map(|m| m.r5)),
                f(m.map(|m| m.r10)),
                f(m.map(|m| m.map)),
                c.retried,
                c.failed
            );
        }
        for r in &self.summary {
            for (label, pick) in [("mean", true), ("std", false)] {
                let g = |v: Option<MeanStd>| f(v.map(|x| if pick { x.mean } else { x.std }));
                s += &format!(
                    "{},{},{},{},{},{},{},,\n",
                    r.strategy.as_str(),
                    label,
                    g(r.ratio_v),
                    g(r.r1),
                    g(r.r5),
                    g(r.r10),
                    g(r.map)
                );
            }
        }
        s
    }
}

/// Trains one cell, retrying once at half the learning rate on divergence.
fn run_cell(config: &RunConfig, corpus: &Corpus, strategy: MaskStrategy, seed: u64, exec: Exec) -> Result<AblationCell> {
    let mut cfg = config.clone();
    cfg.train.strategy = strategy;
    cfg.train.seed = seed;
    let mut retried = false;
    loop {
        let mut trainer = Trainer::new(&cfg, corpus)?;
        match trainer.fit() {
            Ok(mut outcome) => {
                let extra = trainer.mask_dump(cfg.eval.mask_dump_passes)?;
                outcome.final_masks.extend(extra);
                let r = evaluate_retrieval(
                    &trainer.model,
                    &trainer.pair.online,
                    corpus,
                    cfg.eval.test_identities,
                    None,
                    exec,
                )?;
                log::info!("{} seed {seed}: R@1 {:.4}", strategy.as_str(), r.metrics.r1);
                return Ok(AblationCell {
                    strategy,
                    seed,
                    ratio_v: outcome.ratio_v(&corpus.vocab),
                    metrics: Some(r.metrics),
                    retried,
                    failed: false,
                });
            }
            Err(Error::Diverged(msg)) if !retried => {
                log::warn!("{} seed {seed} diverged ({msg}); retrying at half learning rate", strategy.as_str());
                cfg.train.lr /= 2.0;
                retried = true;
            }
            Err(Error::Diverged(msg)) => {
                log::warn!("{} seed {seed} diverged again: {msg}", strategy.as_str());
                return Ok(AblationCell {
                    strategy,
                    seed,
                    ratio_v: None,
                    metrics: None,
                    retried,
                    failed: true,
                });
            }
            Err(e) => return Err(e),
        }
    }
}

/// Trains every `(strategy, seed)` cell on the shared corpus with otherwise
/// identical hyper-parameters, then evaluates retrieval on the held-out
/// identities. Seeds are `config.train.seed + k` for `k < eval.ablation_seeds`.
/// Cells run in parallel under [`Exec::Parallel`].
pub fn run_strategy_ablation(config: &RunConfig, corpus: &Corpus, exec: Exec) -> Result<AblationReport> {
    config.validate()?;
    let strategies = config.eval.ablation_strategies.clone();
    let seeds: Vec<u64> = (0..config.eval.ablation_seeds as u64).map(|k| config.train.seed + k).collect();
    let grid: Vec<(MaskStrategy, u64)> = strategies
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    // cells parallelize; each cell's evaluation then runs sequentially
    let inner = if exec.is_parallel() { Exec::Sequential } else { exec };
    let cells = exec.try_map(grid.len(), |k| run_cell(config, corpus, grid[k].0, grid[k].1, inner))?;
    let summary = strategies
        .iter()
        .map(|&s| {
            let ok: Vec<&AblationCell> = cells.iter().filter(|c| c.strategy == s && !c.failed).collect();
            let col = |f: &dyn Fn(&AblationCell) -> Option<f64>| MeanStd::of(&ok.iter().filter_map(|c| f(c)).collect::<Vec<_>>());
            StrategySummary {
                strategy: s,
                seeds: ok.len(),
                ratio_v: col(&|c| c.ratio_v),
                r1: col(&|c| c.metrics.map(|m| m.r1)),
                r5: col(&|c| c.metrics.map(|m| m.r5)),
                r10: col(&|c| c.metrics.map(|m| m.r10)),
                map: col(&|c| c.metrics.map(|m| m.map)),
            }
        })
        .collect();
    Ok(AblationReport { cells, summary })
}

/// Cross-attention of one masked token over the image tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub sentence_id: usize,
    pub position: usize,
    pub token: String,
    pub abar: f64,
    pub p: f64,
    /// Final cross layer, averaged over heads; entry 0 is the image class
    /// token, entry `1 + k` is patch `k`.
    pub weights: Vec<f64>,
    /// Patches that encode the attribute this word names, if it names one.
    pub attribute_patches: Option<Vec<usize>>,
}

/// Attention rows of the masked tokens plus ā/p records for every content
/// token, all drawn from the same mask.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskDump {
    pub attention: Vec<AttentionRecord>,
    pub tokens: Vec<MaskRecord>,
}

/// Masks sample `id` with the attention-guided strategy and records, for
/// every masked position, the cross-attention row of the final cross layer.
pub fn dump_attention(
    model: &Model,
    params: &ParamStore,
    config: &RunConfig,
    corpus: &Corpus,
    id: usize,
    rng: &mut Rng,
) -> Result<MaskDump> {
    let vocab = &corpus.vocab;
    let ids = vocab.encode(&corpus.records[id].sentence)?;
    let content = vocab.content_mask(&ids);
    let mut g = Graph::new(params, false);
    let (_, trace) = model.encode_text(&mut g, &ids, None)?;
    let (abar, p) = config.agm.probabilities(&trace, &content)?;
    let masked = apply_mask(&ids, &p, &content, config.agm.replace, vocab.word_ids(), rng)?;
    let (text, _) = model.encode_text(&mut g, &masked.ids, None)?;
    let image = model.encode_image(&mut g, &corpus.patch_grid(id))?;
    let (_, maps) = model.cross_encode(&mut g, &text, &image)?;
    let attn = maps.last_head_mean();
    let attention = masked
        .positions
        .iter()
        .zip(&masked.originals)
        .map(|(&pos, &orig)| {
            let word = vocab.word(orig);
            AttentionRecord {
                sentence_id: id,
                position: pos,
                token: word.to_string(),
                abar: abar[pos],
                p: p[pos],
                weights: attn.row(pos).to_vec(),
                attribute_patches: corpus
                    .spec
                    .lookup(word)
                    .map(|(slot, _)| corpus.spec.patches_of_slot(slot, corpus.num_patches)),
            }
        })
        .collect();
    Ok(MaskDump {
        attention,
        tokens: mask_records(id, &ids, &abar, &masked, vocab),
    })
}

/// Attention records for many samples, each with its own mask stream.
pub fn dump_attention_many(
    model: &Model,
    params: &ParamStore,
    config: &RunConfig,
    corpus: &Corpus,
    ids: &[usize],
    exec: Exec,
) -> Result<MaskDump> {
    let per = exec.try_map(ids.len(), |k| {
        let mut r = rng::substream(config.train.seed, rng::MASK, ids[k] as u64);
        dump_attention(model, params, config, corpus, ids[k], &mut r)
    })?;
    let mut out = MaskDump::default();
    for d in per {
        out.attention.extend(d.attention);
        out.tokens.extend(d.tokens);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::format("jsonl", e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
