//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

/// Brute-force CMC / mAP: the rank of gallery item `j` for a query is the
/// number of items that beat it (higher score, or equal score and lower index).
pub fn brute_force_metrics(sim: &[Vec<f64>], qlabels: &[usize], glabels: &[usize]) -> (f64, f64, f64, f64, usize) {
    let mut r = [0usize; 3];
    let mut ap_sum = 0.0;
    let mut used = 0;
    for (row, &ql) in sim.iter().zip(qlabels) {
        let rank_of = |j: usize| {
            (0..row.len())
                .filter(|&k| row[k] > row[j] || (row[k] == row[j] && k < j))
                .count()
        };
        let mut match_ranks: Vec<usize> = (0..row.len()).filter(|&j| glabels[j] == ql).map(rank_of).collect();
        if match_ranks.is_empty() {
            continue;
        }
        used += 1;
        match_ranks.sort_unstable();
        for (slot, k) in [1usize, 5, 10].iter().enumerate() {
            if match_ranks[0] < *k {
                r[slot] += 1;
            }
        }
        let ap: f64 = match_ranks
            .iter()
            .enumerate()
            .map(|(h, &rank)| (h + 1) as f64 / (rank + 1) as f64)
            .sum::<f64>()
            / match_ranks.len() as f64;
        ap_sum += ap;
    }
    let n = used.max(1) as f64;
    (r[0] as f64 / n, r[1] as f64 / n, r[2] as f64 / n, ap_sum / n, used)
}

/// A model and corpus small enough to train in well under a second.
pub const TINY: &str = r#"
[corpus]
num_identities = 40
pairs_per_identity = 2

[encoder]
hidden_dim = 8
num_heads = 2
text_layers = 2
image_layers = 1
cross_layers = 1
patch_side = 2
patch_dim = 4
ffn_mult = 2
embed_dim = 4
init_std = 0.2

[objectives]
queue_capacity = 16

[train]
epochs = 2
batch_size = 4
seed = 11

[eval]
test_identities = 10
"#;

pub fn tiny_config(overrides: &[&str]) -> aga_core::config::RunConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    aga_core::config::RunConfig::from_toml(TINY, &o).expect("tiny config")
}

pub fn corpus_for(config: &aga_core::config::RunConfig) -> aga_core::corpus::Corpus {
    aga_core::corpus::generate_corpus(
        &aga_core::corpus::AttributeSpec::standard(),
        &config.corpus_options(),
        aga_core::Exec::Sequential,
    )
    .expect("corpus")
}
