mod common;

use aga_core::eval::{cmc_map, rank_gallery, MeanStd};
use aga_core::{rng, Exec, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn matrix(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

#[test]
fn perfect_retrieval() {
    let n = 7;
    let labels: Vec<usize> = (0..n).collect();
    let m = cmc_map(&Tensor::identity(n), &labels, &labels, Exec::Sequential).unwrap();
    assert_eq!((m.r1, m.r5, m.r10, m.map), (1.0, 1.0, 1.0, 1.0));
    assert_eq!((m.queries, m.excluded), (n, 0));
}

#[test]
fn adversarial_ranking_puts_every_match_last() {
    let g = 12;
    let labels: Vec<usize> = (0..g).collect();
    // each query scores its own identity lowest
    let rows: Vec<Vec<f64>> = (0..g)
        .map(|i| (0..g).map(|j| if i == j { -1.0 } else { (g - j) as f64 }).collect())
        .collect();
    let m = cmc_map(&matrix(&rows), &labels, &labels, Exec::Sequential).unwrap();
    assert_eq!(m.r1, 0.0);
    assert_eq!(m.r10, 0.0);
    assert!((m.map - 1.0 / g as f64).abs() < 1e-15);
}

#[test]
fn ties_break_by_gallery_index() {
    assert_eq!(rank_gallery(&[0.5, 0.9, 0.5, 0.9]), vec![1, 3, 0, 2]);
    let m = cmc_map(&matrix(&[vec![0.3, 0.3, 0.3]]), &[2], &[0, 1, 2], Exec::Sequential).unwrap();
    assert_eq!(m.r1, 0.0);
    assert!((m.map - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn queries_without_gallery_match_are_excluded() {
    let m = cmc_map(&matrix(&[vec![0.9, 0.1], vec![0.1, 0.9]]), &[0, 5], &[0, 1], Exec::Sequential).unwrap();
    assert_eq!((m.queries, m.excluded), (1, 1));
    assert_eq!(m.r1, 1.0);
    assert!(cmc_map(&Tensor::identity(2), &[0], &[0, 1], Exec::Sequential).is_err());
}

#[test]
fn random_scores_give_chance_rank_one() {
    let (q, g) = (10_000, 20);
    let mut r = rng::stream(1, "scores");
    let sim = Tensor::matrix(q, g, (0..q * g).map(|_| r.random::<f64>()).collect()).unwrap();
    let qlabels: Vec<usize> = (0..q).map(|i| i % g).collect();
    let glabels: Vec<usize> = (0..g).collect();
    let m = cmc_map(&sim, &qlabels, &glabels, Exec::Parallel).unwrap();
    let p = 1.0 / g as f64;
    assert!((m.r1 - p).abs() <= 3.0 * (p * (1.0 - p) / q as f64).sqrt(), "{}", m.r1);
}

#[test]
fn matches_brute_force_on_random_instances() {
    let mut r = rng::stream(2, "cmc");
    for trial in 0..100 {
        let (q, g) = (20, 50);
        let ids = 1 + trial % 15;
        // coarse scores make ties common
        let rows: Vec<Vec<f64>> = (0..q).map(|_| (0..g).map(|_| r.random_range(0..8) as f64).collect()).collect();
        let ql: Vec<usize> = (0..q).map(|_| r.random_range(0..ids)).collect();
        let gl: Vec<usize> = (0..g).map(|_| r.random_range(0..ids)).collect();
        let m = cmc_map(&matrix(&rows), &ql, &gl, Exec::Sequential).unwrap();
        let (r1, r5, r10, map, used) = common::brute_force_metrics(&rows, &ql, &gl);
        assert_eq!((m.r1, m.r5, m.r10, m.queries), (r1, r5, r10, used));
        assert!((m.map - map).abs() < 1e-12);
        assert_eq!(m, cmc_map(&matrix(&rows), &ql, &gl, Exec::Parallel).unwrap());
    }
}

#[test]
fn mean_std_uses_sample_deviation() {
    let s = MeanStd::of(&[1.0, 2.0, 3.0]).unwrap();
    assert_eq!((s.mean, s.std), (2.0, 1.0));
    assert_eq!(MeanStd::of(&[4.0]).unwrap().std, 0.0);
    assert!(MeanStd::of(&[]).is_none());
}

fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, Vec<usize>)> {
    (2usize..8, 2usize..12, 1usize..5).prop_flat_map(|(q, g, ids)| {
        (
            prop::collection::vec(prop::collection::vec(-5.0f64..5.0, g), q),
            prop::collection::vec(0..ids, q),
            prop::collection::vec(0..ids, g),
        )
    })
}

proptest! {
    #[test]
    fn monotone_row_maps_leave_metrics_unchanged((rows, ql, gl) in instance(), shift in -3.0f64..3.0, scale in 0.1f64..4.0) {
        let a = cmc_map(&matrix(&rows), &ql, &gl, Exec::Sequential).unwrap();
        let mapped: Vec<Vec<f64>> = rows
            .iter()
            .enumerate()
            .map(|(i, row)| row.iter().map(|v| (scale * v + shift + i as f64).exp()).collect())
            .collect();
        let b = cmc_map(&matrix(&mapped), &ql, &gl, Exec::Sequential).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn metrics_are_ordered_and_bounded((rows, ql, gl) in instance()) {
        let m = cmc_map(&matrix(&rows), &ql, &gl, Exec::Sequential).unwrap();
        prop_assert!(m.r1 <= m.r5 && m.r5 <= m.r10);
        for v in [m.r1, m.r5, m.r10, m.map] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn full_map_iff_matches_lead((rows, ql, gl) in instance()) {
        let m = cmc_map(&matrix(&rows), &ql, &gl, Exec::Sequential).unwrap();
        prop_assume!(m.queries > 0);
        let separated = rows.iter().zip(&ql).all(|(row, &l)| {
            if !gl.contains(&l) {
                return true;
            }
            let order = rank_gallery(row);
            let first_miss = order.iter().position(|&j| gl[j] != l).unwrap_or(order.len());
            order[first_miss..].iter().all(|&j| gl[j] != l)
        });
        prop_assert_eq!(m.map == 1.0, separated);
    }
}

#[test]
fn attention_dump_rows_are_distributions() {
    use aga_core::eval::dump_attention_many;
    use aga_core::train::Trainer;
    let cfg = common::tiny_config(&[]);
    let corpus = common::corpus_for(&cfg);
    let t = Trainer::new(&cfg, &corpus).unwrap();
    let ids: Vec<usize> = (0..20).collect();
    let dump = dump_attention_many(&t.model, &t.pair.online, &cfg, &corpus, &ids, Exec::Parallel).unwrap();
    let masked = dump.tokens.iter().filter(|r| r.masked).count();
    assert_eq!(dump.attention.len(), masked);
    let content: usize = ids
        .iter()
        .map(|&i| {
            let enc = corpus.vocab.encode(&corpus.records[i].sentence).unwrap();
            enc.iter().filter(|&&w| !corpus.vocab.is_special(w)).count()
        })
        .sum();
    assert_eq!(dump.tokens.len(), content);
    for r in &dump.attention {
        assert_eq!(r.weights.len(), 1 + corpus.num_patches);
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let tok = dump.tokens.iter().find(|m| m.sentence_id == r.sentence_id && m.position == r.position).unwrap();
        assert!(tok.masked);
        assert_eq!((tok.abar, tok.p), (r.abar, r.p));
    }
    let again = dump_attention_many(&t.model, &t.pair.online, &cfg, &corpus, &ids, Exec::Sequential).unwrap();
    assert_eq!(dump, again);
}
