use aga_core::agm::{Action, MaskedText, Strategy};
use aga_core::corpus::special;
use aga_core::tem::{enrich_text, sample_replacement, top_m_distribution, TemConfig};
use aga_core::{rng, Error, Tensor};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn chi_square_p(counts: &[usize], probs: &[f64]) -> f64 {
    let n: usize = counts.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
}

#[test]
fn top_m_examples() {
    let mut logits = vec![f64::NEG_INFINITY; 10];
    logits[..5].copy_from_slice(&[5.0, 4.0, 3.0, 2.0, 1.0]);
    let (c, p) = top_m_distribution(&logits, 3, 1.0).unwrap();
    assert_eq!(c, vec![0, 1, 2]);
    for (got, want) in p.iter().zip([0.6652, 0.2447, 0.0900]) {
        assert!((got - want).abs() < 5e-5);
    }
    let z: f64 = [5.0f64, 4.0, 3.0].iter().map(|v| v.exp()).sum();
    assert!((p[0] - 5f64.exp() / z).abs() < 1e-12);

    let (c, p) = top_m_distribution(&[0.3; 8], 5, 1.0).unwrap();
    assert_eq!(c, vec![0, 1, 2, 3, 4]);
    assert!(p.iter().all(|&x| (x - 0.2).abs() < 1e-12));
    assert!(matches!(top_m_distribution(&[1.0; 4], 1, 1.0), Err(Error::Config { .. })));
    assert!(top_m_distribution(&[1.0; 4], 5, 1.0).is_err());
}

#[test]
fn exclusion_renormalizes() {
    let (a, b, c) = (10, 11, 12);
    let mut r = rng::stream(1, rng::TEM);
    let n = 100_000;
    let mut counts = [0usize; 2];
    for _ in 0..n {
        let (w, _) = sample_replacement(&[a, b, c], &[0.5, 0.3, 0.2], a, &mut r).unwrap();
        assert_ne!(w, a);
        counts[usize::from(w == c)] += 1;
    }
    assert!(chi_square_p(&counts, &[0.6, 0.4]) > 0.01);
    let freq = counts[0] as f64 / n as f64;
    assert!((freq - 0.6).abs() <= 3.0 * (0.24f64 / n as f64).sqrt());
}

#[test]
fn absent_original_leaves_distribution_unchanged() {
    let mut r = rng::stream(2, rng::TEM);
    let probs = [0.5, 0.3, 0.2];
    let mut counts = [0usize; 3];
    for _ in 0..100_000 {
        let (_, rank) = sample_replacement(&[4, 5, 6], &probs, 99, &mut r).unwrap();
        counts[rank] += 1;
    }
    assert!(chi_square_p(&counts, &probs) > 0.01);
}

fn masked(ids: &[usize], positions: &[usize], actions: &[Action]) -> MaskedText {
    let mut out = ids.to_vec();
    for (&p, &a) in positions.iter().zip(actions) {
        if a == Action::Mask {
            out[p] = special::MASK;
        }
    }
    MaskedText {
        ids: out,
        positions: positions.to_vec(),
        originals: positions.iter().map(|&p| ids[p]).collect(),
        actions: actions.to_vec(),
        probabilities: vec![0.1; ids.len()],
        strategy: Strategy::Agm,
        forced: false,
        fallback: false,
    }
}

fn logits(rows: usize, v: usize, seed: u64) -> Tensor {
    use rand::Rng;
    let mut r = rng::stream(seed, "logits");
    Tensor::matrix(rows, v, (0..rows * v).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn gate_extremes() {
    let ids = [special::CLS, 5, 6, 7, special::SEP];
    let m = masked(&ids, &[1, 3], &[Action::Mask, Action::Mask]);
    let l = logits(2, 12, 3);
    let mut r = rng::stream(3, rng::TEM);
    for _ in 0..50 {
        let closed = TemConfig { p_tem: 0.0, ..TemConfig::default() };
        let e = enrich_text(&ids, &m, &l, &closed, &mut r).unwrap();
        assert!(!e.accepted);
        assert_eq!(e.ids, ids);
        let open = TemConfig { p_tem: 1.0, ..TemConfig::default() };
        let e = enrich_text(&ids, &m, &l, &open, &mut r).unwrap();
        assert!(e.accepted);
        assert_eq!(e.positions, vec![1, 3]);
        for (&pos, &(orig, rep)) in e.positions.iter().zip(&e.pairs) {
            assert_eq!(orig, ids[pos]);
            assert_ne!(rep, orig);
            assert_eq!(e.ids[pos], rep);
            assert!(rep >= special::COUNT);
        }
        assert_eq!((e.ids[0], e.ids[2], e.ids[4]), (ids[0], ids[2], ids[4]));
    }
}

#[test]
fn only_mask_actions_are_rewritten() {
    let ids = [special::CLS, 5, 6, 7, 8, special::SEP];
    let m = masked(&ids, &[1, 2, 4], &[Action::Keep, Action::Mask, Action::Random]);
    let cfg = TemConfig { p_tem: 1.0, ..TemConfig::default() };
    let e = enrich_text(&ids, &m, &logits(3, 12, 4), &cfg, &mut rng::stream(4, rng::TEM)).unwrap();
    assert_eq!(e.positions, vec![2]);
    assert!(matches!(
        enrich_text(&ids, &m, &logits(2, 12, 4), &cfg, &mut rng::stream(4, rng::TEM)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn acceptance_rate_matches_p_tem() {
    let ids = [special::CLS, 5, 6, special::SEP];
    let m = masked(&ids, &[1], &[Action::Mask]);
    let l = logits(1, 10, 5);
    let mut r = rng::stream(5, rng::TEM);
    let n = 100_000;
    let cfg = TemConfig::default();
    let accepted = (0..n).filter(|_| enrich_text(&ids, &m, &l, &cfg, &mut r).unwrap().accepted).count();
    assert!((accepted as f64 / n as f64 - 0.3).abs() <= 0.005);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn top_m_is_a_sorted_distribution(logits in prop::collection::vec(-10.0f64..10.0, 5..40), m in 2usize..5) {
        let (c, p) = top_m_distribution(&logits, m, 1.0).unwrap();
        prop_assert_eq!(c.len(), m);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.windows(2).all(|w| w[0] >= w[1]));
        let cutoff = logits[c[m - 1]];
        for (i, &l) in logits.iter().enumerate() {
            if !c.contains(&i) {
                prop_assert!(l <= cutoff);
            }
        }
    }

    #[test]
    fn enrichment_never_returns_the_original(seed in 0u64..10_000, v in 8usize..30) {
        let ids = [special::CLS, 5, 6, 7, special::SEP];
        let m = masked(&ids, &[1, 2, 3], &[Action::Mask; 3]);
        let cfg = TemConfig { p_tem: 1.0, ..TemConfig::default() };
        let e = enrich_text(&ids, &m, &logits(3, v, seed), &cfg, &mut rng::stream(seed, rng::TEM)).unwrap();
        prop_assert_eq!(e.ids.len(), ids.len());
        for (&pos, &(orig, rep)) in e.positions.iter().zip(&e.pairs) {
            prop_assert_ne!(rep, orig);
            prop_assert_eq!(e.ids[pos], rep);
        }
    }
}
