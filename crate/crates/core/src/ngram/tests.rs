use super::*;

const A: u32 = 5;
const B: u32 = 6;
const C: u32 = 7;

fn dlg(stream: &[u32]) -> Dialogue {
    // Counting only looks at the flattened stream.
    Dialogue {
        utterances: vec![stream.to_vec()],
    }
}

#[test]
fn hand_counts() {
    let t = CountTable::count([&[A, B, A, B][..]], 2).unwrap();
    assert_eq!(t.get(&[A], B), 2);
    assert_eq!(t.get(&[B], A), 1);
    assert_eq!(t.total_tokens(), 4);
    assert_eq!(t.context_total(&[A]), 2);
    // MLE sub-probability c(a b) / c(a).
    assert_eq!(t.get(&[A], B) as f64 / t.context_total(&[A]) as f64, 1.0);
    let empty = CountTable::count(std::iter::empty::<&[u32]>(), 3).unwrap();
    assert!(empty.is_empty());
    assert!(CountTable::count([&[A][..]], 0).is_err());
}

#[test]
fn histories_stay_inside_a_stream() {
    let t = CountTable::count([&[A, B][..], &[C, A][..]], 2).unwrap();
    assert_eq!(t.get(&[B], C), 0);
    assert_eq!(t.get(&[C], A), 1);
    assert_eq!(t.levels[1].values().flat_map(|s| s.values()).sum::<u64>(), 2);
}

#[test]
fn witten_bell_hand_arithmetic() {
    // a b a b a c, |V| = 8: unigrams a3 b2 c1 (N=6, T=3); after a: b2 c1.
    let m = NgramModel::train(&[dlg(&[A, B, A, B, A, C])], 2, Method::WittenBell, 8).unwrap();
    let uni_b = (2.0 + 3.0 / 8.0) / (6.0 + 3.0);
    assert!((m.prob(&[], B) - uni_b).abs() < 1e-15);
    let want = (2.0 + 2.0 * uni_b) / (3.0 + 2.0);
    assert!((m.prob(&[A], B) - want).abs() < 1e-15);
    // Mass reserved for the lower order after `a`: T / (N + T) = 2/5.
    let unseen_total: f64 = [0, 1, 2, 3, 4, A].iter().map(|&w| m.prob(&[A], w)).sum();
    let lower_total: f64 = [0, 1, 2, 3, 4, A].iter().map(|&w| m.prob(&[], w)).sum();
    assert!((unseen_total - 0.4 * lower_total).abs() < 1e-15);
}

#[test]
fn absolute_discount_estimates() {
    assert_eq!(absolute_discount(4, 2), 0.5);
    assert_eq!(absolute_discount(3, 0), 0.5);
    assert!((absolute_discount(10, 3) - 10.0 / 16.0).abs() < 1e-15);
    let d = modified_kn_discounts([10, 4, 2, 1]);
    let y = 10.0 / 18.0;
    assert!((d[0] - (1.0 - 2.0 * y * 0.4)).abs() < 1e-15);
    assert!((d[1] - (2.0 - 3.0 * y * 0.5)).abs() < 1e-15);
    assert!((d[2] - (3.0 - 4.0 * y * 0.5)).abs() < 1e-15);
}

#[test]
fn every_method_normalizes_on_toy_corpus() {
    let data = [dlg(&[A, B, A, B, A, C, 3]), dlg(&[B, B, C, 3, A, 3])];
    for method in Method::ALL {
        for order in 1..=4 {
            let m = NgramModel::train(&data, order, method, 9).unwrap();
            let mut contexts: Vec<Vec<u32>> = m.contexts().cloned().collect();
            contexts.push(vec![8, 8, 8]);
            contexts.push(vec![A, 8]);
            for h in contexts {
                let p = m.distribution(&h);
                assert!(p.iter().all(|&x| x > 0.0));
                let z: f64 = p.iter().sum();
                assert!((z - 1.0).abs() < 1e-12, "{method:?} order {order} ctx {h:?}: {z}");
            }
        }
    }
}

#[test]
fn untrained_model_is_uniform() {
    for method in Method::ALL {
        let m = NgramModel::train(&[], 3, method, 10).unwrap();
        assert!((m.prob(&[1, 2], 4) - 0.1).abs() < 1e-15, "{method:?}");
        let ppl = m.perplexity(&[dlg(&[5, 6, 3])], Scope::Full).unwrap();
        assert!((ppl - 10.0).abs() < 1e-9);
    }
}

#[test]
fn memorized_corpus_perplexity_approaches_one() {
    let stream: Vec<u32> = (0..40).map(|i| 5 + (i % 4)).collect();
    let data = vec![dlg(&stream); 50];
    let m = NgramModel::train(&data, 4, Method::ModifiedKn, 12).unwrap();
    let ppl = m.perplexity(&data, Scope::Full).unwrap();
    assert!(ppl < 1.2, "{ppl}");
}

#[test]
fn u3_scope_counts_only_third_utterance() {
    let d = Dialogue::new(vec![vec![A, 3], vec![B, 3], vec![C, A, 3]]).unwrap();
    let m = NgramModel::train(std::slice::from_ref(&d), 2, Method::WittenBell, 9).unwrap();
    let s = d.flat();
    let nll: f64 = (4..7).map(|i| -m.log_prob(&s[..i], s[i])).sum();
    let want = (nll / 3.0).exp();
    assert!((m.perplexity(&[d], Scope::U3).unwrap() - want).abs() < 1e-12);
}

#[test]
fn text_round_trip() {
    let data = [dlg(&[A, B, A, B, A, C, 3]), dlg(&[B, B, C, 3])];
    for method in Method::ALL {
        let m = NgramModel::train(&data, 3, method, 9).unwrap();
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(&format!("3\t{}\t", method.name())));
        let back = NgramModel::read(&buf[..]).unwrap();
        assert_eq!(back.counts, m.counts);
        for h in [vec![], vec![A], vec![B, A], vec![8, 8]] {
            assert_eq!(back.distribution(&h), m.distribution(&h));
        }
    }
    assert!(NgramModel::read("3\tbogus\tvocab=9\n".as_bytes()).is_err());
    assert!(NgramModel::read("2\tbackoff\tvocab=9\n5 6 7 1\n".as_bytes()).is_err());
}

#[test]
fn duplicating_the_corpus_keeps_mle_ratios() {
    let one = [dlg(&[A, B, A, C, A, B])];
    let two = [one[0].clone(), one[0].clone()];
    let (t1, t2) = (
        CountTable::from_dialogues(&one, 3).unwrap(),
        CountTable::from_dialogues(&two, 3).unwrap(),
    );
    for (h, succ) in t1.levels.iter().flatten() {
        for (&w, &c) in succ {
            let r1 = c as f64 / t1.context_total(h) as f64;
            let r2 = t2.get(h, w) as f64 / t2.context_total(h) as f64;
            assert_eq!(r1, r2);
        }
    }
}

proptest::proptest! {
    #[test]
    fn discount_in_unit_interval(n1 in 1u64..1000, n2 in 1u64..1000) {
        let d = absolute_discount(n1, n2);
        proptest::prop_assert!(d > 0.0 && d < 1.0);
    }

    #[test]
    fn random_corpora_normalize(
        streams in proptest::collection::vec(proptest::collection::vec(0u32..6, 1..12), 1..5),
        order in 1usize..=4,
        mi in 0usize..4,
    ) {
        let data: Vec<Dialogue> = streams.iter().map(|s| dlg(s)).collect();
        let m = NgramModel::train(&data, order, Method::ALL[mi], 6).unwrap();
        for s in &streams {
            for i in 0..=s.len() {
                let z: f64 = m.distribution(&s[..i]).iter().sum();
                proptest::prop_assert!((z - 1.0).abs() < 1e-9);
            }
        }
    }
}
