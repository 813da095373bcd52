use super::*;
use crate::corpus::{Vocabulary, EOS_ID, PERSON_ID};
use crate::layers::EmbeddingTable;
use crate::models::{ModelConfig, Variant};

fn tiny(seed: u64) -> DialogueModel {
    DialogueModel::new(ModelConfig::new(Variant::Hred, 9).dims(3, 4, 4), seed).unwrap()
}

fn triple(a: u32, b: u32, c: u32) -> Dialogue {
    Dialogue::new(vec![vec![a, EOS_ID], vec![b, a, EOS_ID], vec![c, EOS_ID]]).unwrap()
}

fn corpus() -> Vec<Dialogue> {
    vec![triple(5, 6, 7), triple(6, 7, 8), triple(7, 8, 5), triple(8, 5, 1)]
}

fn scalar_params(x: f64) -> ModelParams {
    let mut p = ModelParams::new();
    p.add("w", Tensor::vector(vec![x]));
    p
}

#[test]
fn adam_first_step_hand_value() {
    let mut p = scalar_params(0.5);
    let mut st = AdamState::new(&p, AdamConfig::default());
    st.step(&mut p, &[Some(Tensor::vector(vec![1.0]))], &Freeze::none())
        .unwrap();
    // m̂ = 1, v̂ = 1 after bias correction.
    let want = 0.5 - 0.001 * 1.0 / (1.0 + 1e-8);
    assert!((p.by_name("w").unwrap().data()[0] - want).abs() < 1e-15);
    assert_eq!(st.t, 1);
    assert!((st.m[0].data()[0] - 0.1).abs() < 1e-15);
    assert!((st.v[0].data()[0] - 0.001).abs() < 1e-15);
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut p = scalar_params(0.25);
    let mut st = AdamState::new(&p, AdamConfig::default());
    st.step(&mut p, &[Some(Tensor::vector(vec![0.0]))], &Freeze::none())
        .unwrap();
    st.step(&mut p, &[None], &Freeze::none()).unwrap();
    assert_eq!(p.by_name("w").unwrap().data()[0], 0.25);
    assert_eq!(st.t, 2);
}

#[test]
fn non_finite_gradient_aborts_without_changes() {
    let mut p = scalar_params(0.25);
    p.add("u", Tensor::vector(vec![1.0, 2.0]));
    let mut st = AdamState::new(&p, AdamConfig::default());
    let before = (p.clone(), st.clone());
    let grads = [
        Some(Tensor::vector(vec![1.0])),
        Some(Tensor::vector(vec![f64::NAN, 0.0])),
    ];
    match st.step(&mut p, &grads, &Freeze::none()) {
        Err(TrainError::NonFiniteGradient(name)) => assert_eq!(name, "u"),
        other => panic!("{other:?}"),
    }
    assert_eq!(st, before.1);
    assert_eq!(p.by_name("w"), before.0.by_name("w"));
}

#[test]
fn frozen_parameters_and_rows_stay_bit_identical() {
    let mut m = tiny(1);
    let e_before = m.params.by_name("emb.e").unwrap().clone();
    let x_before = m.params.by_name("emb.x").unwrap().clone();
    let freeze = Freeze::none().param("emb.x").rows("emb.e", [5, 6]);
    let mut st = AdamState::new(
        &m.params,
        AdamConfig {
            lr: 0.05,
            ..Default::default()
        },
    );
    for d in corpus().iter().cycle().take(12) {
        let (_, g) = m.nll_and_grads(d).unwrap();
        st.step(&mut m.params, &g, &freeze).unwrap();
    }
    let e = m.params.by_name("emb.e").unwrap();
    assert_eq!(m.params.by_name("emb.x").unwrap().data(), x_before.data());
    assert_eq!(e.row(5), e_before.row(5));
    assert_eq!(e.row(6), e_before.row(6));
    assert_ne!(e.row(7), e_before.row(7));
    let ie = m.params.id("emb.e").unwrap().index();
    assert!(st.m[ie].row(5).iter().all(|&v| v == 0.0));
}

#[test]
fn small_step_decreases_loss() {
    let mut m = tiny(2);
    let d = triple(5, 6, 7);
    let (before, g) = m.nll_and_grads(&d).unwrap();
    let mut st = AdamState::new(
        &m.params,
        AdamConfig {
            lr: 1e-5,
            ..Default::default()
        },
    );
    st.step(&mut m.params, &g, &Freeze::none()).unwrap();
    let (after, _) = m.nll_and_grads(&d).unwrap();
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn clipping_rescales_to_max_norm() {
    let mut g = vec![Some(Tensor::vector(vec![3.0])), None, Some(Tensor::vector(vec![4.0]))];
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((g[0].as_ref().unwrap().data()[0] - 0.6).abs() < 1e-15);
    assert!((g[2].as_ref().unwrap().data()[0] - 0.8).abs() < 1e-15);
    let mut small = vec![Some(Tensor::vector(vec![0.1]))];
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small[0].as_ref().unwrap().data()[0], 0.1);
}

#[test]
fn config_validation() {
    let bad = [
        TrainConfig {
            patience: 0,
            ..Default::default()
        },
        TrainConfig {
            valid_every: 0,
            ..Default::default()
        },
        TrainConfig {
            batch_size: 0,
            ..Default::default()
        },
        TrainConfig {
            clip: Some(0.0),
            ..Default::default()
        },
        TrainConfig {
            freeze: Freeze::none().param("nope"),
            ..Default::default()
        },
        TrainConfig {
            freeze: Freeze::none().rows("emb.e", [99]),
            ..Default::default()
        },
    ];
    for c in bad {
        assert!(Trainer::new(tiny(1), c).is_err());
    }
    let cfg = TrainConfig::default();
    assert!(matches!(
        train(tiny(1), &[], &corpus(), &cfg),
        Err(TrainError::EmptyTrainingSet)
    ));
    let oov = [Dialogue::new(vec![vec![42, EOS_ID]]).unwrap()];
    assert!(matches!(
        train(tiny(1), &oov, &corpus(), &cfg),
        Err(TrainError::Vocabulary(_))
    ));
}

fn fast(max_epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs,
        adam: AdamConfig {
            lr: 0.02,
            ..Default::default()
        },
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn same_seed_gives_identical_curves() {
    let a = train(tiny(3), &corpus(), &corpus(), &fast(6)).unwrap();
    let b = train(tiny(3), &corpus(), &corpus(), &fast(6)).unwrap();
    assert_eq!(a.history, b.history);
    let c = train(tiny(3), &corpus(), &corpus(), &TrainConfig { seed: 6, ..fast(6) }).unwrap();
    assert_ne!(a.history, c.history);
    let line = a.history[0].to_string();
    let fields: Vec<&str> = line.split('\t').collect();
    assert_eq!(fields.len(), 3);
    assert_eq!(fields[0].parse::<u64>().unwrap(), 4);
    fields[1].parse::<f64>().unwrap();
    fields[2].parse::<f64>().unwrap();
}

#[test]
fn resume_is_step_identical() {
    let cfg = TrainConfig {
        batch_size: 3,
        clip: Some(5.0),
        ..fast(7)
    };
    let whole = train(tiny(4), &corpus(), &corpus(), &cfg).unwrap();
    let mut t = Trainer::new(
        tiny(4),
        TrainConfig {
            max_epochs: 3,
            ..cfg.clone()
        },
    )
    .unwrap();
    t.run(&corpus(), &corpus(), &mut |_| {}, &mut |_| Ok(())).unwrap();
    let bytes = t.to_checkpoint().to_bytes().unwrap();
    let mut back = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    back.config.max_epochs = 7;
    let resumed = back.run(&corpus(), &corpus(), &mut |_| {}, &mut |_| Ok(())).unwrap();
    assert_eq!(resumed.history, whole.history);
    for ((_, n, a), (_, _, b)) in resumed.best.params.iter().zip(whole.best.params.iter()) {
        assert_eq!(a.data(), b.data(), "{n}");
    }
    assert_eq!(back.adam, {
        let mut w = Trainer::new(tiny(4), cfg).unwrap();
        w.run(&corpus(), &corpus(), &mut |_| {}, &mut |_| Ok(())).unwrap();
        w.adam
    });
}

#[test]
fn early_stopping_returns_best_not_last() {
    // Overfit one triple while validating on different ones.
    let cfg = TrainConfig {
        patience: 2,
        adam: AdamConfig {
            lr: 0.05,
            ..Default::default()
        },
        ..fast(300)
    };
    let out = train(tiny(5), &[triple(5, 6, 7)], &[triple(8, 1, 6), triple(7, 7, 8)], &cfg).unwrap();
    assert_eq!(out.stopped, StopReason::Patience);
    let min = out.history.iter().map(|e| e.valid_ppl).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_ppl, min);
    assert!(out.history.last().unwrap().valid_ppl > min);
    let again = eval::perplexity(&out.best, &[triple(8, 1, 6), triple(7, 7, 8)], Scope::Full).unwrap();
    assert_eq!(again, min);
}

#[test]
fn patience_one_stops_at_first_stall() {
    let cfg = TrainConfig {
        patience: 1,
        ..fast(400)
    };
    let out = train(tiny(6), &corpus(), &corpus(), &cfg).unwrap();
    let h = &out.history;
    for w in h[..h.len() - 1].windows(2) {
        assert!(w[1].valid_ppl < w[0].valid_ppl);
    }
    if out.stopped == StopReason::Patience {
        assert!(h[h.len() - 1].valid_ppl >= h[h.len() - 2].valid_ppl);
    }
}

#[test]
fn repeated_triple_is_memorized() {
    let data = vec![triple(5, 6, 7); 4];
    let cfg = TrainConfig {
        target_ppl: Some(1.5),
        adam: AdamConfig {
            lr: 0.05,
            ..Default::default()
        },
        ..fast(200)
    };
    let out = train(tiny(7), &data, &data, &cfg).unwrap();
    assert_eq!(out.stopped, StopReason::Target);
    assert!(out.best_ppl < 1.5);
}

#[test]
fn divergence_reports_last_good_state() {
    let mut m = tiny(8);
    let b = m.params.id("out.b").unwrap();
    m.params.get_mut(b).data_mut()[0] = f64::NAN;
    match train(m, &corpus(), &corpus(), &fast(3)) {
        Err(TrainError::Diverged { last_good, step, .. }) => {
            assert_eq!(step, 0);
            assert!(last_good.model.params.by_name("out.b").unwrap().data()[0].is_nan());
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn long_dialogues_are_truncated_for_training() {
    let long = Dialogue::new(vec![
        vec![5, EOS_ID],
        vec![6, EOS_ID],
        vec![7; 30].into_iter().chain([EOS_ID]).collect(),
    ])
    .unwrap();
    let cut = prepare(std::slice::from_ref(&long), 10).unwrap();
    assert_eq!(cut[0].num_tokens(), 10);
    assert!(prepare(&[long], 2).is_err());
}

fn vocab() -> Vocabulary {
    Vocabulary::from_tokens(&["hello", "there", "friend", "today"]).unwrap()
}

fn table() -> EmbeddingTable {
    let mut t = EmbeddingTable {
        dim: 3,
        ..Default::default()
    };
    t.vectors.insert("hello".into(), vec![0.5, -0.25, 1.0]);
    t.vectors.insert("friend".into(), vec![0.125, 0.75, -1.5]);
    t.vectors.insert("<person>".into(), vec![9.0, 9.0, 9.0]);
    t.vectors.insert("absent".into(), vec![1.0, 1.0, 1.0]);
    t
}

#[test]
fn bootstrap_loads_covered_rows_and_freezes_them() {
    let v = vocab();
    let mut m = tiny(9);
    assert_eq!(v.len(), 9);
    let init_person = m.params.by_name("emb.e").unwrap().row(PERSON_ID as usize).to_vec();
    let boot = bootstrap_embeddings(&mut m, &v, &table(), &fast(4)).unwrap();
    let hello = v.id("hello").unwrap();
    let friend = v.id("friend").unwrap();
    assert_eq!(boot.covered, vec![hello, friend]);
    let e = m.params.by_name("emb.e").unwrap().clone();
    assert_eq!(e.row(hello as usize), &[0.5, -0.25, 1.0]);
    assert_eq!(e.row(friend as usize), &[0.125, 0.75, -1.5]);
    // Reserved tokens keep their random initialization.
    assert_eq!(e.row(PERSON_ID as usize), &init_person[..]);
    assert!(boot.stage2.freeze.is_empty());

    let data = vec![triple(hello, friend, PERSON_ID), triple(friend, 7, hello)];
    let out = train(m, &data, &data, &boot.stage1).unwrap();
    let after = out.best.params.by_name("emb.e").unwrap();
    assert_eq!(after.row(hello as usize), e.row(hello as usize));
    assert_eq!(after.row(friend as usize), e.row(friend as usize));
    assert_ne!(after.row(PERSON_ID as usize), e.row(PERSON_ID as usize));

    let wrong = EmbeddingTable { dim: 5, ..table() };
    assert!(matches!(
        bootstrap_embeddings(&mut tiny(9), &v, &wrong, &fast(1)),
        Err(TrainError::Config(_))
    ));
}

#[test]
fn finetune_holds_embeddings_fixed() {
    let qa = vec![
        Dialogue::new(vec![vec![5, 6, EOS_ID], vec![7, EOS_ID]]).unwrap(),
        Dialogue::new(vec![vec![8, EOS_ID], vec![5, 5, EOS_ID]]).unwrap(),
    ];
    let cfg = TransferConfig {
        pretrain_epochs: 2,
        finetune: fast(3),
    };
    let start = tiny(10);
    let e0 = start.params.by_name("emb.e").unwrap().clone();
    let mut logs = 0;
    let t = pretrain_finetune(start, &qa, &corpus(), &corpus(), &cfg, &mut |_| logs += 1).unwrap();
    let e_pre = t.pretrained.params.by_name("emb.e").unwrap();
    assert_ne!(e_pre.data(), e0.data());
    assert_eq!(t.outcome.best.params.by_name("emb.e").unwrap().data(), e_pre.data());
    assert_ne!(
        t.outcome.best.params.by_name("dec.u_h").unwrap().data(),
        t.pretrained.params.by_name("dec.u_h").unwrap().data()
    );
    assert_eq!(logs, 3);
    assert!(pretrain_finetune(tiny(10), &corpus(), &corpus(), &corpus(), &cfg, &mut |_| {}).is_err());
}

proptest::proptest! {
    #[test]
    fn first_step_opposes_gradient(x in -5.0f64..5.0, g in -100.0f64..100.0) {
        proptest::prop_assume!(g.abs() > 1e-6);
        let mut p = scalar_params(x);
        let mut st = AdamState::new(&p, AdamConfig::default());
        st.step(&mut p, &[Some(Tensor::vector(vec![g]))], &Freeze::none()).unwrap();
        let moved = p.by_name("w").unwrap().data()[0] - x;
        proptest::prop_assert!(moved * g < 0.0);
    }
}
