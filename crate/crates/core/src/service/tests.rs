use super::*;
use crate::corpus::Dialogue;
use crate::models::{ModelConfig, Variant};

fn service(idle: Duration) -> Service {
    let vocab = Vocabulary::from_tokens(&["hello", "there", "how", "are", "you", "?", "fine", "."]).unwrap();
    let mut model = DialogueModel::new(ModelConfig::new(Variant::Hred, vocab.len()).dims(4, 6, 6), 3).unwrap();
    // Larger weights so decoding is not a near-uniform tie-fest.
    let ids: Vec<_> = model.params.ids().collect();
    let mut rng = Rng::new(9);
    for id in ids {
        model
            .params
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.7 * rng.normal());
    }
    let b = model.params.id("out.b").unwrap();
    model.params.get_mut(b).data_mut()[EOS_ID as usize] += 1.0;
    let cfg = ServiceConfig {
        idle_timeout: idle,
        ..Default::default()
    };
    Service::new(model, vocab, Tokenizer::new(), cfg).unwrap()
}

fn svc() -> Service {
    service(Duration::from_secs(60))
}

#[test]
fn identical_sessions_give_identical_responses() {
    let s = svc();
    for mode in ["map", "sample"] {
        let settings = SettingsJson {
            mode: Some(mode.into()),
            seed: Some(4),
            ..Default::default()
        };
        let a = s.create_session(&settings).unwrap().session_id;
        let b = s.create_session(&settings).unwrap().session_id;
        assert_ne!(a, b);
        for text in ["hello there", "how are you?"] {
            let ra = s.chat_turn(&a, text, None).unwrap();
            let rb = s.chat_turn(&b, text, None).unwrap();
            assert_eq!((ra.tokens, ra.log_prob, ra.turn), (rb.tokens, rb.log_prob, rb.turn));
        }
    }
}

#[test]
fn context_equals_replayed_history() {
    let s = svc();
    let id = s.create_session(&SettingsJson::default()).unwrap().session_id;
    for text in ["hello", "how are you ?", "fine ."] {
        s.chat_turn(&id, text, None).unwrap();
    }
    let st = s.session_state(&id).unwrap();
    assert_eq!(st.history.len(), 6);
    assert_eq!(st.context, s.model().observe_all(&st.history).unwrap());
}

#[test]
fn response_matches_in_process_decoding_and_rescoring() {
    let s = svc();
    let settings = SettingsJson {
        mode: Some("sample".into()),
        seed: Some(11),
        temperature: Some(0.8),
        ..Default::default()
    };
    let id = s.create_session(&settings).unwrap().session_id;
    let r = s.chat_turn(&id, "hello there", None).unwrap();
    let user = s.vocab().encode(&["hello", "there", "</s>"]);
    let resolved = Settings::default().apply(&settings).unwrap();
    let direct = eval::decode(s.model(), std::slice::from_ref(&user), &resolved.for_turn(0)).unwrap();
    assert_eq!(r.tokens, direct.tokens);
    assert_eq!(r.log_prob, direct.log_prob);
    let words: Vec<&str> = r.tokens.iter().map(|&t| s.vocab().token(t).unwrap()).collect();
    assert_eq!(r.response, detokenize(&words));
    if r.finished {
        let d = Dialogue::new(vec![user.clone(), r.tokens.clone()]).unwrap();
        let lp = s.model().token_log_probs(&d).unwrap();
        let tail: f64 = lp[user.len()..].iter().sum();
        assert_eq!(tail, r.log_prob);
    }
}

#[test]
fn settings_overrides_and_validation() {
    let s = svc();
    let bad = [
        SettingsJson {
            width: Some(0),
            ..Default::default()
        },
        SettingsJson {
            temperature: Some(0.0),
            ..Default::default()
        },
        SettingsJson {
            mode: Some("greedy".into()),
            ..Default::default()
        },
        SettingsJson {
            max_len: Some(0),
            ..Default::default()
        },
    ];
    for b in &bad {
        assert!(matches!(s.create_session(b), Err(ServiceError::Settings(_))));
    }
    let id = s.create_session(&SettingsJson::default()).unwrap().session_id;
    assert!(s.chat_turn(&id, "hello", Some(&bad[0])).is_err());
    // A rejected override leaves the session untouched.
    assert_eq!(s.session_state(&id).unwrap().settings, Settings::default());
    s.chat_turn(
        &id,
        "hello",
        Some(&SettingsJson {
            max_len: Some(2),
            ..Default::default()
        }),
    )
    .unwrap();
    assert_eq!(s.session_state(&id).unwrap().settings.max_len, 2);
}

#[test]
fn session_errors_and_lifecycle() {
    let s = svc();
    assert!(matches!(
        s.chat_turn("nope", "hi", None),
        Err(ServiceError::UnknownSession(_))
    ));
    let id = s.create_session(&SettingsJson::default()).unwrap().session_id;
    assert!(matches!(
        s.chat_turn(&id, "   ", None),
        Err(ServiceError::EmptyUtterance)
    ));
    assert!(s.session_state(&id).unwrap().history.is_empty());
    // Unknown words still make a valid turn through <unk>.
    let r = s.chat_turn(&id, "zebra", None).unwrap();
    assert_eq!(r.turn, 2);
    s.delete_session(&id).unwrap();
    assert!(s.delete_session(&id).is_err());
}

#[test]
fn idle_sessions_are_evicted() {
    let s = service(Duration::from_millis(20));
    s.create_session(&SettingsJson::default()).unwrap();
    assert_eq!(s.session_count(), 1);
    std::thread::sleep(Duration::from_millis(40));
    assert_eq!(s.evict_idle(), 1);
    assert_eq!(s.session_count(), 0);
}

#[test]
fn model_info_reports_dims_and_hash() {
    let s = svc();
    let info = s.model_info();
    assert_eq!(info.variant, "hred");
    assert_eq!((info.vocab_size, info.d_e, info.d_h), (13, 4, 6));
    assert_eq!(info.vocab_hash, s.vocab().hash_hex());
}
