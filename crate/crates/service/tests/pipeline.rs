mod common;

use common::{email, kit_images, snapshot, Env};
use pisco_core::cluster::{Decision, Label};
use pisco_service::pipeline::{CLUSTER_FILE, DEAD_LETTER_FILE, INDEX_FILE};
use pisco_service::{Pipeline, StatsKind};

/// Three emails, the first two rendering as variants of one kit and the third
/// as a different kit.
fn three(env: &Env) -> [Vec<u8>; 3] {
    let imgs = kit_images(5, 2, 2);
    let a = email("Spring sale", "Up to 70% off today", 2);
    let b = email("Spring sale", "Up to 60% off this week", 9);
    let c = email("Account notice", "Your statement is ready", 12);
    env.add_fixture(&a, &imgs[0].image);
    env.add_fixture(&b, &imgs[1].image);
    env.add_fixture(&c, &imgs[2].image);
    [a, b, c]
}

#[test]
fn ingest_label_score() {
    let env = Env::new();
    let [a, b, c] = three(&env);
    let p = env.open();
    let first = p.ingest_email(&a, "a.eml", 0).unwrap();
    assert_eq!(first.verdict.decision, Decision::Unknown);
    assert_eq!(first.verdict.matched_cluster, None);
    assert_eq!(p.cluster_count(), 1);

    p.label_cluster(first.cluster_id, Label::Spam).unwrap();
    let vb = p.score_email(&b).unwrap();
    assert_eq!(vb.decision, Decision::Spam);
    assert_eq!(vb.matched_cluster, Some(first.cluster_id));
    assert!(vb.score >= p.tau());
    let vc = p.score_email(&c).unwrap();
    assert_eq!(vc.decision, Decision::Unknown);

    let ob = p.ingest_email(&b, "b.eml", 0).unwrap();
    assert_eq!(ob.cluster_id, first.cluster_id);
    assert_eq!(ob.verdict.decision, Decision::Spam);
    let oc = p.ingest_email(&c, "c.eml", 0).unwrap();
    assert_ne!(oc.cluster_id, first.cluster_id);
    assert_eq!(p.email_count(), 3);
    assert_eq!(p.cluster_count(), 2);

    let life = p.lifespan_stats();
    let row = life.iter().find(|r| r.cluster_id == first.cluster_id).unwrap();
    assert_eq!(row.lifespan_seconds, 7 * 86_400);
    assert_eq!(row.member_count, 2);
    assert!(p.stats_csv(StatsKind::Histogram).starts_with("cluster_size,cluster_count\n1,1\n2,1\n"));
}

#[test]
fn missing_fixture_is_tagged_and_dead_lettered() {
    let env = Env::new();
    let [a, ..] = three(&env);
    let p = env.open();
    p.ingest_email(&a, "a.eml", 0).unwrap();
    let before = snapshot(&env.data());

    let unknown = email("Never rendered", "no fixture for this one", 3);
    let err = p.ingest_email(&unknown, "x.eml", 0).unwrap_err();
    assert_eq!(err.tag(), "render/FixtureMissing");
    assert!(err.to_string().starts_with("render/FixtureMissing: "));
    assert!(err.email_id.is_some());
    assert_eq!(p.email_count(), 1);

    let after: Vec<_> = snapshot(&env.data())
        .into_iter()
        .filter(|(n, _)| n != DEAD_LETTER_FILE)
        .collect();
    assert_eq!(before, after);

    let log = std::fs::read_to_string(env.data().join(DEAD_LETTER_FILE)).unwrap();
    let line: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(line["error"], "render/FixtureMissing");
    assert_eq!(line["stage"], "render");
    assert_eq!(line["source"], "x.eml");
    assert_eq!(line["email_id"], serde_json::json!(err.email_id));
}

#[test]
fn unparseable_message_fails_in_parse_stage() {
    let env = Env::new();
    let p = env.open();
    let err = p.ingest_email(b"", "empty.eml", 0).unwrap_err();
    assert_eq!(err.stage, "parse");
    assert_eq!(p.email_count(), 0);
}

#[test]
fn duplicate_ingest_rejected_without_change() {
    let env = Env::new();
    let [a, ..] = three(&env);
    let p = env.open();
    p.ingest_email(&a, "a.eml", 0).unwrap();
    let before = snapshot(&env.data());
    let err = p.ingest_email(&a, "a-again.eml", 0).unwrap_err();
    assert_eq!(err.kind, "DuplicateId");
    assert_eq!(p.email_count(), 1);
    let after: Vec<_> = snapshot(&env.data())
        .into_iter()
        .filter(|(n, _)| n != DEAD_LETTER_FILE)
        .collect();
    assert_eq!(before, after);
}

#[test]
fn score_is_read_only() {
    let env = Env::new();
    let [a, b, c] = three(&env);
    let p = env.open();
    p.ingest_email(&a, "a.eml", 0).unwrap();
    let before = snapshot(&env.data());
    for raw in [&a, &b, &c] {
        p.score_email(raw).unwrap();
    }
    assert_eq!(snapshot(&env.data()), before);
    assert_eq!(p.email_count(), 1);
}

#[test]
fn restart_reproduces_verdicts() {
    let env = Env::new();
    let [a, b, c] = three(&env);
    let (vb, vc) = {
        let p = env.open();
        let o = p.ingest_email(&a, "a.eml", 0).unwrap();
        p.label_cluster(o.cluster_id, Label::Clean).unwrap();
        (p.score_email(&b).unwrap(), p.score_email(&c).unwrap())
    };
    assert_eq!(vb.decision, Decision::Clean);
    let p = env.open();
    assert_eq!(p.email_count(), 1);
    assert_eq!(p.score_email(&b).unwrap(), vb);
    assert_eq!(p.score_email(&c).unwrap(), vc);
}

#[test]
fn batch_matches_sequential() {
    let imgs = kit_images(9, 3, 3);
    let env_a = Env::new();
    let env_b = Env::new();
    let raws: Vec<Vec<u8>> = (0..imgs.len())
        .map(|i| email(&format!("Offer {}", i / 3), &format!("variant {i}"), 1 + i as u32))
        .collect();
    for env in [&env_a, &env_b] {
        for (raw, s) in raws.iter().zip(&imgs) {
            env.add_fixture(raw, &s.image);
        }
    }
    let seq = env_a.open();
    for raw in &raws {
        seq.ingest_email(raw, "seq", 0).unwrap();
    }
    let batch = env_b.open();
    let items: Vec<_> = raws.iter().map(|r| (r.clone(), "batch".to_string(), 0)).collect();
    assert!(batch.ingest_batch(&items).iter().all(|r| r.is_ok()));
    assert_eq!(seq.cluster_count(), 3);
    for name in [INDEX_FILE, CLUSTER_FILE] {
        assert_eq!(
            std::fs::read(env_a.data().join(name)).unwrap(),
            std::fs::read(env_b.data().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn mismatched_state_refuses_to_open() {
    let env = Env::new();
    let [a, ..] = three(&env);
    env.open().ingest_email(&a, "a.eml", 0).unwrap();
    let mut cfg = env.config();
    cfg.index.kind = pisco_core::IndexKind::Flat;
    assert!(Pipeline::open(cfg).is_err());
    std::fs::remove_file(env.data().join(CLUSTER_FILE)).unwrap();
    assert!(Pipeline::open(env.config()).is_err());
}
