use std::collections::HashMap;

use pisco_core::cluster::ClusterStore;
use pisco_core::imgproc::{preprocess, PreprocessConfig};
use pisco_core::synthcorpus::{generate, score_clustering, CampaignSpec};
use pisco_core::{cosine, embed_reference, EmbeddingVector};

fn embed_all(spec: &CampaignSpec) -> (Vec<pisco_core::synthcorpus::SynthEmail>, Vec<EmbeddingVector>) {
    let corpus = generate(spec).unwrap();
    let cfg = PreprocessConfig::default();
    let vecs = corpus
        .iter()
        .map(|e| embed_reference(&preprocess(&e.image, &cfg).unwrap()))
        .collect();
    (corpus, vecs)
}

#[test]
fn two_kits_separate() {
    let spec = CampaignSpec {
        seed: 11,
        n_kits: 2,
        variants_per_kit: 6,
        ..Default::default()
    };
    let (corpus, vecs) = embed_all(&spec);
    let mut within = f64::INFINITY;
    let mut cross = f64::NEG_INFINITY;
    for i in 0..vecs.len() {
        for j in i + 1..vecs.len() {
            let c = cosine(&vecs[i], &vecs[j]).unwrap();
            if corpus[i].kit_id == corpus[j].kit_id {
                within = within.min(c);
            } else {
                cross = cross.max(c);
            }
        }
    }
    assert!(cross < within, "cross {cross} within {within}");
}

#[test]
fn default_perturbations_stay_within_calibration() {
    let spec = CampaignSpec {
        seed: 7,
        n_kits: 20,
        variants_per_kit: 5,
        ..Default::default()
    };
    let (corpus, vecs) = embed_all(&spec);
    for i in 0..vecs.len() {
        for j in i + 1..vecs.len() {
            let c = cosine(&vecs[i], &vecs[j]).unwrap();
            let (a, b) = (&corpus[i], &corpus[j]);
            if a.kit_id == b.kit_id {
                assert!(c > 0.95, "{} vs {}: {c}", a.email_id, b.email_id);
            } else {
                assert!(c < 0.8, "{} vs {}: {c}", a.email_id, b.email_id);
            }
        }
    }
}

#[test]
fn replayed_campaign_lifespans_match_timestamps() {
    let start = 1_711_929_600;
    let spec = CampaignSpec {
        seed: 3,
        n_kits: 6,
        variants_per_kit: 8,
        time_window: (start, start + 30 * 86_400),
        ..Default::default()
    };
    let (corpus, vecs) = embed_all(&spec);
    let mut store = ClusterStore::new(256, "ref-grid-v1");
    let mut truth = HashMap::new();
    let mut predicted = HashMap::new();
    for (e, v) in corpus.iter().zip(&vecs) {
        let (c, _) = store.assign(&e.email_id, v, e.received_at, 0.92).unwrap();
        truth.insert(e.email_id.clone(), e.kit_id);
        predicted.insert(e.email_id.clone(), c);
    }
    let score = score_clustering(&truth, &predicted).unwrap();
    assert_eq!((score.precision, score.recall), (1.0, 1.0));

    let mut oracle: HashMap<usize, (i64, i64)> = HashMap::new();
    for e in &corpus {
        let slot = oracle.entry(e.kit_id).or_insert((i64::MAX, i64::MIN));
        slot.0 = slot.0.min(e.received_at);
        slot.1 = slot.1.max(e.received_at);
    }
    for row in store.lifespan_stats() {
        let member = &store.get(row.cluster_id).unwrap().members[0].email_id;
        let kit = truth[member];
        let (lo, hi) = oracle[&kit];
        assert_eq!((row.first_seen, row.last_seen, row.lifespan_seconds), (lo, hi, hi - lo));
        assert_eq!(row.member_count, 8);
    }
}
