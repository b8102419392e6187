use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use oddvlm::evaluation::{
    classification_recall, match_detections, BBox, ClassificationSample, DetectionSample, Instance,
};
use oddvlm::retrieval::{KnowledgeBase, LexicalEmbedder};
use oddvlm::{Point, Prediction, PredictionSet, Taxonomy};

const LABELS: [&str; 3] = ["crosswalk_zebra", "street_light", "traffic_sign_front"];

fn detection_case(rng: &mut ChaCha8Rng) -> (PredictionSet, DetectionSample) {
    let preds = (0..rng.gen_range(0..=6))
        .map(|_| {
            let label = LABELS[rng.gen_range(0..LABELS.len())];
            Prediction::detection(label, 1, Point::new(rng.gen(), rng.gen()), "s")
        })
        .collect();
    let instances = (0..rng.gen_range(0..=6))
        .map(|_| {
            let (x, y): (f64, f64) = (rng.gen(), rng.gen());
            Instance {
                concept_id: LABELS[rng.gen_range(0..LABELS.len())].to_string(),
                bbox: BBox::new([x * 0.9, y * 0.9, x * 0.9 + 0.1, y * 0.9 + 0.1]).unwrap(),
            }
        })
        .collect();
    let set = PredictionSet {
        predictions: preds,
        ..Default::default()
    };
    let sample = DetectionSample {
        sample_id: "s".into(),
        image_path: "s.jpg".into(),
        instances,
    };
    (set, sample)
}

/// Largest label-equal matching within `tau`, by exhaustive search.
fn max_matching(preds: &PredictionSet, sample: &DetectionSample, tau: f64) -> usize {
    fn go(i: usize, adj: &[Vec<usize>], used: &mut Vec<bool>) -> usize {
        if i == adj.len() {
            return 0;
        }
        let mut best = go(i + 1, adj, used);
        for &j in &adj[i] {
            if !used[j] {
                used[j] = true;
                best = best.max(1 + go(i + 1, adj, used));
                used[j] = false;
            }
        }
        best
    }
    let adj: Vec<Vec<usize>> = preds
        .predictions
        .iter()
        .map(|p| {
            sample
                .instances
                .iter()
                .enumerate()
                .filter(|(_, g)| {
                    g.concept_id == p.concept_id && p.center.unwrap().distance(&g.bbox.center()) <= tau
                })
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    go(0, &adj, &mut vec![false; sample.instances.len()])
}

proptest! {
    #[test]
    fn matching_is_sound(seed in any::<u64>(), tau in 0.05f64..0.8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (preds, sample) = detection_case(&mut rng);
        let m = match_detections(&preds, &sample, tau);
        let mut pu = vec![false; preds.len()];
        let mut gu = vec![false; sample.instances.len()];
        for pair in &m.pairs {
            prop_assert!(!pu[pair.prediction] && !gu[pair.ground_truth]);
            pu[pair.prediction] = true;
            gu[pair.ground_truth] = true;
            let p = &preds.predictions[pair.prediction];
            let g = &sample.instances[pair.ground_truth];
            prop_assert_eq!(&p.concept_id, &g.concept_id);
            prop_assert!(pair.distance <= tau);
            prop_assert!((pair.distance - p.center.unwrap().distance(&g.bbox.center())).abs() < 1e-12);
        }
        prop_assert_eq!(m.pairs.len() + m.unmatched_predictions.len(), preds.len());
        prop_assert_eq!(m.pairs.len() + m.unmatched_ground_truths.len(), sample.instances.len());
    }

    #[test]
    fn recall_decomposes_over_categories(picks in prop::collection::vec((0usize..232, any::<bool>()), 1..80)) {
        let tax = Taxonomy::reference();
        let ids: Vec<&str> = tax.ids().collect();
        let runs: Vec<(ClassificationSample, PredictionSet)> = picks
            .iter()
            .enumerate()
            .map(|(i, (c, hit))| {
                let gt = ids[*c];
                let predicted = if *hit { gt } else { ids[(c + 1) % ids.len()] };
                (
                    ClassificationSample {
                        sample_id: format!("s{i}"),
                        image_path: "x.jpg".into(),
                        concept_id: gt.to_string(),
                    },
                    PredictionSet::new(vec![Prediction::label(predicted, 1, "flat")]),
                )
            })
            .collect();
        let b = classification_recall(&runs, &tax).unwrap();
        let weighted: f64 = b.per_category.values().map(|g| g.recall * g.samples as f64).sum::<f64>() / b.samples as f64;
        prop_assert!((weighted - b.recall).abs() < 1e-12);
        let n: usize = b.per_category.values().map(|g| g.samples).sum();
        prop_assert_eq!(n, runs.len());
    }
}

#[test]
fn greedy_matches_maximum_cardinality_in_most_cases() {
    let cases = 2000;
    let mut equal = 0;
    for seed in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (preds, sample) = detection_case(&mut rng);
        let greedy = match_detections(&preds, &sample, 0.5).pairs.len();
        let best = max_matching(&preds, &sample, 0.5);
        assert!(greedy <= best, "seed {seed}: greedy {greedy} exceeds optimum {best}");
        equal += usize::from(greedy == best);
    }
    let rate = equal as f64 / cases as f64;
    assert!(rate >= 0.95, "greedy optimal in only {rate:.4} of cases");
}

fn tie_heavy_docs(rng: &mut ChaCha8Rng) -> Vec<(String, String)> {
    let words = ["rain", "fog", "snow", "lane", "sign"];
    (0..30)
        .map(|i| {
            let text: Vec<&str> = (0..rng.gen_range(1..3)).map(|_| words[rng.gen_range(0..words.len())]).collect();
            (format!("c{i:02}"), text.join(" "))
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ranking_ignores_document_order(seed in any::<u64>(), query in "(rain|fog|snow|lane|sign)( (rain|fog|snow|lane|sign)){0,3}", k in 0usize..32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let docs = tie_heavy_docs(&mut rng);
        let embedder = LexicalEmbedder::fit(&docs.iter().map(|(_, d)| d.as_str()).collect::<Vec<_>>());
        let mut shuffled = docs.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let rt = tokio::runtime::Builder::new_current_thread().build().unwrap();
        let (a, b) = rt.block_on(async {
            (
                KnowledgeBase::from_documents(docs, &embedder).await.unwrap(),
                KnowledgeBase::from_documents(shuffled, &embedder).await.unwrap(),
            )
        });
        let q = embedder.embed_one(&query);
        let ra = a.rank(&q, None, k).unwrap();
        let rb = b.rank(&q, None, k).unwrap();
        prop_assert_eq!(&ra, &rb);
        let by_score: BTreeMap<String, f64> = ra.iter().map(|h| (h.concept_id.clone(), h.score)).collect();
        prop_assert_eq!(by_score.len(), ra.len());
    }
}
