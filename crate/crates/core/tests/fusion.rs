mod common;

use common::*;
use mf_adapter::adapter::{train, TrainConfig};
use mf_adapter::dataio::{FeatureBundle, Geometry, Split};
use mf_adapter::fusion::{argmax, evaluate, BranchWeights, FusionConfig, LogitRecord};
use mf_adapter::numerics::l2_normalize_rows;
use mf_adapter::Tensor;

/// Zero-shot prediction straight from the definition: cosine between the
/// item's global embedding and each class text row.
fn zero_shot_accuracy(b: &FeatureBundle, items: &[usize]) -> f64 {
    let text = l2_normalize_rows(&b.text_features).unwrap();
    let hits = items
        .iter()
        .filter(|&&i| {
            let x = b.items[i].features.high.data();
            let n = x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            let scores: Vec<f32> = text
                .rows()
                .map(|t| {
                    (t.iter()
                        .zip(x)
                        .map(|(a, b)| (*a as f64) * (*b as f64))
                        .sum::<f64>()
                        / n) as f32
                })
                .collect();
            argmax(&scores) == b.items[i].label
        })
        .count();
    hits as f64 / items.len() as f64
}

#[test]
fn text_only_equals_zero_shot() {
    for seed in 0..3 {
        let b = synth(5, 4, 10, 1.0, seed, Geometry::small());
        let s = split_items(&b, Split::Support);
        let t = split_items(&b, Split::Test);
        let (cache, global) = caches::<f32>(&b, &s, 2);
        let params = init_params::<f32>(&b, seed, 2);
        let fusion = FusionConfig {
            weights: BranchWeights::text_only(),
            ..FusionConfig::default()
        };
        let eval = evaluate(&b, &t, &cache, &global, &params, &fusion).unwrap();
        assert_eq!(eval.accuracy, zero_shot_accuracy(&b, &t));
        assert_eq!(eval.branch_accuracy["text"], eval.accuracy);
    }
}

#[test]
fn well_separated_is_perfect_untrained() {
    let b = synth(5, 4, 10, 50.0, 3, Geometry::small());
    let s = split_items(&b, Split::Support);
    let t = split_items(&b, Split::Test);
    let (cache, global) = caches::<f32>(&b, &s, 2);
    let eval = evaluate(
        &b,
        &t,
        &cache,
        &global,
        &init_params(&b, 0, 2),
        &FusionConfig::default(),
    )
    .unwrap();
    assert_eq!(eval.accuracy, 1.0);
    assert_eq!(eval.correct, eval.total);
}

#[test]
fn duplicated_item_gets_identical_logits() {
    let b = synth(3, 2, 3, 2.0, 4, Geometry::small());
    let s = split_items(&b, Split::Support);
    let t = split_items(&b, Split::Test);
    let items = vec![t[0], t[1], t[0]];
    let (cache, global) = caches::<f32>(&b, &s, 2);
    let eval = evaluate(
        &b,
        &items,
        &cache,
        &global,
        &init_params(&b, 1, 2),
        &FusionConfig::default(),
    )
    .unwrap();
    let recs: Vec<LogitRecord> = eval.records().collect();
    assert_eq!(recs[0].lg_final, recs[2].lg_final);
    assert_eq!(recs[0].lg_local, recs[2].lg_local);
    assert_eq!(recs[0].prediction, recs[2].prediction);
}

#[test]
fn training_does_not_hurt_support_accuracy() {
    let b = synth(4, 8, 0, 3.0, 5, Geometry::compact());
    let s = episode(&b, 8, 5);
    let (cache, global) = caches::<f32>(&b, &s, 2);
    let config = TrainConfig {
        seed: 5,
        batch_size: 4,
        epochs: 20,
        ..TrainConfig::default()
    };
    let before = evaluate(
        &b,
        &s,
        &cache,
        &global,
        &config.init_params(&b).unwrap(),
        &config.fusion(),
    )
    .unwrap();
    let params = train(&b, &cache, &global, &config).unwrap().params;
    let after = evaluate(&b, &s, &cache, &global, &params, &config.fusion()).unwrap();
    assert!(
        after.accuracy >= before.accuracy,
        "{} < {}",
        after.accuracy,
        before.accuracy
    );
}

#[test]
fn class_permutation_permutes_logits() {
    let b = synth(4, 4, 3, 2.0, 6, Geometry::small());
    let perm = [3, 1, 0, 2];
    let mut p = b.clone();
    for it in &mut p.items {
        it.label = perm[it.label];
    }
    let d = b.text_features.dim(1);
    let mut text = vec![0.0f32; b.text_features.len()];
    for (k, &to) in perm.iter().enumerate() {
        text[to * d..(to + 1) * d].copy_from_slice(b.text_features.row(k));
    }
    p.text_features = Tensor::new(vec![4, d], text).unwrap();

    let s = split_items(&b, Split::Support);
    let t = split_items(&b, Split::Test);
    let params = init_params::<f32>(&b, 2, 2);
    let run = |bb: &FeatureBundle| {
        let (cache, global) = caches::<f32>(bb, &s, 2);
        evaluate(bb, &t, &cache, &global, &params, &FusionConfig::default()).unwrap()
    };
    let (e, ep) = (run(&b), run(&p));
    assert_eq!(e.accuracy, ep.accuracy);
    for r in 0..t.len() {
        let (row, rowp) = (e.report.lg_final.row(r), ep.report.lg_final.row(r));
        for (k, &to) in perm.iter().enumerate() {
            assert!((row[k] - rowp[to]).abs() < 1e-5);
        }
        assert_eq!(perm[e.report.predictions[r]], ep.report.predictions[r]);
    }
}

#[test]
fn records_serialise_one_per_item() {
    let b = synth(2, 2, 2, 2.0, 7, Geometry::small());
    let s = split_items(&b, Split::Support);
    let t = split_items(&b, Split::Test);
    let (cache, global) = caches::<f32>(&b, &s, 2);
    let eval = evaluate(
        &b,
        &t,
        &cache,
        &global,
        &init_params(&b, 0, 2),
        &FusionConfig::default(),
    )
    .unwrap();
    let lines: Vec<String> = eval
        .records()
        .map(|r| serde_json::to_string(&r).unwrap())
        .collect();
    assert_eq!(lines.len(), t.len());
    let back: LogitRecord = serde_json::from_str(&lines[0]).unwrap();
    assert_eq!(back.item_id, b.items[t[0]].item_id);
    assert_eq!(back.lg_final.len(), 2);
    assert_eq!(back.lg_local.len(), 2);
}

#[test]
fn branch_accuracy_keys() {
    let b = synth(3, 2, 2, 2.0, 8, Geometry::small());
    let s = split_items(&b, Split::Support);
    let t = split_items(&b, Split::Test);
    let (cache, global) = caches::<f32>(&b, &s, 2);
    let eval = evaluate(
        &b,
        &t,
        &cache,
        &global,
        &init_params(&b, 0, 2),
        &FusionConfig::default(),
    )
    .unwrap();
    let keys: Vec<&str> = eval.branch_accuracy.keys().map(|k| k.as_str()).collect();
    assert_eq!(keys, ["fused", "high", "local3", "local4", "text"]);
    assert!(eval
        .branch_accuracy
        .values()
        .all(|a| (0.0..=1.0).contains(a)));
}
