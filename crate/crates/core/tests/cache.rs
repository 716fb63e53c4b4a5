mod common;

use common::*;
use mf_adapter::adapter::{adapter_forward, local_logits, LayerParams};
use mf_adapter::cache_model::{
    build_cache, deserialize_cache, one_hot, read_cache, serialize_cache, write_cache,
};
use mf_adapter::dataio::{FeatureBundle, Geometry, Split};
use mf_adapter::fusion::Affinity;
use mf_adapter::meta_feature::build_meta_feature;
use mf_adapter::numerics::row_norms;
use mf_adapter::{Error, Layer, Tensor};

fn bundle() -> FeatureBundle {
    synth(4, 4, 2, 3.0, 17, Geometry::small())
}

/// Relabel so that class `k` becomes `perm[k]`.
fn relabel(b: &FeatureBundle, perm: &[usize]) -> FeatureBundle {
    let mut out = b.clone();
    for it in &mut out.items {
        it.label = perm[it.label];
    }
    let d = b.text_features.dim(1);
    let mut text = vec![0.0f32; b.text_features.len()];
    let mut names = b.class_names.clone();
    for (k, &p) in perm.iter().enumerate() {
        text[p * d..(p + 1) * d].copy_from_slice(b.text_features.row(k));
        names[p] = b.class_names[k].clone();
    }
    out.text_features = Tensor::new(vec![perm.len(), d], text).unwrap();
    out.class_names = names;
    out
}

#[test]
fn rebuild_is_identical() {
    let b = bundle();
    let s = episode(&b, 4, 3);
    let (c1, g1) = caches::<f32>(&b, &s, 2);
    let (c2, g2) = caches::<f32>(&b, &s, 2);
    assert_eq!(c1.checksum(), c2.checksum());
    assert_eq!(g1.checksum(), g2.checksum());
    assert_eq!(
        serialize_cache(&c1, &g1).unwrap(),
        serialize_cache(&c2, &g2).unwrap()
    );
}

#[test]
fn support_order_does_not_matter() {
    let b = bundle();
    let s = episode(&b, 4, 3);
    let mut rev = s.clone();
    rev.reverse();
    let (a, _) = caches::<f32>(&b, &s, 2);
    let (r, _) = caches::<f32>(&b, &rev, 2);
    // Class-major layout is restored; within a class the given order is kept.
    assert_eq!(a.labels, r.labels);
    let mut ids_a = a.support_ids.clone();
    let mut ids_r = r.support_ids.clone();
    ids_a.sort();
    ids_r.sort();
    assert_eq!(ids_a, ids_r);
}

#[test]
fn layout_and_normalisation() {
    let b = bundle();
    let s = episode(&b, 4, 0);
    let (cache, global) = caches::<f32>(&b, &s, 2);
    assert_eq!(cache.rows(), 16);
    assert_eq!(
        cache.labels,
        vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3]
    );
    assert_eq!(
        cache.labels_onehot,
        one_hot::<f32>(&cache.labels, 4).unwrap()
    );
    for layer in Layer::ALL {
        let t = cache.layer(layer).unwrap();
        assert_eq!(t.shape(), &[16, 2 * cache.per_layer_ms[&layer]]);
        assert!(row_norms(t).unwrap().iter().all(|n| (n - 1.0).abs() < 1e-5));
    }
    assert_eq!(global.high_features.shape(), &[16, 64]);
    assert_eq!(global.text_features.shape(), &[4, 64]);
    assert!(row_norms(&global.high_features)
        .unwrap()
        .iter()
        .all(|n| (n - 1.0).abs() < 1e-5));
}

#[test]
fn class_permutation_permutes_rows() {
    let b = bundle();
    let s = episode(&b, 4, 5);
    let perm = [2, 0, 3, 1];
    let p = relabel(&b, &perm);
    let (c, g) = caches::<f32>(&b, &s, 2);
    let (cp, gp) = caches::<f32>(&p, &s, 2);
    let k = 4;
    for (class, &to) in perm.iter().enumerate() {
        for layer in Layer::ALL {
            let (a, bp) = (c.layer(layer).unwrap(), cp.layer(layer).unwrap());
            for r in 0..k {
                assert_eq!(a.row(class * k + r), bp.row(to * k + r));
            }
        }
        assert_eq!(g.text_features.row(class), gp.text_features.row(to));
    }
}

#[test]
fn unbalanced_support_is_rejected() {
    let b = bundle();
    let mut s = episode(&b, 4, 1);
    s.pop();
    assert!(matches!(
        build_cache::<f32>(&b, &s, 2, &Layer::ALL),
        Err(Error::Validation(_))
    ));
}

#[test]
fn scale_mismatch_is_a_dimension_error() {
    let b = bundle();
    let s = episode(&b, 4, 1);
    let (cache, _) = caches::<f32>(&b, &s, 1);
    let tests = split_items(&b, Split::Test);
    let map = mf_adapter::batch::stack_maps::<f32>(&b, &tests, None, Layer::Layer3).unwrap();
    let mf = build_meta_feature(&map, Layer::Layer3, 2).unwrap();
    let adapted = adapter_forward(&mf, &LayerParams::zeros(mf.channels())).unwrap();
    match local_logits(&adapted, &cache, Layer::Layer3, Affinity::Exp) {
        Err(Error::Dimension { detail, .. }) => assert!(detail.contains("scale 1"), "{detail}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn file_round_trip_and_corruption() {
    let b = bundle();
    let s = episode(&b, 2, 1);
    let (cache, global) = caches::<f32>(&b, &s, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.mfuc");
    write_cache(&path, &cache, &global).unwrap();
    let (c2, g2) = read_cache(&path).unwrap();
    assert_eq!(c2, cache);
    assert_eq!(g2, global);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[1] = b'?';
    assert!(matches!(
        deserialize_cache(&bytes),
        Err(Error::Format { offset: 0, .. })
    ));
    let good = std::fs::read(&path).unwrap();
    for cut in [3, 9, good.len() / 2, good.len() - 1] {
        assert!(matches!(
            deserialize_cache(&good[..cut]),
            Err(Error::Format { .. })
        ));
    }
}

#[test]
fn single_layer_cache() {
    let b = bundle();
    let s = episode(&b, 2, 1);
    let (cache, _) = build_cache::<f32>(&b, &s, 2, &[Layer::Layer4]).unwrap();
    assert_eq!(cache.layers(), vec![Layer::Layer4]);
    assert!(cache.layer(Layer::Layer3).is_err());
}
