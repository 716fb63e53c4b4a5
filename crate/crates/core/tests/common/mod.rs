#![allow(dead_code)]

use mf_adapter::adapter::{AdapterParams, MfAdapter, TrainConfig};
use mf_adapter::batch::QueryBatch;
use mf_adapter::cache_model::{build_cache, GlobalCache, MfUnitCache};
use mf_adapter::dataio::{
    generate_synthetic, sample_episode, EpisodeSpec, FeatureBundle, Geometry, Split, SynthConfig,
};
use mf_adapter::fusion::FusionConfig;
use mf_adapter::numerics::softmax_cross_entropy;
use mf_adapter::{Layer, Real, Tensor};

pub fn synth(
    n_classes: usize,
    shots: usize,
    test_per_class: usize,
    separation: f64,
    seed: u64,
    geometry: Geometry,
) -> FeatureBundle {
    generate_synthetic(&SynthConfig {
        n_classes,
        shots,
        test_per_class,
        geometry,
        separation,
        seed,
        views: 0,
    })
    .unwrap()
}

pub fn split_items(bundle: &FeatureBundle, split: Split) -> Vec<usize> {
    let m = bundle.splits.as_ref().unwrap();
    (0..bundle.items.len())
        .filter(|&i| m.get(&bundle.items[i].item_id) == Some(split))
        .collect()
}

pub fn episode(bundle: &FeatureBundle, shots: usize, seed: u64) -> Vec<usize> {
    let spec = EpisodeSpec {
        n_shots: shots,
        seed,
    };
    sample_episode(bundle, bundle.splits.as_ref().unwrap(), &spec)
        .unwrap()
        .support
}

pub fn caches<T: Real>(
    bundle: &FeatureBundle,
    support: &[usize],
    scale: usize,
) -> (MfUnitCache<T>, GlobalCache<T>) {
    build_cache(bundle, support, scale, &Layer::ALL).unwrap()
}

/// Direct transcription of the unfold definition: window `(r, s)` at dilation
/// `d` reads taps `(r + ki·d, s + kj·d)`; rows are `channel·4 + ki·2 + kj`.
pub fn naive_unfold(map: &Tensor<f32>, d: usize) -> (Vec<usize>, Vec<f32>) {
    let (b, c, h, w) = (map.dim(0), map.dim(1), map.dim(2), map.dim(3));
    let (gh, gw) = (h - d, w - d);
    let m = gh * gw;
    let mut out = vec![0.0f32; b * c * 4 * m];
    let x = map.data();
    for bi in 0..b {
        for ch in 0..c {
            for ki in 0..2 {
                for kj in 0..2 {
                    for r in 0..gh {
                        for s in 0..gw {
                            let row = ch * 4 + ki * 2 + kj;
                            let src = ((bi * c + ch) * h + r + ki * d) * w + s + kj * d;
                            out[(bi * c * 4 + row) * m + r * gw + s] = x[src];
                        }
                    }
                }
            }
        }
    }
    (vec![b, c * 4, m], out)
}

/// Mean fused cross-entropy of a query batch and its gradient.
pub fn loss_and_grad<T: Real>(
    params: &AdapterParams<T>,
    batch: &QueryBatch<T>,
    cache: &MfUnitCache<T>,
    global: &GlobalCache<T>,
    fusion: &FusionConfig,
) -> (f64, AdapterParams<T>) {
    let mut adapter = MfAdapter::new(params.clone());
    let report = adapter.forward(batch, cache, global, fusion, true).unwrap();
    let (loss, d) = softmax_cross_entropy(&report.lg_final, &batch.labels).unwrap();
    (loss, adapter.backward(&d, cache).unwrap())
}

pub fn loss_only<T: Real>(
    params: &AdapterParams<T>,
    batch: &QueryBatch<T>,
    cache: &MfUnitCache<T>,
    global: &GlobalCache<T>,
    fusion: &FusionConfig,
) -> f64 {
    let mut adapter = MfAdapter::new(params.clone());
    let report = adapter
        .forward(batch, cache, global, fusion, false)
        .unwrap();
    softmax_cross_entropy(&report.lg_final, &batch.labels)
        .unwrap()
        .0
}

/// Largest relative error between the analytic gradient and central
/// differences over every parameter. `floor` keeps near-zero entries from
/// dominating through a vanishing denominator.
pub fn max_fd_error<T: Real>(
    params: &AdapterParams<T>,
    batch: &QueryBatch<T>,
    cache: &MfUnitCache<T>,
    global: &GlobalCache<T>,
    fusion: &FusionConfig,
    h: f64,
    floor: f64,
) -> f64 {
    let (_, grads) = loss_and_grad(params, batch, cache, global, fusion);
    let mut worst = 0.0f64;
    for layer in params.layers() {
        for which in 0..2 {
            let len = {
                let lp = params.layer(layer).unwrap();
                if which == 0 {
                    lp.weight.len()
                } else {
                    lp.bias.len()
                }
            };
            for k in 0..len {
                let shifted = |delta: f64| {
                    let mut p = params.clone();
                    let lp = p.per_layer.get_mut(&layer).unwrap();
                    let t = if which == 0 {
                        &mut lp.weight
                    } else {
                        &mut lp.bias
                    };
                    let v = &mut t.data_mut()[k];
                    *v = T::of(v.wide() + delta);
                    loss_only(&p, batch, cache, global, fusion)
                };
                let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
                let g = grads.layer(layer).unwrap();
                let analytic = if which == 0 {
                    g.weight.data()[k]
                } else {
                    g.bias.data()[k]
                }
                .wide();
                let denom = analytic.abs().max(numeric.abs()).max(floor);
                worst = worst.max((analytic - numeric).abs() / denom);
            }
        }
    }
    worst
}

/// The gradient-check setting: B = 2, N = 2, K = 1, two channels (c = 8),
/// 3×3 maps (ms = 5 at scale 2).
pub fn gradcheck_setup<T: Real>(
    seed: u64,
) -> (FeatureBundle, QueryBatch<T>, MfUnitCache<T>, GlobalCache<T>) {
    let bundle = synth(2, 1, 1, 2.0, seed, Geometry::new([2, 3, 3], [2, 3, 3], 8));
    let support = split_items(&bundle, Split::Support);
    let tests = split_items(&bundle, Split::Test);
    let (cache, global) = caches::<T>(&bundle, &support, 2);
    let batch = QueryBatch::from_bundle(&bundle, &tests, None, &Layer::ALL, 2).unwrap();
    (bundle, batch, cache, global)
}

pub fn init_params<T: Real>(bundle: &FeatureBundle, seed: u64, scale: usize) -> AdapterParams<T> {
    TrainConfig {
        seed,
        scale,
        ..TrainConfig::default()
    }
    .init_params(bundle)
    .unwrap()
}
