use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::bundle::{FeatureBundle, FeatureItem, FeatureView, Geometry, Split, SplitManifest};
use crate::error::{Error, Result};
use crate::meta_feature::Layer;
use crate::numerics::{l2_normalize_rows, Tensor};
use crate::par;

/// Standard deviation of augmented views around their source item.
const VIEW_JITTER: f32 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_classes: usize,
    /// Support candidates per class.
    pub shots: usize,
    pub test_per_class: usize,
    pub geometry: Geometry,
    /// Expected distance between two class centres, in units of the
    /// per-coordinate noise standard deviation.
    pub separation: f64,
    pub seed: u64,
    #[serde(default)]
    pub views: usize,
}

struct Centers {
    maps: BTreeMap<Layer, Vec<Vec<f32>>>,
    high: Vec<Vec<f32>>,
    directions: Vec<Vec<f32>>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Each coordinate of a centre has standard deviation `sep / √(2·dim)`, so two
/// independent centres are `sep` apart in expectation (squared-distance sense).
fn center_scale(separation: f64, dim: usize) -> f32 {
    (separation / (2.0 * dim as f64).sqrt()) as f32
}

fn draw_centers(cfg: &SynthConfig) -> Centers {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.geometry.embed_dim;
    let mut maps = BTreeMap::new();
    for (layer, g) in &cfg.geometry.layers {
        let dim = g.channels * g.height * g.width;
        let s = center_scale(cfg.separation, dim);
        let per_class = (0..cfg.n_classes)
            .map(|_| gaussian(&mut rng, dim).into_iter().map(|v| v * s).collect())
            .collect();
        maps.insert(*layer, per_class);
    }
    let s = center_scale(cfg.separation, d);
    let directions: Vec<Vec<f32>> = (0..cfg.n_classes).map(|_| gaussian(&mut rng, d)).collect();
    let high = directions
        .iter()
        .map(|z| z.iter().map(|v| v * s).collect())
        .collect();
    Centers {
        maps,
        high,
        directions,
    }
}

fn noisy(center: &[f32], rng: &mut ChaCha8Rng, sigma: f32) -> Vec<f32> {
    center
        .iter()
        .map(|&c| {
            let z: f32 = StandardNormal.sample(rng);
            c + sigma * z
        })
        .collect::<Vec<f32>>()
}

/// Gaussian class clusters: every item is its class centre plus unit-variance
/// noise. Text rows are the normalised class directions. Items are laid out
/// class-major, support candidates first, and the split assignment is stored
/// in the bundle.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<FeatureBundle> {
    cfg.geometry.validate()?;
    if cfg.n_classes == 0 || cfg.shots + cfg.test_per_class == 0 {
        return Err(Error::Validation(
            "synthetic bundle needs at least one class and one item per class".into(),
        ));
    }
    if !(cfg.separation >= 0.0 && cfg.separation.is_finite()) {
        return Err(Error::Validation(format!(
            "separation must be finite and ≥ 0, got {}",
            cfg.separation
        )));
    }
    let centers = draw_centers(cfg);
    let per_class = cfg.shots + cfg.test_per_class;
    let total = cfg.n_classes * per_class;

    let geometry = &cfg.geometry;
    let items: Vec<FeatureItem> = par::map_indices(total, |i| {
        let label = i / per_class;
        let slot = i % per_class;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64 + 1);
        let view = |base: Option<&FeatureView>, rng: &mut ChaCha8Rng| {
            let mut low_maps = BTreeMap::new();
            for (layer, g) in &geometry.layers {
                let (src, sigma) = match base {
                    Some(b) => (b.low_maps[layer].data(), VIEW_JITTER),
                    None => (centers.maps[layer][label].as_slice(), 1.0),
                };
                let data = noisy(src, rng, sigma);
                low_maps.insert(*layer, Tensor::from_parts(g.shape().to_vec(), data));
            }
            let (src, sigma) = match base {
                Some(b) => (b.high.data(), VIEW_JITTER),
                None => (centers.high[label].as_slice(), 1.0),
            };
            let high = Tensor::from_parts(vec![geometry.embed_dim], noisy(src, rng, sigma));
            FeatureView { low_maps, high }
        };
        let features = view(None, &mut rng);
        let augmented_views = if slot < cfg.shots {
            (0..cfg.views)
                .map(|_| view(Some(&features), &mut rng))
                .collect()
        } else {
            Vec::new()
        };
        let item_id = if slot < cfg.shots {
            format!("c{label:03}-s{slot:03}")
        } else {
            format!("c{label:03}-t{:03}", slot - cfg.shots)
        };
        FeatureItem {
            item_id,
            label,
            features,
            augmented_views,
        }
    });

    let splits = SplitManifest {
        splits: items
            .iter()
            .enumerate()
            .map(|(i, it)| {
                let split = if i % per_class < cfg.shots {
                    Split::Support
                } else {
                    Split::Test
                };
                (it.item_id.clone(), split)
            })
            .collect(),
    };
    let d = geometry.embed_dim;
    let dirs: Vec<f32> = centers.directions.concat();
    let text_features = l2_normalize_rows(&Tensor::from_parts(vec![cfg.n_classes, d], dirs))?;
    let bundle = FeatureBundle {
        items,
        class_names: (0..cfg.n_classes)
            .map(|k| format!("class_{k:03}"))
            .collect(),
        text_features,
        encoder_tag: "synthetic".into(),
        geometry: geometry.clone(),
        splits: Some(splits),
    };
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(separation: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            n_classes: 40,
            shots: 2,
            test_per_class: 1,
            geometry: Geometry::small(),
            separation,
            seed,
            views: 0,
        }
    }

    #[test]
    fn mean_center_distance_is_separation() {
        let c = draw_centers(&cfg(6.0, 1));
        let (mut acc, mut pairs) = (0.0f64, 0);
        for set in c.maps.values().chain(std::iter::once(&c.high)) {
            for a in 0..set.len() {
                for b in a + 1..set.len() {
                    acc += set[a]
                        .iter()
                        .zip(&set[b])
                        .map(|(x, y)| ((x - y) as f64).powi(2))
                        .sum::<f64>();
                    pairs += 1;
                }
            }
        }
        let rms = (acc / pairs as f64).sqrt();
        assert!((rms - 6.0).abs() < 0.3, "{rms}");
    }

    #[test]
    fn zero_separation_has_identical_centers() {
        let c = draw_centers(&cfg(0.0, 2));
        assert!(c.high.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn ids_and_splits() {
        let b = generate_synthetic(&SynthConfig {
            n_classes: 2,
            ..cfg(1.0, 0)
        })
        .unwrap();
        let ids: Vec<&str> = b.items.iter().map(|i| i.item_id.as_str()).collect();
        assert_eq!(
            ids,
            [
                "c000-s000",
                "c000-s001",
                "c000-t000",
                "c001-s000",
                "c001-s001",
                "c001-t000"
            ]
        );
        let m = b.splits.unwrap();
        assert_eq!(m.get("c001-s001"), Some(Split::Support));
        assert_eq!(m.get("c001-t000"), Some(Split::Test));
    }
}
