//! Assembles query batches from bundle items.

use std::collections::BTreeMap;

use crate::dataio::FeatureBundle;
use crate::error::{Error, Result};
use crate::meta_feature::{build_meta_feature, Layer, MetaFeature};
use crate::numerics::{l2_normalize_rows, Real, Tensor};

/// Everything the forward pass needs for a batch of query items.
#[derive(Debug, Clone)]
pub struct QueryBatch<T = f32> {
    pub meta: BTreeMap<Layer, MetaFeature<T>>,
    /// `[B × D]`, rows L2-normalised.
    pub high: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> QueryBatch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `views[i]` selects the view of `indices[i]` (0 = the item itself).
    pub fn from_bundle(
        bundle: &FeatureBundle,
        indices: &[usize],
        views: Option<&[usize]>,
        layers: &[Layer],
        scale: usize,
    ) -> Result<Self> {
        let mut meta = BTreeMap::new();
        for &layer in layers {
            let maps = stack_maps(bundle, indices, views, layer)?;
            meta.insert(layer, build_meta_feature(&maps, layer, scale)?);
        }
        Ok(QueryBatch {
            meta,
            high: l2_normalize_rows(&stack_high(bundle, indices, views)?)?,
            labels: indices.iter().map(|&i| bundle.items[i].label).collect(),
        })
    }
}

fn check_index(bundle: &FeatureBundle, i: usize) -> Result<()> {
    if i >= bundle.items.len() {
        return Err(Error::Index {
            op: "batch",
            index: i,
            bound: bundle.items.len(),
        });
    }
    Ok(())
}

/// `[B × C × h × w]` maps of one layer.
pub fn stack_maps<T: Real>(
    bundle: &FeatureBundle,
    indices: &[usize],
    views: Option<&[usize]>,
    layer: Layer,
) -> Result<Tensor<T>> {
    let g = bundle.geometry.layer(layer)?;
    let per = g.channels * g.height * g.width;
    let mut data = Vec::with_capacity(indices.len() * per);
    for (k, &i) in indices.iter().enumerate() {
        check_index(bundle, i)?;
        let v = views.map_or(0, |v| v[k]);
        let map = &bundle.items[i].view(v).low_maps[&layer];
        data.extend(map.data().iter().map(|x| T::of(*x as f64)));
    }
    Tensor::new(vec![indices.len(), g.channels, g.height, g.width], data)
}

/// `[B × D]` raw global embeddings.
pub fn stack_high<T: Real>(
    bundle: &FeatureBundle,
    indices: &[usize],
    views: Option<&[usize]>,
) -> Result<Tensor<T>> {
    let d = bundle.geometry.embed_dim;
    let mut data = Vec::with_capacity(indices.len() * d);
    for (k, &i) in indices.iter().enumerate() {
        check_index(bundle, i)?;
        let v = views.map_or(0, |v| v[k]);
        data.extend(
            bundle.items[i]
                .view(v)
                .high
                .data()
                .iter()
                .map(|x| T::of(*x as f64)),
        );
    }
    Tensor::new(vec![indices.len(), d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, Geometry, SynthConfig};

    #[test]
    fn shapes_and_normalised_high() {
        let b = generate_synthetic(&SynthConfig {
            n_classes: 2,
            shots: 2,
            test_per_class: 1,
            geometry: Geometry::small(),
            separation: 1.0,
            seed: 0,
            views: 1,
        })
        .unwrap();
        let q = QueryBatch::<f32>::from_bundle(&b, &[0, 4, 1], Some(&[1, 0, 0]), &Layer::ALL, 2)
            .unwrap();
        assert_eq!(q.len(), 3);
        assert_eq!(q.labels, vec![0, 1, 0]);
        assert_eq!(q.meta[&Layer::Layer3].values.shape(), &[3, 16, 85]);
        assert_eq!(q.meta[&Layer::Layer4].values.shape(), &[3, 32, 41]);
        for r in q.high.rows() {
            let n: f32 = r.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        let maps = stack_maps::<f32>(&b, &[0], Some(&[1]), Layer::Layer3).unwrap();
        assert_eq!(
            maps.data(),
            b.items[0].augmented_views[0].low_maps[&Layer::Layer3].data()
        );
        assert!(matches!(
            stack_high::<f32>(&b, &[99], None),
            Err(Error::Index { .. })
        ));
    }
}
