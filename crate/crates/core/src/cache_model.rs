//! Frozen support-set knowledge: per-layer MF-Unit matrices, global
//! embeddings, class text embeddings and the one-hot label matrix.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batch::{stack_high, stack_maps};
use crate::dataio::container::{ContainerReader, ContainerWriter};
use crate::dataio::FeatureBundle;
use crate::error::{Error, Result};
use crate::meta_feature::{build_meta_feature, induce_mf_unit, window_extent, Layer};
use crate::numerics::{l2_normalize_rows, Real, Tensor};

pub const CACHE_MAGIC: &[u8; 4] = b"MFUC";
pub const CACHE_VERSION: u32 = 1;

/// Support items processed per unfolding pass while building a cache.
const BUILD_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct MfUnitCache<T = f32> {
    /// Per layer `[NK × 2·ms]`, rows L2-normalised.
    pub per_layer: BTreeMap<Layer, Tensor<T>>,
    /// `[NK × N]`.
    pub labels_onehot: Tensor<T>,
    pub n_classes: usize,
    pub n_shots: usize,
    pub scale: usize,
    pub per_layer_ms: BTreeMap<Layer, usize>,
    /// Bundle ids of the support rows, in row order.
    pub support_ids: Vec<String>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalCache<T = f32> {
    /// `[NK × D]`, rows L2-normalised.
    pub high_features: Tensor<T>,
    /// `[N × D]`, rows L2-normalised.
    pub text_features: Tensor<T>,
}

impl<T: Real> MfUnitCache<T> {
    pub fn layers(&self) -> Vec<Layer> {
        self.per_layer.keys().copied().collect()
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn layer(&self, layer: Layer) -> Result<&Tensor<T>> {
        self.per_layer
            .get(&layer)
            .ok_or_else(|| Error::Validation(format!("{layer} is not cached")))
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (l, t) in &self.per_layer {
            h.update([l.id()]);
            t.feed(&mut h);
        }
        self.labels_onehot.feed(&mut h);
        for v in [self.n_classes, self.n_shots, self.scale] {
            h.update((v as u64).to_le_bytes());
        }
        for id in &self.support_ids {
            h.update(id.as_bytes());
            h.update([0]);
        }
        crate::numerics::hex_digest(h)
    }
}

impl<T: Real> GlobalCache<T> {
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.high_features.feed(&mut h);
        self.text_features.feed(&mut h);
        crate::numerics::hex_digest(h)
    }
}

pub fn one_hot<T: Real>(labels: &[usize], n_classes: usize) -> Result<Tensor<T>> {
    if labels.is_empty() || n_classes == 0 {
        return Err(Error::Validation("one-hot needs labels and classes".into()));
    }
    let mut t = Tensor::zeros(&[labels.len(), n_classes]);
    for (r, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(Error::Index {
                op: "one_hot",
                index: y,
                bound: n_classes,
            });
        }
        t.data_mut()[r * n_classes + y] = T::one();
    }
    Ok(t)
}

/// Flattened, row-normalised MF-Units `[n × 2·ms]` of the given items.
pub fn support_units<T: Real>(
    bundle: &FeatureBundle,
    indices: &[usize],
    layer: Layer,
    scale: usize,
) -> Result<Tensor<T>> {
    let mut parts = Vec::new();
    for chunk in indices.chunks(BUILD_CHUNK) {
        let maps = stack_maps::<T>(bundle, chunk, None, layer)?;
        let unit = induce_mf_unit(&build_meta_feature(&maps, layer, scale)?);
        let ms = unit.values.dim(2);
        let flat = unit.values.reshape(vec![chunk.len(), 2 * ms])?;
        parts.push(l2_normalize_rows(&flat)?);
    }
    Tensor::concat_rows(&parts)
}

/// Builds both caches from the support items `support` of `bundle`.
///
/// Rows are reordered class-major (stable within a class). Every class must
/// contribute the same number of shots.
pub fn build_cache<T: Real>(
    bundle: &FeatureBundle,
    support: &[usize],
    scale: usize,
    layers: &[Layer],
) -> Result<(MfUnitCache<T>, GlobalCache<T>)> {
    let n = bundle.n_classes();
    if support.is_empty() {
        return Err(Error::Validation("support set is empty".into()));
    }
    if layers.is_empty() {
        return Err(Error::Validation(
            "at least one local layer is required".into(),
        ));
    }
    for &layer in layers {
        bundle.geometry.layer(layer)?;
    }
    let mut order = support.to_vec();
    for &i in &order {
        if i >= bundle.items.len() {
            return Err(Error::Index {
                op: "build_cache",
                index: i,
                bound: bundle.items.len(),
            });
        }
    }
    order.sort_by_key(|&i| bundle.items[i].label);
    let labels: Vec<usize> = order.iter().map(|&i| bundle.items[i].label).collect();
    let mut counts = vec![0usize; n];
    for &y in &labels {
        counts[y] += 1;
    }
    let k = counts[0];
    if k == 0 || counts.iter().any(|&c| c != k) {
        let listing: Vec<String> = counts
            .iter()
            .enumerate()
            .map(|(c, m)| format!("{}={m}", bundle.class_names[c]))
            .collect();
        return Err(Error::Validation(format!(
            "support set is unbalanced: {}",
            listing.join(", ")
        )));
    }

    let mut per_layer = BTreeMap::new();
    let mut per_layer_ms = BTreeMap::new();
    for &layer in layers {
        let g = bundle.geometry.layer(layer)?;
        let units = support_units::<T>(bundle, &order, layer, scale)?;
        per_layer_ms.insert(layer, window_extent(g.height, g.width, scale)?);
        per_layer.insert(layer, units);
    }
    let cache = MfUnitCache {
        per_layer,
        labels_onehot: one_hot(&labels, n)?,
        n_classes: n,
        n_shots: k,
        scale,
        per_layer_ms,
        support_ids: order
            .iter()
            .map(|&i| bundle.items[i].item_id.clone())
            .collect(),
        labels,
    };
    let global = GlobalCache {
        high_features: l2_normalize_rows(&stack_high::<T>(bundle, &order, None)?)?,
        text_features: l2_normalize_rows(&bundle.text_features.cast::<T>())?,
    };
    Ok((cache, global))
}

#[derive(Serialize, Deserialize)]
struct SupportMeta {
    ids: Vec<String>,
    labels: Vec<usize>,
}

fn header_overflow(at: usize, what: &str) -> Error {
    Error::format(at, format!("{what} does not fit the header field"))
}

/// Encodes both caches as one `MFUC` file.
pub fn serialize_cache(cache: &MfUnitCache<f32>, global: &GlobalCache<f32>) -> Result<Vec<u8>> {
    let mut w = ContainerWriter::new(CACHE_MAGIC, CACHE_VERSION);
    w.header_u32(u32::try_from(cache.n_classes).map_err(|_| header_overflow(8, "N"))?);
    w.header_u32(u32::try_from(cache.n_shots).map_err(|_| header_overflow(12, "K"))?);
    w.header_u32(cache.scale as u32);
    w.header_u8(cache.per_layer.len() as u8);
    for l in cache.per_layer.keys() {
        w.header_u8(l.id());
    }
    for l in cache.per_layer.keys() {
        w.header_u64(cache.per_layer_ms[l] as u64);
    }
    for (l, t) in &cache.per_layer {
        w.tensor(format!("{}/units", l.tag()), t);
    }
    w.tensor("labels_onehot", &cache.labels_onehot);
    w.tensor("high", &global.high_features);
    w.tensor("text", &global.text_features);
    let meta = SupportMeta {
        ids: cache.support_ids.clone(),
        labels: cache.labels.clone(),
    };
    w.blob(
        "support",
        serde_json::to_vec(&meta).expect("support meta serialises"),
    );
    Ok(w.finish())
}

struct CacheHeader {
    n: usize,
    k: usize,
    scale: usize,
    layers: Vec<(Layer, usize)>,
}

pub fn deserialize_cache(bytes: &[u8]) -> Result<(MfUnitCache<f32>, GlobalCache<f32>)> {
    let (h, r) = ContainerReader::open(bytes, CACHE_MAGIC, CACHE_VERSION, |c| {
        let n = c.u32()? as usize;
        let k = c.u32()? as usize;
        let scale_at = c.pos();
        let scale = c.u32()? as usize;
        if !(1..=crate::meta_feature::MAX_SCALE).contains(&scale) {
            return Err(Error::format(
                scale_at,
                format!("scale {scale} out of range"),
            ));
        }
        let count = c.u8()? as usize;
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            let at = c.pos();
            ids.push(Layer::from_id(c.u8()?).map_err(|e| Error::format(at, e.to_string()))?);
        }
        let mut layers = Vec::with_capacity(count);
        for l in ids {
            layers.push((l, c.len_u64(bytes.len(), "window extent")?));
        }
        Ok(CacheHeader {
            n,
            k,
            scale,
            layers,
        })
    })?;
    let support: SupportMeta = r.json("support")?;
    let nk = h.n * h.k;
    let bad = |what: String| Error::format(0, what);
    if support.ids.len() != nk || support.labels.len() != nk {
        return Err(bad(format!(
            "support lists have {} ids / {} labels, header implies {nk}",
            support.ids.len(),
            support.labels.len()
        )));
    }
    let mut per_layer = BTreeMap::new();
    let mut per_layer_ms = BTreeMap::new();
    for (l, ms) in &h.layers {
        let t = r.tensor(&format!("{}/units", l.tag()))?;
        if t.shape() != [nk, 2 * ms] {
            return Err(bad(format!(
                "{l} units {:?}, expected [{nk}, {}]",
                t.shape(),
                2 * ms
            )));
        }
        per_layer.insert(*l, t);
        per_layer_ms.insert(*l, *ms);
    }
    let labels_onehot = r.tensor("labels_onehot")?;
    if labels_onehot != one_hot(&support.labels, h.n)? {
        return Err(bad("one-hot matrix disagrees with support labels".into()));
    }
    let high_features = r.tensor("high")?;
    let text_features = r.tensor("text")?;
    if high_features.rank() != 2
        || high_features.dim(0) != nk
        || text_features.rank() != 2
        || text_features.dim(0) != h.n
        || text_features.dim(1) != high_features.dim(1)
    {
        return Err(bad(format!(
            "global cache shapes {:?} / {:?} inconsistent with N={} K={}",
            high_features.shape(),
            text_features.shape(),
            h.n,
            h.k
        )));
    }
    Ok((
        MfUnitCache {
            per_layer,
            labels_onehot,
            n_classes: h.n,
            n_shots: h.k,
            scale: h.scale,
            per_layer_ms,
            support_ids: support.ids,
            labels: support.labels,
        },
        GlobalCache {
            high_features,
            text_features,
        },
    ))
}

pub fn write_cache(path: &Path, cache: &MfUnitCache<f32>, global: &GlobalCache<f32>) -> Result<()> {
    fs::write(path, serialize_cache(cache, global)?).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: &Path) -> Result<(MfUnitCache<f32>, GlobalCache<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    deserialize_cache(&bytes)
}
