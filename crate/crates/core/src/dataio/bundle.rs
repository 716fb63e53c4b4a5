use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::{ContainerReader, ContainerWriter};
use crate::error::{Error, Result};
use crate::meta_feature::Layer;
use crate::numerics::Tensor;

pub const BUNDLE_MAGIC: &[u8; 4] = b"MFFB";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LayerGeometry {
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// Per-layer map shapes and the global embedding width `D`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub layers: BTreeMap<Layer, LayerGeometry>,
    pub embed_dim: usize,
}

impl Geometry {
    /// Geometry from `(C, h, w)` for layer 3 and layer 4 plus the embedding width.
    pub fn new(l3: [usize; 3], l4: [usize; 3], embed_dim: usize) -> Self {
        let g = |[channels, height, width]: [usize; 3]| LayerGeometry {
            channels,
            height,
            width,
        };
        Geometry {
            layers: BTreeMap::from([(Layer::Layer3, g(l3)), (Layer::Layer4, g(l4))]),
            embed_dim,
        }
    }

    /// CLIP ResNet-50 at 224×224 input: stage 3 is 1024×14×14, stage 4 is
    /// 2048×7×7, and the pooled embedding is 1024-wide.
    pub fn rn50() -> Self {
        Self::new([1024, 14, 14], [2048, 7, 7], 1024)
    }

    /// Desk-scale geometry for synthetic runs; both maps admit scale 5.
    pub fn small() -> Self {
        Self::new([4, 8, 8], [8, 6, 6], 64)
    }

    /// Single-channel maps. The adapter has very few parameters here, which
    /// makes its training behaviour easy to observe.
    pub fn compact() -> Self {
        Self::new([1, 8, 8], [1, 6, 6], 64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Validation("embedding width must be positive".into()));
        }
        for (layer, g) in &self.layers {
            if g.channels == 0 || g.height < 2 || g.width < 2 {
                return Err(Error::Validation(format!(
                    "{layer}: geometry {}x{}x{} needs C ≥ 1 and h, w ≥ 2",
                    g.channels, g.height, g.width
                )));
            }
        }
        Ok(())
    }

    pub fn layer(&self, layer: Layer) -> Result<&LayerGeometry> {
        self.layers
            .get(&layer)
            .ok_or_else(|| Error::Validation(format!("{layer} is not present in the bundle")))
    }
}

/// One encoded view of an image: low-level maps `[C×h×w]` and the global
/// embedding `[D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureView {
    pub low_maps: BTreeMap<Layer, Tensor<f32>>,
    pub high: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureItem {
    pub item_id: String,
    pub label: usize,
    pub features: FeatureView,
    /// Extra pre-exported augmentations of the same image.
    pub augmented_views: Vec<FeatureView>,
}

impl FeatureItem {
    /// View 0 is the item itself; `1..` index the augmentations.
    pub fn view(&self, i: usize) -> &FeatureView {
        if i == 0 {
            &self.features
        } else {
            &self.augmented_views[i - 1]
        }
    }

    pub fn view_count(&self) -> usize {
        1 + self.augmented_views.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Support,
    Test,
}

/// `{item_id → split}`; serialised as `{"splits": {...}}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub splits: BTreeMap<String, Split>,
}

impl SplitManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(e.column(), format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serialises");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn get(&self, id: &str) -> Option<Split> {
        self.splits.get(id).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub items: Vec<FeatureItem>,
    pub class_names: Vec<String>,
    /// `[N × D]`, one row per class.
    pub text_features: Tensor<f32>,
    pub encoder_tag: String,
    pub geometry: Geometry,
    /// Default split assignment shipped inside the bundle, if any.
    pub splits: Option<SplitManifest>,
}

#[derive(Serialize, Deserialize)]
struct ItemMeta {
    id: String,
    views: usize,
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    encoder_tag: String,
    class_names: Vec<String>,
    geometry: Geometry,
    items: Vec<ItemMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    splits: Option<SplitManifest>,
}

impl FeatureBundle {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }

    pub fn find(&self, id: &str) -> Option<usize> {
        self.items.iter().position(|i| i.item_id == id)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let n = self.n_classes();
        let d = self.geometry.embed_dim;
        if n == 0 {
            return Err(Error::Validation("bundle has no classes".into()));
        }
        if self.text_features.shape() != [n, d] {
            return Err(Error::Validation(format!(
                "text features {:?}, expected [{n}, {d}]",
                self.text_features.shape()
            )));
        }
        let mut seen = HashSet::new();
        for item in &self.items {
            if item.item_id.is_empty() || item.item_id.contains('/') {
                return Err(Error::Validation(format!(
                    "item id {:?} must be non-empty and free of '/'",
                    item.item_id
                )));
            }
            if !seen.insert(item.item_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate item id {:?}",
                    item.item_id
                )));
            }
            if item.label >= n {
                return Err(Error::Validation(format!(
                    "item {:?} has label {} but only {n} classes",
                    item.item_id, item.label
                )));
            }
            for view in std::iter::once(&item.features).chain(&item.augmented_views) {
                if view.high.shape() != [d] {
                    return Err(Error::Validation(format!(
                        "item {:?}: high feature {:?}, expected [{d}]",
                        item.item_id,
                        view.high.shape()
                    )));
                }
                if view.low_maps.len() != self.geometry.layers.len() {
                    return Err(Error::Validation(format!(
                        "item {:?} carries {} layers, geometry declares {}",
                        item.item_id,
                        view.low_maps.len(),
                        self.geometry.layers.len()
                    )));
                }
                for (layer, g) in &self.geometry.layers {
                    let map = view.low_maps.get(layer).ok_or_else(|| {
                        Error::Validation(format!("item {:?} lacks {layer}", item.item_id))
                    })?;
                    if map.shape() != g.shape() {
                        return Err(Error::Validation(format!(
                            "item {:?} {layer}: {:?}, expected {:?}",
                            item.item_id,
                            map.shape(),
                            g.shape()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Checks the bundle against a reference geometry such as [`Geometry::rn50`].
    pub fn matches_profile(&self, profile: &Geometry) -> Result<()> {
        self.validate()?;
        if &self.geometry != profile {
            return Err(Error::Validation(format!(
                "geometry {:?} does not match profile {:?}",
                self.geometry, profile
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = ContainerWriter::new(BUNDLE_MAGIC, BUNDLE_VERSION);
        let meta = BundleMeta {
            encoder_tag: self.encoder_tag.clone(),
            class_names: self.class_names.clone(),
            geometry: self.geometry.clone(),
            items: self
                .items
                .iter()
                .map(|i| ItemMeta {
                    id: i.item_id.clone(),
                    views: i.augmented_views.len(),
                })
                .collect(),
            splits: self.splits.clone(),
        };
        w.blob("meta", serde_json::to_vec(&meta).expect("meta serialises"));
        let labels: Vec<f32> = self.items.iter().map(|i| i.label as f32).collect();
        if !labels.is_empty() {
            w.tensor("labels", &Tensor::from_parts(vec![labels.len()], labels));
        }
        w.tensor("text", &self.text_features);
        for item in &self.items {
            let write_view = |w: &mut ContainerWriter, prefix: &str, v: &FeatureView| {
                for (layer, map) in &v.low_maps {
                    w.tensor(format!("{prefix}/{}", layer.tag()), map);
                }
                w.tensor(format!("{prefix}/high"), &v.high);
            };
            let prefix = format!("item/{}", item.item_id);
            write_view(&mut w, &prefix, &item.features);
            for (k, v) in item.augmented_views.iter().enumerate() {
                write_view(&mut w, &format!("{prefix}/view{}", k + 1), v);
            }
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, r) = ContainerReader::open(bytes, BUNDLE_MAGIC, BUNDLE_VERSION, |_| Ok(()))?;
        let meta: BundleMeta = r.json("meta")?;
        let labels = if meta.items.is_empty() {
            Vec::new()
        } else {
            let t = r.tensor("labels")?;
            if t.shape() != [meta.items.len()] {
                return Err(Error::format(
                    0,
                    format!("labels {:?} for {} items", t.shape(), meta.items.len()),
                ));
            }
            t.data()
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 && v < (1u32 << 24) as f32 {
                        Ok(v as usize)
                    } else {
                        Err(Error::format(0, format!("label {v} is not a class index")))
                    }
                })
                .collect::<Result<_>>()?
        };
        let read_view = |prefix: &str| -> Result<FeatureView> {
            let mut low_maps = BTreeMap::new();
            for layer in meta.geometry.layers.keys() {
                low_maps.insert(*layer, r.tensor(&format!("{prefix}/{}", layer.tag()))?);
            }
            Ok(FeatureView {
                low_maps,
                high: r.tensor(&format!("{prefix}/high"))?,
            })
        };
        let mut items = Vec::with_capacity(meta.items.len());
        for (im, label) in meta.items.iter().zip(labels) {
            let prefix = format!("item/{}", im.id);
            let features = read_view(&prefix)?;
            let augmented_views = (1..=im.views)
                .map(|k| read_view(&format!("{prefix}/view{k}")))
                .collect::<Result<_>>()?;
            items.push(FeatureItem {
                item_id: im.id.clone(),
                label,
                features,
                augmented_views,
            });
        }
        let bundle = FeatureBundle {
            items,
            class_names: meta.class_names,
            text_features: r.tensor("text")?,
            encoder_tag: meta.encoder_tag,
            geometry: meta.geometry,
            splits: meta.splits,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

pub fn write_bundle(bundle: &FeatureBundle, path: &Path) -> Result<()> {
    let bytes = bundle.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bundle(path: &Path) -> Result<FeatureBundle> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureBundle::from_bytes(&bytes)
}
