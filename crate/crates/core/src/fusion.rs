//! Local, high-level and text branches and their fusion into final logits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterParams, MfAdapter};
use crate::batch::QueryBatch;
use crate::cache_model::{support_units, GlobalCache, MfUnitCache};
use crate::dataio::FeatureBundle;
use crate::error::{Error, Result};
use crate::meta_feature::Layer;
use crate::numerics::{matmul, matmul_nt, Real, Tensor};

/// Items evaluated per forward pass.
pub const EVAL_CHUNK: usize = 256;

/// Map from cosine similarity to cache affinity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Affinity {
    /// `exp(s)`.
    #[default]
    Exp,
    /// `exp(-β(1 - s))`.
    Sharpened { beta: f64 },
}

impl Affinity {
    #[inline]
    pub fn apply(self, s: f64) -> f64 {
        match self {
            Affinity::Exp => s.exp(),
            Affinity::Sharpened { beta } => (-beta * (1.0 - s)).exp(),
        }
    }

    /// `d apply / d s`, given `value = apply(s)`.
    #[inline]
    pub fn slope(self, value: f64) -> f64 {
        match self {
            Affinity::Exp => value,
            Affinity::Sharpened { beta } => beta * value,
        }
    }
}

/// Per-branch multipliers on the fused sum. All ones is the plain sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchWeights {
    pub local3: f64,
    pub local4: f64,
    pub high: f64,
    pub text: f64,
}

impl Default for BranchWeights {
    fn default() -> Self {
        BranchWeights {
            local3: 1.0,
            local4: 1.0,
            high: 1.0,
            text: 1.0,
        }
    }
}

impl BranchWeights {
    pub fn local(&self, layer: Layer) -> f64 {
        match layer {
            Layer::Layer3 => self.local3,
            Layer::Layer4 => self.local4,
        }
    }

    pub fn text_only() -> Self {
        BranchWeights {
            local3: 0.0,
            local4: 0.0,
            high: 0.0,
            text: 1.0,
        }
    }

    /// Unit weight for each named branch, zero for the rest. Names are
    /// `local` (both layers), `local3`, `local4`, `high` and `text`.
    pub fn from_branches<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut w = BranchWeights {
            local3: 0.0,
            local4: 0.0,
            high: 0.0,
            text: 0.0,
        };
        for n in names {
            match n.as_ref().trim() {
                "local" => {
                    w.local3 = 1.0;
                    w.local4 = 1.0;
                }
                "local3" => w.local3 = 1.0,
                "local4" => w.local4 = 1.0,
                "high" => w.high = 1.0,
                "text" => w.text = 1.0,
                other => {
                    return Err(Error::Validation(format!(
                        "unknown branch {other:?} (expected local, local3, local4, high, text)"
                    )))
                }
            }
        }
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.local3, self.local4, self.high, self.text] {
            if !v.is_finite() {
                return Err(Error::Validation("branch weights must be finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FusionConfig {
    pub weights: BranchWeights,
    pub affinity: Affinity,
}

/// Applies `affinity` elementwise to a similarity matrix.
pub(crate) fn apply_affinity<T: Real>(s: &Tensor<T>, affinity: Affinity) -> Result<Tensor<T>> {
    s.map(|v| T::of(affinity.apply(v.wide())))
        .ensure_finite("affinity")
}

/// `affinity(query · keysᵀ) · L` for row-normalised queries and keys; also
/// returns the `[B × NK]` affinity matrix.
pub fn retrieval_logits<T: Real>(
    query: &Tensor<T>,
    keys: &Tensor<T>,
    labels_onehot: &Tensor<T>,
    affinity: Affinity,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if query.rank() != 2 || keys.rank() != 2 || query.dim(1) != keys.dim(1) {
        return Err(Error::dim(
            "retrieval_logits",
            format!("query {:?} vs cache {:?}", query.shape(), keys.shape()),
        ));
    }
    let e = apply_affinity(&matmul_nt(query, keys)?, affinity)?;
    let logits = matmul(&e, labels_onehot)?;
    Ok((logits, e))
}

/// High-level branch: `affinity(f_high · f_high_supportᵀ) · L`.
pub fn high_logits<T: Real>(
    query_high: &Tensor<T>,
    global: &GlobalCache<T>,
    labels_onehot: &Tensor<T>,
    affinity: Affinity,
) -> Result<Tensor<T>> {
    Ok(retrieval_logits(query_high, &global.high_features, labels_onehot, affinity)?.0)
}

/// Text branch: cosine similarities `f_high · f_textᵀ`.
pub fn text_logits<T: Real>(
    query_high: &Tensor<T>,
    text_features: &Tensor<T>,
) -> Result<Tensor<T>> {
    matmul_nt(query_high, text_features)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitsReport<T = f32> {
    pub lg_local: BTreeMap<Layer, Tensor<T>>,
    pub lg_high: Tensor<T>,
    pub lg_text: Tensor<T>,
    pub lg_final: Tensor<T>,
    pub predictions: Vec<usize>,
}

impl<T: Real> LogitsReport<T> {
    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    /// Concatenates reports along the batch axis.
    pub fn concat(parts: Vec<LogitsReport<T>>) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("LogitsReport::concat", "no reports"))?;
        let layers: Vec<Layer> = first.lg_local.keys().copied().collect();
        let gather = |f: &dyn Fn(&LogitsReport<T>) -> Tensor<T>| {
            Tensor::concat_rows(&parts.iter().map(f).collect::<Vec<_>>())
        };
        let mut lg_local = BTreeMap::new();
        for l in layers {
            lg_local.insert(
                l,
                gather(&|p| {
                    p.lg_local
                        .get(&l)
                        .cloned()
                        .unwrap_or_else(|| p.lg_final.scale(T::zero()))
                })?,
            );
        }
        Ok(LogitsReport {
            lg_local,
            lg_high: gather(&|p| p.lg_high.clone())?,
            lg_text: gather(&|p| p.lg_text.clone())?,
            lg_final: gather(&|p| p.lg_final.clone())?,
            predictions: parts
                .iter()
                .flat_map(|p| p.predictions.iter().copied())
                .collect(),
        })
    }
}

/// Weighted elementwise sum of the branches plus argmax predictions.
pub fn fuse<T: Real>(
    lg_local: BTreeMap<Layer, Tensor<T>>,
    lg_high: Tensor<T>,
    lg_text: Tensor<T>,
    weights: &BranchWeights,
) -> Result<LogitsReport<T>> {
    weights.validate()?;
    let shape = lg_text.shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::dim(
            "fuse",
            format!("branch logits must be [B×N], got {shape:?}"),
        ));
    }
    let mut acc = vec![0.0f64; lg_text.len()];
    let mut add = |t: &Tensor<T>, w: f64, name: &str| -> Result<()> {
        if t.shape() != shape.as_slice() {
            return Err(Error::dim(
                "fuse",
                format!("{name} logits {:?} vs {shape:?}", t.shape()),
            ));
        }
        for (a, v) in acc.iter_mut().zip(t.data()) {
            *a += w * v.wide();
        }
        Ok(())
    };
    for (l, t) in &lg_local {
        add(t, weights.local(*l), "local")?;
    }
    add(&lg_high, weights.high, "high")?;
    add(&lg_text, weights.text, "text")?;
    let lg_final =
        Tensor::new(shape.clone(), acc.into_iter().map(T::of).collect())?.ensure_finite("fuse")?;
    let predictions = lg_final.rows().map(argmax).collect();
    Ok(LogitsReport {
        lg_local,
        lg_high,
        lg_text,
        lg_final,
        predictions,
    })
}

/// Local logits of the parameter-free path: the queries' own MF-Units
/// (max/mean induction) retrieved against the cache.
pub fn induced_local_logits<T: Real>(
    bundle: &FeatureBundle,
    indices: &[usize],
    cache: &MfUnitCache<T>,
    layer: Layer,
    affinity: Affinity,
) -> Result<Tensor<T>> {
    let query = support_units::<T>(bundle, indices, layer, cache.scale)?;
    Ok(retrieval_logits(&query, cache.layer(layer)?, &cache.labels_onehot, affinity)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation<T = f32> {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Accuracy of each branch's argmax on its own, keyed `local3`, `local4`,
    /// `high`, `text`, `fused`.
    pub branch_accuracy: BTreeMap<String, f64>,
    pub item_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub report: LogitsReport<T>,
}

fn accuracy_of<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let hits = logits
        .rows()
        .zip(labels)
        .filter(|(r, &y)| argmax(r) == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Top-1 accuracy of the fused model over `items`.
pub fn evaluate<T: Real>(
    bundle: &FeatureBundle,
    items: &[usize],
    cache: &MfUnitCache<T>,
    global: &GlobalCache<T>,
    params: &AdapterParams<T>,
    fusion: &FusionConfig,
) -> Result<Evaluation<T>> {
    if items.is_empty() {
        return Err(Error::Validation("no items to evaluate".into()));
    }
    let layers = params.layers();
    let mut model = MfAdapter::new(params.clone());
    let mut parts = Vec::new();
    for chunk in items.chunks(EVAL_CHUNK) {
        let batch = QueryBatch::from_bundle(bundle, chunk, None, &layers, cache.scale)?;
        parts.push(model.forward(&batch, cache, global, fusion, false)?);
    }
    let report = LogitsReport::concat(parts)?;
    let labels: Vec<usize> = items.iter().map(|&i| bundle.items[i].label).collect();
    let correct = report
        .predictions
        .iter()
        .zip(&labels)
        .filter(|(p, y)| p == y)
        .count();
    let mut branch_accuracy = BTreeMap::new();
    for (l, t) in &report.lg_local {
        branch_accuracy.insert(format!("local{}", l.id()), accuracy_of(t, &labels));
    }
    branch_accuracy.insert("high".into(), accuracy_of(&report.lg_high, &labels));
    branch_accuracy.insert("text".into(), accuracy_of(&report.lg_text, &labels));
    let accuracy = correct as f64 / items.len() as f64;
    branch_accuracy.insert("fused".into(), accuracy);
    Ok(Evaluation {
        accuracy,
        correct,
        total: items.len(),
        branch_accuracy,
        item_ids: items
            .iter()
            .map(|&i| bundle.items[i].item_id.clone())
            .collect(),
        labels,
        report,
    })
}

/// One line of the line-delimited logits export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitRecord {
    pub item_id: String,
    pub label: usize,
    pub prediction: usize,
    pub lg_local: BTreeMap<String, Vec<f32>>,
    pub lg_high: Vec<f32>,
    pub lg_text: Vec<f32>,
    pub lg_final: Vec<f32>,
}

impl<T: Real> Evaluation<T> {
    pub fn records(&self) -> impl Iterator<Item = LogitRecord> + '_ {
        let row = |t: &Tensor<T>, i: usize| t.row(i).iter().map(|v| v.wide() as f32).collect();
        (0..self.total).map(move |i| LogitRecord {
            item_id: self.item_ids[i].clone(),
            label: self.labels[i],
            prediction: self.report.predictions[i],
            lg_local: self
                .report
                .lg_local
                .iter()
                .map(|(l, t)| (l.to_string(), row(t, i)))
                .collect(),
            lg_high: row(&self.report.lg_high, i),
            lg_text: row(&self.report.lg_text, i),
            lg_final: row(&self.report.lg_final, i),
        })
    }
}
