//! The trainable adapter: one pointwise 1-D convolution per local layer that
//! maps a meta-feature `[B × c × ms]` to an MF-Unit-shaped `[B × 2 × ms]`,
//! with hand-written reverse-mode gradients and the training loop.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batch::QueryBatch;
use crate::cache_model::{GlobalCache, MfUnitCache};
use crate::dataio::container::{ContainerReader, ContainerWriter};
use crate::dataio::FeatureBundle;
use crate::error::{Error, Result};
use crate::fusion::{
    fuse, high_logits, retrieval_logits, text_logits, Affinity, BranchWeights, FusionConfig,
    LogitsReport,
};
use crate::meta_feature::{Layer, MetaFeature, DEFAULT_SCALE, KERNEL};
use crate::numerics::{
    adam_step, l2_normalize_rows, matmul, matmul_nt, row_norms, softmax_cross_entropy, AdamState,
    Real, Tensor, NORM_EPS,
};
use crate::par;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MFAD";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Output channels of the adapter: one per induction (max, mean).
pub const OUT_CHANNELS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T = f32> {
    /// `[2 × c × 1]`.
    pub weight: Tensor<T>,
    /// `[2]`.
    pub bias: Tensor<T>,
}

impl<T: Real> LayerParams<T> {
    pub fn zeros(channels: usize) -> Self {
        LayerParams {
            weight: Tensor::zeros(&[OUT_CHANNELS, channels, 1]),
            bias: Tensor::zeros(&[OUT_CHANNELS]),
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.dim(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// `U(-1/√c, 1/√c)` for weights and bias.
    #[default]
    Uniform,
    /// As `Uniform`, but output channel 1 starts as the exact channel mean
    /// with zero bias.
    MeanWarmStart,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams<T = f32> {
    pub per_layer: BTreeMap<Layer, LayerParams<T>>,
}

/// Gradients share the parameter layout.
pub type AdapterGrads<T = f32> = AdapterParams<T>;

impl<T: Real> AdapterParams<T> {
    pub fn init(channels: &[(Layer, usize)], seed: u64, scheme: InitScheme) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut per_layer = BTreeMap::new();
        for &(layer, c) in channels {
            let bound = 1.0 / (c as f64).sqrt();
            let mut draw = || T::of(rng.random_range(-bound..bound));
            let mut weight = Tensor::from_fn(&[OUT_CHANNELS, c, 1], |_| draw());
            let mut bias = Tensor::from_fn(&[OUT_CHANNELS], |_| draw());
            if scheme == InitScheme::MeanWarmStart {
                for v in &mut weight.data_mut()[c..] {
                    *v = T::of(1.0 / c as f64);
                }
                bias.data_mut()[1] = T::zero();
            }
            per_layer.insert(layer, LayerParams { weight, bias });
        }
        AdapterParams { per_layer }
    }

    pub fn zeros_like(&self) -> Self {
        AdapterParams {
            per_layer: self
                .per_layer
                .iter()
                .map(|(l, p)| (*l, LayerParams::zeros(p.channels())))
                .collect(),
        }
    }

    pub fn layers(&self) -> Vec<Layer> {
        self.per_layer.keys().copied().collect()
    }

    pub fn layer(&self, layer: Layer) -> Result<&LayerParams<T>> {
        self.per_layer
            .get(&layer)
            .ok_or_else(|| Error::Validation(format!("adapter has no parameters for {layer}")))
    }

    pub fn is_finite(&self) -> bool {
        self.per_layer
            .values()
            .all(|p| p.weight.is_finite() && p.bias.is_finite())
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (l, p) in &self.per_layer {
            h.update([l.id()]);
            p.weight.feed(&mut h);
            p.bias.feed(&mut h);
        }
        crate::numerics::hex_digest(h)
    }

    pub fn cast<U: Real>(&self) -> AdapterParams<U> {
        AdapterParams {
            per_layer: self
                .per_layer
                .iter()
                .map(|(l, p)| {
                    (
                        *l,
                        LayerParams {
                            weight: p.weight.cast(),
                            bias: p.bias.cast(),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// `out[b,o,j] = bias[o] + Σ_i weight[o,i,0] · mf[b,i,j]`.
pub fn adapter_forward<T: Real>(mf: &MetaFeature<T>, params: &LayerParams<T>) -> Result<Tensor<T>> {
    let (b, c, ms) = (mf.batch(), mf.channels(), mf.width());
    if params.channels() != c {
        return Err(Error::dim(
            "adapter_forward",
            format!(
                "{}: meta-feature has {c} channels, adapter expects {}",
                mf.layer,
                params.channels()
            ),
        ));
    }
    let w = params.weight.data();
    let bias = params.bias.data();
    let src = mf.values.data();
    let mut out = vec![T::zero(); b * OUT_CHANNELS * ms];
    par::for_each_chunk_mut(&mut out, OUT_CHANNELS * ms, |i, dst| {
        let item = &src[i * c * ms..(i + 1) * c * ms];
        let mut acc = vec![0.0f64; ms];
        for o in 0..OUT_CHANNELS {
            acc.fill(bias[o].wide());
            for ch in 0..c {
                let wv = w[o * c + ch].wide();
                if wv == 0.0 {
                    continue;
                }
                for (a, x) in acc.iter_mut().zip(&item[ch * ms..(ch + 1) * ms]) {
                    *a += wv * x.wide();
                }
            }
            for (d, a) in dst[o * ms..(o + 1) * ms].iter_mut().zip(&acc) {
                *d = T::of(*a);
            }
        }
    });
    Tensor::from_parts(vec![b, OUT_CHANNELS, ms], out).ensure_finite("adapter_forward")
}

fn flatten_adapted<T: Real>(adapted: &Tensor<T>) -> Result<Tensor<T>> {
    match adapted.shape() {
        &[b, OUT_CHANNELS, ms] => adapted.clone().reshape(vec![b, OUT_CHANNELS * ms]),
        s => Err(Error::dim(
            "local_logits",
            format!("expected [B×2×ms], got {s:?}"),
        )),
    }
}

fn check_width<T: Real>(query: &Tensor<T>, cache: &MfUnitCache<T>, layer: Layer) -> Result<()> {
    let keys = cache.layer(layer)?;
    if query.dim(1) != keys.dim(1) {
        return Err(Error::dim(
            "local_logits",
            format!(
                "{layer}: query width {} vs cache width {} (cache scale {})",
                query.dim(1),
                keys.dim(1),
                cache.scale
            ),
        ));
    }
    Ok(())
}

/// Local branch of one layer: flatten, row-normalise, retrieve against the
/// cached MF-Units, aggregate by label.
pub fn local_logits<T: Real>(
    adapted: &Tensor<T>,
    cache: &MfUnitCache<T>,
    layer: Layer,
    affinity: Affinity,
) -> Result<Tensor<T>> {
    let flat = flatten_adapted(adapted)?;
    check_width(&flat, cache, layer)?;
    let q = l2_normalize_rows(&flat)?;
    Ok(retrieval_logits(&q, cache.layer(layer)?, &cache.labels_onehot, affinity)?.0)
}

struct LocalTrace<T> {
    input: Tensor<T>,
    raw_norms: Vec<f64>,
    query: Tensor<T>,
    affinity: Tensor<T>,
}

struct ForwardTrace<T> {
    layers: BTreeMap<Layer, LocalTrace<T>>,
    fusion: FusionConfig,
    batch: usize,
    n_classes: usize,
}

/// Adapter parameters plus the intermediates of the last recorded forward pass.
pub struct MfAdapter<T = f32> {
    pub params: AdapterParams<T>,
    trace: Option<ForwardTrace<T>>,
}

impl<T: Real> MfAdapter<T> {
    pub fn new(params: AdapterParams<T>) -> Self {
        MfAdapter {
            params,
            trace: None,
        }
    }

    pub fn into_params(self) -> AdapterParams<T> {
        self.params
    }

    /// Full three-branch forward pass. With `record`, keeps what
    /// [`MfAdapter::backward`] needs.
    pub fn forward(
        &mut self,
        batch: &QueryBatch<T>,
        cache: &MfUnitCache<T>,
        global: &GlobalCache<T>,
        fusion: &FusionConfig,
        record: bool,
    ) -> Result<LogitsReport<T>> {
        self.trace = None;
        let mut lg_local = BTreeMap::new();
        let mut traces = BTreeMap::new();
        for (&layer, params) in &self.params.per_layer {
            let mf = batch.meta.get(&layer).ok_or_else(|| {
                Error::Validation(format!("query batch lacks meta-features for {layer}"))
            })?;
            let adapted = adapter_forward(mf, params)?;
            let flat = flatten_adapted(&adapted)?;
            check_width(&flat, cache, layer)?;
            let raw_norms = row_norms(&flat)?;
            let query = l2_normalize_rows(&flat)?;
            let (logits, affinity) = retrieval_logits(
                &query,
                cache.layer(layer)?,
                &cache.labels_onehot,
                fusion.affinity,
            )?;
            lg_local.insert(layer, logits);
            if record {
                traces.insert(
                    layer,
                    LocalTrace {
                        input: mf.values.clone(),
                        raw_norms,
                        query,
                        affinity,
                    },
                );
            }
        }
        let lg_high = high_logits(&batch.high, global, &cache.labels_onehot, fusion.affinity)?;
        let lg_text = text_logits(&batch.high, &global.text_features)?;
        let report = fuse(lg_local, lg_high, lg_text, &fusion.weights)?;
        if record {
            self.trace = Some(ForwardTrace {
                layers: traces,
                fusion: *fusion,
                batch: batch.len(),
                n_classes: cache.n_classes,
            });
        }
        Ok(report)
    }

    /// Parameter gradients of a scalar loss, given `∂loss/∂LG` at the fused
    /// logits. Consumes the recorded forward intermediates.
    pub fn backward(
        &mut self,
        d_logits: &Tensor<T>,
        cache: &MfUnitCache<T>,
    ) -> Result<AdapterGrads<T>> {
        let trace = self.trace.take().ok_or_else(|| {
            Error::State("backward called without a recorded forward pass".into())
        })?;
        if d_logits.shape() != [trace.batch, trace.n_classes] {
            return Err(Error::dim(
                "backward",
                format!(
                    "upstream gradient {:?}, forward produced [{}, {}]",
                    d_logits.shape(),
                    trace.batch,
                    trace.n_classes
                ),
            ));
        }
        let mut grads = self.params.zeros_like();
        for (layer, lt) in &trace.layers {
            let w = trace.fusion.weights.local(*layer);
            let g = grads.per_layer.get_mut(layer).expect("grads mirror params");
            if w == 0.0 {
                continue;
            }
            let d_local = d_logits.scale(T::of(w));
            // through the label aggregation and the affinity
            let d_aff = matmul_nt(&d_local, &cache.labels_onehot)?;
            let affinity = trace.fusion.affinity;
            let d_sim = d_aff.zip_with(&lt.affinity, "backward", |g, e| {
                T::of(g.wide() * affinity.slope(e.wide()))
            })?;
            // similarity = query · cacheᵀ with the cache held constant
            let d_query = matmul(&d_sim, cache.layer(*layer)?)?;
            let d_raw = normalize_backward(&lt.query, &lt.raw_norms, &d_query);
            let (dw, db) = conv_backward(&lt.input, &d_raw, g.channels());
            g.weight = dw;
            g.bias = db;
        }
        Ok(grads)
    }
}

/// Vector-Jacobian product of `x ↦ x / max(‖x‖, ε)` per row:
/// `(g − x̂ (x̂·g)) / ‖x‖`, or `g / ε` below the floor.
fn normalize_backward<T: Real>(
    normalized: &Tensor<T>,
    norms: &[f64],
    grad: &Tensor<T>,
) -> Tensor<T> {
    let cols = normalized.dim(1);
    let mut out = grad.clone();
    par::for_each_chunk_mut(out.data_mut(), cols, |i, row| {
        let n = norms[i];
        if n > NORM_EPS {
            let xh = normalized.row(i);
            let dot: f64 = xh
                .iter()
                .zip(row.iter())
                .map(|(a, b)| a.wide() * b.wide())
                .sum();
            for (r, x) in row.iter_mut().zip(xh) {
                *r = T::of((r.wide() - x.wide() * dot) / n);
            }
        } else {
            for r in row.iter_mut() {
                *r = T::of(r.wide() / NORM_EPS);
            }
        }
    });
    out
}

/// Weight and bias gradients of the pointwise convolution, reduced over the
/// batch in index order.
fn conv_backward<T: Real>(
    input: &Tensor<T>,
    d_out_flat: &Tensor<T>,
    c: usize,
) -> (Tensor<T>, Tensor<T>) {
    let (b, ms) = (input.dim(0), input.dim(2));
    let x = input.data();
    let g = d_out_flat.data();
    let partials: Vec<(Vec<f64>, [f64; OUT_CHANNELS])> = par::map_indices(b, |i| {
        let xi = &x[i * c * ms..(i + 1) * c * ms];
        let gi = &g[i * OUT_CHANNELS * ms..(i + 1) * OUT_CHANNELS * ms];
        let mut dw = vec![0.0f64; OUT_CHANNELS * c];
        let mut db = [0.0f64; OUT_CHANNELS];
        for o in 0..OUT_CHANNELS {
            let go = &gi[o * ms..(o + 1) * ms];
            db[o] = go.iter().map(|v| v.wide()).sum();
            for ch in 0..c {
                dw[o * c + ch] = go
                    .iter()
                    .zip(&xi[ch * ms..(ch + 1) * ms])
                    .map(|(a, b)| a.wide() * b.wide())
                    .sum();
            }
        }
        (dw, db)
    });
    let mut dw = vec![0.0f64; OUT_CHANNELS * c];
    let mut db = [0.0f64; OUT_CHANNELS];
    for (pw, pb) in partials {
        for (a, v) in dw.iter_mut().zip(pw) {
            *a += v;
        }
        for (a, v) in db.iter_mut().zip(pb) {
            *a += v;
        }
    }
    (
        Tensor::from_parts(
            vec![OUT_CHANNELS, c, 1],
            dw.into_iter().map(T::of).collect(),
        ),
        Tensor::from_parts(vec![OUT_CHANNELS], db.into_iter().map(T::of).collect()),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub scale: usize,
    pub layers: Vec<Layer>,
    #[serde(default)]
    pub weights: BranchWeights,
    #[serde(default)]
    pub affinity: Affinity,
    #[serde(default)]
    pub init: InitScheme,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 256,
            epochs: 100,
            seed: 0,
            scale: DEFAULT_SCALE,
            layers: Layer::ALL.to_vec(),
            weights: BranchWeights::default(),
            affinity: Affinity::Exp,
            init: InitScheme::Uniform,
        }
    }
}

impl TrainConfig {
    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            weights: self.weights,
            affinity: self.affinity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Validation(format!(
                "learning rate {} must be ≥ 0",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be positive".into()));
        }
        if !(1..=crate::meta_feature::MAX_SCALE).contains(&self.scale) {
            return Err(Error::Validation(format!(
                "scale {} outside 1..=5",
                self.scale
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::Validation(
                "at least one local layer is required".into(),
            ));
        }
        let mut sorted = self.layers.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.layers.len() {
            return Err(Error::Validation("duplicate layers in config".into()));
        }
        if let Affinity::Sharpened { beta } = self.affinity {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(Error::Validation(format!(
                    "affinity beta {beta} must be > 0"
                )));
            }
        }
        self.weights.validate()
    }

    /// Stream used for parameter initialisation.
    pub fn init_params<T: Real>(&self, bundle: &FeatureBundle) -> Result<AdapterParams<T>> {
        let channels = self
            .layers
            .iter()
            .map(|&l| Ok((l, bundle.geometry.layer(l)?.channels * KERNEL * KERNEL)))
            .collect::<Result<Vec<_>>>()?;
        Ok(AdapterParams::init(&channels, self.seed, self.init))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T = f32> {
    pub params: AdapterParams<T>,
    /// Mean training loss of every epoch.
    pub loss_history: Vec<f64>,
}

/// Trains adapter parameters on the support items the cache was built from.
pub fn train<T: Real>(
    bundle: &FeatureBundle,
    cache: &MfUnitCache<T>,
    global: &GlobalCache<T>,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let params = config.init_params(bundle)?;
    train_from(bundle, cache, global, config, params)
}

/// As [`train`], starting from the given parameters.
pub fn train_from<T: Real>(
    bundle: &FeatureBundle,
    cache: &MfUnitCache<T>,
    global: &GlobalCache<T>,
    config: &TrainConfig,
    params: AdapterParams<T>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if config.scale != cache.scale {
        return Err(Error::Validation(format!(
            "training scale {} differs from cache scale {}",
            config.scale, cache.scale
        )));
    }
    for l in &config.layers {
        cache.layer(*l)?;
    }
    let support: Vec<usize> = cache
        .support_ids
        .iter()
        .map(|id| {
            bundle
                .find(id)
                .ok_or_else(|| Error::Validation(format!("support item {id:?} not in bundle")))
        })
        .collect::<Result<_>>()?;
    for (row, &i) in support.iter().enumerate() {
        if bundle.items[i].label != cache.labels[row] {
            return Err(Error::Validation(format!(
                "support item {:?} is labelled {} in the bundle but {} in the cache",
                bundle.items[i].item_id, bundle.items[i].label, cache.labels[row]
            )));
        }
    }
    let has_views = support.iter().any(|&i| bundle.items[i].view_count() > 1);
    let fusion = config.fusion();
    let mut model = MfAdapter::new(params);
    let mut states: BTreeMap<Layer, (AdamState<T>, AdamState<T>)> = model
        .params
        .per_layer
        .iter()
        .map(|(l, p)| {
            (
                *l,
                (
                    AdamState::new(p.weight.shape(), config.lr),
                    AdamState::new(p.bias.shape(), config.lr),
                ),
            )
        })
        .collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(1);
    let mut view_rng = ChaCha8Rng::seed_from_u64(config.seed);
    view_rng.set_stream(2);

    let mut loss_history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..support.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let items: Vec<usize> = chunk.iter().map(|&r| support[r]).collect();
            let views: Option<Vec<usize>> = has_views.then(|| {
                items
                    .iter()
                    .map(|&i| view_rng.random_range(0..bundle.items[i].view_count()))
                    .collect()
            });
            let batch = QueryBatch::from_bundle(
                bundle,
                &items,
                views.as_deref(),
                &config.layers,
                config.scale,
            )?;
            let report = model.forward(&batch, cache, global, &fusion, true)?;
            let (loss, d_logits) = softmax_cross_entropy(&report.lg_final, &batch.labels)?;
            let grads = model.backward(&d_logits, cache)?;
            for (l, p) in model.params.per_layer.iter_mut() {
                let g = &grads.per_layer[l];
                let (sw, sb) = states.get_mut(l).expect("state per layer");
                adam_step(&mut p.weight, &g.weight, sw)?;
                adam_step(&mut p.bias, &g.bias, sb)?;
            }
            total += loss * chunk.len() as f64;
        }
        loss_history.push(total / support.len() as f64);
    }
    Ok(TrainOutcome {
        params: model.into_params(),
        loss_history,
    })
}

/// Encodes parameters and the training configuration as an `MFAD` file.
pub fn serialize_params(params: &AdapterParams<f32>, config: &TrainConfig) -> Vec<u8> {
    let mut w = ContainerWriter::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
    w.header_u8(params.per_layer.len() as u8);
    for l in params.per_layer.keys() {
        w.header_u8(l.id());
    }
    for p in params.per_layer.values() {
        w.header_u64(p.channels() as u64);
    }
    for (l, p) in &params.per_layer {
        w.tensor(format!("layer{}/weight", l.id()), &p.weight);
        w.tensor(format!("layer{}/bias", l.id()), &p.bias);
    }
    w.blob(
        "config",
        serde_json::to_vec(config).expect("config serialises"),
    );
    w.finish()
}

pub fn deserialize_params(bytes: &[u8]) -> Result<(AdapterParams<f32>, TrainConfig)> {
    let (layers, r) = ContainerReader::open(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, |c| {
        let n = c.u8()? as usize;
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let at = c.pos();
            ids.push(Layer::from_id(c.u8()?).map_err(|e| Error::format(at, e.to_string()))?);
        }
        let mut out = Vec::with_capacity(n);
        for l in ids {
            out.push((l, c.len_u64(bytes.len(), "channel count")?));
        }
        Ok(out)
    })?;
    let mut per_layer = BTreeMap::new();
    for (l, c) in layers {
        let weight = r.tensor(&format!("layer{}/weight", l.id()))?;
        let bias = r.tensor(&format!("layer{}/bias", l.id()))?;
        if weight.shape() != [OUT_CHANNELS, c, 1] || bias.shape() != [OUT_CHANNELS] {
            return Err(Error::format(
                0,
                format!(
                    "{l}: weight {:?} / bias {:?} for c = {c}",
                    weight.shape(),
                    bias.shape()
                ),
            ));
        }
        per_layer.insert(l, LayerParams { weight, bias });
    }
    let config: TrainConfig = r.json("config")?;
    Ok((AdapterParams { per_layer }, config))
}

pub fn write_checkpoint(
    path: &Path,
    params: &AdapterParams<f32>,
    config: &TrainConfig,
) -> Result<()> {
    fs::write(path, serialize_params(params, config)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(AdapterParams<f32>, TrainConfig)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    deserialize_params(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mf(values: Vec<f32>, b: usize, c: usize, ms: usize) -> MetaFeature<f32> {
        MetaFeature {
            values: Tensor::new(vec![b, c, ms], values).unwrap(),
            layer: Layer::Layer3,
            per_scale_widths: vec![ms],
        }
    }

    #[test]
    fn pointwise_conv_by_hand() {
        // c = 2, ms = 3
        let x = mf(vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0], 1, 2, 3);
        let p = LayerParams {
            weight: Tensor::new(vec![2, 2, 1], vec![1.0, 0.5, -1.0, 0.0]).unwrap(),
            bias: Tensor::new(vec![2], vec![0.0, 1.0]).unwrap(),
        };
        let y = adapter_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 2, 3]);
        assert_eq!(y.data(), &[6.0, 12.0, 18.0, 0.0, -1.0, -2.0]);
    }

    #[test]
    fn init_bounds_and_seeding() {
        let a = AdapterParams::<f32>::init(
            &[(Layer::Layer3, 16), (Layer::Layer4, 4)],
            3,
            InitScheme::Uniform,
        );
        let b = AdapterParams::<f32>::init(
            &[(Layer::Layer3, 16), (Layer::Layer4, 4)],
            3,
            InitScheme::Uniform,
        );
        assert_eq!(a, b);
        let l3 = a.layer(Layer::Layer3).unwrap();
        assert_eq!(l3.weight.shape(), &[2, 16, 1]);
        assert!(l3.weight.data().iter().all(|v| v.abs() <= 0.25));
        assert!(a
            .layer(Layer::Layer4)
            .unwrap()
            .weight
            .data()
            .iter()
            .all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn warm_start_second_channel_is_mean() {
        let p = AdapterParams::<f64>::init(&[(Layer::Layer4, 8)], 0, InitScheme::MeanWarmStart);
        let l = p.layer(Layer::Layer4).unwrap();
        assert!(l.weight.data()[8..].iter().all(|&v| v == 0.125));
        assert_eq!(l.bias.data()[1], 0.0);
    }

    #[test]
    fn conv_backward_sums_over_batch_and_width() {
        let x = mf(vec![1.0, 2.0, 3.0, 4.0], 2, 1, 2);
        let dy = Tensor::new(vec![2, 2, 2], vec![1.0, 1.0, 0.0, 2.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let (dw, db) = conv_backward(&x.values, &dy, 1);
        // dW[o] = Σ dy[b,o,j]·x[b,j]; dbias[o] = Σ dy[b,o,j]
        assert_eq!(dw.data(), &[1.0 + 2.0 + 3.0, 4.0 + 4.0]);
        assert_eq!(db.data(), &[3.0, 3.0]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                lr: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                scale: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                layers: vec![],
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Validation(_))));
        }
    }
}
