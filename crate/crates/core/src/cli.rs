//! Command-line front end: `synth`, `build-cache`, `train`, `eval`, `ablate`.
//!
//! Every flag may also come from a TOML file passed with `--config`. The file
//! holds one table per subcommand (`[train]`, `[build-cache]`, ...) whose keys
//! are the long flag names. Flags given on the command line win over the file,
//! and the file wins over built-in defaults. The resolved settings are written
//! as `<subcommand>.config.json` into the output directory.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    read_checkpoint, train, write_checkpoint, AdapterParams, InitScheme, TrainConfig,
};
use crate::cache_model::{build_cache, read_cache, write_cache};
use crate::dataio::{
    generate_synthetic, read_bundle, sample_episode, write_bundle, EpisodeSpec, FeatureBundle,
    Geometry, Split, SplitManifest, SynthConfig,
};
use crate::error::{Error, Result};
use crate::fusion::{evaluate, Affinity, BranchWeights, Evaluation, FusionConfig};
use crate::meta_feature::{Layer, DEFAULT_SCALE, MAX_SCALE};
use crate::par;

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "MF_ADAPTER_OUT";
const DEFAULT_OUT: &str = "mf-out";

pub const BUNDLE_FILE: &str = "bundle.mffb";
pub const SPLITS_FILE: &str = "splits.json";
pub const CACHE_FILE: &str = "cache.mfuc";
pub const CHECKPOINT_FILE: &str = "adapter.mfad";
pub const LOSS_FILE: &str = "loss.tsv";

pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_FORMAT: i32 = 4;
pub const EXIT_IO: i32 = 5;
pub const EXIT_NUMERIC: i32 = 6;

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Format { .. } => EXIT_FORMAT,
        Error::Io { .. } => EXIT_IO,
        Error::NonFinite(_) => EXIT_NUMERIC,
        Error::Dimension { .. }
        | Error::Geometry { .. }
        | Error::Validation(_)
        | Error::Index { .. }
        | Error::State(_) => EXIT_VALIDATION,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "mf-adapter",
    version,
    about = "Few-shot classification with MF-Units and a cache model"
)]
pub struct Cli {
    /// TOML file with per-subcommand defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic feature bundle and its split manifest.
    Synth(SynthArgs),
    /// Sample a K-shot support set and build the MF-Unit and global caches.
    BuildCache(CacheArgs),
    /// Train the adapter against a frozen cache.
    Train(TrainArgs),
    /// Evaluate on the test split and report per-branch accuracy.
    Eval(EvalArgs),
    /// Scale, layer and branch ablation tables.
    Ablate(AblateArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::BuildCache(_) => "build-cache",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum GeometryPreset {
    Rn50,
    Small,
    Compact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AffinityKind {
    Exp,
    Sharpened,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    Uniform,
    MeanWarmStart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Text,
    Jsonl,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct SynthArgs {
    /// Output directory [env: MF_ADAPTER_OUT]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Support candidates per class.
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub geometry: Option<GeometryPreset>,
    /// Layer-3 map shape as C,H,W.
    #[arg(long, value_delimiter = ',')]
    pub l3: Option<Vec<usize>>,
    /// Layer-4 map shape as C,H,W.
    #[arg(long, value_delimiter = ',')]
    pub l4: Option<Vec<usize>>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Augmented views per item.
    #[arg(long)]
    pub views: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct SynthRun {
    pub out: Option<PathBuf>,
    pub classes: usize,
    pub shots: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub seed: u64,
    pub geometry: GeometryPreset,
    pub l3: Option<Vec<usize>>,
    pub l4: Option<Vec<usize>>,
    pub embed_dim: Option<usize>,
    pub views: usize,
}

impl Default for SynthRun {
    fn default() -> Self {
        SynthRun {
            out: None,
            classes: 5,
            shots: 16,
            test_per_class: 20,
            separation: 3.0,
            seed: 0,
            geometry: GeometryPreset::Small,
            l3: None,
            l4: None,
            embed_dim: None,
            views: 0,
        }
    }
}

impl SynthRun {
    pub fn resolved_geometry(&self) -> Result<Geometry> {
        let mut g = match self.geometry {
            GeometryPreset::Rn50 => Geometry::rn50(),
            GeometryPreset::Small => Geometry::small(),
            GeometryPreset::Compact => Geometry::compact(),
        };
        for (layer, shape) in [(Layer::Layer3, &self.l3), (Layer::Layer4, &self.l4)] {
            if let Some(s) = shape {
                let [c, h, w] = <[usize; 3]>::try_from(s.as_slice()).map_err(|_| {
                    Error::Validation(format!("{layer} shape needs three values C,H,W, got {s:?}"))
                })?;
                let lg = g
                    .layers
                    .get_mut(&layer)
                    .expect("presets define both layers");
                lg.channels = c;
                lg.height = h;
                lg.width = w;
            }
        }
        if let Some(d) = self.embed_dim {
            g.embed_dim = d;
        }
        g.validate()?;
        Ok(g)
    }
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct CacheArgs {
    /// Output directory [env: MF_ADAPTER_OUT]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Feature bundle [default: <out>/bundle.mffb]
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Split manifest [default: <out>/splits.json, else the bundle's own]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Shots per class: 1, 2, 4, 8 or 16.
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub scale: Option<usize>,
    /// Layers to cache, e.g. 3,4.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<u8>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct CacheRun {
    pub out: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub shots: usize,
    pub seed: u64,
    pub scale: usize,
    pub layers: Vec<u8>,
}

impl Default for CacheRun {
    fn default() -> Self {
        CacheRun {
            out: None,
            bundle: None,
            manifest: None,
            shots: 16,
            seed: 0,
            scale: DEFAULT_SCALE,
            layers: vec![3, 4],
        }
    }
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainArgs {
    /// Output directory [env: MF_ADAPTER_OUT]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Feature bundle [default: <out>/bundle.mffb]
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Cache file [default: <out>/cache.mfuc]
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Adapted layers [default: every cached layer]
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<u8>>,
    /// Fused branches: local, local3, local4, high, text.
    #[arg(long, value_delimiter = ',')]
    pub branches: Option<Vec<String>>,
    #[arg(long, value_enum)]
    pub affinity: Option<AffinityKind>,
    /// Sharpness of the `sharpened` affinity.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, value_enum)]
    pub init: Option<InitKind>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainRun {
    pub out: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub layers: Option<Vec<u8>>,
    pub branches: Vec<String>,
    pub affinity: AffinityKind,
    pub beta: f64,
    pub init: InitKind,
}

impl Default for TrainRun {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainRun {
            out: None,
            bundle: None,
            cache: None,
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            layers: None,
            branches: default_branches(),
            affinity: AffinityKind::Exp,
            beta: 1.0,
            init: InitKind::Uniform,
        }
    }
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvalArgs {
    /// Output directory [env: MF_ADAPTER_OUT]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Feature bundle [default: <out>/bundle.mffb]
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Split manifest [default: <out>/splits.json, else the bundle's own]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Cache file [default: <out>/cache.mfuc]
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Trained adapter; without one the seeded initialization is evaluated.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub init: Option<InitKind>,
    /// Fused branches: local, local3, local4, high, text.
    #[arg(long, value_delimiter = ',')]
    pub branches: Option<Vec<String>>,
    #[arg(long, value_enum)]
    pub affinity: Option<AffinityKind>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, value_enum)]
    pub format: Option<ReportFormat>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct EvalRun {
    pub out: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,
    pub init: InitKind,
    /// Taken from the checkpoint when unset.
    pub branches: Option<Vec<String>>,
    pub affinity: Option<AffinityKind>,
    pub beta: Option<f64>,
    pub format: ReportFormat,
}

impl Default for EvalRun {
    fn default() -> Self {
        EvalRun {
            out: None,
            bundle: None,
            manifest: None,
            cache: None,
            checkpoint: None,
            seed: 0,
            init: InitKind::Uniform,
            branches: None,
            affinity: None,
            beta: None,
            format: ReportFormat::Text,
        }
    }
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct AblateArgs {
    /// Output directory [env: MF_ADAPTER_OUT]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Feature bundles; each gets its own set of tables [default: <out>/bundle.mffb]
    #[arg(long = "bundle")]
    pub bundles: Option<Vec<PathBuf>>,
    /// Split manifest applied to every bundle [default: each bundle's own]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Window scales of the scale table.
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<usize>>,
    /// Layer subsets of the layer table, e.g. 3,4,3+4.
    #[arg(long, value_delimiter = ',')]
    pub layer_sets: Option<Vec<String>>,
    /// Branch presets of the branch table, e.g. text,high+text,local+high+text.
    #[arg(long, value_delimiter = ',')]
    pub presets: Option<Vec<String>>,
    /// Scale used by the layer and branch tables.
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long, value_enum)]
    pub affinity: Option<AffinityKind>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, value_enum)]
    pub format: Option<ReportFormat>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct AblateRun {
    pub out: Option<PathBuf>,
    pub bundles: Vec<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub shots: usize,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub scales: Vec<usize>,
    pub layer_sets: Vec<String>,
    pub presets: Vec<String>,
    pub scale: usize,
    pub affinity: AffinityKind,
    pub beta: f64,
    pub format: ReportFormat,
}

impl Default for AblateRun {
    fn default() -> Self {
        let t = TrainConfig::default();
        AblateRun {
            out: None,
            bundles: Vec::new(),
            manifest: None,
            shots: 16,
            seed: 0,
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            scales: (1..=MAX_SCALE).collect(),
            layer_sets: vec!["3".into(), "4".into(), "3+4".into()],
            presets: vec!["text".into(), "high+text".into(), "local+high+text".into()],
            scale: DEFAULT_SCALE,
            affinity: AffinityKind::Exp,
            beta: 1.0,
            format: ReportFormat::Text,
        }
    }
}

fn default_branches() -> Vec<String> {
    ["local", "high", "text"].map(String::from).to_vec()
}

/// Parse `args` and run the selected subcommand, writing progress lines to `log`.
pub fn run(cli: Cli, log: &mut dyn Write) -> Result<()> {
    let file = match &cli.config {
        Some(path) => Some(load_config_file(path)?),
        None => None,
    };
    let section = cli.command.name();
    let file = section_of(file.as_ref(), section)?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(&resolve(a, file)?, log),
        Command::BuildCache(a) => cmd_build_cache(&resolve(a, file)?, log),
        Command::Train(a) => cmd_train(&resolve(a, file)?, log),
        Command::Eval(a) => cmd_eval(&resolve(a, file)?, log),
        Command::Ablate(a) => cmd_ablate(&resolve(a, file)?, log),
    }
}

fn load_config_file(path: &Path) -> Result<toml::Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.parse::<toml::Table>().map_err(|e| Error::Format {
        offset: e.span().map_or(0, |s| s.start as u64),
        detail: format!("{}: {}", path.display(), e.message()),
    })
}

fn section_of<'a>(file: Option<&'a toml::Table>, section: &str) -> Result<Option<&'a toml::Table>> {
    let Some(file) = file else { return Ok(None) };
    const SECTIONS: [&str; 5] = ["synth", "build-cache", "train", "eval", "ablate"];
    for (key, value) in file {
        if !SECTIONS.contains(&key.as_str()) || !value.is_table() {
            return Err(Error::Validation(format!(
                "config file: unexpected top-level entry {key:?} (expected tables {SECTIONS:?})"
            )));
        }
    }
    Ok(file.get(section).and_then(|v| v.as_table()))
}

/// Overlay the flags that were given on top of the config-file table and fill
/// the rest from the run type's defaults.
fn resolve<A: Serialize, R: DeserializeOwned>(args: &A, file: Option<&toml::Table>) -> Result<R> {
    let mut merged = match file {
        Some(t) => serde_json::to_value(t).map_err(|e| Error::Validation(e.to_string()))?,
        None => serde_json::Value::Object(Default::default()),
    };
    let flags = serde_json::to_value(args).map_err(|e| Error::Validation(e.to_string()))?;
    if let (Some(m), serde_json::Value::Object(f)) = (merged.as_object_mut(), flags) {
        for (k, v) in f {
            if !v.is_null() {
                m.insert(k, v);
            }
        }
    }
    serde_json::from_value(merged).map_err(|e| Error::Validation(format!("config: {e}")))
}

fn out_dir(out: &Option<PathBuf>) -> PathBuf {
    out.clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_resolved<R: Serialize>(dir: &Path, name: &str, run: &R) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(run).map_err(|e| Error::Validation(e.to_string()))?;
    text.push('\n');
    write_file(&dir.join(format!("{name}.config.json")), text.as_bytes())
}

fn say(log: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(log, "{}", line.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

fn parse_layers(ids: &[u8]) -> Result<Vec<Layer>> {
    let mut layers = ids
        .iter()
        .map(|&id| Layer::from_id(id))
        .collect::<Result<Vec<_>>>()?;
    layers.sort();
    layers.dedup();
    if layers.is_empty() {
        return Err(Error::Validation("at least one layer is required".into()));
    }
    Ok(layers)
}

fn parse_layer_set(s: &str) -> Result<Vec<Layer>> {
    let ids = s
        .split('+')
        .map(|p| {
            p.trim()
                .parse::<u8>()
                .map_err(|_| Error::Validation(format!("layer set {s:?}: expected ids like 3+4")))
        })
        .collect::<Result<Vec<_>>>()?;
    parse_layers(&ids)
}

fn affinity(kind: AffinityKind, beta: f64) -> Affinity {
    match kind {
        AffinityKind::Exp => Affinity::Exp,
        AffinityKind::Sharpened => Affinity::Sharpened { beta },
    }
}

fn init_scheme(kind: InitKind) -> InitScheme {
    match kind {
        InitKind::Uniform => InitScheme::Uniform,
        InitKind::MeanWarmStart => InitScheme::MeanWarmStart,
    }
}

fn load_manifest(
    explicit: Option<&Path>,
    dir: &Path,
    bundle: &FeatureBundle,
) -> Result<SplitManifest> {
    if let Some(p) = explicit {
        return SplitManifest::read(p);
    }
    let beside = dir.join(SPLITS_FILE);
    if beside.is_file() {
        return SplitManifest::read(&beside);
    }
    bundle.splits.clone().ok_or_else(|| {
        Error::Validation(
            "no split manifest: pass --manifest or use a bundle that carries one".into(),
        )
    })
}

fn test_items(bundle: &FeatureBundle, manifest: &SplitManifest) -> Result<Vec<usize>> {
    let items: Vec<usize> = (0..bundle.items.len())
        .filter(|&i| manifest.get(&bundle.items[i].item_id) == Some(Split::Test))
        .collect();
    if items.is_empty() {
        return Err(Error::Validation(
            "the manifest assigns no items to the test split".into(),
        ));
    }
    Ok(items)
}

pub fn cmd_synth(run: &SynthRun, log: &mut dyn Write) -> Result<()> {
    let geometry = run.resolved_geometry()?;
    let dir = out_dir(&run.out);
    prepare_out(&dir)?;
    let cfg = SynthConfig {
        n_classes: run.classes,
        shots: run.shots,
        test_per_class: run.test_per_class,
        geometry: geometry.clone(),
        separation: run.separation,
        seed: run.seed,
        views: run.views,
    };
    let bundle = generate_synthetic(&cfg)?;
    write_bundle(&bundle, &dir.join(BUNDLE_FILE))?;
    if let Some(splits) = &bundle.splits {
        splits.write(&dir.join(SPLITS_FILE))?;
    }
    write_resolved(&dir, "synth", run)?;

    for (layer, g) in &geometry.layers {
        say(
            log,
            format!("{layer}: {}x{}x{}", g.channels, g.height, g.width),
        )?;
    }
    say(log, format!("embedding: {}", geometry.embed_dim))?;
    say(
        log,
        format!(
            "classes {} items {} (support {} test {}) separation {}",
            run.classes,
            bundle.items.len(),
            run.classes * run.shots,
            run.classes * run.test_per_class,
            run.separation
        ),
    )?;
    say(log, format!("wrote {}", dir.join(BUNDLE_FILE).display()))
}

pub fn cmd_build_cache(run: &CacheRun, log: &mut dyn Write) -> Result<()> {
    let dir = out_dir(&run.out);
    let bundle_path = run.bundle.clone().unwrap_or_else(|| dir.join(BUNDLE_FILE));
    require_file(&bundle_path)?;
    if let Some(m) = &run.manifest {
        require_file(m)?;
    }
    let layers = parse_layers(&run.layers)?;
    let spec = EpisodeSpec {
        n_shots: run.shots,
        seed: run.seed,
    };
    spec.validate()?;
    prepare_out(&dir)?;

    let bundle = read_bundle(&bundle_path)?;
    let manifest = load_manifest(run.manifest.as_deref(), &dir, &bundle)?;
    let episode = sample_episode(&bundle, &manifest, &spec)?;
    let (cache, global) = build_cache::<f32>(&bundle, &episode.support, run.scale, &layers)?;
    write_cache(&dir.join(CACHE_FILE), &cache, &global)?;
    write_resolved(&dir, "build-cache", run)?;

    say(
        log,
        format!(
            "NK {} N {} K {} scale {}",
            cache.rows(),
            cache.n_classes,
            cache.n_shots,
            cache.scale
        ),
    )?;
    for (layer, ms) in &cache.per_layer_ms {
        say(log, format!("{layer}: ms {ms}"))?;
    }
    say(log, format!("checksum {}", cache.checksum()))
}

pub fn cmd_train(run: &TrainRun, log: &mut dyn Write) -> Result<()> {
    let dir = out_dir(&run.out);
    let bundle_path = run.bundle.clone().unwrap_or_else(|| dir.join(BUNDLE_FILE));
    let cache_path = run.cache.clone().unwrap_or_else(|| dir.join(CACHE_FILE));
    require_file(&bundle_path)?;
    require_file(&cache_path)?;
    let weights = BranchWeights::from_branches(&run.branches)?;
    prepare_out(&dir)?;

    let bundle = read_bundle(&bundle_path)?;
    let (cache, global) = read_cache(&cache_path)?;
    let layers = match &run.layers {
        Some(ids) => parse_layers(ids)?,
        None => cache.layers(),
    };
    let config = TrainConfig {
        lr: run.lr,
        batch_size: run.batch_size,
        epochs: run.epochs,
        seed: run.seed,
        scale: cache.scale,
        layers,
        weights,
        affinity: affinity(run.affinity, run.beta),
        init: init_scheme(run.init),
    };
    config.validate()?;
    say(
        log,
        format!(
            "lr={:e} batch={} epochs={}",
            config.lr, config.batch_size, config.epochs
        ),
    )?;

    let outcome = train(&bundle, &cache, &global, &config)?;
    write_checkpoint(&dir.join(CHECKPOINT_FILE), &outcome.params, &config)?;
    let mut curve = String::from("epoch\tloss\n");
    for (e, l) in outcome.loss_history.iter().enumerate() {
        let _ = writeln!(curve, "{}\t{l:.8}", e + 1);
    }
    write_file(&dir.join(LOSS_FILE), curve.as_bytes())?;
    write_resolved(&dir, "train", run)?;

    if let Some(last) = outcome.loss_history.last() {
        say(log, format!("final loss {last:.6}"))?;
    }
    say(
        log,
        format!("wrote {}", dir.join(CHECKPOINT_FILE).display()),
    )
}

pub fn cmd_eval(run: &EvalRun, log: &mut dyn Write) -> Result<()> {
    let dir = out_dir(&run.out);
    let bundle_path = run.bundle.clone().unwrap_or_else(|| dir.join(BUNDLE_FILE));
    let cache_path = run.cache.clone().unwrap_or_else(|| dir.join(CACHE_FILE));
    require_file(&bundle_path)?;
    require_file(&cache_path)?;
    for p in [&run.manifest, &run.checkpoint].into_iter().flatten() {
        require_file(p)?;
    }
    prepare_out(&dir)?;

    let bundle = read_bundle(&bundle_path)?;
    let manifest = load_manifest(run.manifest.as_deref(), &dir, &bundle)?;
    let (cache, global) = read_cache(&cache_path)?;
    let (params, trained) = match &run.checkpoint {
        Some(p) => read_checkpoint(p)?,
        None => {
            let config = TrainConfig {
                seed: run.seed,
                scale: cache.scale,
                layers: cache.layers(),
                init: init_scheme(run.init),
                ..TrainConfig::default()
            };
            (config.init_params::<f32>(&bundle)?, config)
        }
    };
    let fusion = FusionConfig {
        weights: match &run.branches {
            Some(b) => BranchWeights::from_branches(b)?,
            None => trained.weights,
        },
        affinity: match run.affinity {
            Some(kind) => affinity(kind, run.beta.unwrap_or(1.0)),
            None => trained.affinity,
        },
    };
    let items = test_items(&bundle, &manifest)?;
    let eval = evaluate(&bundle, &items, &cache, &global, &params, &fusion)?;

    let text = render_eval(&eval);
    match run.format {
        ReportFormat::Text => write_file(&dir.join("report.txt"), text.as_bytes())?,
        ReportFormat::Jsonl => {
            let mut lines = String::new();
            for rec in eval.records() {
                lines.push_str(
                    &serde_json::to_string(&rec).map_err(|e| Error::Validation(e.to_string()))?,
                );
                lines.push('\n');
            }
            write_file(&dir.join("report.jsonl"), lines.as_bytes())?;
        }
    }
    write_resolved(&dir, "eval", run)?;
    log.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn render_eval(eval: &Evaluation<f32>) -> String {
    let mut s = format!("items {} correct {}\n", eval.total, eval.correct);
    let _ = writeln!(s, "{:<8} accuracy", "branch");
    for key in ["local3", "local4", "high", "text", "fused"] {
        if let Some(acc) = eval.branch_accuracy.get(key) {
            let _ = writeln!(s, "{key:<8} {:.2}", 100.0 * acc);
        }
    }
    s
}

/// One ablation cell: fresh cache, trained adapter, test-split accuracy.
#[derive(Debug, Clone, Serialize)]
pub struct AblationCell {
    pub bundle: String,
    pub table: &'static str,
    pub setting: String,
    pub scale: usize,
    pub layers: Vec<u8>,
    pub branches: Vec<String>,
    pub accuracy: f64,
    pub branch_accuracy: std::collections::BTreeMap<String, f64>,
}

struct CellPlan {
    bundle: usize,
    table: &'static str,
    setting: String,
    scale: usize,
    layers: Vec<Layer>,
    branches: Vec<String>,
}

pub fn cmd_ablate(run: &AblateRun, log: &mut dyn Write) -> Result<()> {
    let dir = out_dir(&run.out);
    let bundle_paths = if run.bundles.is_empty() {
        vec![dir.join(BUNDLE_FILE)]
    } else {
        run.bundles.clone()
    };
    for p in &bundle_paths {
        require_file(p)?;
    }
    if let Some(m) = &run.manifest {
        require_file(m)?;
    }
    EpisodeSpec {
        n_shots: run.shots,
        seed: run.seed,
    }
    .validate()?;
    let main_layers = Layer::ALL.to_vec();
    let main_branches = default_branches();
    let layer_sets = run
        .layer_sets
        .iter()
        .map(|s| parse_layer_set(s))
        .collect::<Result<Vec<_>>>()?;
    let presets = run
        .presets
        .iter()
        .map(|p| {
            let names: Vec<String> = p.split('+').map(|s| s.trim().to_string()).collect();
            BranchWeights::from_branches(&names)?;
            Ok(names)
        })
        .collect::<Result<Vec<_>>>()?;
    prepare_out(&dir)?;

    let mut bundles = Vec::with_capacity(bundle_paths.len());
    for p in &bundle_paths {
        let b = read_bundle(p)?;
        let m = match &run.manifest {
            Some(m) => SplitManifest::read(m)?,
            None => b.splits.clone().ok_or_else(|| {
                Error::Validation(format!(
                    "{} carries no split manifest; pass --manifest",
                    p.display()
                ))
            })?,
        };
        let episode = sample_episode(
            &b,
            &m,
            &EpisodeSpec {
                n_shots: run.shots,
                seed: run.seed,
            },
        )?;
        let tests = test_items(&b, &m)?;
        bundles.push((b, episode.support, tests));
    }

    let mut plan = Vec::new();
    for bi in 0..bundles.len() {
        for &scale in &run.scales {
            plan.push(CellPlan {
                bundle: bi,
                table: "scale",
                setting: scale.to_string(),
                scale,
                layers: main_layers.clone(),
                branches: main_branches.clone(),
            });
        }
        for (name, layers) in run.layer_sets.iter().zip(&layer_sets) {
            plan.push(CellPlan {
                bundle: bi,
                table: "layer",
                setting: name.clone(),
                scale: run.scale,
                layers: layers.clone(),
                branches: main_branches.clone(),
            });
        }
        for (name, branches) in run.presets.iter().zip(&presets) {
            plan.push(CellPlan {
                bundle: bi,
                table: "branch",
                setting: name.clone(),
                scale: run.scale,
                layers: main_layers.clone(),
                branches: branches.clone(),
            });
        }
    }

    let results = par::map_indices(plan.len(), |i| {
        let cell = &plan[i];
        let (bundle, support, tests) = &bundles[cell.bundle];
        let (cache, global) = build_cache::<f32>(bundle, support, cell.scale, &cell.layers)?;
        let config = TrainConfig {
            lr: run.lr,
            batch_size: run.batch_size,
            epochs: run.epochs,
            seed: run.seed,
            scale: cell.scale,
            layers: cell.layers.clone(),
            weights: BranchWeights::from_branches(&cell.branches)?,
            affinity: affinity(run.affinity, run.beta),
            init: InitScheme::Uniform,
        };
        let params: AdapterParams<f32> = train(bundle, &cache, &global, &config)?.params;
        let eval = evaluate(bundle, tests, &cache, &global, &params, &config.fusion())?;
        Ok(AblationCell {
            bundle: bundle_paths[cell.bundle].display().to_string(),
            table: cell.table,
            setting: cell.setting.clone(),
            scale: cell.scale,
            layers: cell.layers.iter().map(|l| l.id()).collect(),
            branches: cell.branches.clone(),
            accuracy: eval.accuracy,
            branch_accuracy: eval.branch_accuracy,
        })
    });
    let cells = results.into_iter().collect::<Result<Vec<_>>>()?;

    let text = render_ablation(
        &cells,
        &bundles
            .iter()
            .map(|b| b.0.encoder_tag.as_str())
            .collect::<Vec<_>>(),
    );
    match run.format {
        ReportFormat::Text => write_file(&dir.join("ablate.txt"), text.as_bytes())?,
        ReportFormat::Jsonl => {
            let mut lines = String::new();
            for c in &cells {
                lines.push_str(
                    &serde_json::to_string(c).map_err(|e| Error::Validation(e.to_string()))?,
                );
                lines.push('\n');
            }
            write_file(&dir.join("ablate.jsonl"), lines.as_bytes())?;
        }
    }
    write_resolved(&dir, "ablate", run)?;
    log.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn render_ablation(cells: &[AblationCell], encoders: &[&str]) -> String {
    let mut s = String::new();
    let mut bundles: Vec<&str> = Vec::new();
    for c in cells {
        if !bundles.contains(&c.bundle.as_str()) {
            bundles.push(&c.bundle);
        }
    }
    for (bi, b) in bundles.iter().enumerate() {
        let _ = writeln!(
            s,
            "bundle {b} (encoder {})",
            encoders.get(bi).unwrap_or(&"?")
        );
        let of = |table: &'static str| {
            cells
                .iter()
                .filter(move |c| c.bundle == *b && c.table == table)
        };

        let scale: Vec<_> = of("scale").collect();
        if !scale.is_empty() {
            let _ = write!(s, "{:<10}", "scale");
            for c in &scale {
                let _ = write!(s, " {:>7}", c.setting);
            }
            let _ = write!(s, "\n{:<10}", "accuracy");
            for c in &scale {
                let _ = write!(s, " {:>7.2}", 100.0 * c.accuracy);
            }
            s.push('\n');
        }
        for (table, head) in [("layer", "layers"), ("branch", "branches")] {
            let rows: Vec<_> = of(table).collect();
            if rows.is_empty() {
                continue;
            }
            let _ = writeln!(s, "{head:<18} accuracy");
            for c in rows {
                let _ = writeln!(s, "{:<18} {:>8.2}", c.setting, 100.0 * c.accuracy);
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("mf-adapter").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let cli = parse(&["train", "--lr", "0.01"]);
        let file: toml::Table = "[train]\nlr = 0.5\nepochs = 7\n".parse().unwrap();
        let section = section_of(Some(&file), "train").unwrap();
        let Command::Train(args) = &cli.command else {
            unreachable!()
        };
        let run: TrainRun = resolve(args, section).unwrap();
        assert_eq!(run.lr, 0.01);
        assert_eq!(run.epochs, 7);
        assert_eq!(run.batch_size, 256);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let file: toml::Table = "[train]\nlearning-rate = 1\n".parse().unwrap();
        let args = TrainArgs {
            out: None,
            bundle: None,
            cache: None,
            lr: None,
            batch_size: None,
            epochs: None,
            seed: None,
            layers: None,
            branches: None,
            affinity: None,
            beta: None,
            init: None,
        };
        let r: Result<TrainRun> = resolve(&args, section_of(Some(&file), "train").unwrap());
        assert!(matches!(r, Err(Error::Validation(_))));
        let top: toml::Table = "seed = 1\n".parse().unwrap();
        assert!(section_of(Some(&top), "train").is_err());
    }

    #[test]
    fn layer_sets() {
        assert_eq!(parse_layer_set("3+4").unwrap(), Layer::ALL.to_vec());
        assert_eq!(parse_layer_set("4").unwrap(), vec![Layer::Layer4]);
        assert!(parse_layer_set("5").is_err());
        assert!(parse_layer_set("x").is_err());
    }

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [
            exit_code(&Error::Validation(String::new())),
            exit_code(&Error::Format {
                offset: 0,
                detail: String::new(),
            }),
            exit_code(&Error::io("x", std::io::Error::other("x"))),
        ];
        assert_eq!(codes, [EXIT_VALIDATION, EXIT_FORMAT, EXIT_IO]);
    }

    #[test]
    fn geometry_overrides() {
        let run = SynthRun {
            l4: Some(vec![2, 5, 5]),
            embed_dim: Some(32),
            ..SynthRun::default()
        };
        let g = run.resolved_geometry().unwrap();
        assert_eq!(g.layer(Layer::Layer4).unwrap().shape(), [2, 5, 5]);
        assert_eq!(g.embed_dim, 32);
        let bad = SynthRun {
            l3: Some(vec![2, 5]),
            ..SynthRun::default()
        };
        assert!(bad.resolved_geometry().is_err());
    }
}
