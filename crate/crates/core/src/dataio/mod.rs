//! Feature bundles, split manifests, episode sampling and synthetic data.

mod bundle;
pub(crate) mod container;
mod episode;
mod synth;

pub use bundle::{
    read_bundle, write_bundle, FeatureBundle, FeatureItem, FeatureView, Geometry, LayerGeometry,
    Split, SplitManifest, BUNDLE_MAGIC, BUNDLE_VERSION,
};
pub use episode::{sample_episode, Episode, EpisodeSpec, SHOT_SETTINGS};
pub use synth::{generate_synthetic, SynthConfig};
