use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bundle::{FeatureBundle, Split, SplitManifest};
use crate::error::{Error, Result};

pub const SHOT_SETTINGS: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_shots: usize,
    pub seed: u64,
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if !SHOT_SETTINGS.contains(&self.n_shots) {
            return Err(Error::Validation(format!(
                "shots must be one of {SHOT_SETTINGS:?}, got {}",
                self.n_shots
            )));
        }
        Ok(())
    }
}

/// Bundle indices of a K-shot episode. Support is class-major, ascending
/// within each class; test keeps bundle order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub support: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn sample_episode(
    bundle: &FeatureBundle,
    manifest: &SplitManifest,
    spec: &EpisodeSpec,
) -> Result<Episode> {
    spec.validate()?;
    let n = bundle.n_classes();
    let mut candidates = vec![Vec::new(); n];
    let mut test = Vec::new();
    for (i, item) in bundle.items.iter().enumerate() {
        match manifest.get(&item.item_id) {
            Some(Split::Support) => candidates[item.label].push(i),
            Some(Split::Test) => test.push(i),
            None => {}
        }
    }
    let deficient: Vec<String> = candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.len() < spec.n_shots)
        .map(|(k, c)| format!("{} ({} available)", bundle.class_names[k], c.len()))
        .collect();
    if !deficient.is_empty() {
        return Err(Error::Validation(format!(
            "{}-shot episode is infeasible for classes: {}",
            spec.n_shots,
            deficient.join(", ")
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut support = Vec::with_capacity(n * spec.n_shots);
    for pool in &candidates {
        let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), spec.n_shots)
            .into_iter()
            .map(|j| pool[j])
            .collect();
        picked.sort_unstable();
        support.extend(picked);
    }
    Ok(Episode { support, test })
}
