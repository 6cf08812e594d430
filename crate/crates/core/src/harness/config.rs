use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::{DistillConfig, OptimConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::videodata::{MaskFilter, SyntheticSceneConfig};
use crate::viewgen::ViewConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub steps: usize,
    /// Tubes per micro-batch.
    pub tubes_per_step: usize,
    /// Micro-batches per optimiser step.
    pub accumulation: usize,
    pub seed: u64,
    /// Checkpoint period in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    /// Batches prepared ahead of the training thread.
    pub prefetch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            steps: 2000,
            tubes_per_step: 1,
            accumulation: 1,
            seed: 0,
            checkpoint_every: 0,
            prefetch: 2,
        }
    }
}

impl RunConfig {
    pub fn effective_batch(&self) -> usize {
        self.tubes_per_step * self.accumulation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub tube_len: usize,
    pub stride: usize,
    pub min_area_fraction: f64,
    pub min_confidence: f32,
    pub max_objects: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let f = MaskFilter::default();
        DataConfig {
            tube_len: 4,
            stride: 10,
            min_area_fraction: f.min_area_fraction,
            min_confidence: f.min_confidence,
            max_objects: f.max_objects,
        }
    }
}

impl DataConfig {
    pub fn filter(&self) -> MaskFilter {
        MaskFilter {
            min_area_fraction: self.min_area_fraction,
            min_confidence: self.min_confidence,
            max_objects: self.max_objects,
        }
    }
}

/// Multi-clip synthetic corpora: clip `i` uses seed `synth.seed + i` and
/// draws its sprite count from `[synth.num_sprites, max_sprites]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub clips: usize,
    /// Upper sprite count; values below `synth.num_sprites` mean "fixed".
    pub max_sprites: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            clips: 1,
            max_sprites: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscoveryConfig {
    /// Square resize applied before evaluation; 0 keeps the image size.
    pub eval_size: usize,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        DiscoveryConfig { eval_size: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub data: DataConfig,
    pub views: ViewConfig,
    pub encoder: EncoderConfig,
    pub distill: DistillConfig,
    pub optim: OptimConfig,
    pub discovery: DiscoveryConfig,
    pub synth: SyntheticSceneConfig,
    pub corpus: CorpusConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.run;
        if r.tubes_per_step == 0 || r.accumulation == 0 {
            return Err(Error::Config("tubes_per_step and accumulation must be positive".into()));
        }
        if self.data.tube_len == 0 || self.data.stride == 0 {
            return Err(Error::Config("tube length and stride must be positive".into()));
        }
        if self.views.global_size != self.encoder.input_size {
            return Err(Error::Config(format!(
                "views.global_size {} differs from encoder.input_size {}",
                self.views.global_size, self.encoder.input_size
            )));
        }
        for (name, size) in [("global", self.views.global_size), ("local", self.views.local_size)] {
            if size % self.encoder.patch_size != 0 {
                return Err(Error::Config(format!(
                    "{name} view size {size} is not a multiple of patch size {}",
                    self.encoder.patch_size
                )));
            }
        }
        if self.discovery.eval_size % self.encoder.patch_size != 0 {
            return Err(Error::Config("discovery.eval_size must be a multiple of the patch size".into()));
        }
        if self.corpus.clips == 0 {
            return Err(Error::Config("corpus.clips must be positive".into()));
        }
        self.views.validate()?;
        self.encoder.validate()?;
        self.distill.validate()?;
        self.optim.validate()?;
        self.synth.validate()
    }

    /// Every setting as `section.key = value`, one per line.
    pub fn to_dotted(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serialises");
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        lines.join("\n") + "\n"
    }

    /// SHA-256 of the dotted form, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_dotted().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Scene config of corpus clip `i`.
    pub fn clip_config(&self, i: usize) -> SyntheticSceneConfig {
        let mut c = self.synth.clone();
        c.seed = self.synth.seed.wrapping_add(i as u64);
        let lo = self.synth.num_sprites;
        let hi = self.corpus.max_sprites.max(lo);
        c.num_sprites = ChaCha8Rng::seed_from_u64(c.seed).random_range(lo..=hi);
        c
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        v => out.push(format!("{prefix} = {v}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_defaults_parse_back() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_dotted();
        assert!(text.contains("distill.lambda_mask = 0.5"));
        assert!(text.contains("data.tube_len = 4"));
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentConfig::from_toml("distill.lambda_mask = 0.5\ndistill.bogus = 1\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(ExperimentConfig::from_toml("nosuch.key = 1").is_err());
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let cfg = ExperimentConfig::from_toml("run.steps = 7\nrun.accumulation = 4\nrun.tubes_per_step = 2\n").unwrap();
        assert_eq!(cfg.run.steps, 7);
        assert_eq!(cfg.run.effective_batch(), 8);
        assert_eq!(cfg.distill, DistillConfig::default());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.run.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn clip_sprite_counts_in_range() {
        let mut cfg = ExperimentConfig::default();
        cfg.synth.num_sprites = 2;
        cfg.corpus.max_sprites = 4;
        let counts: Vec<usize> = (0..30).map(|i| cfg.clip_config(i).num_sprites).collect();
        assert!(counts.iter().all(|n| (2..=4).contains(n)));
        assert!((2..=4).all(|n| counts.contains(&n)));
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.views.local_size = 30;
        assert!(cfg.validate().is_err());
    }
}
