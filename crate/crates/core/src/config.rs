//! Declarative run configuration (TOML).
//!
//! Precedence, lowest to highest: built-in defaults, the config file,
//! command-line overrides applied by the caller.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Activation, DEFAULT_ARCHITECTURE_ID, DEFAULT_TAP_LAYERS};
use crate::error::{Error, Result};
use crate::prompts::{BankShape, DEFAULT_GENERIC_SUFFIXES};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub name: String,
    /// Empty means every category found under `root`.
    pub categories: Vec<String>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/mvtec"),
            name: "mvtec".into(),
            categories: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub k: usize,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            k: 1,
            seeds: (0..5).collect(),
            output: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// safetensors checkpoint with OpenCLIP parameter names.
    pub checkpoint: Option<PathBuf>,
    /// BPE merges file (optionally gzipped); without it a hashing
    /// tokenizer is used, which only makes sense for random weights.
    pub vocab: Option<PathBuf>,
    pub architecture: String,
    pub tap_layers: Vec<usize>,
    pub vision_heads: Option<usize>,
    pub text_heads: Option<usize>,
    pub activation: Option<Activation>,
    /// Overrides the checkpoint's learned temperature.
    pub temperature: Option<f64>,
    /// Encoded-image cache; defaults to `<output>/feature_cache`.
    pub cache_dir: Option<PathBuf>,
    pub cache: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            vocab: None,
            architecture: DEFAULT_ARCHITECTURE_ID.into(),
            tap_layers: DEFAULT_TAP_LAYERS.to_vec(),
            vision_heads: None,
            text_heads: None,
            activation: None,
            temperature: None,
            cache_dir: None,
            cache: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub n: usize,
    pub l: usize,
    pub e_n: usize,
    pub e_a: usize,
    pub generic_suffixes: Vec<String>,
    /// Extra per-object suffixes in lexicon format.
    pub lexicon: Option<PathBuf>,
    /// Add the dataset's defect folder names as suffixes.
    pub labels_from_dataset: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        let s = BankShape::default();
        Self {
            n: s.n,
            l: s.l,
            e_n: s.e_n,
            e_a: s.e_a,
            generic_suffixes: DEFAULT_GENERIC_SUFFIXES.iter().map(|s| s.to_string()).collect(),
            lexicon: None,
            labels_from_dataset: true,
        }
    }
}

impl PromptConfig {
    pub fn shape(&self) -> BankShape {
        BankShape {
            n: self.n,
            l: self.l,
            e_n: self.e_n,
            e_a: self.e_a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub sigma: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self { sigma: 4.0 }
    }
}

/// Component switches; the defaults run the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Semantic concatenation (anomaly prompts built from normal prefixes).
    pub sc: bool,
    /// Explicit anomaly margin loss.
    pub eam: bool,
    /// Vision-guided memory branch.
    pub vad: bool,
    /// Alignment loss between manual and learnable anomaly prototypes.
    pub align: bool,
    /// With `sc` off: train a two-class learnable-context baseline
    /// instead of dropping the prompt branch.
    pub coop_baseline: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            sc: true,
            eam: true,
            vad: true,
            align: true,
            coop_baseline: false,
        }
    }
}

impl AblationFlags {
    /// Whether the prompt branch is trained and scored.
    pub fn prompts(&self) -> bool {
        self.sc || self.coop_baseline
    }

    pub fn validate(&self) -> Result<()> {
        if self.sc && self.coop_baseline {
            return Err(Error::input("coop_baseline replaces semantic concatenation; disable sc to use it"));
        }
        if !self.prompts() && !self.vad {
            return Err(Error::input(
                "semantic concatenation disabled: enable vad (vision-only scoring) or coop_baseline",
            ));
        }
        Ok(())
    }

    /// Short tag such as `sc+eam+vad+align`.
    pub fn tag(&self) -> String {
        let mut parts = Vec::new();
        if self.sc {
            parts.push("sc");
        }
        if self.coop_baseline {
            parts.push("coop");
        }
        if self.prompts() && self.eam {
            parts.push("eam");
        }
        if self.vad {
            parts.push("vad");
        }
        if self.sc && self.align {
            parts.push("align");
        }
        parts.join("+")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub fpr_cap: f64,
    pub pixel: bool,
    pub heatmaps: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fpr_cap: crate::eval::DEFAULT_FPR_CAP,
            pixel: true,
            heatmaps: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        let d = crate::data::PreprocessSpec::default();
        Self {
            mean: d.mean,
            std: d.std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub run: RunSection,
    pub backbone: BackboneConfig,
    pub prompts: PromptConfig,
    pub training: TrainConfig,
    pub scoring: ScoringConfig,
    pub ablation: AblationFlags,
    pub eval: EvalConfig,
    pub preprocess: PreprocessConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::input(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.k == 0 {
            return Err(Error::input("k must be at least 1"));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::input("at least one seed is required"));
        }
        if self.prompts.n == 0 || self.prompts.e_n == 0 {
            return Err(Error::input("prompt bank needs n ≥ 1 prefixes of e_n ≥ 1 tokens"));
        }
        if self.prompts.l > 0 && self.prompts.e_a == 0 {
            return Err(Error::input("learnable suffixes need e_a ≥ 1 tokens"));
        }
        if !(self.scoring.sigma >= 0.0) {
            return Err(Error::input("scoring.sigma must be ≥ 0"));
        }
        if !(self.eval.fpr_cap > 0.0 && self.eval.fpr_cap <= 1.0) {
            return Err(Error::input("eval.fpr_cap must lie in (0, 1]"));
        }
        self.training.validate()?;
        self.ablation.validate()
    }

    /// Training settings after the ablation switches are applied.
    pub fn effective_training(&self) -> TrainConfig {
        let mut t = self.training.clone();
        t.eam = t.eam && self.ablation.eam;
        if !self.ablation.align {
            t.lambda = 0.0;
        }
        t
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(hex_digest(&json))
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.backbone
            .cache_dir
            .clone()
            .unwrap_or_else(|| self.run.output.join("feature_cache"))
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.run.seeds, vec![0, 1, 2, 3, 4]);
        assert_eq!(c.training.steps, 1000);
        c.validate().unwrap();
    }

    #[test]
    fn sections_override_defaults() {
        let c = RunConfig::parse(
            "[run]\nk = 4\nseeds = [7]\n[training]\nsteps = 10\n[ablation]\nvad = false\n",
        )
        .unwrap();
        assert_eq!(c.run.k, 4);
        assert_eq!(c.training.steps, 10);
        assert!(!c.ablation.vad && c.ablation.sc);
        assert_eq!(c.training.lr, 0.002);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("[run]\nshots = 3\n"), Err(Error::Input(_))));
    }

    #[test]
    fn no_sc_needs_vad_or_baseline() {
        let mut c = RunConfig::default();
        c.ablation.sc = false;
        c.ablation.vad = false;
        assert!(matches!(c.validate(), Err(Error::Input(_))));
        c.ablation.vad = true;
        c.validate().unwrap();
        c.ablation.vad = false;
        c.ablation.coop_baseline = true;
        c.validate().unwrap();
    }

    #[test]
    fn roundtrip_and_hash_are_stable() {
        let c = RunConfig::default();
        let back = RunConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }
}
