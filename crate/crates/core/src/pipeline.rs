//! End-to-end runs: train bundles per (category, seed), evaluate them,
//! score single images and sweep ablation settings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    Backbone, ClipBpeTokenizer, ClipModel, DualEncoderOutput, FeatureCache, HashTokenizer, LoadOptions,
    Tokenizer,
};
use crate::config::{hex_digest, AblationFlags, RunConfig};
use crate::data::{self, CategorySpec, Label, PreprocessSpec};
use crate::error::{Error, Result};
use crate::eval::{self, MetricReport, MetricRow};
use crate::memory::{build_memory, FeatureMemory};
use crate::prompts::{build_bank, BankLayout, PromptBank, SuffixLexicon};
use crate::scalar::Scalar;
use crate::scoring::{self, ScoreBundle, ScoreRow, ScoringOptions};
use crate::training::{train, Level, TrainedModel};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;
pub const SOFTWARE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything needed to score test images of one category for one seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct Bundle<T> {
    pub format_version: u32,
    pub software_version: String,
    pub config_hash: String,
    pub category: String,
    pub seed: u64,
    pub k: usize,
    /// Shot paths relative to the dataset root.
    pub shots: Vec<String>,
    pub flags: AblationFlags,
    pub temperature: f64,
    pub tap_layers: Vec<usize>,
    pub model: Option<TrainedModel<T>>,
    pub memory: Option<FeatureMemory<T>>,
}

impl<T: Scalar> Bundle<T> {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::input(format!("missing bundle {}", path.display())),
            _ => Error::io(path, e),
        })?;
        let b: Self = serde_json::from_slice(&bytes).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
        if b.format_version != BUNDLE_FORMAT_VERSION {
            return Err(Error::input(format!(
                "bundle {} has format version {}, expected {BUNDLE_FORMAT_VERSION}",
                path.display(),
                b.format_version
            )));
        }
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec(self)?)
    }
}

/// Run record: enough to tell whether two runs saw the same inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub software_version: String,
    pub config_hash: String,
    pub k: usize,
    pub seeds: Vec<u64>,
    /// category → seed → shot list (relative paths).
    pub shots: BTreeMap<String, BTreeMap<u64, Vec<String>>>,
}

impl Manifest {
    pub fn hash(&self) -> Result<String> {
        Ok(hex_digest(&serde_json::to_vec(self)?))
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn relative(root: &Path, p: &Path) -> String {
    let rel = p.strip_prefix(root).unwrap_or(p);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Prompt text for a category folder name, e.g. `metal_nut` → `metal nut`.
pub fn object_name(category: &str) -> String {
    category.replace('_', " ")
}

/// Loads the backbone named by the config.
pub fn load_backbone<T: Scalar>(config: &RunConfig) -> Result<(Backbone<T>, String)> {
    let ckpt = config
        .backbone
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::input("no backbone checkpoint configured (backbone.checkpoint or --checkpoint)"))?;
    let bytes = std::fs::read(ckpt).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::input(format!("checkpoint {} does not exist", ckpt.display())),
        _ => Error::io(ckpt, e),
    })?;
    let digest = hex_digest(&bytes);
    let opts = LoadOptions {
        vision_heads: config.backbone.vision_heads,
        text_heads: config.backbone.text_heads,
        activation: config.backbone.activation,
    };
    let model = ClipModel::<T>::from_bytes(&bytes, &opts).map_err(|e| e.context(ckpt.display().to_string()))?;
    drop(bytes);
    let tokenizer: Box<dyn Tokenizer> = match &config.backbone.vocab {
        Some(v) => Box::new(ClipBpeTokenizer::from_file(v)?),
        None => {
            log::warn!("no BPE vocabulary configured; using a hashing tokenizer");
            Box::new(HashTokenizer::new(model.arch.vocab_size)?)
        }
    };
    let backbone = Backbone::new(
        model,
        tokenizer,
        &config.backbone.architecture,
        &config.backbone.tap_layers,
        config.backbone.temperature,
    )?;
    Ok((backbone, digest))
}

pub struct Pipeline<T> {
    pub config: RunConfig,
    backbone: Arc<Backbone<T>>,
    backbone_digest: String,
    preprocess: PreprocessSpec,
    cache: Option<FeatureCache>,
}

impl<T: Scalar> Pipeline<T> {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let (backbone, digest) = load_backbone(&config)?;
        Self::with_backbone(config, Arc::new(backbone), digest)
    }

    /// `digest` identifies the weights in cache keys and bundles.
    pub fn with_backbone(config: RunConfig, backbone: Arc<Backbone<T>>, digest: String) -> Result<Self> {
        config.validate()?;
        let preprocess = PreprocessSpec {
            size: backbone.model.arch.image_size as u32,
            mean: config.preprocess.mean,
            std: config.preprocess.std,
        };
        let cache = if config.backbone.cache {
            let key = format!(
                "{}|{digest}|{}|{:?}|{:?}|{:?}",
                backbone.config.architecture_id,
                std::any::type_name::<T>(),
                backbone.config.tap_layers,
                preprocess.mean,
                preprocess.std
            );
            Some(FeatureCache::new(config.cache_dir(), &key)?)
        } else {
            None
        };
        Ok(Self {
            config,
            backbone,
            backbone_digest: digest,
            preprocess,
            cache,
        })
    }

    /// Same backbone and cache, different settings.
    pub fn reconfigure(&self, mut config: RunConfig) -> Result<Self> {
        if config.backbone.cache_dir.is_none() {
            config.backbone.cache_dir = Some(self.config.cache_dir());
        }
        Self::with_backbone(config, Arc::clone(&self.backbone), self.backbone_digest.clone())
    }

    pub fn backbone(&self) -> &Backbone<T> {
        &self.backbone
    }

    pub fn preprocess_spec(&self) -> &PreprocessSpec {
        &self.preprocess
    }

    pub fn categories(&self) -> Result<Vec<String>> {
        if !self.config.dataset.categories.is_empty() {
            return Ok(self.config.dataset.categories.clone());
        }
        let found = data::list_categories(&self.config.dataset.root)?;
        if found.is_empty() {
            return Err(Error::input(format!(
                "no categories under {}",
                self.config.dataset.root.display()
            )));
        }
        Ok(found)
    }

    pub fn scan(&self, category: &str) -> Result<CategorySpec> {
        data::scan_category(&self.config.dataset.root, category)
    }

    pub fn encode_path(&self, path: &Path) -> Result<DualEncoderOutput<T>> {
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get::<T>(path)) {
            return Ok(hit);
        }
        let tensor: Array3<T> = data::load_image(path, &self.preprocess)?;
        let out = self
            .backbone
            .encode_image(tensor.view())
            .map_err(|e| e.context(path.display().to_string()))?;
        if let Some(c) = &self.cache {
            c.put(path, &out)?;
        }
        Ok(out)
    }

    pub fn encode_all(&self, paths: &[PathBuf]) -> Result<Vec<DualEncoderOutput<T>>> {
        paths.par_iter().map(|p| self.encode_path(p)).collect()
    }

    fn lexicon(&self, spec: &CategorySpec) -> Result<SuffixLexicon> {
        let mut lex = match &self.config.prompts.lexicon {
            Some(p) => SuffixLexicon::load(p)?,
            None => SuffixLexicon::default(),
        };
        let mut generic = self.config.prompts.generic_suffixes.clone();
        for g in std::mem::take(&mut lex.generic) {
            if !generic.contains(&g) {
                generic.push(g);
            }
        }
        lex.generic = generic;
        if self.config.prompts.labels_from_dataset {
            lex.add_labels(&object_name(&spec.name), &spec.anomaly_labels);
        }
        Ok(lex)
    }

    fn new_bank(&self, spec: &CategorySpec, init_seed: u64) -> Result<PromptBank<T>> {
        let object = object_name(&spec.name);
        let shape = self.config.prompts.shape();
        let text = self.backbone.text();
        let tok = self.backbone.tokenizer.as_ref();
        if self.config.ablation.sc {
            build_bank(&object, &self.lexicon(spec)?, shape, init_seed, tok, text)
        } else {
            PromptBank::new(&object, &[], BankLayout::ClassContext, shape, init_seed, tok, text)
        }
    }

    /// Samples shots, trains both banks and builds the memory.
    pub fn train_one(&self, spec: &CategorySpec, seed: u64) -> Result<Bundle<T>> {
        let ctx = format!("{} seed {seed}", spec.name);
        let shots = data::sample_k_shot(spec, self.config.run.k, seed)?;
        let encoded = self.encode_all(&shots).map_err(|e| e.context(&ctx))?;
        let flags = self.config.ablation;
        let tau = self.backbone.temperature();
        let model = if flags.prompts() {
            let mut cfg = self.config.effective_training();
            cfg.seed = seed;
            let cls: Vec<_> = encoded.iter().map(|o| o.cls_feature.view()).collect();
            let patches: Vec<_> = encoded.iter().flat_map(|o| o.patch_map.cells.rows()).collect();
            let text = self.backbone.text();
            let image = train(self.new_bank(spec, seed * 2)?, text, &cls, tau, Level::Image, &cfg)
                .map_err(|e| e.context(format!("{ctx} image level")))?;
            let pixel = train(self.new_bank(spec, seed * 2 + 1)?, text, &patches, tau, Level::Pixel, &cfg)
                .map_err(|e| e.context(format!("{ctx} pixel level")))?;
            Some(TrainedModel {
                image,
                pixel,
                config: cfg,
            })
        } else {
            None
        };
        let memory = if flags.vad {
            Some(build_memory(&encoded).map_err(|e| e.context(&ctx))?)
        } else {
            None
        };
        Ok(Bundle {
            format_version: BUNDLE_FORMAT_VERSION,
            software_version: SOFTWARE_VERSION.into(),
            config_hash: self.config.hash()?,
            category: spec.name.clone(),
            seed,
            k: self.config.run.k,
            shots: shots.iter().map(|p| relative(&self.config.dataset.root, p)).collect(),
            flags,
            temperature: self.backbone.config.temperature,
            tap_layers: self.backbone.config.tap_layers.clone(),
            model,
            memory,
        })
    }

    pub fn bundle_path(&self, category: &str, seed: u64) -> PathBuf {
        self.config
            .run
            .output
            .join("bundles")
            .join(category)
            .join(format!("seed_{seed}.json"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.config.run.output.join("manifest.json")
    }

    /// Trains every (category, seed) and writes bundles plus the manifest.
    pub fn train_all(&self) -> Result<Manifest> {
        let out = &self.config.run.output;
        write_atomic(&out.join("config.toml"), self.config.to_toml()?.as_bytes())?;
        let mut shots = BTreeMap::new();
        for category in self.categories()? {
            let spec = self.scan(&category)?;
            let mut per_seed = BTreeMap::new();
            for &seed in &self.config.run.seeds {
                log::info!("training {category} seed {seed}");
                let bundle = self.train_one(&spec, seed)?;
                bundle.save(&self.bundle_path(&category, seed))?;
                per_seed.insert(seed, bundle.shots.clone());
            }
            shots.insert(category, per_seed);
        }
        let manifest = Manifest {
            software_version: SOFTWARE_VERSION.into(),
            config_hash: self.config.hash()?,
            k: self.config.run.k,
            seeds: self.config.run.seeds.clone(),
            shots,
        };
        write_atomic(&self.manifest_path(), &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn scoring_options(&self, flags: &AblationFlags) -> ScoringOptions {
        ScoringOptions {
            vad: flags.vad,
            prompts: flags.prompts(),
            sigma: self.config.scoring.sigma,
            output_size: self.preprocess.size as usize,
        }
    }

    pub fn score(&self, bundle: &Bundle<T>, query: &DualEncoderOutput<T>) -> Result<ScoreBundle<T>> {
        scoring::score_image(
            query,
            bundle.model.as_ref(),
            bundle.memory.as_ref(),
            T::lit(bundle.temperature),
            &self.scoring_options(&bundle.flags),
        )
    }

    pub fn score_path(&self, bundle: &Bundle<T>, path: &Path) -> Result<ScoreBundle<T>> {
        self.score(bundle, &self.encode_path(path)?)
    }

    /// Scores every test image of one (category, seed) and computes its
    /// metrics.
    pub fn evaluate_one(&self, spec: &CategorySpec, seed: u64) -> Result<MetricRow> {
        let ctx = format!("{} seed {seed}", spec.name);
        let bundle = Bundle::<T>::load(&self.bundle_path(&spec.name, seed))?;
        let want_pixel = self.config.eval.pixel && spec.has_masks;
        let run_dir = self.config.run.output.join("results").join(&spec.name).join(format!("seed_{seed}"));
        struct Scored {
            s_img: f64,
            map: Option<Array2<f64>>,
            mask: Option<Array2<u8>>,
        }
        let scored: Vec<Scored> = spec
            .test_items
            .par_iter()
            .map(|item| {
                let b = self.score_path(&bundle, &item.path)?;
                if self.config.eval.heatmaps {
                    let stem = item.path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                    let base = run_dir.join("heatmaps").join(format!("{}_{stem}", item.defect));
                    scoring::write_heatmap_png(&base.with_extension("png"), &b.m_pix)?;
                    let display = data::load_display_image(&item.path, &self.preprocess)?;
                    let mut overlay = base.into_os_string();
                    overlay.push("_overlay.png");
                    scoring::write_overlay_png(Path::new(&overlay), &display, &b.m_pix)?;
                }
                let (map, mask) = match (want_pixel, item.label, &item.mask) {
                    (false, _, _) | (true, Label::Anomaly, None) => (None, None),
                    (true, Label::Normal, _) => {
                        let n = self.preprocess.size as usize;
                        (Some(b.m_pix.mapv(|v| v.f64())), Some(Array2::zeros((n, n))))
                    }
                    (true, Label::Anomaly, Some(m)) => (
                        Some(b.m_pix.mapv(|v| v.f64())),
                        Some(data::load_mask(m, &self.preprocess)?),
                    ),
                };
                Ok(Scored {
                    s_img: b.s_img.f64(),
                    map,
                    mask,
                })
            })
            .collect::<Result<_>>()
            .map_err(|e: Error| e.context(&ctx))?;
        let rows: Vec<ScoreRow> = spec
            .test_items
            .iter()
            .zip(&scored)
            .map(|(item, s)| ScoreRow {
                image_path: relative(&self.config.dataset.root, &item.path),
                s_img: s.s_img,
            })
            .collect();
        scoring::write_score_csv(&run_dir.join("scores.csv"), &rows)?;
        let scores: Vec<f64> = scored.iter().map(|s| s.s_img).collect();
        let labels: Vec<bool> = spec.test_items.iter().map(|t| t.label == Label::Anomaly).collect();
        let image_auroc = eval::auroc(&scores, &labels).map_err(|e| e.context(&ctx))?;
        let image_aupr = eval::aupr(&scores, &labels).map_err(|e| e.context(&ctx))?;
        let (maps, masks): (Vec<_>, Vec<_>) = scored
            .into_iter()
            .filter_map(|s| s.map.zip(s.mask))
            .unzip();
        let has_region = masks.iter().any(|m| m.iter().any(|&v| v != 0));
        let has_normal = masks.iter().any(|m| m.iter().any(|&v| v == 0));
        let (pixel_auroc, pixel_pro) = if want_pixel && has_region && has_normal {
            (
                Some(eval::pixel_auroc(&maps, &masks)?),
                Some(eval::pro(&maps, &masks, self.config.eval.fpr_cap)?),
            )
        } else {
            if want_pixel {
                log::warn!("{ctx}: no usable masks; pixel metrics skipped");
            }
            (None, None)
        };
        Ok(MetricRow {
            category: spec.name.clone(),
            seed,
            image_auroc,
            image_aupr,
            pixel_auroc,
            pixel_pro,
        })
    }

    /// Evaluates all bundles and writes `report.{csv,txt,json}`.
    pub fn evaluate_all(&self) -> Result<MetricReport> {
        let mut rows = Vec::new();
        for category in self.categories()? {
            let spec = self.scan(&category)?;
            for &seed in &self.config.run.seeds {
                log::info!("evaluating {category} seed {seed}");
                rows.push(self.evaluate_one(&spec, seed)?);
            }
        }
        let report = eval::aggregate(rows);
        let out = &self.config.run.output;
        write_atomic(&out.join("report.csv"), report.to_csv()?.as_bytes())?;
        write_atomic(&out.join("report.txt"), report.to_table().as_bytes())?;
        write_atomic(&out.join("report.json"), &serde_json::to_vec_pretty(&report)?)?;
        Ok(report)
    }
}

/// The component grid of the ablation study, from the two-class baseline
/// to the full method.
pub fn ablation_matrix() -> Vec<(&'static str, AblationFlags)> {
    let off = AblationFlags {
        sc: false,
        eam: false,
        vad: false,
        align: false,
        coop_baseline: true,
    };
    let sc = AblationFlags {
        sc: true,
        align: true,
        coop_baseline: false,
        ..off
    };
    vec![
        ("baseline", off),
        ("sc", sc),
        ("sc+eam", AblationFlags { eam: true, ..sc }),
        (
            "vad",
            AblationFlags {
                coop_baseline: false,
                vad: true,
                ..off
            },
        ),
        ("full", AblationFlags::default()),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub name: String,
    pub flags: AblationFlags,
    pub report: MetricReport,
}

/// Trains and evaluates each setting under `<output>/ablation/<name>`.
pub fn run_ablation<T: Scalar>(
    base: &Pipeline<T>,
    rows: &[(&str, AblationFlags)],
) -> Result<Vec<AblationResult>> {
    let mut results = Vec::new();
    for (name, flags) in rows {
        let mut cfg = base.config.clone();
        cfg.ablation = *flags;
        cfg.run.output = base.config.run.output.join("ablation").join(name);
        let p = base.reconfigure(cfg)?;
        log::info!("ablation setting {name}");
        p.train_all()?;
        let report = p.evaluate_all()?;
        results.push(AblationResult {
            name: name.to_string(),
            flags: *flags,
            report,
        });
    }
    let out = &base.config.run.output;
    write_atomic(&out.join("ablation.txt"), ablation_table(&results).as_bytes())?;
    write_atomic(&out.join("ablation.json"), &serde_json::to_vec_pretty(&results)?)?;
    Ok(results)
}

pub fn ablation_table(results: &[AblationResult]) -> String {
    let cell = |m: Option<eval::MeanStd>| m.map(|v| v.percent()).unwrap_or_else(|| "-".into());
    let yes = |b: bool| if b { "✓" } else { "✗" };
    let mut out = format!("{:<10} {:>3} {:>3} {:>3}  {:>10}  {:>10}\n", "setting", "SC", "EAM", "VAD", "I-AUROC", "P-AUROC");
    for r in results {
        let f = &r.flags;
        out.push_str(&format!(
            "{:<10} {:>3} {:>3} {:>3}  {:>10}  {:>10}\n",
            r.name,
            yes(f.sc),
            yes(f.prompts() && f.eam),
            yes(f.vad),
            cell(r.report.dataset.image_auroc),
            cell(r.report.dataset.pixel_auroc)
        ));
    }
    out
}
