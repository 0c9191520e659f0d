use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sslseg_core::contrastive::{AugmentationConfig, ContrastiveConfig};
use sslseg_core::data::PhantomConfig;
use sslseg_core::finetune::{FinetuneAugmentConfig, FinetuneOptions};
use sslseg_core::model::UNetConfig;
use sslseg_core::regression::CorruptionConfig;
use sslseg_core::train::ScheduleConfig;

use crate::CliError;

/// Pretraining method of one experiment arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Contrastive,
    Regression,
    None,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Contrastive => "contrastive",
            Method::Regression => "regression",
            Method::None => "none",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "contrastive" => Ok(Method::Contrastive),
            "regression" => Ok(Method::Regression),
            "none" => Ok(Method::None),
            _ => Err(CliError::Config(format!("unknown pretraining method {s:?} (contrastive, regression or none)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Use files listed in a manifest instead of generating phantoms.
    pub manifest: Option<PathBuf>,
    pub unlabeled_subjects: usize,
    pub labeled_subjects: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub split_seed: u64,
    pub height: usize,
    pub width: usize,
    pub slices: usize,
    pub organ_count: [usize; 2],
    pub area_fraction: [f64; 2],
    pub texture_noise: f64,
    pub intensity_variation: f64,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let p = PhantomConfig::default();
        Self {
            manifest: None,
            unlabeled_subjects: 200,
            labeled_subjects: 32,
            train: 24,
            val: 2,
            test: 6,
            split_seed: 0,
            height: p.height,
            width: p.width,
            slices: p.slices,
            organ_count: [p.organ_count.0, p.organ_count.1],
            area_fraction: [p.area_fraction.0, p.area_fraction.1],
            texture_noise: p.texture_noise,
            intensity_variation: p.intensity_variation,
            seed: p.seed,
        }
    }
}

impl DatasetSection {
    pub fn phantom(&self) -> PhantomConfig {
        PhantomConfig {
            height: self.height,
            width: self.width,
            slices: self.slices,
            organ_count: (self.organ_count[0], self.organ_count[1]),
            area_fraction: (self.area_fraction[0], self.area_fraction[1]),
            texture_noise: self.texture_noise,
            intensity_variation: self.intensity_variation,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub global_embed_dim: usize,
    pub global_hidden_dim: usize,
    pub local_embed_dim: usize,
    /// Initialization seed of the backbone.
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = UNetConfig::default();
        Self {
            depth: m.depth,
            base_channels: m.base_channels,
            in_channels: m.in_channels,
            num_classes: m.num_classes,
            global_embed_dim: m.global_embed_dim,
            global_hidden_dim: m.global_hidden_dim,
            local_embed_dim: m.local_embed_dim,
            seed: 0,
        }
    }
}

impl ModelSection {
    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            depth: self.depth,
            base_channels: self.base_channels,
            in_channels: self.in_channels,
            num_classes: self.num_classes,
            global_embed_dim: self.global_embed_dim,
            global_hidden_dim: self.global_hidden_dim,
            local_embed_dim: self.local_embed_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    /// Method run by the `pretrain` command.
    pub method: Method,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let s = ScheduleConfig::default();
        Self {
            method: Method::Contrastive,
            epochs: s.epochs,
            lr: s.initial_lr,
            batch_size: s.batch_size,
            patience: s.plateau_patience,
            min_delta: s.plateau_min_delta,
            steps_per_epoch: None,
            seed: 0,
        }
    }
}

impl PretrainSection {
    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            epochs: self.epochs,
            initial_lr: self.lr,
            batch_size: self.batch_size,
            plateau_patience: self.patience,
            plateau_min_delta: self.min_delta,
            steps_per_epoch: self.steps_per_epoch,
            seed: self.seed,
            ..ScheduleConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionSection {
    pub fraction: f64,
    pub sigma: f64,
}

impl Default for RegressionSection {
    fn default() -> Self {
        let c = CorruptionConfig::default();
        Self { fraction: c.fraction, sigma: c.sigma }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveSection {
    pub temperature: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub patches_per_image: usize,
    pub freeze_encoder: bool,
    /// Epochs of the global stage; defaults to `pretrain.epochs`.
    pub global_epochs: Option<usize>,
    /// Epochs of the local stage; defaults to `pretrain.epochs`.
    pub local_epochs: Option<usize>,
}

impl Default for ContrastiveSection {
    fn default() -> Self {
        let c = ContrastiveConfig::default();
        Self {
            temperature: c.temperature,
            batch_size: c.batch_size,
            patch_size: c.local_patch_size,
            patches_per_image: c.local_patches_per_image,
            freeze_encoder: c.freeze_encoder,
            global_epochs: None,
            local_epochs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    /// Crop area range of contrastive views.
    pub crop_scale: [f64; 2],
    pub brightness: f64,
    pub contrast: [f64; 2],
    /// Finetuning augmentation on/off.
    pub finetune: bool,
    pub translate: f64,
    pub finetune_crop_scale: [f64; 2],
    pub elastic_sigma: f64,
    pub elastic_alpha: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let a = AugmentationConfig::default();
        let f = FinetuneAugmentConfig::default();
        Self {
            crop_scale: [a.crop_scale.0, a.crop_scale.1],
            brightness: a.brightness_delta,
            contrast: [a.contrast_factor.0, a.contrast_factor.1],
            finetune: true,
            translate: f.translate,
            finetune_crop_scale: [f.crop_scale.0, f.crop_scale.1],
            elastic_sigma: f.elastic_sigma,
            elastic_alpha: f.elastic_alpha,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub steps_per_epoch: Option<usize>,
    /// Train on random square crops of this size.
    pub train_crop: Option<usize>,
    pub n_values: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Arms of the sweep.
    pub methods: Vec<Method>,
    /// Draw the N-subject subsets as prefixes of one permutation per seed.
    pub nested_subsets: bool,
    /// Also run the random-init arm on the full training pool.
    pub baseline: bool,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let s = ScheduleConfig::default();
        Self {
            epochs: s.epochs,
            lr: s.initial_lr,
            batch_size: s.batch_size,
            patience: s.plateau_patience,
            min_delta: s.plateau_min_delta,
            steps_per_epoch: None,
            train_crop: None,
            n_values: vec![1, 2, 4, 8],
            seeds: vec![0, 1, 2],
            methods: vec![Method::Contrastive, Method::Regression, Method::None],
            nested_subsets: false,
            baseline: true,
        }
    }
}

impl FinetuneSection {
    pub fn schedule(&self, seed: u64) -> ScheduleConfig {
        ScheduleConfig {
            epochs: self.epochs,
            initial_lr: self.lr,
            batch_size: self.batch_size,
            plateau_patience: self.patience,
            plateau_min_delta: self.min_delta,
            steps_per_epoch: self.steps_per_epoch,
            seed,
            ..ScheduleConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Write measured wall-clock seconds; when false the column is zero so
    /// reruns produce byte-identical files.
    pub record_timings: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs"), record_timings: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub regression: RegressionSection,
    pub contrastive: ContrastiveSection,
    pub augment: AugmentSection,
    pub finetune: FinetuneSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: Self =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(m) = &config.dataset.manifest {
            if m.is_relative() {
                config.dataset.manifest = Some(path.parent().unwrap_or(Path::new(".")).join(m));
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let d = &self.dataset;
        if d.train + d.val + d.test > d.labeled_subjects && d.manifest.is_none() {
            return bad(format!(
                "dataset splits {}+{}+{} exceed {} labeled subjects",
                d.train, d.val, d.test, d.labeled_subjects
            ));
        }
        let f = &self.finetune;
        if f.seeds.is_empty() {
            return bad("finetune.seeds must not be empty".into());
        }
        if f.n_values.is_empty() || f.n_values.contains(&0) {
            return bad("finetune.n_values must be non-empty and positive".into());
        }
        if f.n_values.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("finetune.n_values {:?} must be strictly ascending", f.n_values));
        }
        if f.methods.is_empty() {
            return bad("finetune.methods must not be empty".into());
        }
        if let Some(c) = f.train_crop {
            let step = 1usize << self.model.depth;
            if c == 0 || c % step != 0 {
                return bad(format!("finetune.train_crop {c} must be a positive multiple of {step}"));
            }
        }
        self.model.unet().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if d.manifest.is_none() {
            self.dataset.phantom().validate()?;
            self.model
                .unet()
                .check_input(&[1, self.model.in_channels, d.height, d.width])
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        self.pretrain.schedule().validate()?;
        self.finetune.schedule(0).validate()?;
        self.corruption(0).validate()?;
        self.contrastive_config().validate()?;
        self.global_augmentation().validate()?;
        Ok(())
    }

    pub fn corruption(&self, seed: u64) -> CorruptionConfig {
        CorruptionConfig { fraction: self.regression.fraction, sigma: self.regression.sigma, seed }
    }

    pub fn contrastive_config(&self) -> ContrastiveConfig {
        let c = &self.contrastive;
        ContrastiveConfig {
            temperature: c.temperature,
            batch_size: c.batch_size,
            local_patch_size: c.patch_size,
            local_patches_per_image: c.patches_per_image,
            freeze_encoder: c.freeze_encoder,
            seed: self.pretrain.seed,
        }
    }

    pub fn global_augmentation(&self) -> AugmentationConfig {
        let a = &self.augment;
        AugmentationConfig {
            crop_scale: (a.crop_scale[0], a.crop_scale[1]),
            brightness_delta: a.brightness,
            contrast_factor: (a.contrast[0], a.contrast[1]),
            intensity_only: false,
        }
    }

    pub fn local_augmentation(&self) -> AugmentationConfig {
        AugmentationConfig { intensity_only: true, ..self.global_augmentation() }
    }

    pub fn finetune_options(&self) -> FinetuneOptions {
        let a = &self.augment;
        FinetuneOptions {
            augment: a.finetune.then(|| FinetuneAugmentConfig {
                translate: a.translate,
                crop_scale: (a.finetune_crop_scale[0], a.finetune_crop_scale[1]),
                elastic_sigma: a.elastic_sigma,
                elastic_alpha: a.elastic_alpha,
            }),
            train_crop: self.finetune.train_crop,
        }
    }
}
