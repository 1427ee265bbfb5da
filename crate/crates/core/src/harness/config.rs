use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::vae::hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorScheme {
    BetaVae,
    Zero,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    BetaVae,
    PbMcallester,
    PbQuadratic,
}

impl Objective {
    pub fn is_pac_bayes(self) -> bool {
        self != Objective::BetaVae
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Objective::BetaVae => "beta_vae",
            Objective::PbMcallester => "pb_mcallester",
            Objective::PbQuadratic => "pb_quadratic",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta_vae" => Ok(Objective::BetaVae),
            "pb_mcallester" => Ok(Objective::PbMcallester),
            "pb_quadratic" => Ok(Objective::PbQuadratic),
            _ => Err(Error::Config(format!(
                "unknown objective {s:?} (expected beta_vae, pb_mcallester or pb_quadratic)"
            ))),
        }
    }
}

impl PriorScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            PriorScheme::BetaVae => "beta_vae",
            PriorScheme::Zero => "zero",
            PriorScheme::Random => "random",
        }
    }
}

/// Which examples the posterior is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorData {
    /// The whole training set, prior split included.
    Full,
    /// Only the bound split.
    Bound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// IDX image file; relative paths resolve against the config file.
    pub train_images: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    /// Use only the first `train_count` training images.
    pub train_count: Option<usize>,
    pub test_count: Option<usize>,
    #[serde(default = "defaults::prior_fraction")]
    pub prior_fraction: f64,
    #[serde(default = "defaults::threshold")]
    pub threshold: f64,
    #[serde(default = "defaults::posterior_data")]
    pub posterior_data: PosteriorData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "defaults::input_dim")]
    pub input_dim: usize,
    #[serde(default = "defaults::hidden_widths")]
    pub hidden_widths: Vec<usize>,
    #[serde(default = "defaults::latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "defaults::p_min")]
    pub p_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    #[serde(default = "defaults::prior_scheme")]
    pub scheme: PriorScheme,
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::dropout")]
    pub dropout: f64,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "defaults::objective")]
    pub objective: Objective,
    /// β of the β-VAE baseline objective.
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    /// Dropout of the β-VAE baseline objective.
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "defaults::sigma")]
    pub sigma_phi: f64,
    #[serde(default = "defaults::sigma")]
    pub sigma_theta: f64,
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    /// Latent draws per example during training.
    #[serde(default = "defaults::one")]
    pub mc_samples: usize,
    #[serde(default = "defaults::one")]
    pub weight_noise_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySection {
    /// Confidence parameter of both the training objective and the certificates.
    #[serde(default = "defaults::delta")]
    pub delta: f64,
    /// Latent draws per example when evaluating losses.
    #[serde(default = "defaults::certify_mc")]
    pub mc_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSection {
    #[serde(default)]
    pub master: u64,
    #[serde(default = "defaults::one_u64")]
    pub certificate: u64,
}

/// Grid axes; an empty axis keeps the base configuration's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub beta: Vec<f64>,
    #[serde(default)]
    pub sigma: Vec<f64>,
    #[serde(default)]
    pub lambda: Vec<f64>,
    #[serde(default)]
    pub objective: Vec<Objective>,
    #[serde(default)]
    pub prior_scheme: Vec<PriorScheme>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    #[serde(default = "defaults::model")]
    pub model: ModelSection,
    #[serde(default = "defaults::prior")]
    pub prior: PriorSection,
    #[serde(default = "defaults::train")]
    pub train: TrainSection,
    #[serde(default = "defaults::certify")]
    pub certify: CertifySection,
    #[serde(default = "defaults::seeds")]
    pub seeds: SeedSection,
    #[serde(default)]
    pub sweep: SweepSection,
    /// Directory that relative data paths resolve against. Not serialised,
    /// so it never enters the config hash.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

mod defaults {
    use super::*;

    pub fn prior_fraction() -> f64 {
        0.5
    }
    pub fn threshold() -> f64 {
        crate::data::DEFAULT_THRESHOLD
    }
    pub fn posterior_data() -> PosteriorData {
        PosteriorData::Full
    }
    pub fn input_dim() -> usize {
        784
    }
    pub fn hidden_widths() -> Vec<usize> {
        vec![128, 128]
    }
    pub fn latent_dim() -> usize {
        8
    }
    pub fn p_min() -> f64 {
        crate::vae::DEFAULT_P_MIN
    }
    pub fn prior_scheme() -> PriorScheme {
        PriorScheme::BetaVae
    }
    pub fn beta() -> f64 {
        0.1
    }
    pub fn dropout() -> f64 {
        0.2
    }
    pub fn epochs() -> usize {
        50
    }
    pub fn objective() -> Objective {
        Objective::PbMcallester
    }
    pub fn sigma() -> f64 {
        0.01
    }
    pub fn lambda() -> f64 {
        1.0
    }
    pub fn batch_size() -> usize {
        100
    }
    pub fn learning_rate() -> f64 {
        1e-3
    }
    pub fn one() -> usize {
        1
    }
    pub fn one_u64() -> u64 {
        1
    }
    pub fn delta() -> f64 {
        0.05
    }
    pub fn certify_mc() -> usize {
        4
    }
    pub fn model() -> ModelSection {
        ModelSection {
            input_dim: input_dim(),
            hidden_widths: hidden_widths(),
            latent_dim: latent_dim(),
            p_min: p_min(),
        }
    }
    pub fn prior() -> PriorSection {
        PriorSection {
            scheme: prior_scheme(),
            beta: beta(),
            dropout: dropout(),
            epochs: epochs(),
        }
    }
    pub fn train() -> TrainSection {
        TrainSection {
            objective: objective(),
            beta: beta(),
            dropout: 0.0,
            sigma_phi: sigma(),
            sigma_theta: sigma(),
            lambda: lambda(),
            epochs: epochs(),
            batch_size: batch_size(),
            learning_rate: learning_rate(),
            mc_samples: one(),
            weight_noise_samples: one(),
        }
    }
    pub fn certify() -> CertifySection {
        CertifySection {
            delta: delta(),
            mc_samples: certify_mc(),
        }
    }
    pub fn seeds() -> SeedSection {
        SeedSection {
            master: 0,
            certificate: one_u64(),
        }
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Sets both the prior β and the baseline β.
    pub beta: Option<f64>,
    /// Sets both `σ_φ` and `σ_θ`.
    pub sigma: Option<f64>,
    pub lambda: Option<f64>,
    pub objective: Option<Objective>,
    pub seed: Option<u64>,
}

impl ExperimentConfig {
    /// Desk-scale defaults with the given image files.
    pub fn desk(train_images: PathBuf, test_images: Option<PathBuf>) -> Self {
        Self {
            data: DataSection {
                train_images: Some(train_images),
                test_images,
                train_count: Some(10_000),
                test_count: Some(10_000),
                prior_fraction: defaults::prior_fraction(),
                threshold: defaults::threshold(),
                posterior_data: defaults::posterior_data(),
            },
            model: defaults::model(),
            prior: defaults::prior(),
            train: defaults::train(),
            certify: defaults::certify(),
            seeds: defaults::seeds(),
            sweep: SweepSection::default(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn from_toml_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, base)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(b) = o.beta {
            self.prior.beta = b;
            self.train.beta = b;
        }
        if let Some(s) = o.sigma {
            self.train.sigma_phi = s;
            self.train.sigma_theta = s;
        }
        if let Some(l) = o.lambda {
            self.train.lambda = l;
        }
        if let Some(obj) = o.objective {
            self.train.objective = obj;
        }
        if let Some(seed) = o.seed {
            self.seeds.master = seed;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..1.0).contains(&self.data.prior_fraction) {
            return bad(format!("data.prior_fraction {} outside [0, 1)", self.data.prior_fraction));
        }
        if self.model.input_dim == 0 || self.model.latent_dim == 0 || self.model.hidden_widths.contains(&0) {
            return bad("model dimensions must be positive".into());
        }
        if !(self.model.p_min > 0.0 && self.model.p_min < 0.5) {
            return bad(format!("model.p_min {} outside (0, 0.5)", self.model.p_min));
        }
        for (name, v) in [("prior.beta", self.prior.beta), ("train.beta", self.train.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be non-negative"));
            }
        }
        for (name, v) in [("prior.dropout", self.prior.dropout), ("train.dropout", self.train.dropout)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1)"));
            }
        }
        for (name, v) in [("train.sigma_phi", self.train.sigma_phi), ("train.sigma_theta", self.train.sigma_theta)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.train.lambda) {
            return bad(format!("train.lambda {} outside [0, 1]", self.train.lambda));
        }
        if self.train.batch_size == 0 || self.train.mc_samples == 0 || self.train.weight_noise_samples == 0 {
            return bad("train.batch_size, mc_samples and weight_noise_samples must be positive".into());
        }
        if !(self.train.learning_rate >= 0.0 && self.train.learning_rate.is_finite()) {
            return bad(format!("train.learning_rate {} invalid", self.train.learning_rate));
        }
        if !(self.certify.delta > 0.0 && self.certify.delta < 1.0) {
            return bad(format!("certify.delta {} outside (0, 1)", self.certify.delta));
        }
        if self.certify.mc_samples == 0 {
            return bad("certify.mc_samples must be positive".into());
        }
        Ok(())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        short_hash(&serde_json::to_vec(self).expect("config serialises"))
    }

    /// Hash of everything that determines the prior checkpoint.
    pub fn prior_hash(&self) -> String {
        let key = (&self.data, &self.model, &self.prior, self.seeds.master);
        short_hash(&serde_json::to_vec(&key).expect("config serialises"))
    }
}

pub(crate) fn short_hash(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))[..16].to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[data]\ntrain_images = \"train.idx\"\n";

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL, "/tmp").unwrap();
        assert_eq!(cfg.model.hidden_widths, vec![128, 128]);
        assert_eq!(cfg.train.objective, Objective::PbMcallester);
        assert_eq!(cfg.certify.mc_samples, 4);
        assert_eq!(cfg.resolve(Path::new("train.idx")), PathBuf::from("/tmp/train.idx"));
    }

    #[test]
    fn toml_round_trip_preserves_hash() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL, "/a").unwrap();
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string(), "/b").unwrap();
        assert_eq!(cfg.hash(), again.hash());
        assert_eq!(cfg.hash().len(), 16);
    }

    #[test]
    fn beta_override_sets_both_betas() {
        let mut cfg = ExperimentConfig::from_toml_str(MINIMAL, "").unwrap();
        let before = cfg.hash();
        cfg.apply(&Overrides {
            beta: Some(2.0),
            ..Default::default()
        })
        .unwrap();
        assert_eq!((cfg.prior.beta, cfg.train.beta), (2.0, 2.0));
        assert_ne!(cfg.hash(), before);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("[data]\ntrain_imgs = \"x\"\n", "").is_err());
        let bad = format!("{MINIMAL}[train]\nlambda = 2.0\n");
        assert!(matches!(ExperimentConfig::from_toml_str(&bad, ""), Err(Error::Config(_))));
        assert!("pb_bogus".parse::<Objective>().is_err());
    }
}
