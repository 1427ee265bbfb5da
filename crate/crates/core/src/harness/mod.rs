//! Experiment orchestration: prior learning, posterior training,
//! certification, and grid sweeps.
//!
//! Every output file carries the config hash. Seeds: the split, the
//! initialisation and both training phases use `seeds.master` (through
//! separate substreams); certificates and loss evaluation use
//! `seeds.certificate`.

mod config;
mod sweep;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{
    CertifySection, DataSection, ExperimentConfig, ModelSection, Objective, Overrides, PosteriorData, PriorScheme,
    PriorSection, SeedSection, SweepSection, TrainSection,
};
pub use sweep::{cmd_sweep, grid_points, SweepRow};

use crate::certificate::{evaluate_certificates, CertificateConfig, CertificateSet};
use crate::checkpoint::{Checkpoint, CheckpointKind, Provenance};
use crate::data::{binarise, load_idx, split, DataSplit, ImageDataset, SplitSpec, SplitTag, IDX_IMAGES_MAGIC};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, InitScheme, RngStream, Substream};
use crate::pacbayes::{train_posterior, BoundKind, PacBayesConfig, PosteriorScale, PosteriorTraining, WeightPrior};
use crate::vae::{train_beta_vae, BetaVaeTraining, LossConfig, VaeArchitecture, VaeModel};

pub const PRIOR_CHECKPOINT: &str = "prior.ckpt";
pub const PRIOR_LOG: &str = "prior_log.jsonl";
pub const POSTERIOR_CHECKPOINT: &str = "posterior.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CERTIFICATES: &str = "certificates.json";
pub const REPORT: &str = "report.json";

/// Training, test and split datasets for one configuration.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: ImageDataset,
    pub test: Option<ImageDataset>,
    pub split: DataSplit,
}

impl LoadedData {
    pub fn posterior_set(&self, which: PosteriorData) -> &ImageDataset {
        match which {
            PosteriorData::Full => &self.train,
            PosteriorData::Bound => &self.split.bound,
        }
    }
}

fn load_images(cfg: &ExperimentConfig, path: &Path, limit: Option<usize>, tag: SplitTag) -> Result<ImageDataset> {
    let path = cfg.resolve(path);
    let raw = load_idx(&path, IDX_IMAGES_MAGIC)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ds = binarise(&raw, cfg.data.threshold, &name, tag)?;
    let ds = match limit {
        Some(n) => ds.take(n)?,
        None => ds,
    };
    if ds.dim() != cfg.model.input_dim {
        return Err(Error::Config(format!(
            "{} has {} pixels per image, model.input_dim is {}",
            path.display(),
            ds.dim(),
            cfg.model.input_dim
        )));
    }
    Ok(ds)
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<LoadedData> {
    let train_path = cfg
        .data
        .train_images
        .as_ref()
        .ok_or_else(|| Error::Config("data.train_images is required".into()))?;
    let train = load_images(cfg, train_path, cfg.data.train_count, SplitTag::Train)?;
    let test = cfg
        .data
        .test_images
        .as_ref()
        .map(|p| load_images(cfg, p, cfg.data.test_count, SplitTag::Test))
        .transpose()?;
    let split = split(
        &train,
        &SplitSpec {
            prior_fraction: cfg.data.prior_fraction,
            shuffle_seed: cfg.seeds.master,
        },
    )?;
    Ok(LoadedData { train, test, split })
}

pub fn architecture(cfg: &ExperimentConfig) -> Result<VaeArchitecture> {
    VaeArchitecture::new(cfg.model.input_dim, cfg.model.latent_dim, cfg.model.hidden_widths.clone())
}

#[derive(Serialize)]
struct Stamped<'a, T> {
    config_hash: &'a str,
    #[serde(flatten)]
    record: &'a T,
}

/// JSON-lines writer that stamps each record with the config hash.
struct LogWriter {
    file: fs::File,
    path: PathBuf,
    hash: String,
    error: Option<std::io::Error>,
}

impl LogWriter {
    fn create(path: PathBuf, hash: String) -> Result<Self> {
        let file = fs::File::create(&path).map_err(|e| Error::file(&path, e))?;
        Ok(Self {
            file,
            path,
            hash,
            error: None,
        })
    }

    fn write<T: Serialize>(&mut self, record: &T) {
        if self.error.is_some() {
            return;
        }
        let mut line = serde_json::to_vec(&Stamped {
            config_hash: &self.hash,
            record,
        })
        .expect("log record serialises");
        line.push(b'\n');
        if let Err(e) = self.file.write_all(&line) {
            self.error = Some(e);
        }
    }

    fn finish(self) -> Result<()> {
        match self.error {
            Some(e) => Err(Error::file(self.path, e)),
            None => Ok(()),
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

fn checkpoint(model: VaeModel, scale: Option<PosteriorScale>, kind: CheckpointKind, cfg: &ExperimentConfig) -> Checkpoint {
    Checkpoint {
        model,
        posterior_scale: scale,
        provenance: Provenance {
            kind,
            master_seed: cfg.seeds.master,
            config_hash: cfg.hash(),
        },
    }
}

/// Saves the checkpoint, then passes `result` through. Divergence still
/// leaves the restored model on disk.
fn save_then<T>(ckpt: &Checkpoint, path: &Path, result: Result<T>) -> Result<Checkpoint> {
    ckpt.save(path)?;
    result.map(|_| ckpt.clone())
}

/// Learn or construct the prior centre `(φ⁰, θ⁰)` and write `prior.ckpt`
/// and `prior_log.jsonl` into `out_dir`. The β-VAE scheme trains on the
/// prior split only; the other schemes read no data.
pub fn cmd_train_prior(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Checkpoint> {
    let data = match cfg.prior.scheme {
        PriorScheme::BetaVae => Some(load_data(cfg)?),
        _ => None,
    };
    train_prior_with(cfg, data.as_ref(), out_dir)
}

pub fn train_prior_with(cfg: &ExperimentConfig, data: Option<&LoadedData>, out_dir: &Path) -> Result<Checkpoint> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let arch = architecture(cfg)?;
    let mut init_rng = RngStream::new(cfg.seeds.master, Substream::Init);
    let mut log = LogWriter::create(out_dir.join(PRIOR_LOG), cfg.hash())?;
    let path = out_dir.join(PRIOR_CHECKPOINT);

    let (model, result) = match cfg.prior.scheme {
        PriorScheme::Zero => (VaeModel::init(arch, InitScheme::Zero, &mut init_rng)?, Ok(())),
        PriorScheme::Random => (VaeModel::init(arch, InitScheme::ClampedNormal, &mut init_rng)?, Ok(())),
        PriorScheme::BetaVae => {
            let data = data.ok_or_else(|| Error::Config("the beta_vae prior scheme needs data.train_images".into()))?;
            let prior_set = data.split.prior.as_ref().ok_or_else(|| {
                Error::Config("data.prior_fraction leaves no images for the beta_vae prior".into())
            })?;
            let mut model = VaeModel::init(arch, InitScheme::ClampedNormal, &mut init_rng)?;
            let training = BetaVaeTraining {
                beta: cfg.prior.beta,
                dropout_rate: cfg.prior.dropout,
                epochs: cfg.prior.epochs,
                batch_size: cfg.train.batch_size,
                adam: AdamConfig::with_learning_rate(cfg.train.learning_rate),
                loss: train_loss(cfg),
                seed: cfg.seeds.master,
            };
            let result = train_beta_vae(&mut model, prior_set, &training, |e| log.write(e)).map(|_| ());
            (model, result)
        }
    };
    log.finish()?;
    save_then(&checkpoint(model, None, CheckpointKind::Prior, cfg), &path, result)
}

fn train_loss(cfg: &ExperimentConfig) -> LossConfig {
    LossConfig {
        p_min: cfg.model.p_min,
        mc_samples: cfg.train.mc_samples,
    }
}

fn eval_loss(cfg: &ExperimentConfig) -> LossConfig {
    LossConfig {
        p_min: cfg.model.p_min,
        mc_samples: cfg.certify.mc_samples,
    }
}

fn check_architecture(cfg: &ExperimentConfig, ckpt: &Checkpoint, what: &str) -> Result<()> {
    if ckpt.model.architecture() != &architecture(cfg)? {
        return Err(Error::Validation(format!(
            "{what} checkpoint architecture {:?} does not match the configuration",
            ckpt.model.architecture()
        )));
    }
    Ok(())
}

pub fn weight_prior(cfg: &ExperimentConfig, prior: &Checkpoint) -> Result<WeightPrior> {
    WeightPrior::new(
        prior.model.phi().clone(),
        prior.model.theta().clone(),
        cfg.train.sigma_phi,
        cfg.train.sigma_theta,
    )
}

/// Train the configured objective and write `posterior.ckpt` and
/// `train_log.jsonl`. PAC-Bayes objectives start from the prior centre with
/// `s = σ/2`; the β-VAE baseline starts from a clamped-normal initialisation.
pub fn cmd_train(cfg: &ExperimentConfig, prior: &Checkpoint, out_dir: &Path) -> Result<Checkpoint> {
    let data = load_data(cfg)?;
    train_with(cfg, &data, prior, out_dir)
}

pub fn train_with(cfg: &ExperimentConfig, data: &LoadedData, prior: &Checkpoint, out_dir: &Path) -> Result<Checkpoint> {
    cfg.validate()?;
    check_architecture(cfg, prior, "prior")?;
    ensure_dir(out_dir)?;
    let train_set = data.posterior_set(cfg.data.posterior_data);
    let mut log = LogWriter::create(out_dir.join(TRAIN_LOG), cfg.hash())?;
    let path = out_dir.join(POSTERIOR_CHECKPOINT);
    let adam = AdamConfig::with_learning_rate(cfg.train.learning_rate);

    let (model, scale, result) = match cfg.train.objective {
        Objective::BetaVae => {
            let mut init_rng = RngStream::new(cfg.seeds.master, Substream::Init);
            let mut model = VaeModel::init(architecture(cfg)?, InitScheme::ClampedNormal, &mut init_rng)?;
            let training = BetaVaeTraining {
                beta: cfg.train.beta,
                dropout_rate: cfg.train.dropout,
                epochs: cfg.train.epochs,
                batch_size: cfg.train.batch_size,
                adam,
                loss: train_loss(cfg),
                seed: cfg.seeds.master,
            };
            let result = train_beta_vae(&mut model, train_set, &training, |e| log.write(e)).map(|_| ());
            (model, None, result)
        }
        objective => {
            let weight_prior = weight_prior(cfg, prior)?;
            let mut model = prior.model.clone();
            let mut scale = PosteriorScale::initial(&weight_prior);
            let training = PosteriorTraining {
                pacbayes: PacBayesConfig {
                    delta: cfg.certify.delta,
                    n_bound: data.split.bound.count(),
                    bound_kind: match objective {
                        Objective::PbQuadratic => BoundKind::Quadratic,
                        _ => BoundKind::Mcallester,
                    },
                    kl_attenuation: cfg.train.lambda,
                    weight_noise_samples: cfg.train.weight_noise_samples,
                },
                epochs: cfg.train.epochs,
                batch_size: cfg.train.batch_size,
                adam,
                loss: train_loss(cfg),
                seed: cfg.seeds.master,
            };
            let result =
                train_posterior(&mut model, &mut scale, &weight_prior, train_set, &training, |e| log.write(e)).map(|_| ());
            (model, Some(scale), result)
        }
    };
    log.finish()?;
    let kind = if scale.is_some() {
        CheckpointKind::Posterior
    } else {
        CheckpointKind::BetaVae
    };
    save_then(&checkpoint(model, scale, kind, cfg), &path, result)
}

/// Metrics and certificates for one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub objective: Objective,
    pub prior_scheme: PriorScheme,
    pub beta: f64,
    pub sigma_phi: f64,
    pub sigma_theta: f64,
    pub lambda: f64,
    pub n_train: usize,
    pub n_bound: usize,
    pub n_test: Option<usize>,
    /// Mean `−log p(x|z)` in nats per image on the posterior's training set.
    pub train_loss_raw: f64,
    pub train_loss_bounded: f64,
    pub test_loss_raw: Option<f64>,
    pub test_loss_bounded: Option<f64>,
    /// `test_loss_raw − train_loss_raw`.
    pub gap_raw: Option<f64>,
    pub gap_bounded: Option<f64>,
    /// `‖φ − φ⁰‖` and `‖θ − θ⁰‖`.
    pub distance_phi: f64,
    pub distance_theta: f64,
    pub s_phi: Option<f64>,
    pub s_theta: Option<f64>,
    pub certificates: CertificateSet,
    pub wall_clock_seconds: f64,
}

fn mean_losses(model: &VaeModel, data: &ImageDataset, loss: &LossConfig, rng: &mut RngStream) -> Result<(f64, f64)> {
    let mut total = 0.0;
    for chunk in data.chunks(1000) {
        total += model.reconstruction_nll(&chunk, loss, rng)?.iter().sum::<f64>();
    }
    let raw = total / data.count() as f64;
    Ok((raw, raw / loss.rescale_constant(model.input_dim())))
}

/// Evaluate certificates on the bound split plus train/test losses, and
/// write `certificates.json` and `report.json`.
pub fn cmd_certify(cfg: &ExperimentConfig, prior: &Checkpoint, posterior: &Checkpoint, out_dir: &Path) -> Result<RunReport> {
    let data = load_data(cfg)?;
    certify_with(cfg, &data, prior, posterior, out_dir)
}

pub fn certify_with(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    prior: &Checkpoint,
    posterior: &Checkpoint,
    out_dir: &Path,
) -> Result<RunReport> {
    let start = Instant::now();
    cfg.validate()?;
    check_architecture(cfg, prior, "prior")?;
    check_architecture(cfg, posterior, "posterior")?;
    ensure_dir(out_dir)?;
    let weight_prior = weight_prior(cfg, prior)?;
    let model = &posterior.model;
    let loss = eval_loss(cfg);
    let certificates = evaluate_certificates(
        model,
        &weight_prior,
        &data.split.bound,
        &CertificateConfig {
            delta: cfg.certify.delta,
            loss,
            noise_seed: cfg.seeds.certificate,
        },
    )?;

    let train_set = data.posterior_set(cfg.data.posterior_data);
    let mut train_rng = RngStream::indexed(cfg.seeds.certificate, Substream::Evaluation, 2);
    let (train_raw, train_bounded) = mean_losses(model, train_set, &loss, &mut train_rng)?;
    let test = data
        .test
        .as_ref()
        .map(|t| {
            let mut rng = RngStream::indexed(cfg.seeds.certificate, Substream::Evaluation, 3);
            mean_losses(model, t, &loss, &mut rng)
        })
        .transpose()?;

    let report = RunReport {
        config_hash: cfg.hash(),
        objective: cfg.train.objective,
        prior_scheme: cfg.prior.scheme,
        beta: cfg.train.beta,
        sigma_phi: cfg.train.sigma_phi,
        sigma_theta: cfg.train.sigma_theta,
        lambda: cfg.train.lambda,
        n_train: train_set.count(),
        n_bound: data.split.bound.count(),
        n_test: data.test.as_ref().map(ImageDataset::count),
        train_loss_raw: train_raw,
        train_loss_bounded: train_bounded,
        test_loss_raw: test.map(|t| t.0),
        test_loss_bounded: test.map(|t| t.1),
        gap_raw: test.map(|t| t.0 - train_raw),
        gap_bounded: test.map(|t| t.1 - train_bounded),
        distance_phi: model.phi().distance_sq(&weight_prior.phi0).sqrt(),
        distance_theta: model.theta().distance_sq(&weight_prior.theta0).sqrt(),
        s_phi: posterior.posterior_scale.map(|s| s.s_phi()),
        s_theta: posterior.posterior_scale.map(|s| s.s_theta()),
        certificates,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    write_json(
        &out_dir.join(CERTIFICATES),
        &Stamped {
            config_hash: &report.config_hash,
            record: &report.certificates,
        },
    )?;
    write_json(&out_dir.join(REPORT), &report)?;
    Ok(report)
}

/// Prior, posterior and certification in one directory.
pub fn run_pipeline(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunReport> {
    let start = Instant::now();
    let data = load_data(cfg)?;
    let prior = train_prior_with(cfg, Some(&data), out_dir)?;
    let posterior = train_with(cfg, &data, &prior, out_dir)?;
    let mut report = certify_with(cfg, &data, &prior, &posterior, out_dir)?;
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    write_json(&out_dir.join(REPORT), &report)?;
    Ok(report)
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
