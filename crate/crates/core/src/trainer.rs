//! Training loop: a fresh batch every epoch, one full-batch gradient, one
//! Adam step, and a learning rate halved on a fixed cadence.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jetnet::{Adam, AdamState, Checkpoint, CheckpointError, JetNetError, Network, NetworkConfig};
use crate::loss::{loss_and_gradient, sample_batch, BatchSizes, DomainSpec, LossBreakdown, LossContext, LossError, LossKind};
use crate::market::{MarketError, MarketParams, Payoff, UtilityFamily};
use crate::report::{write_csv, ReportError, TrainLogRow};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("loss component `{component}` became non-finite at epoch {epoch}")]
    NonFinite { epoch: usize, component: &'static str },
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Network(#[from] JetNetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("creating output directory {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub market: MarketParams,
    pub utility: UtilityFamily,
    pub loss_kind: LossKind,
    pub epochs: usize,
    pub lr0: f64,
    pub halve_every: usize,
    pub batch: BatchSizes,
    pub net: NetworkConfig,
    pub domain: DomainSpec,
    /// Seed of the batch sampler.
    pub seed: u64,
    /// Write an intermediate checkpoint every this many epochs (0 = only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.market.validate()?;
        self.utility.validate()?;
        self.net.validate()?;
        self.domain.validate()?;
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be positive".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(TrainError::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.halve_every == 0 {
            return Err(TrainError::Config("halve_every must be positive".into()));
        }
        let b = &self.batch;
        if b.interior == 0 || b.bottom == 0 || b.lateral < 2 {
            return Err(TrainError::Config(format!(
                "batch sizes must be positive with at least 2 lateral samples, got {b:?}"
            )));
        }
        Ok(())
    }

    /// `lr0 * 2^-floor(epoch / halve_every)`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        learning_rate(self.lr0, self.halve_every, epoch)
    }
}

pub fn learning_rate(lr0: f64, halve_every: usize, epoch: usize) -> f64 {
    lr0 * 0.5f64.powi((epoch / halve_every) as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    pub seconds: f64,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainRecord {
    pub fn log_rows(&self) -> Vec<TrainLogRow> {
        self.epochs.iter().map(TrainLogRow::from).collect()
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

fn checkpoint_of(net: &Network, config: &TrainConfig, epoch: usize, seconds: Option<f64>) -> Checkpoint {
    let mut ck = Checkpoint::from_network(net, epoch, config.loss_kind, config.seed);
    ck.market = Some(config.market);
    ck.utility = Some(config.utility);
    ck.domain = Some(config.domain);
    ck.train_seconds = seconds;
    ck
}

/// Trains a network; when `out_dir` is given, writes checkpoints and the
/// training log there.
pub fn train(config: &TrainConfig, out_dir: Option<&Path>) -> Result<(Network, TrainRecord), TrainError> {
    config.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    let consts = config.market.derived()?;
    let payoff = Payoff::new(config.utility, config.market.k);
    let ctx = LossContext::new(consts, config.domain, &payoff);
    let mut net = Network::new(config.net)?;
    let adam = Adam::default();
    let mut state = AdamState::new(net.params().len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let started = Instant::now();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let tick = Instant::now();
        let lr = config.learning_rate(epoch);
        let batch = sample_batch(&config.domain, &config.batch, &mut rng);
        let (loss, grad) = loss_and_gradient(config.loss_kind, &net, &batch, &ctx)?;
        if let Some(component) = loss.non_finite() {
            return Err(TrainError::NonFinite { epoch, component });
        }
        if !grad.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                component: "gradient",
            });
        }
        adam.step(&mut state, net.params_mut(), &grad, lr);
        epochs.push(EpochRecord {
            epoch,
            lr,
            loss,
            wall_ms: tick.elapsed().as_secs_f64() * 1e3,
        });
        if let Some(dir) = out_dir {
            let done = epoch + 1;
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.epochs {
                checkpoint_of(&net, config, done, None).save(&dir.join(format!("checkpoint_epoch_{done}.json")))?;
            }
        }
    }

    let seconds = started.elapsed().as_secs_f64();
    let mut record = TrainRecord {
        epochs,
        seconds,
        final_checkpoint: None,
    };
    if let Some(dir) = out_dir {
        let path = dir.join(CHECKPOINT_FILE);
        checkpoint_of(&net, config, config.epochs, Some(seconds)).save(&path)?;
        write_csv(&dir.join(TRAIN_LOG_FILE), &record.log_rows())?;
        record.final_checkpoint = Some(path);
    }
    Ok((net, record))
}

/// Final checkpoint of an in-memory run, as [`train`] would write it.
pub fn final_checkpoint(net: &Network, config: &TrainConfig, record: &TrainRecord) -> Checkpoint {
    checkpoint_of(net, config, config.epochs, Some(record.seconds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: LossKind, epochs: usize) -> TrainConfig {
        let market = MarketParams::example_one();
        let consts = market.derived().unwrap();
        TrainConfig {
            market,
            utility: UtilityFamily::Power { gamma: 0.5 },
            loss_kind: kind,
            epochs,
            lr0: 2e-3,
            halve_every: 100,
            batch: BatchSizes {
                interior: 64,
                bottom: 32,
                lateral: 16,
            },
            net: NetworkConfig::new(3, 12, 0),
            domain: DomainSpec::standard(&consts),
            seed: 0,
            checkpoint_every: 0,
        }
    }

    #[test]
    fn paper_schedule() {
        assert_eq!(learning_rate(2e-3, 4000, 0), 2e-3);
        assert_eq!(learning_rate(2e-3, 4000, 3999), 2e-3);
        assert_eq!(learning_rate(2e-3, 4000, 4000), 1e-3);
        assert_eq!(learning_rate(2e-3, 4000, 8000), 5e-4);
    }

    #[test]
    fn smoke_run_writes_loadable_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(LossKind::Fbr, 1);
        let (net, record) = train(&cfg, Some(dir.path())).unwrap();
        assert_eq!(record.epochs.len(), 1);
        let path = record.final_checkpoint.unwrap();
        let restored = Checkpoint::load(&path).unwrap().to_network().unwrap();
        assert_eq!(restored, net);
        assert!(dir.path().join(TRAIN_LOG_FILE).exists());
    }

    #[test]
    fn identical_configs_are_bit_identical() {
        let cfg = tiny(LossKind::Fbr, 5);
        let (a, _) = train(&cfg, None).unwrap();
        let (b, _) = train(&cfg, None).unwrap();
        let bits = |n: &Network| n.params().0.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn intermediate_checkpoints_follow_cadence() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(LossKind::Dgm, 6);
        cfg.checkpoint_every = 2;
        train(&cfg, Some(dir.path())).unwrap();
        assert!(dir.path().join("checkpoint_epoch_2.json").exists());
        assert!(dir.path().join("checkpoint_epoch_4.json").exists());
        assert!(!dir.path().join("checkpoint_epoch_6.json").exists());
        let ck = Checkpoint::load(&dir.path().join("checkpoint_epoch_4.json")).unwrap();
        assert_eq!(ck.epoch, 4);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = tiny(LossKind::Dgm, 0);
        assert!(matches!(train(&cfg, None), Err(TrainError::Config(_))));
        cfg.epochs = 1;
        cfg.lr0 = 0.0;
        assert!(train(&cfg, None).is_err());
        cfg.lr0 = 1e-3;
        cfg.halve_every = 0;
        assert!(train(&cfg, None).is_err());
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let mut cfg = tiny(LossKind::Dgm, 50);
        cfg.lr0 = 1e300;
        match train(&cfg, None) {
            Err(TrainError::NonFinite { epoch, .. }) => assert!(epoch > 0),
            other => panic!("expected non-finite abort, got {other:?}"),
        }
    }
}
