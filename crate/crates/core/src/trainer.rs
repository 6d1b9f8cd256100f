//! Group sampling, the optimisation loop and checkpoint files.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::MinMaxScaler;
use crate::dum::{dum_loss, GroupBatch, LossConfig, LossVariant, VarianceNet};
use crate::error::{Error, Result};
use crate::numkernel::{adam_step, AdamConfig, AdamState, Matrix};

/// Independent random streams derived from the one user seed.
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Per-row input transformation applied to training groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AugmentConfig {
    #[default]
    Identity,
    GaussianJitter {
        sigma: f64,
    },
    FeatureDropout {
        p: f64,
    },
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AugmentConfig::GaussianJitter { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(Error::Argument(format!("jitter sigma must be non-negative, got {sigma}")))
            }
            AugmentConfig::FeatureDropout { p } if !(0.0..1.0).contains(&p) => {
                Err(Error::Argument(format!("dropout probability must lie in [0,1), got {p}")))
            }
            _ => Ok(()),
        }
    }

    fn apply(&self, x: &mut Matrix, rng: &mut ChaCha8Rng) {
        match *self {
            AugmentConfig::Identity => {}
            AugmentConfig::GaussianJitter { sigma } => {
                let normal = Normal::new(0.0, 1.0).expect("unit normal");
                for v in x.data_mut() {
                    *v += sigma * normal.sample(rng);
                }
            }
            AugmentConfig::FeatureDropout { p } => {
                for v in x.data_mut() {
                    if rng.random_bool(p) {
                        *v = 0.0;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Examples per optimiser step; a multiple of `2m`.
    pub batch_size: usize,
    pub m: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub loss: LossConfig,
    pub seed: u64,
    pub augmentation: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            m: 2,
            hidden: 4096,
            learning_rate: 1e-3,
            loss: LossConfig::default(),
            seed: 0,
            augmentation: AugmentConfig::Identity,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Argument("m must be at least 1".into()));
        }
        if self.batch_size == 0 || self.batch_size % (2 * self.m) != 0 {
            return Err(Error::Argument(format!(
                "batch size {} must be a positive multiple of 2m = {}",
                self.batch_size,
                2 * self.m
            )));
        }
        if self.hidden == 0 {
            return Err(Error::Argument("hidden width must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.loss.variant == LossVariant::InfoNce && self.batch_size / (2 * self.m) < 2 {
            return Err(Error::Argument(
                "InfoNCE needs at least two groups per batch (batch size >= 4m)".into(),
            ));
        }
        self.loss.validate()?;
        self.augmentation.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Shuffles `0..n` with a seed mixed with the epoch and cuts it into groups
/// of `2m` consecutive indices. The remainder is dropped.
pub fn make_groups(n: usize, m: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if m == 0 {
        return Err(Error::Argument("m must be at least 1".into()));
    }
    if n < 2 * m {
        return Err(Error::Argument(format!("need at least 2m = {} examples, got {n}", 2 * m)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed ^ epoch as u64, STREAM_SHUFFLE));
    Ok(order.chunks_exact(2 * m).map(<[usize]>::to_vec).collect())
}

/// Trained parameters plus everything needed to use them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: VarianceNet,
    pub config: TrainConfig,
    /// Preprocessing fitted on the training data, applied again at scoring.
    pub scaler: Option<MinMaxScaler>,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    train: TrainConfig,
    scaler: Option<MinMaxScaler>,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DUMCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    /// `DUMCKPT1`, then little-endian `u32` version, `d`, `h`, every
    /// parameter as row-major `f64` in layer order, then a `u32`
    /// length-prefixed UTF-8 JSON config snapshot.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let io = |e| Error::io("<checkpoint>", e);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        for v in [CHECKPOINT_VERSION, self.net.input_dim() as u32, self.net.hidden() as u32] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for p in self.net.params() {
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        let snapshot = serde_json::to_string(&Snapshot {
            train: self.config,
            scaler: self.scaler.clone(),
        })
        .map_err(|e| Error::Format(format!("cannot serialise config snapshot: {e}")))?;
        w.write_all(&(snapshot.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(snapshot.as_bytes()).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let short = |what: &str| Error::Format(format!("truncated checkpoint while reading {what}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| short("magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a DUM checkpoint (bad magic)".into()));
        }
        let mut read_u32 = |what: &str| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| short(what))?;
            Ok(u32::from_le_bytes(b))
        };
        let version = read_u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::FormatVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let d = read_u32("d")? as usize;
        let h = read_u32("h")? as usize;
        let mut net = VarianceNet::new(d, h, &mut ChaCha8Rng::seed_from_u64(0))
            .map_err(|e| Error::Format(format!("invalid network shape: {e}")))?;
        for p in net.params_mut() {
            let mut buf = [0u8; 8];
            for v in p.value.data_mut() {
                r.read_exact(&mut buf).map_err(|_| short("parameters"))?;
                *v = f64::from_le_bytes(buf);
            }
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(|_| short("snapshot length"))?;
        let mut text = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut text).map_err(|_| short("snapshot"))?;
        let snapshot: Snapshot = serde_json::from_slice(&text)
            .map_err(|e| Error::Format(format!("invalid config snapshot: {e}")))?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::io("<checkpoint>", e))? != 0 {
            return Err(Error::Format("trailing bytes after config snapshot".into()));
        }
        Ok(Self {
            net,
            config: snapshot.train,
            scaler: snapshot.scaler,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean batch loss of every epoch.
    pub loss_history: Vec<f64>,
}

/// Fresh network for `cfg` and input width `d`.
pub fn init_net(d: usize, cfg: &TrainConfig) -> Result<VarianceNet> {
    VarianceNet::new(d, cfg.hidden, &mut stream_rng(cfg.seed, STREAM_INIT))
}

pub fn train(data: &Matrix, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_observer(data, cfg, |_, _| {})
}

/// Runs `cfg.epochs` epochs of Adam on the DUM loss. `observe` receives the
/// epoch index and its mean loss.
pub fn train_with_observer(data: &Matrix, cfg: &TrainConfig, mut observe: impl FnMut(usize, f64)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !data.is_finite() {
        return Err(Error::NonFinite("training data contains NaN or infinite entries".into()));
    }
    let n = data.rows();
    let group_len = 2 * cfg.m;
    let min_groups = match cfg.loss.variant {
        LossVariant::InfoNce => 2,
        LossVariant::PlainDot => 1,
    };
    if n / group_len < min_groups {
        return Err(Error::Argument(format!(
            "{n} examples form {} groups of 2m = {group_len}; the loss needs at least {min_groups}",
            n / group_len
        )));
    }
    let mut net = init_net(data.cols(), cfg)?;
    let mut states: Vec<AdamState> = net.params().iter().map(|p| AdamState::new(p.value.shape(), cfg.adam())).collect();
    let mut aug_rng = stream_rng(cfg.seed, STREAM_AUGMENT);
    let groups_per_batch = cfg.batch_size / group_len;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let groups = make_groups(n, cfg.m, cfg.seed, epoch)?;
        let mut total = 0.0;
        let mut steps = 0usize;
        for chunk in groups.chunks(groups_per_batch) {
            if chunk.len() < min_groups {
                continue;
            }
            let rows: Vec<usize> = chunk.iter().flatten().copied().collect();
            let mut x = data.select_rows(&rows);
            cfg.augmentation.apply(&mut x, &mut aug_rng);
            let batch = GroupBatch::new(x, cfg.m)?;
            let out = dum_loss(&batch, &net, &cfg.loss).map_err(|e| Error::Divergence {
                epoch,
                step: steps,
                detail: e.to_string(),
            })?;
            net.set_grads(&out.grads)?;
            for (p, s) in net.params_mut().into_iter().zip(states.iter_mut()) {
                adam_step(p, s).map_err(|e| Error::Divergence {
                    epoch,
                    step: steps,
                    detail: e.to_string(),
                })?;
            }
            net.zero_grad();
            total += out.loss;
            steps += 1;
        }
        let mean = total / steps as f64;
        history.push(mean);
        observe(epoch, mean);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            net,
            config: *cfg,
            scaler: None,
        },
        loss_history: history,
    })
}
