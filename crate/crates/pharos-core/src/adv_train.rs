//! Adversarial training: per batch, craft adversarial samples with the
//! attack engine and add an alignment term pulling `f(x′)` toward each
//! sample's pharos code, on top of the ordinary pairwise loss:
//! `L_adv = L_ori − Σ_i (1/K)·(b★_i)ᵀ f_θ(x′_i)`.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attack::{pgd_attack_indexed, AttackConfig};
use crate::error::{Error, Result};
use crate::hashcore::HashCode;
use crate::model::{HashNet, TrainConfig, TrainData, TrainOutcome, Trainer};
use crate::scalar::{real, Real};
use crate::semantics::{pgm_pharos, WeightScheme, WeightedPool};

/// Settings for the adversarial training loop.
#[derive(Debug, Clone)]
pub struct AdvTrainConfig {
    pub train: TrainConfig,
    /// Attack settings for the inner perturbation; `steps` is overridden
    /// by `inner_steps`.
    pub attack: AttackConfig,
    /// PGD iterations used while training (the evaluation attack keeps its
    /// own, larger T).
    pub inner_steps: usize,
}

impl Default for AdvTrainConfig {
    fn default() -> Self {
        AdvTrainConfig {
            train: TrainConfig::default(),
            attack: AttackConfig::default(),
            inner_steps: 10,
        }
    }
}

/// Trains a fresh net under the adversarial objective. Pharos codes are
/// recomputed from the training codes once per epoch and shared by all
/// samples with the same label set.
pub fn adv_train<T: Real>(
    data: TrainData<'_, T>,
    bits: usize,
    hidden: &[usize],
    cfg: &AdvTrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.train.validate()?;
    cfg.attack.validate()?;
    if data.len() < cfg.train.batch_size {
        return Err(Error::invalid(format!(
            "dataset of {} rows smaller than batch size {}",
            data.len(),
            cfg.train.batch_size
        )));
    }
    let mut net = HashNet::new_random(data.dim, hidden, bits, cfg.train.seed)?;
    let mut trainer = Trainer::new(&net, &cfg.train);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(0x5eed));
    let inner_cfg = AttackConfig { steps: cfg.inner_steps, ..cfg.attack.clone() };
    let k = bits;
    let mut loss_trace = Vec::with_capacity(cfg.train.epochs);

    for epoch in 0..cfg.train.epochs {
        let pharos_by_label = epoch_pharos_codes(&net, data)?;
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.train.batch_size) {
            let mut adversarial = Vec::with_capacity(batch.len());
            for &i in batch {
                let pharos = &pharos_by_label[data.labels[i].bits()];
                let stream = ((epoch as u64) << 32) | i as u64;
                let adv = pgd_attack_indexed(&net, data.row(i), pharos, &inner_cfg, stream)?;
                let upstream: Vec<T> = (0..k)
                    .map(|c| real::<T>(-(pharos.sign(c) as f64) / k as f64))
                    .collect();
                adversarial.push((adv.x_adv, upstream));
            }
            epoch_loss += trainer.step_pairwise(&mut net, data, batch, Some(&adversarial))?;
            batches += 1;
        }
        loss_trace.push(epoch_loss / batches.max(1) as f64);
    }
    Ok(TrainOutcome { net, loss_trace })
}

/// Encodes the training set with the current net and computes one pharos
/// code per distinct label set, Dice-weighted over the full training pool.
fn epoch_pharos_codes<T: Real>(
    net: &HashNet<T>,
    data: TrainData<'_, T>,
) -> Result<HashMap<Vec<u8>, HashCode>> {
    let codes = net.encode_dataset(data.features)?;
    let mut out: HashMap<Vec<u8>, HashCode> = HashMap::new();
    for label in data.labels {
        if out.contains_key(label.bits()) {
            continue;
        }
        let pool = WeightedPool::<T>::from_labels(&codes, data.labels, label)?;
        let pharos = pgm_pharos(&pool, WeightScheme::Dice)?;
        out.insert(label.bits().to_vec(), pharos.code);
    }
    Ok(out)
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}
