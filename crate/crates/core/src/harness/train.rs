use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::container::Container;
use super::optim::AdamState;
use crate::backbone::{Param, VelocityNet};
use crate::codec::LatentMap;
use crate::error::{Error, Result};
use crate::flows::{self, make_training_sample};
use crate::numerics::{Graph, Tensor};

/// One training pair. `image` is the source-side latent (the coarse
/// prediction for the sharpener).
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image: LatentMap,
    pub annotation: LatentMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub net: VelocityNet,
    pub adam: AdamState,
    /// Completed optimisation steps.
    pub step: u64,
    pub losses: Vec<LossRecord>,
    /// `[h, w, c]` of the annotation latents seen in training.
    pub latent_shape: Option<[usize; 3]>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: TrainConfig,
    step: u64,
    adam_t: u64,
    param_names: Vec<String>,
    losses: Vec<LossRecord>,
    latent_shape: Option<[usize; 3]>,
}

const CHECKPOINT_KIND: &str = "checkpoint";

impl Checkpoint {
    pub fn fresh(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = VelocityNet::init(config.seeds.params, config.net)?;
        let adam = AdamState::new(net.params().iter().map(|p| p.tensor.len()));
        Ok(Self {
            config: config.clone(),
            net,
            adam,
            step: 0,
            losses: Vec::new(),
            latent_shape: None,
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            config: self.config.clone(),
            step: self.step,
            adam_t: self.adam.t,
            param_names: self.net.params().iter().map(|p| p.name.clone()).collect(),
            losses: self.losses.clone(),
            latent_shape: self.latent_shape,
        };
        let mut c = Container::new(serde_json::to_value(meta)?);
        for (i, p) in self.net.params().iter().enumerate() {
            let shape = p.tensor.shape().to_vec();
            c.push(format!("param/{}", p.name), p.tensor.clone());
            c.push(
                format!("adam.m/{}", p.name),
                Tensor::new(shape.clone(), self.adam.m[i].clone())?,
            );
            c.push(
                format!("adam.v/{}", p.name),
                Tensor::new(shape, self.adam.v[i].clone())?,
            );
        }
        Ok(c)
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!(
                "expected a checkpoint, found {:?}",
                meta.kind
            )));
        }
        let mut params = Vec::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for name in &meta.param_names {
            let mut tensor = c.take(&format!("param/{name}"))?;
            tensor.set_requires_grad(false);
            params.push(Param {
                name: name.clone(),
                tensor,
            });
            m.push(c.take(&format!("adam.m/{name}"))?.into_data());
            v.push(c.take(&format!("adam.v/{name}"))?.into_data());
        }
        let net = VelocityNet::from_params(meta.config.net, meta.config.seeds.params, params)?;
        Ok(Self {
            config: meta.config,
            net,
            adam: AdamState {
                m,
                v,
                t: meta.adam_t,
            },
            step: meta.step,
            losses: meta.losses,
            latent_shape: meta.latent_shape,
        })
    }

    /// Writes the checkpoint and returns its content hash.
    pub fn save(&self, path: &Path) -> Result<String> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    pub fn hash(&self) -> Result<String> {
        self.to_container()?.hash_hex()
    }

    /// Rejects step-0 checkpoints where a trained network is required.
    pub fn require_trained(&self) -> Result<()> {
        if self.step == 0 {
            return Err(Error::Config(format!(
                "{} checkpoint is untrained (step 0)",
                self.config.variant.label()
            )));
        }
        Ok(())
    }
}

/// Dataset indices for optimisation step `step`. Each epoch is a fresh
/// permutation drawn from stream `epoch` of the data-order seed, so any step
/// can be reproduced without replaying earlier ones.
pub fn batch_indices(seed: u64, n: usize, batch: usize, step: u64) -> Vec<(u64, usize)> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|k| {
            let global = step * batch as u64 + k;
            let epoch = global / n as u64;
            if cached.as_ref().map_or(true, |c| c.0 != epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(epoch);
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            (
                epoch,
                cached.as_ref().unwrap().1[(global % n as u64) as usize],
            )
        })
        .collect()
}

/// Mean loss and gradient of one batch.
fn batch_gradient(
    ckpt: &Checkpoint,
    examples: &[Example],
    step: u64,
) -> Result<(f64, Vec<Vec<f64>>, u64)> {
    let cfg = &ckpt.config;
    let picks = batch_indices(cfg.seeds.data_order, examples.len(), cfg.batch_size, step);
    let mut noise = ChaCha8Rng::seed_from_u64(cfg.seeds.noise);
    noise.set_stream(step);
    let scale = 1.0 / cfg.batch_size as f64;
    let mut grads: Vec<Vec<f64>> = ckpt
        .net
        .params()
        .iter()
        .map(|p| vec![0.0; p.tensor.len()])
        .collect();
    let mut total = 0.0;
    for &(_, i) in &picks {
        let ex = &examples[i];
        let ts = make_training_sample(
            cfg.variant,
            &ex.image,
            &ex.annotation,
            &cfg.schedule,
            &mut noise,
        )?;
        let mut g = Graph::new();
        let pass = ckpt
            .net
            .forward_graph(&mut g, &ts.net_input, ts.sample.t, true)?;
        let loss = flows::loss_graph(cfg.variant, &mut g, pass.output, &ts.sample)?;
        total += g.value(loss).item() * scale;
        g.backward(loss)?;
        for (acc, &p) in grads.iter_mut().zip(&pass.params) {
            if let Some(gr) = g.grad(p) {
                acc.iter_mut().zip(gr).for_each(|(a, b)| *a += b * scale);
            }
        }
    }
    Ok((total, grads, picks.last().map_or(0, |p| p.0)))
}

/// Runs optimisation from `ckpt.step` up to `ckpt.config.steps`.
///
/// When `out_dir` is given and `checkpoint_every > 0`, intermediate
/// checkpoints are written as `step-<n>.ckpt`.
pub fn train_from(
    mut ckpt: Checkpoint,
    examples: &[Example],
    out_dir: Option<&Path>,
) -> Result<Checkpoint> {
    ckpt.config.validate()?;
    if examples.is_empty() {
        return Err(Error::Degenerate("empty training set".into()));
    }
    let shape = examples[0].annotation.shape();
    if examples
        .iter()
        .any(|e| e.annotation.shape() != shape || e.image.shape() != shape)
    {
        return Err(Error::Shape("training latents differ in shape".into()));
    }
    match ckpt.latent_shape {
        Some(s) if s != shape => {
            return Err(Error::Shape(format!(
                "checkpoint was trained on {s:?} latents, data has {shape:?}"
            )))
        }
        _ => ckpt.latent_shape = Some(shape),
    }
    let cfg = ckpt.config.clone();
    while ckpt.step < cfg.steps {
        let step = ckpt.step;
        let (loss, grads, epoch) = batch_gradient(&ckpt, examples, step)?;
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                data_stream: epoch,
                noise_stream: step,
            });
        }
        let mut params: Vec<&mut [f64]> = ckpt
            .net
            .params_mut()
            .iter_mut()
            .map(|p| p.tensor.data_mut())
            .collect();
        ckpt.adam.step(&cfg.optimizer, &mut params, &grads);
        ckpt.step += 1;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || ckpt.step == cfg.steps) {
            log::debug!("{} step {step} loss {loss:.6e}", cfg.variant.label());
            ckpt.losses.push(LossRecord { step, loss });
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0
                && ckpt.step % cfg.checkpoint_every == 0
                && ckpt.step < cfg.steps
            {
                ckpt.save(&dir.join(format!("step-{}.ckpt", ckpt.step)))?;
            }
        }
    }
    Ok(ckpt)
}

/// Trains from scratch.
pub fn train(config: &TrainConfig, examples: &[Example]) -> Result<Checkpoint> {
    train_from(Checkpoint::fresh(config)?, examples, None)
}

/// The prefix of `examples` selected by `config.data_fraction`, at least one.
pub fn data_subset<'a>(config: &TrainConfig, examples: &'a [Example]) -> &'a [Example] {
    let n = ((examples.len() as f64 * config.data_fraction).round() as usize)
        .clamp(1, examples.len().max(1));
    &examples[..n.min(examples.len())]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::FlowVariant;

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 10;
        let mut seen = vec![0; n];
        for step in 0..5 {
            for (epoch, i) in batch_indices(7, n, 2, step) {
                assert_eq!(epoch, 0);
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        let a: Vec<_> = (0..5).flat_map(|s| batch_indices(7, n, 2, s)).collect();
        let b: Vec<_> = (5..10).flat_map(|s| batch_indices(7, n, 2, s)).collect();
        assert_ne!(
            a.iter().map(|p| p.1).collect::<Vec<_>>(),
            b.iter().map(|p| p.1).collect::<Vec<_>>()
        );
    }

    fn tiny_examples() -> Vec<Example> {
        (0..3)
            .map(|k| Example {
                image: LatentMap::new(
                    4,
                    4,
                    3,
                    (0..48)
                        .map(|i| ((i * 7 + k) % 11) as f64 / 11.0 - 0.5)
                        .collect(),
                )
                .unwrap(),
                annotation: LatentMap::new(
                    4,
                    4,
                    3,
                    (0..48)
                        .map(|i| ((i * 3 + k) % 5) as f64 / 5.0 - 0.5)
                        .collect(),
                )
                .unwrap(),
            })
            .collect()
    }

    fn tiny_config(variant: FlowVariant, t: usize) -> TrainConfig {
        let mut cfg = TrainConfig::for_variant(variant, t).unwrap();
        cfg.net.hidden = 4;
        cfg.net.blocks = 1;
        cfg.batch_size = 2;
        cfg.steps = 3;
        cfg.optimizer.lr = 1e-2;
        cfg
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny_config(FlowVariant::STOCHASTIC_DA, 5);
        let ck = train(&cfg, &tiny_examples()).unwrap();
        let back = Checkpoint::from_container(
            Container::from_bytes(&ck.to_container().unwrap().to_bytes().unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(back.hash().unwrap(), ck.hash().unwrap());
        assert_eq!(back.step, 3);
    }

    #[test]
    fn zero_lr_keeps_initial_params() {
        let mut cfg = tiny_config(FlowVariant::CORE_PREDICTOR, 1);
        cfg.optimizer.lr = 0.0;
        let ck = train(&cfg, &tiny_examples()).unwrap();
        let init = VelocityNet::init(cfg.seeds.params, cfg.net).unwrap();
        for (a, b) in ck.net.params().iter().zip(init.params()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
    }

    #[test]
    fn non_finite_loss_aborts() {
        let cfg = tiny_config(FlowVariant::CORE_PREDICTOR, 1);
        let mut ex = tiny_examples();
        for e in &mut ex {
            e.annotation.data_mut()[0] = f64::NAN;
        }
        assert!(matches!(
            train(&cfg, &ex),
            Err(Error::NonFiniteLoss { step: 0, .. })
        ));
    }

    #[test]
    fn untrained_checkpoint_flagged() {
        let cfg = tiny_config(FlowVariant::CORE_PREDICTOR, 1);
        assert!(Checkpoint::fresh(&cfg).unwrap().require_trained().is_err());
    }
}
