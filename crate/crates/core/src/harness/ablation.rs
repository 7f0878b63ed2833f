//! Ablation ladder and training-step sweep on in-memory synthetic data.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{Seeds, TrainConfig};
use super::optim::AdamConfig;
use super::pipeline::{
    coarse_examples, coarse_pairs, examples_from, latent_pairs, latent_to_unit, predict_latent,
    refine, sample_metrics, unit_to_annotation,
};
use super::train::{data_subset, train, Checkpoint, Example};
use crate::backbone::NetConfig;
use crate::codec::{CodecSpec, LatentMap};
use crate::error::{Error, Result};
use crate::flows::FlowVariant;
use crate::metrics::{self, MetricsReport, SpectrumBin};
use crate::scenes::{self, LatentPair, SceneConfig, SceneSample, Split, Task};

/// Rows of the ablation ladder, in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    StochasticDa,
    DeterministicDa,
    SingleStep,
    CleanData,
    Lcm,
    NoPackUnpack,
    DetailSharpener,
}

impl Arm {
    pub const LADDER: [Arm; 7] = [
        Arm::StochasticDa,
        Arm::DeterministicDa,
        Arm::SingleStep,
        Arm::CleanData,
        Arm::Lcm,
        Arm::NoPackUnpack,
        Arm::DetailSharpener,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Arm::StochasticDa => "Stochastic-DA",
            Arm::DeterministicDa => "Deterministic-DA",
            Arm::SingleStep => "+Single-Step",
            Arm::CleanData => "+Clean-Data",
            Arm::Lcm => "+LCM",
            Arm::NoPackUnpack => "(w/o Pack-Unpack)",
            Arm::DetailSharpener => "+Detail Sharpener",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub scenes: SceneConfig,
    pub task: Task,
    pub codec: CodecSpec,
    /// Trunk shape shared by every arm; conditioning, LCM and packing are
    /// set per arm.
    pub net: NetConfig,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub sharpener_steps: u64,
    /// `T` of the multi-step arms.
    pub flow_train_steps: usize,
    pub refine_steps: usize,
    pub replicates: Vec<u64>,
    pub arms: Vec<Arm>,
    pub variance_noise_seeds: usize,
    pub variance_samples: usize,
    pub sweep_train_steps: Vec<usize>,
    pub sweep_scales: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            scenes: SceneConfig::default(),
            task: Task::Depth,
            codec: CodecSpec::AVGPOOL2,
            net: NetConfig {
                hidden: 16,
                blocks: 2,
                ..NetConfig::default()
            },
            optimizer: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            batch_size: 4,
            steps: 1500,
            sharpener_steps: 1500,
            flow_train_steps: 50,
            refine_steps: 10,
            replicates: vec![0, 1, 2],
            arms: Arm::LADDER.to_vec(),
            variance_noise_seeds: 8,
            variance_samples: 4,
            sweep_train_steps: vec![1, 10, 50, 100],
            sweep_scales: vec![0.25, 0.5, 1.0],
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenes.validate()?;
        if self.replicates.is_empty() {
            return Err(Error::Config(
                "at least one replicate seed is required".into(),
            ));
        }
        if self.arms.contains(&Arm::StochasticDa) && self.variance_noise_seeds < 2 {
            return Err(Error::Config(
                "seed variance needs at least two noise seeds".into(),
            ));
        }
        Ok(())
    }

    /// Training config of a base (image-driven) arm.
    pub fn arm_config(&self, arm: Arm, replicate: u64) -> Result<TrainConfig> {
        let (variant, t, lcm, pack) = match arm {
            Arm::StochasticDa => (
                FlowVariant::STOCHASTIC_DA,
                self.flow_train_steps,
                false,
                true,
            ),
            Arm::DeterministicDa => (
                FlowVariant::DETERMINISTIC_DA,
                self.flow_train_steps,
                false,
                true,
            ),
            Arm::SingleStep => (FlowVariant::DETERMINISTIC_DA, 1, false, true),
            Arm::CleanData => (FlowVariant::CORE_PREDICTOR, 1, false, true),
            Arm::Lcm | Arm::DetailSharpener => (FlowVariant::CORE_PREDICTOR, 1, true, true),
            Arm::NoPackUnpack => (FlowVariant::CORE_PREDICTOR, 1, false, false),
        };
        let mut cfg = self.base_config(variant, t, replicate)?;
        cfg.net.lcm = lcm;
        cfg.net.pack = pack;
        Ok(cfg)
    }

    /// Deterministic flow with `train_steps` on a data fraction, as swept.
    pub fn sweep_config(
        &self,
        train_steps: usize,
        scale: f64,
        replicate: u64,
    ) -> Result<TrainConfig> {
        let mut cfg = self.base_config(FlowVariant::DETERMINISTIC_DA, train_steps, replicate)?;
        cfg.data_fraction = scale;
        Ok(cfg)
    }

    pub fn sharpener_config(&self, replicate: u64) -> Result<TrainConfig> {
        let mut cfg = self.base_config(FlowVariant::SHARPENER, 10, replicate)?;
        cfg.steps = self.sharpener_steps;
        Ok(cfg)
    }

    fn base_config(&self, variant: FlowVariant, t: usize, replicate: u64) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::for_variant(variant, t)?;
        cfg.net = NetConfig {
            conditioned: cfg.net.conditioned,
            lcm: false,
            pack: true,
            ..self.net
        };
        cfg.codec = self.codec;
        cfg.task = self.task;
        cfg.optimizer = self.optimizer;
        cfg.batch_size = self.batch_size;
        cfg.steps = self.steps;
        cfg.seeds = Seeds::from_replicate(replicate);
        cfg.log_every = 50;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Train and validation data of one ablation run.
pub struct AblationData {
    pub train: Vec<LatentPair>,
    pub val: Vec<LatentPair>,
    pub val_samples: Vec<SceneSample>,
    pub examples: Vec<Example>,
}

impl AblationData {
    pub fn generate(cfg: &AblationConfig) -> Result<Self> {
        let train_samples = scenes::generate_split(&cfg.scenes, Split::Train)?;
        let val_samples = scenes::generate_split(&cfg.scenes, Split::Val)?;
        let train = latent_pairs(&train_samples, cfg.task, cfg.codec)?;
        let val = latent_pairs(&val_samples, cfg.task, cfg.codec)?;
        let examples = examples_from(&train);
        Ok(Self {
            train,
            val,
            val_samples,
            examples,
        })
    }
}

/// Validation results of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    /// Mean latent grid-artifact statistic of the predictions.
    pub block_discontinuity: f64,
    pub spectrum: Vec<SpectrumBin>,
}

/// Evaluates predicted latents against the validation set.
pub fn evaluate_latents(
    cfg: &AblationConfig,
    data: &AblationData,
    preds: &[LatentMap],
    method: &str,
) -> Result<Evaluation> {
    let mut rows = Vec::with_capacity(preds.len());
    let mut units = Vec::with_capacity(preds.len());
    let mut block = 0.0;
    for (i, z) in preds.iter().enumerate() {
        let unit = latent_to_unit(z, cfg.task, cfg.codec)?;
        let ann = unit_to_annotation(&unit, cfg.task, data.val[i].normalization);
        rows.push(sample_metrics(
            &format!("{i:05}"),
            cfg.task,
            &ann,
            &data.val_samples[i],
        )?);
        block += metrics::block_discontinuity(z);
        units.push(unit);
    }
    Ok(Evaluation {
        metrics: MetricsReport::new(method, "val", rows),
        block_discontinuity: block / preds.len().max(1) as f64,
        spectrum: metrics::mean_spectrum(&units)?,
    })
}

pub fn predict_val(ckpt: &Checkpoint, data: &AblationData) -> Result<Vec<LatentMap>> {
    data.val
        .iter()
        .map(|p| predict_latent(ckpt, &p.image, 0))
        .collect()
}

/// Mean over pixels and inputs of the per-pixel standard deviation of the
/// decoded prediction across `seeds` noise draws. Deviations are taken from
/// the first draw, so identical draws give exactly zero.
pub fn seed_variance<P>(
    predict: P,
    inputs: &[LatentMap],
    seeds: usize,
    task: Task,
    codec: CodecSpec,
) -> Result<f64>
where
    P: Fn(&LatentMap, u64) -> Result<LatentMap>,
{
    let mut total = 0.0;
    let mut count = 0usize;
    for z in inputs {
        let draws = (0..seeds as u64)
            .map(|s| latent_to_unit(&predict(z, 1000 + s)?, task, codec))
            .collect::<Result<Vec<_>>>()?;
        let n = seeds as f64;
        for p in 0..draws[0].len() {
            let base = draws[0].data()[p];
            let d: Vec<f64> = draws.iter().map(|m| m.data()[p] - base).collect();
            let mean = d.iter().sum::<f64>() / n;
            let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            total += var.sqrt();
            count += 1;
        }
    }
    Ok(if count > 0 { total / count as f64 } else { 0.0 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub replicate: u64,
    /// `None` on success, otherwise the training or evaluation error.
    pub failure: Option<String>,
    pub absrel: Option<f64>,
    pub delta1: Option<f64>,
    pub mean_angle: Option<f64>,
    pub below_11_25: Option<f64>,
    pub block_discontinuity: Option<f64>,
    pub seed_variance: Option<f64>,
    pub top_quartile_log_power: Option<f64>,
    pub final_loss: Option<f64>,
    pub checkpoint_hash: Option<String>,
}

impl ArmResult {
    fn failed(arm: Arm, replicate: u64, e: &Error) -> Self {
        Self {
            arm,
            replicate,
            failure: Some(e.to_string()),
            absrel: None,
            delta1: None,
            mean_angle: None,
            below_11_25: None,
            block_discontinuity: None,
            seed_variance: None,
            top_quartile_log_power: None,
            final_loss: None,
            checkpoint_hash: None,
        }
    }

    fn from_eval(
        arm: Arm,
        replicate: u64,
        ck: &Checkpoint,
        ev: &Evaluation,
        variance: Option<f64>,
    ) -> Result<Self> {
        let a = &ev.metrics.aggregate;
        Ok(Self {
            arm,
            replicate,
            failure: None,
            absrel: a.absrel,
            delta1: a.delta1,
            mean_angle: a.mean_angle,
            below_11_25: a.below_11_25,
            block_discontinuity: Some(ev.block_discontinuity),
            seed_variance: variance,
            top_quartile_log_power: Some(metrics::top_quartile_log_power(&ev.spectrum)),
            final_loss: ck.losses.last().map(|l| l.loss),
            checkpoint_hash: Some(ck.hash()?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub train_steps: usize,
    pub scale: f64,
    pub replicate: u64,
    pub absrel: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<ArmResult>,
    pub sweep: Vec<SweepResult>,
    /// Top-quartile log power of the ground-truth validation maps.
    pub gt_top_quartile_log_power: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6e}")
    } else {
        String::new()
    }
}

impl AblationReport {
    pub fn arm_rows(&self, arm: Arm) -> Vec<&ArmResult> {
        self.rows.iter().filter(|r| r.arm == arm).collect()
    }

    /// Value of `f` for `arm` at `replicate`, if that run succeeded.
    pub fn value(
        &self,
        arm: Arm,
        replicate: u64,
        f: impl Fn(&ArmResult) -> Option<f64>,
    ) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.arm == arm && r.replicate == replicate)
            .and_then(f)
    }

    pub fn sweep_absrel(&self, train_steps: usize, scale: f64, replicate: u64) -> Option<f64> {
        self.sweep
            .iter()
            .find(|s| s.train_steps == train_steps && s.scale == scale && s.replicate == replicate)
            .and_then(|s| s.absrel)
    }

    /// One row per arm: mean and standard deviation over replicates.
    pub fn table_csv(&self) -> String {
        let mut out = String::from(
            "arm,replicates,failed,absrel_mean,absrel_std,delta1_mean,delta1_std,\
             mean_angle_mean,below_11_25_mean,block_discontinuity_mean,seed_variance_mean,top_quartile_log_power_mean\n",
        );
        let mut arms: Vec<Arm> = Vec::new();
        for r in &self.rows {
            if !arms.contains(&r.arm) {
                arms.push(r.arm);
            }
        }
        for arm in arms {
            let rows = self.arm_rows(arm);
            let ok: Vec<&&ArmResult> = rows.iter().filter(|r| r.failure.is_none()).collect();
            let col = |f: &dyn Fn(&ArmResult) -> Option<f64>| -> (f64, f64) {
                let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
                mean_std(&v)
            };
            let absrel = col(&|r| r.absrel);
            let delta1 = col(&|r| r.delta1);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                arm.label(),
                rows.len(),
                rows.len() - ok.len(),
                fmt(absrel.0),
                fmt(absrel.1),
                fmt(delta1.0),
                fmt(delta1.1),
                fmt(col(&|r| r.mean_angle).0),
                fmt(col(&|r| r.below_11_25).0),
                fmt(col(&|r| r.block_discontinuity).0),
                fmt(col(&|r| r.seed_variance).0),
                fmt(col(&|r| r.top_quartile_log_power).0),
            );
        }
        out
    }

    pub fn sweep_csv(&self) -> String {
        let mut out = String::from("train_steps,scale,replicate,absrel\n");
        for s in &self.sweep {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                s.train_steps,
                s.scale,
                s.replicate,
                s.absrel.map(fmt).unwrap_or_default()
            );
        }
        out
    }
}

struct Trained {
    ckpt: Checkpoint,
    eval: Evaluation,
}

/// Trains and evaluates configs, reusing results for identical configs.
struct Runner<'a> {
    cfg: &'a AblationConfig,
    data: &'a AblationData,
    cache: HashMap<String, std::result::Result<std::rc::Rc<Trained>, String>>,
}

impl Runner<'_> {
    fn run(
        &mut self,
        tc: &TrainConfig,
        label: &str,
    ) -> std::result::Result<std::rc::Rc<Trained>, String> {
        let key = serde_json::to_string(tc).expect("config serialises");
        if let Some(hit) = self.cache.get(&key) {
            return hit.clone();
        }
        let started = std::time::Instant::now();
        let result = (|| {
            let ckpt = train(tc, data_subset(tc, &self.data.examples))?;
            let preds = predict_val(&ckpt, self.data)?;
            let eval = evaluate_latents(self.cfg, self.data, &preds, label)?;
            Ok::<_, Error>(Trained { ckpt, eval })
        })()
        .map(std::rc::Rc::new)
        .map_err(|e| e.to_string());
        log::info!(
            "{label} (seed {}, T={}, scale {}) done in {:.1}s",
            tc.seeds.params,
            tc.schedule.train_steps,
            tc.data_fraction,
            started.elapsed().as_secs_f64()
        );
        self.cache.insert(key, result.clone());
        result
    }
}

fn run_sharpener(
    cfg: &AblationConfig,
    data: &AblationData,
    core: &Trained,
    replicate: u64,
    variance_inputs: &[LatentMap],
) -> Result<ArmResult> {
    let pairs = coarse_pairs(&core.ckpt, &data.train)?;
    let sharp = train(&cfg.sharpener_config(replicate)?, &coarse_examples(&pairs))?;
    let preds = data
        .val
        .iter()
        .map(|p| {
            refine(
                &sharp,
                &predict_latent(&core.ckpt, &p.image, 0)?,
                cfg.refine_steps,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let ev = evaluate_latents(cfg, data, &preds, Arm::DetailSharpener.label())?;
    let two_stage = |z: &LatentMap, seed| {
        refine(
            &sharp,
            &predict_latent(&core.ckpt, z, seed)?,
            cfg.refine_steps,
        )
    };
    let var = seed_variance(
        two_stage,
        variance_inputs,
        cfg.variance_noise_seeds,
        cfg.task,
        cfg.codec,
    )?;
    ArmResult::from_eval(Arm::DetailSharpener, replicate, &sharp, &ev, Some(var))
}

/// Trains every arm and sweep point for every replicate and evaluates on the
/// validation split.
pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let data = AblationData::generate(cfg)?;
    run_ablation_on(cfg, &data)
}

pub fn run_ablation_on(cfg: &AblationConfig, data: &AblationData) -> Result<AblationReport> {
    cfg.validate()?;
    let mut runner = Runner {
        cfg,
        data,
        cache: HashMap::new(),
    };
    let variance_inputs: Vec<LatentMap> = data
        .val
        .iter()
        .take(cfg.variance_samples)
        .map(|p| p.image.clone())
        .collect();
    let mut rows = Vec::new();
    let mut sweep = Vec::new();
    for &rep in &cfg.replicates {
        for &arm in &cfg.arms {
            let tc = cfg.arm_config(arm, rep)?;
            let trained = runner.run(&tc, arm.label());
            let row = match (arm, trained) {
                (_, Err(e)) => ArmResult::failed(arm, rep, &Error::Degenerate(e)),
                (Arm::DetailSharpener, Ok(core)) => {
                    run_sharpener(cfg, data, &core, rep, &variance_inputs)
                        .unwrap_or_else(|e| ArmResult::failed(arm, rep, &e))
                }
                (_, Ok(t)) => seed_variance(
                    |z: &LatentMap, s| predict_latent(&t.ckpt, z, s),
                    &variance_inputs,
                    cfg.variance_noise_seeds,
                    cfg.task,
                    cfg.codec,
                )
                .and_then(|var| ArmResult::from_eval(arm, rep, &t.ckpt, &t.eval, Some(var)))
                .unwrap_or_else(|e| ArmResult::failed(arm, rep, &e)),
            };
            rows.push(row);
        }
        for &t in &cfg.sweep_train_steps {
            for &scale in &cfg.sweep_scales {
                let tc = cfg.sweep_config(t, scale, rep)?;
                let res = runner.run(&tc, "sweep");
                sweep.push(match res {
                    Ok(tr) => SweepResult {
                        train_steps: t,
                        scale,
                        replicate: rep,
                        absrel: tr.eval.metrics.aggregate.absrel,
                        failure: None,
                    },
                    Err(e) => SweepResult {
                        train_steps: t,
                        scale,
                        replicate: rep,
                        absrel: None,
                        failure: Some(e),
                    },
                });
            }
        }
    }
    let gt_units = data
        .val_samples
        .iter()
        .map(|s| {
            let (unit, _) = scenes::annotation_pixels(s, cfg.task)?;
            Ok(match cfg.task {
                Task::Depth => unit.channel_mean(),
                Task::Normal => unit,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let gt_top = metrics::top_quartile_log_power(&metrics::mean_spectrum(&gt_units)?);
    Ok(AblationReport {
        rows,
        sweep,
        gt_top_quartile_log_power: gt_top,
    })
}
