//! Rectified-flow formulations over latent maps.
//!
//! A flow moves along the straight line `z_t = t z1 + (1 - t) z0` from a
//! source `z1` (at `t = 1`) to a target `z0` (at `t = 0`). Four formulations
//! are supported, see [`FlowKind`]. Inference integrates the learned velocity
//! with explicit Euler steps from `t = 1` down to `t = 0`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::VelocityNet;
use crate::codec::LatentMap;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Graph, Var};

/// Discrete training grid `{ i / T : i = 1..=T }` plus the number of Euler
/// steps used at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSchedule {
    pub train_steps: usize,
    pub inference_steps: usize,
}

impl TimeSchedule {
    /// `T_inf = T`.
    pub fn new(train_steps: usize) -> Result<Self> {
        Self::with_inference(train_steps, train_steps)
    }

    pub fn with_inference(train_steps: usize, inference_steps: usize) -> Result<Self> {
        let s = Self {
            train_steps,
            inference_steps,
        };
        s.validate()?;
        Ok(s)
    }

    /// Inference steps capped at 50, as used for the step-count sweep.
    pub fn capped(train_steps: usize) -> Result<Self> {
        Self::with_inference(train_steps, train_steps.min(50))
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_steps == 0 {
            return Err(Error::Config("train_steps must be >= 1".into()));
        }
        if self.inference_steps == 0 || self.inference_steps > self.train_steps.max(1) {
            return Err(Error::Config(format!(
                "inference_steps must be in 1..={}, got {}",
                self.train_steps, self.inference_steps
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        let n = self.train_steps as f64;
        (1..=self.train_steps).map(|i| i as f64 / n).collect()
    }

    /// Descending evaluation times `1, 1 - eta, ..., eta` paired with the step
    /// size taken from each of them.
    pub fn inference_steps_desc(&self) -> Vec<(f64, f64)> {
        let n = self.inference_steps;
        (1..=n)
            .rev()
            .map(|k| {
                let t = k as f64 / n as f64;
                let next = (k - 1) as f64 / n as f64;
                (t, t - next)
            })
            .collect()
    }

    pub fn sample_t<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let i = rng.gen_range(1..=self.train_steps);
        i as f64 / self.train_steps as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    /// Gaussian noise -> annotation, conditioned on the image latent.
    StochasticDa,
    /// Image latent -> annotation, velocity target.
    DeterministicDa,
    /// Single step at `t = 1`, the network predicts the annotation directly.
    CorePredictor,
    /// Coarse prediction -> fine annotation, velocity target.
    Sharpener,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    GaussianNoise,
    ImageLatent,
    CoarsePrediction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    AnnotationLatent,
    FineAnnotation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    Velocity,
    CleanData,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    None,
    ImageConcat,
}

/// A flow formulation. Endpoints, parameterization and conditioning are all
/// fixed by the kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlowVariant {
    pub kind: FlowKind,
}

impl FlowVariant {
    pub const STOCHASTIC_DA: Self = Self::new(FlowKind::StochasticDa);
    pub const DETERMINISTIC_DA: Self = Self::new(FlowKind::DeterministicDa);
    pub const CORE_PREDICTOR: Self = Self::new(FlowKind::CorePredictor);
    pub const SHARPENER: Self = Self::new(FlowKind::Sharpener);

    pub const fn new(kind: FlowKind) -> Self {
        Self { kind }
    }

    pub fn source(&self) -> Source {
        match self.kind {
            FlowKind::StochasticDa => Source::GaussianNoise,
            FlowKind::DeterministicDa | FlowKind::CorePredictor => Source::ImageLatent,
            FlowKind::Sharpener => Source::CoarsePrediction,
        }
    }

    pub fn target(&self) -> Target {
        match self.kind {
            FlowKind::Sharpener => Target::FineAnnotation,
            _ => Target::AnnotationLatent,
        }
    }

    pub fn parameterization(&self) -> Parameterization {
        match self.kind {
            FlowKind::CorePredictor => Parameterization::CleanData,
            _ => Parameterization::Velocity,
        }
    }

    pub fn conditioning(&self) -> Conditioning {
        match self.kind {
            FlowKind::StochasticDa => Conditioning::ImageConcat,
            _ => Conditioning::None,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        self.source() != Source::GaussianNoise
    }

    /// Training-step count the formulation requires, if it pins one.
    pub fn required_train_steps(&self) -> Option<usize> {
        match self.kind {
            FlowKind::CorePredictor => Some(1),
            FlowKind::Sharpener => Some(10),
            _ => None,
        }
    }

    pub fn check_schedule(&self, schedule: &TimeSchedule) -> Result<()> {
        schedule.validate()?;
        match self.required_train_steps() {
            Some(t) if t != schedule.train_steps => Err(Error::Config(format!(
                "{:?} requires T = {t}, got {}",
                self.kind, schedule.train_steps
            ))),
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            FlowKind::StochasticDa => "stochastic_da",
            FlowKind::DeterministicDa => "deterministic_da",
            FlowKind::CorePredictor => "core_predictor",
            FlowKind::Sharpener => "sharpener",
        }
    }
}

/// Endpoints, time and regression target of one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub z0: LatentMap,
    pub z1: LatentMap,
    pub t: f64,
    pub z_t: LatentMap,
    pub target: LatentMap,
}

/// A [`FlowSample`] plus the assembled network input.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub sample: FlowSample,
    pub conditioning: Option<LatentMap>,
    pub net_input: LatentMap,
}

/// `t z1 + (1 - t) z0`, exact at both endpoints.
pub fn interpolate(z0: &LatentMap, z1: &LatentMap, t: f64) -> Result<LatentMap> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("t must lie in [0, 1], got {t}")));
    }
    z0.same_shape(z1)?;
    if t == 0.0 {
        return Ok(z0.clone());
    }
    if t == 1.0 {
        return Ok(z1.clone());
    }
    z0.zip_with(z1, |a, b| t * b + (1.0 - t) * a)
}

pub fn gaussian_like<R: Rng + ?Sized>(like: &LatentMap, rng: &mut R) -> LatentMap {
    let data = (0..like.len())
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    LatentMap::new(like.height(), like.width(), like.channels(), data).expect("same dims")
}

/// Assembles one training example.
///
/// `image` is the source-side latent: the image latent for the image-driven
/// variants, the conditioning image for `StochasticDa` and the coarse
/// prediction for `Sharpener`. `annotation` is the target latent. `t` is drawn
/// uniformly from the schedule grid, then (for `StochasticDa`) the noise.
pub fn make_training_sample<R: Rng + ?Sized>(
    variant: FlowVariant,
    image: &LatentMap,
    annotation: &LatentMap,
    schedule: &TimeSchedule,
    rng: &mut R,
) -> Result<TrainingSample> {
    variant.check_schedule(schedule)?;
    image.same_shape(annotation)?;
    let t = schedule.sample_t(rng);
    let z0 = annotation.clone();
    let z1 = match variant.source() {
        Source::GaussianNoise => gaussian_like(annotation, rng),
        Source::ImageLatent | Source::CoarsePrediction => image.clone(),
    };
    let z_t = interpolate(&z0, &z1, t)?;
    let target = match variant.parameterization() {
        Parameterization::Velocity => z1.sub(&z0)?,
        Parameterization::CleanData => z0.clone(),
    };
    let (conditioning, net_input) = match variant.conditioning() {
        Conditioning::ImageConcat => (Some(image.clone()), z_t.concat_channels(image)?),
        Conditioning::None => (None, z_t.clone()),
    };
    Ok(TrainingSample {
        sample: FlowSample {
            z0,
            z1,
            t,
            z_t,
            target,
        },
        conditioning,
        net_input,
    })
}

/// Squared-error objective against the variant's target. All four
/// formulations reduce to `mse(output, sample.target)`; the variant only
/// decides what the target is when the sample is assembled.
pub fn loss(variant: FlowVariant, output: &LatentMap, sample: &FlowSample) -> Result<f64> {
    check_target(variant, sample)?;
    output.same_shape(&sample.target)?;
    let n = output.len() as f64;
    Ok(output
        .data()
        .iter()
        .zip(sample.target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Graph version of [`loss`] for training.
pub fn loss_graph(
    variant: FlowVariant,
    g: &mut Graph,
    output: Var,
    sample: &FlowSample,
) -> Result<Var> {
    check_target(variant, sample)?;
    let target = g.leaf(sample.target.to_tensor());
    g.mse(output, target)
}

fn check_target(variant: FlowVariant, sample: &FlowSample) -> Result<()> {
    sample.z0.same_shape(&sample.z1)?;
    let expected_clean = variant.parameterization() == Parameterization::CleanData;
    // Bitwise, so a NaN target still reaches the non-finite loss check.
    let same = |a: &LatentMap, b: &LatentMap| {
        a.shape() == b.shape()
            && a.data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits())
    };
    if expected_clean && !same(&sample.target, &sample.z0) {
        return Err(Error::Config(format!(
            "{} expects a clean-data target",
            variant.label()
        )));
    }
    Ok(())
}

/// Anything that maps `(z, t)` to a velocity-shaped latent.
pub trait VelocityField {
    fn velocity(&self, z: &LatentMap, t: f64) -> Result<LatentMap>;
}

impl VelocityField for VelocityNet {
    fn velocity(&self, z: &LatentMap, t: f64) -> Result<LatentMap> {
        self.forward(z, t)
    }
}

impl<F> VelocityField for F
where
    F: Fn(&LatentMap, f64) -> Result<LatentMap>,
{
    fn velocity(&self, z: &LatentMap, t: f64) -> Result<LatentMap> {
        self(z, t)
    }
}

/// Explicit Euler from `t = 1` to `t = 0`: `z <- z - eta f(z, t)`.
///
/// With conditioning, the network sees `concat(z, cond)` at every step; the
/// conditioning map is constant so it is built once and reused.
pub fn euler_sample<F: VelocityField + ?Sized>(
    field: &F,
    z_start: &LatentMap,
    schedule: &TimeSchedule,
    conditioning: Option<&LatentMap>,
) -> Result<LatentMap> {
    schedule.validate()?;
    let mut z = z_start.clone();
    for (t, eta) in schedule.inference_steps_desc() {
        let input = match conditioning {
            Some(c) => z.concat_channels(c)?,
            None => z.clone(),
        };
        let v = field.velocity(&input, t)?;
        z.same_shape(&v)?;
        z = z.zip_with(&v, |a, b| a - eta * b)?;
    }
    Ok(z)
}

/// Single-step prediction at `t = 1`.
///
/// Clean-data networks return their output directly (the continuity head, if
/// configured, is part of the network). Velocity networks trained with
/// `T = 1` give the residual rule `z^x - f(z^x, 1)`.
pub fn predict_clean(
    net: &VelocityNet,
    variant: FlowVariant,
    image: &LatentMap,
) -> Result<LatentMap> {
    match (variant.kind, variant.parameterization()) {
        (FlowKind::CorePredictor, Parameterization::CleanData) => net.forward(image, 1.0),
        (FlowKind::DeterministicDa, Parameterization::Velocity) => {
            let v = net.forward(image, 1.0)?;
            image.sub(&v)
        }
        _ => Err(Error::Config(format!(
            "single-step prediction is undefined for {}",
            variant.label()
        ))),
    }
}

/// Residual-rule prediction for an arbitrary field, `z^x - f(z^x, 1)`.
pub fn predict_residual<F: VelocityField + ?Sized>(
    field: &F,
    image: &LatentMap,
) -> Result<LatentMap> {
    let v = field.velocity(image, 1.0)?;
    image
        .sub(&v)
        .map_err(|_| shape_err!("residual output shape differs from input"))
}
