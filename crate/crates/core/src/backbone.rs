//! The trainable velocity network.
//!
//! Layout of one forward pass:
//!
//! ```text
//! z_in --pack--> [h/2, w/2, 4 Cin] --concat time features--> in-proj + GELU
//!      --> B x (conv3x3 + GELU) --> out-proj [h/2, w/2, 4 C] --unpack--> [h, w, C]
//!      --> optional continuity head: conv3x3 -> GELU -> conv3x3
//! ```
//!
//! With `pack = false` the same trunk runs at full latent resolution and the
//! projections are sized for `Cin` / `C` channels instead.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::LatentMap;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Channels of the annotation latent (`C`).
    pub latent_channels: usize,
    /// Whether the image latent is channel-concatenated to the input.
    pub conditioned: bool,
    /// Trunk width.
    pub hidden: usize,
    /// Number of conv + GELU blocks after the input projection.
    pub blocks: usize,
    /// Width of the sinusoidal time embedding.
    pub time_dim: usize,
    pub lcm: bool,
    pub pack: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            conditioned: false,
            hidden: 32,
            blocks: 4,
            time_dim: 8,
            lcm: false,
            pack: true,
        }
    }
}

impl NetConfig {
    pub fn input_channels(&self) -> usize {
        if self.conditioned {
            2 * self.latent_channels
        } else {
            self.latent_channels
        }
    }

    fn spatial_factor(&self) -> usize {
        if self.pack {
            4
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.hidden == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_dim must be a positive even number, got {}",
                self.time_dim
            )));
        }
        Ok(())
    }

    /// Parameter names and shapes in canonical order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let f = self.spatial_factor();
        let (dt, ch, c) = (self.time_dim, self.hidden, self.latent_channels);
        let mut out = vec![
            ("time.weight".to_string(), vec![dt, dt]),
            ("time.bias".to_string(), vec![dt]),
            (
                "in.kernel".to_string(),
                vec![3, 3, f * self.input_channels() + dt, ch],
            ),
            ("in.bias".to_string(), vec![ch]),
        ];
        for b in 0..self.blocks {
            out.push((format!("trunk.{b}.kernel"), vec![3, 3, ch, ch]));
            out.push((format!("trunk.{b}.bias"), vec![ch]));
        }
        out.push(("out.kernel".to_string(), vec![3, 3, ch, f * c]));
        out.push(("out.bias".to_string(), vec![f * c]));
        if self.lcm {
            for i in 1..=2 {
                out.push((format!("lcm.{i}.kernel"), vec![3, 3, c, c]));
                out.push((format!("lcm.{i}.bias"), vec![c]));
            }
        }
        out
    }
}

/// Sinusoidal features `sin(w_k t), cos(w_k t)` at `w_k = (pi/2) 2^k`.
///
/// The lowest frequency keeps `cos` strictly monotone on `[0, 1]`, so every
/// distinct `t` in that range gets a distinct embedding.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let w = FRAC_PI_2 * (1u64 << k) as f64;
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Parameters of the two-conv continuity head.
#[derive(Clone, Debug)]
pub struct LcmParams {
    pub kernel1: Tensor,
    pub bias1: Tensor,
    pub kernel2: Tensor,
    pub bias2: Tensor,
}

/// Continuity head: `conv2(gelu(conv1(h)))`, shape preserving.
pub fn apply_lcm(h: &LatentMap, lcm: &LcmParams) -> Result<LatentMap> {
    let mut g = Graph::new();
    let x = g.leaf(h.to_tensor());
    let k1 = g.leaf(lcm.kernel1.clone());
    let b1 = g.leaf(lcm.bias1.clone());
    let k2 = g.leaf(lcm.kernel2.clone());
    let b2 = g.leaf(lcm.bias2.clone());
    let y = lcm_graph(&mut g, x, [k1, b1, k2, b2])?;
    LatentMap::from_tensor(g.value(y))
}

fn lcm_graph(g: &mut Graph, x: Var, p: [Var; 4]) -> Result<Var> {
    let a = g.conv2d(x, p[0], p[1])?;
    let a = g.gelu(a)?;
    g.conv2d(a, p[2], p[3])
}

/// Output of a graph-building forward pass.
pub struct ForwardPass {
    pub output: Var,
    /// One graph leaf per parameter, in [`VelocityNet::params`] order.
    pub params: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct VelocityNet {
    config: NetConfig,
    seed: u64,
    params: Vec<Param>,
}

/// Stable per-name stream id so that equally named parameters draw the same
/// numbers from a seed regardless of which other layers exist.
fn param_stream(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

impl VelocityNet {
    /// Fan-in scaled uniform init (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`) for
    /// kernels and weights, zero biases.
    pub fn init(seed: u64, config: NetConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .parameter_layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".bias") {
                    vec![0.0; n]
                } else {
                    let fan_in: usize = shape[..shape.len() - 1].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(param_stream(&name));
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                };
                let tensor = Tensor::new(shape, data)?;
                Ok(Param { name, tensor })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            seed,
            params,
        })
    }

    pub fn from_params(config: NetConfig, seed: u64, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let layout = config.parameter_layout();
        if layout.len() != params.len() {
            return Err(shape_err!(
                "expected {} parameters, got {}",
                layout.len(),
                params.len()
            ));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if name != &p.name || shape.as_slice() != p.tensor.shape() {
                return Err(shape_err!(
                    "parameter {} {:?} does not match layout entry {name} {shape:?}",
                    p.name,
                    p.tensor.shape()
                ));
            }
        }
        Ok(Self {
            config,
            seed,
            params,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.tensor)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn lcm_params(&self) -> Option<LcmParams> {
        Some(LcmParams {
            kernel1: self.param("lcm.1.kernel")?.clone(),
            bias1: self.param("lcm.1.bias")?.clone(),
            kernel2: self.param("lcm.2.kernel")?.clone(),
            bias2: self.param("lcm.2.bias")?.clone(),
        })
    }

    fn check_input(&self, z: &LatentMap) -> Result<()> {
        let want = self.config.input_channels();
        if z.channels() != want {
            return Err(shape_err!(
                "network expects {want} input channels, got {}",
                z.channels()
            ));
        }
        if self.config.pack && (z.height() % 2 != 0 || z.width() % 2 != 0) {
            return Err(shape_err!(
                "packed network needs even spatial dims, got {}x{}",
                z.height(),
                z.width()
            ));
        }
        Ok(())
    }

    /// Records a forward pass on `g`. Parameter leaves are tracked iff `track`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        input: &LatentMap,
        t: f64,
        track: bool,
    ) -> Result<ForwardPass> {
        self.check_input(input)?;
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                let mut tensor = p.tensor.clone();
                tensor.set_requires_grad(track);
                g.leaf(tensor)
            })
            .collect();
        let output = self.forward_graph_with(g, input, t, &params)?;
        Ok(ForwardPass { output, params })
    }

    /// Forward pass using caller-supplied parameter nodes, one per entry of
    /// [`VelocityNet::params`] and in that order. The stored values are
    /// ignored.
    pub fn forward_graph_with(
        &self,
        g: &mut Graph,
        input: &LatentMap,
        t: f64,
        params: &[Var],
    ) -> Result<Var> {
        self.check_input(input)?;
        if params.len() != self.params.len() {
            return Err(shape_err!(
                "expected {} parameter nodes, got {}",
                self.params.len(),
                params.len()
            ));
        }
        for (p, &v) in self.params.iter().zip(params) {
            if g.value(v).shape() != p.tensor.shape() {
                return Err(shape_err!(
                    "parameter node for {} has shape {:?}",
                    p.name,
                    g.value(v).shape()
                ));
            }
        }
        let packed = self.trunk_graph(g, input, t, params)?;
        self.head_graph(g, packed, params)
    }

    /// Everything up to and including the output projection.
    fn trunk_graph(&self, g: &mut Graph, input: &LatentMap, t: f64, p: &[Var]) -> Result<Var> {
        let dt = self.config.time_dim;
        let x = g.leaf(input.to_tensor());
        let x = if self.config.pack { g.pack(x)? } else { x };
        let (h, w) = {
            let s = g.value(x).shape();
            (s[0], s[1])
        };
        let emb = g.leaf(Tensor::new(vec![1, dt], time_embedding(t, dt))?);
        let emb = g.linear(emb, p[0], p[1])?;
        let emb = g.broadcast(emb, h, w)?;
        let mut a = g.concat(x, emb)?;
        a = g.conv2d(a, p[2], p[3])?;
        a = g.gelu(a)?;
        for b in 0..self.config.blocks {
            a = g.conv2d(a, p[4 + 2 * b], p[5 + 2 * b])?;
            a = g.gelu(a)?;
        }
        let o = 4 + 2 * self.config.blocks;
        g.conv2d(a, p[o], p[o + 1])
    }

    fn head_graph(&self, g: &mut Graph, projected: Var, p: &[Var]) -> Result<Var> {
        let y = if self.config.pack {
            g.unpack(projected)?
        } else {
            projected
        };
        if self.config.lcm {
            let l = 6 + 2 * self.config.blocks;
            lcm_graph(g, y, [p[l], p[l + 1], p[l + 2], p[l + 3]])
        } else {
            Ok(y)
        }
    }

    /// Inference-only forward pass.
    pub fn forward(&self, input: &LatentMap, t: f64) -> Result<LatentMap> {
        let mut g = Graph::new();
        let pass = self.forward_graph(&mut g, input, t, false)?;
        LatentMap::from_tensor(g.value(pass.output))
    }

    /// Output projection result before unpack, i.e. the packed map the head
    /// consumes. Exposed for locality analysis.
    pub fn projected(&self, input: &LatentMap, t: f64) -> Result<LatentMap> {
        self.check_input(input)?;
        let mut g = Graph::new();
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.leaf(p.tensor.clone()))
            .collect();
        let y = self.trunk_graph(&mut g, input, t, &params)?;
        LatentMap::from_tensor(g.value(y))
    }

    /// Unpack (when packing) followed by the optional continuity head.
    pub fn head(&self, projected: &LatentMap) -> Result<LatentMap> {
        let mut g = Graph::new();
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.leaf(p.tensor.clone()))
            .collect();
        let x = g.leaf(projected.to_tensor());
        let y = self.head_graph(&mut g, x, &params)?;
        LatentMap::from_tensor(g.value(y))
    }
}
