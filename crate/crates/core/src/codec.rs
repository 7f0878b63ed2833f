//! Fixed latent codecs and the 2x2 pack/unpack rearrangement.
//!
//! [`LatentMap`] is the carrier for every dense quantity in the crate: images,
//! annotations, latents and velocities. Pixel maps use the nominal range
//! `[0, 1]`; the codecs map that affinely onto `[-1, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::numerics::{kernels, Tensor};

/// `H x W x C` row-major map of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl LatentMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(shape_err!("empty map {height}x{width}x{channels}"));
        }
        if data.len() != height * width * channels {
            return Err(shape_err!(
                "{height}x{width}x{channels} map needs {} values, got {}",
                height * width * channels,
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
        .expect("filled: positive dims")
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [h, w, c] => Self::new(h, w, c, t.data().to_vec()),
            ref s => Err(shape_err!("expected [H, W, C] tensor, got {s:?}")),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape().to_vec(), self.data.clone()).expect("consistent map")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let s = (y * self.width + x) * self.channels;
        &self.data[s..s + self.channels]
    }

    pub fn same_shape(&self, other: &LatentMap) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err!("{:?} vs {:?}", self.shape(), other.shape()));
        }
        Ok(())
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &LatentMap) -> Result<LatentMap> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &LatentMap) -> Result<LatentMap> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn zip_with(&self, other: &LatentMap, f: impl Fn(f64, f64) -> f64) -> Result<LatentMap> {
        self.same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        LatentMap::new(self.height, self.width, self.channels, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentMap {
        LatentMap {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn max_abs_diff(&self, other: &LatentMap) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn mean_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum::<f64>() / self.data.len() as f64
    }

    /// Channel-concatenation of two maps with equal spatial size.
    pub fn concat_channels(&self, other: &LatentMap) -> Result<LatentMap> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(shape_err!(
                "concat {:?} with {:?}",
                self.shape(),
                other.shape()
            ));
        }
        let data = kernels::concat_channels(&self.data, self.channels, &other.data, other.channels);
        LatentMap::new(
            self.height,
            self.width,
            self.channels + other.channels,
            data,
        )
    }

    /// Mean over channels, giving a single-channel map.
    pub fn channel_mean(&self) -> LatentMap {
        let c = self.channels as f64;
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() / c)
            .collect();
        LatentMap::new(self.height, self.width, 1, data).expect("same spatial dims")
    }

    /// Replicates a single-channel map into `channels` identical channels.
    pub fn replicate_channels(&self, channels: usize) -> Result<LatentMap> {
        if self.channels != 1 {
            return Err(shape_err!(
                "replicate needs one channel, got {}",
                self.channels
            ));
        }
        let data = self
            .data
            .iter()
            .flat_map(|&v| std::iter::repeat(v).take(channels))
            .collect();
        LatentMap::new(self.height, self.width, channels, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    /// Per-channel `2x - 1`.
    #[default]
    Identity,
    /// 2x2 mean pooling followed by `2x - 1`; nearest-neighbour decode.
    Avgpool2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CodecSpec {
    pub kind: CodecKind,
}

impl CodecSpec {
    pub const IDENTITY: CodecSpec = CodecSpec {
        kind: CodecKind::Identity,
    };
    pub const AVGPOOL2: CodecSpec = CodecSpec {
        kind: CodecKind::Avgpool2,
    };

    /// Latent spatial size for a pixel map of `h x w`.
    pub fn latent_dims(&self, h: usize, w: usize) -> (usize, usize) {
        match self.kind {
            CodecKind::Identity => (h, w),
            CodecKind::Avgpool2 => (h / 2, w / 2),
        }
    }
}

fn require_even(h: usize, w: usize, what: &str) -> Result<()> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("{what} needs even spatial dims, got {h}x{w}"));
    }
    Ok(())
}

pub fn encode(x: &LatentMap, spec: CodecSpec) -> Result<LatentMap> {
    require_even(x.height, x.width, "encode")?;
    let pooled = match spec.kind {
        CodecKind::Identity => x.clone(),
        CodecKind::Avgpool2 => avgpool2(x),
    };
    Ok(pooled.map(|v| 2.0 * v - 1.0))
}

pub fn decode(z: &LatentMap, spec: CodecSpec) -> Result<LatentMap> {
    let pixels = z.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0));
    Ok(match spec.kind {
        CodecKind::Identity => pixels,
        CodecKind::Avgpool2 => upsample_nearest2(&pixels),
    })
}

fn avgpool2(x: &LatentMap) -> LatentMap {
    let (h, w, c) = (x.height / 2, x.width / 2, x.channels);
    let mut data = Vec::with_capacity(h * w * c);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                // Pairwise so a constant block sums exactly to 4v.
                let s = (x.get(2 * i, 2 * j, ch) + x.get(2 * i, 2 * j + 1, ch))
                    + (x.get(2 * i + 1, 2 * j, ch) + x.get(2 * i + 1, 2 * j + 1, ch));
                data.push(s / 4.0);
            }
        }
    }
    LatentMap::new(h, w, c, data).expect("pooled dims")
}

fn upsample_nearest2(z: &LatentMap) -> LatentMap {
    let (h, w, c) = (z.height * 2, z.width * 2, z.channels);
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            data.extend_from_slice(z.pixel(y / 2, x / 2));
        }
    }
    LatentMap::new(h, w, c, data).expect("upsampled dims")
}

/// `H x W x C -> H/2 x W/2 x 4C`, moving each 2x2 patch into channels.
/// Channel order is `(2i,2j), (2i,2j+1), (2i+1,2j), (2i+1,2j+1)`, each
/// contributing `C` consecutive channels.
pub fn pack(z: &LatentMap) -> Result<LatentMap> {
    require_even(z.height, z.width, "pack")?;
    let data = kernels::pack(&z.data, z.height, z.width, z.channels);
    LatentMap::new(z.height / 2, z.width / 2, 4 * z.channels, data)
}

pub fn unpack(z: &LatentMap) -> Result<LatentMap> {
    if z.channels % 4 != 0 {
        return Err(shape_err!(
            "unpack needs channels divisible by 4, got {}",
            z.channels
        ));
    }
    let (h, w, c) = (z.height * 2, z.width * 2, z.channels / 4);
    let data = kernels::unpack(&z.data, h, w, c);
    LatentMap::new(h, w, c, data)
}
