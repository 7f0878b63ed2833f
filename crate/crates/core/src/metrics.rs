//! Affine-invariant depth metrics, normal metrics, rank aggregation and the
//! radially averaged power spectrum.

use std::fmt::Write as _;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::codec::LatentMap;
use crate::error::{Error, Result};

pub const DELTA1_THRESHOLD: f64 = 1.25;
pub const ANGLE_THRESHOLD_DEG: f64 = 11.25;
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedDepth {
    pub scale: f64,
    pub shift: f64,
}

impl AlignedDepth {
    pub fn apply(&self, pred: &[f64]) -> Vec<f64> {
        pred.iter().map(|&p| self.scale * p + self.shift).collect()
    }
}

fn check_lengths(a: usize, b: usize, mask: usize) -> Result<()> {
    if a != b || a != mask {
        return Err(Error::Shape(format!(
            "length mismatch: {a} vs {b} with mask of {mask}"
        )));
    }
    Ok(())
}

/// Least-squares `(s, b)` minimising `sum (s p_i + b - d_i)^2` over the mask.
pub fn align(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<AlignedDepth> {
    check_lengths(pred.len(), gt.len(), mask.len())?;
    let pairs: Vec<(f64, f64)> = pred
        .iter()
        .zip(gt)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&p, &d), _)| (p, d))
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = pairs.len() as f64;
    let mean_p = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_d = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut spp, mut spd) = (0.0, 0.0);
    for &(p, d) in &pairs {
        spp += (p - mean_p) * (p - mean_p);
        spd += (p - mean_p) * (d - mean_d);
    }
    // Summation error leaves a few ulps of spread on constant inputs.
    let floor = 1e-10 * (1.0 + mean_p.abs());
    if pairs.len() < 2 || spp <= n * floor * floor {
        return Err(Error::SingularAlignment {
            pixels: pairs.len(),
        });
    }
    let scale = spd / spp;
    Ok(AlignedDepth {
        scale,
        shift: mean_d - scale * mean_p,
    })
}

fn masked<'a>(a: &'a [f64], d: &'a [f64], mask: &'a [bool]) -> Result<Vec<(f64, f64)>> {
    check_lengths(a.len(), d.len(), mask.len())?;
    let v: Vec<_> = a
        .iter()
        .zip(d)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&a, &d), _)| (a, d))
        .collect();
    if v.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(v)
}

pub fn absrel(aligned: &[f64], gt: &[f64], mask: &[bool]) -> Result<f64> {
    let v = masked(aligned, gt, mask)?;
    Ok(v.iter().map(|&(a, d)| (a - d).abs() / d).sum::<f64>() / v.len() as f64)
}

/// Non-positive aligned values count as failures.
pub fn delta1(aligned: &[f64], gt: &[f64], mask: &[bool]) -> Result<f64> {
    let v = masked(aligned, gt, mask)?;
    let pass = v
        .iter()
        .filter(|&&(a, d)| a > 0.0 && d > 0.0 && (a / d).max(d / a) < DELTA1_THRESHOLD)
        .count();
    Ok(pass as f64 / v.len() as f64)
}

/// Per-pixel angle in degrees; the prediction is renormalised and a zero
/// vector is assigned 90 degrees.
pub fn pixel_angle(pred: &[f64], gt: &[f64]) -> f64 {
    let np = (pred[0] * pred[0] + pred[1] * pred[1] + pred[2] * pred[2]).sqrt();
    if np == 0.0 {
        return 90.0;
    }
    let ng = (gt[0] * gt[0] + gt[1] * gt[1] + gt[2] * gt[2]).sqrt();
    let dot = (pred[0] * gt[0] + pred[1] * gt[1] + pred[2] * gt[2]) / (np * ng);
    dot.clamp(-1.0, 1.0).acos().to_degrees()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngularError {
    pub mean_deg: f64,
    pub below_11_25: f64,
}

pub fn angular_error(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<AngularError> {
    if pred.len() != gt.len() || pred.len() != 3 * mask.len() {
        return Err(Error::Shape(format!(
            "normal fields of {} and {} values with mask of {}",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    let angles: Vec<f64> = pred
        .chunks_exact(3)
        .zip(gt.chunks_exact(3))
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((p, g), _)| pixel_angle(p, g))
        .collect();
    if angles.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = angles.len() as f64;
    Ok(AngularError {
        mean_deg: angles.iter().sum::<f64>() / n,
        below_11_25: angles.iter().filter(|&&a| a < ANGLE_THRESHOLD_DEG).count() as f64 / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    LowerBetter,
    HigherBetter,
}

/// Mean rank per method over columns; `table[method][column]`, ties share
/// the mean of the ranks they span.
pub fn avg_rank(table: &[Vec<Option<f64>>], directions: &[Direction]) -> Result<Vec<f64>> {
    let methods = table.len();
    if methods == 0 {
        return Ok(Vec::new());
    }
    let mut missing = Vec::new();
    for (m, row) in table.iter().enumerate() {
        if row.len() != directions.len() {
            return Err(Error::IncompleteTable(format!(
                "row {m} has {} columns, expected {}",
                row.len(),
                directions.len()
            )));
        }
        for (c, v) in row.iter().enumerate() {
            if !v.map_or(false, f64::is_finite) {
                missing.push(format!("({m},{c})"));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::IncompleteTable(format!(
            "missing cells {}",
            missing.join(" ")
        )));
    }
    let mut sums = vec![0.0; methods];
    for (c, dir) in directions.iter().enumerate() {
        let key = |m: usize| {
            let v = table[m][c].unwrap();
            match dir {
                Direction::LowerBetter => v,
                Direction::HigherBetter => -v,
            }
        };
        let mut order: Vec<usize> = (0..methods).collect();
        order.sort_by(|&a, &b| key(a).total_cmp(&key(b)));
        let mut i = 0;
        while i < methods {
            let mut j = i;
            while j + 1 < methods && key(order[j + 1]) == key(order[i]) {
                j += 1;
            }
            let rank = (i + j) as f64 / 2.0 + 1.0;
            for &m in &order[i..=j] {
                sums[m] += rank;
            }
            i = j + 1;
        }
    }
    let cols = directions.len().max(1) as f64;
    Ok(sums.into_iter().map(|s| s / cols).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumBin {
    pub bin: usize,
    pub count: usize,
    pub mean_power: f64,
    pub log_power: f64,
}

/// Centred frequency of DFT index `k` for length `n`.
pub fn centered_frequency(k: usize, n: usize) -> i64 {
    let k = k as i64;
    let n = n as i64;
    if k < (n + 1) / 2 {
        k
    } else {
        k - n
    }
}

pub fn spectrum_bin_count(n: usize) -> usize {
    let half = (n / 2) as f64;
    (half * std::f64::consts::SQRT_2).floor() as usize + 1
}

/// |DFT|^2 of a square single-channel map, row-major.
pub fn power_2d(map: &[f64], n: usize) -> Result<Vec<f64>> {
    if map.len() != n * n || n == 0 {
        return Err(Error::Shape(format!(
            "expected {n}x{n} map, got {} values",
            map.len()
        )));
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut buf: Vec<Complex<f64>> = map.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in buf.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = buf[y * n + x];
        }
        fft.process(&mut col);
        for y in 0..n {
            buf[y * n + x] = col[y];
        }
    }
    Ok(buf.iter().map(|c| c.norm_sqr()).collect())
}

/// Bins a power array by integer radius of the centred frequency.
pub fn bin_power(power: &[f64], n: usize) -> Vec<SpectrumBin> {
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for v in 0..n {
        for u in 0..n {
            let (fu, fv) = (centered_frequency(u, n), centered_frequency(v, n));
            let r = ((fu * fu + fv * fv) as f64).sqrt().floor() as usize;
            if r >= sums.len() {
                sums.resize(r + 1, 0.0);
                counts.resize(r + 1, 0);
            }
            sums[r] += power[v * n + u];
            counts[r] += 1;
        }
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(bin, (s, count))| {
            let mean_power = if count > 0 { s / count as f64 } else { 0.0 };
            SpectrumBin {
                bin,
                count,
                mean_power,
                log_power: (mean_power + LOG_FLOOR).log10(),
            }
        })
        .collect()
}

/// Radially averaged log10 power of a square map (channels are averaged
/// first).
pub fn radial_power_spectrum(map: &LatentMap) -> Result<Vec<SpectrumBin>> {
    if map.height() != map.width() {
        return Err(Error::Shape(format!(
            "spectrum needs a square map, got {}x{}",
            map.height(),
            map.width()
        )));
    }
    let gray = map.channel_mean();
    let n = map.height();
    Ok(bin_power(&power_2d(gray.data(), n)?, n))
}

/// Mean of the spectra of several maps, per bin, in log space of the mean power.
pub fn mean_spectrum(maps: &[LatentMap]) -> Result<Vec<SpectrumBin>> {
    let mut acc: Option<Vec<SpectrumBin>> = None;
    for m in maps {
        let s = radial_power_spectrum(m)?;
        match &mut acc {
            None => acc = Some(s),
            Some(a) => {
                if a.len() != s.len() {
                    return Err(Error::Shape("spectra with different bin counts".into()));
                }
                for (x, y) in a.iter_mut().zip(&s) {
                    x.mean_power += y.mean_power;
                }
            }
        }
    }
    let mut out = acc.ok_or_else(|| Error::Degenerate("no maps for spectrum".into()))?;
    for b in &mut out {
        b.mean_power /= maps.len() as f64;
        b.log_power = (b.mean_power + LOG_FLOOR).log10();
    }
    Ok(out)
}

/// Mean log power over the top quartile of bins.
pub fn top_quartile_log_power(bins: &[SpectrumBin]) -> f64 {
    let start = bins.len() - bins.len() / 4;
    let top = &bins[start.min(bins.len() - 1)..];
    top.iter().map(|b| b.log_power).sum::<f64>() / top.len() as f64
}

/// Grid-artifact statistic on a `H x W x C` map: mean absolute difference
/// between horizontal/vertical neighbours that straddle a 2x2 patch border,
/// minus the same mean for neighbours inside one patch.
pub fn block_discontinuity(map: &LatentMap) -> f64 {
    let (h, w, c) = (map.height(), map.width(), map.channels());
    let (mut across, mut na, mut within, mut nw) = (0.0, 0usize, 0.0, 0usize);
    let mut add = |d: f64, border: bool| {
        if border {
            across += d;
            na += 1;
        } else {
            within += d;
            nw += 1;
        }
    };
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = map.get(y, x, ch);
                if x + 1 < w {
                    add((map.get(y, x + 1, ch) - v).abs(), x % 2 == 1);
                }
                if y + 1 < h {
                    add((map.get(y + 1, x, ch) - v).abs(), y % 2 == 1);
                }
            }
        }
    }
    let a = if na > 0 { across / na as f64 } else { 0.0 };
    let b = if nw > 0 { within / nw as f64 } else { 0.0 };
    a - b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub absrel: Option<f64>,
    pub delta1: Option<f64>,
    pub mean_angle: Option<f64>,
    pub below_11_25: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub absrel: Option<f64>,
    pub delta1: Option<f64>,
    pub mean_angle: Option<f64>,
    pub below_11_25: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub dataset: String,
    pub samples: Vec<SampleMetrics>,
    pub aggregate: Aggregate,
}

fn mean_of(samples: &[SampleMetrics], f: impl Fn(&SampleMetrics) -> Option<f64>) -> Option<f64> {
    let vals: Option<Vec<f64>> = samples.iter().map(f).collect();
    vals.filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricsReport {
    pub fn new(method: &str, dataset: &str, samples: Vec<SampleMetrics>) -> Self {
        let aggregate = Aggregate {
            absrel: mean_of(&samples, |s| s.absrel),
            delta1: mean_of(&samples, |s| s.delta1),
            mean_angle: mean_of(&samples, |s| s.mean_angle),
            below_11_25: mean_of(&samples, |s| s.below_11_25),
        };
        Self {
            method: method.to_string(),
            dataset: dataset.to_string(),
            samples,
            aggregate,
        }
    }

    /// One row per sample and an `aggregate` footer row.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
        let mut out = String::from("method,dataset,id,absrel,delta1,mean_angle_deg,below_11_25\n");
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.method,
                self.dataset,
                s.id,
                cell(s.absrel),
                cell(s.delta1),
                cell(s.mean_angle),
                cell(s.below_11_25)
            );
        }
        let a = &self.aggregate;
        let _ = writeln!(
            out,
            "{},{},aggregate,{},{},{},{}",
            self.method,
            self.dataset,
            cell(a.absrel),
            cell(a.delta1),
            cell(a.mean_angle),
            cell(a.below_11_25)
        );
        out
    }
}

/// Aligned depth metrics for one sample.
pub fn depth_metrics(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<(f64, f64)> {
    let fit = align(pred, gt, mask)?;
    let aligned = fit.apply(pred);
    Ok((absrel(&aligned, gt, mask)?, delta1(&aligned, gt, mask)?))
}

pub fn spectrum_csv(columns: &[(&str, &[SpectrumBin])]) -> Result<String> {
    let bins = columns.first().map_or(0, |c| c.1.len());
    if columns.iter().any(|c| c.1.len() != bins) {
        return Err(Error::Shape("spectrum columns differ in bin count".into()));
    }
    let mut out = String::from("bin");
    for (name, _) in columns {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    for b in 0..bins {
        let _ = write!(out, "{b}");
        for (_, col) in columns {
            let _ = write!(out, ",{:.17e}", col[b].log_power);
        }
        out.push('\n');
    }
    Ok(out)
}
