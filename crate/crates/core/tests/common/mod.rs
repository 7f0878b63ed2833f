//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use geoflow::backbone::{NetConfig, VelocityNet};
use geoflow::codec::CodecSpec;
use geoflow::codec::LatentMap;
use geoflow::flows::FlowVariant;
use geoflow::harness::pipeline;
use geoflow::harness::TrainConfig;
use geoflow::numerics::{Graph, Tensor, Var};
use geoflow::scenes::{self, SceneConfig, Split, Task};
use geoflow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::{Path, PathBuf};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> LatentMap {
    LatentMap::new(
        h,
        w,
        c,
        (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Scalar loss of a graph built from `inputs`.
pub type Builder<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

fn eval_loss(inputs: &[Tensor], build: &Builder) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars).unwrap();
    g.value(loss).item()
}

/// Max over every input coordinate of `|analytic - central difference|`,
/// divided by the largest analytic gradient magnitude.
pub fn gradient_error(inputs: &[Tensor], build: &Builder, h: f64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().tracked())).collect();
    let loss = build(&mut g, &vars).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();
    let scale = analytic
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        for i in 0..inputs[k].len() {
            let x = inputs[k].data()[i];
            work[k].data_mut()[i] = x + h;
            let up = eval_loss(&work, build);
            work[k].data_mut()[i] = x - h;
            let down = eval_loss(&work, build);
            work[k].data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((analytic[k][i] - numeric).abs() / scale);
        }
    }
    worst
}

pub struct GradCase {
    pub name: &'static str,
    pub trials: usize,
    pub max_error: f64,
}

fn run_case(
    name: &'static str,
    trials: usize,
    mut trial: impl FnMut(&mut ChaCha8Rng) -> f64,
) -> GradCase {
    let mut r = rng(0x6ead ^ name.len() as u64);
    let max_error = (0..trials).map(|_| trial(&mut r)).fold(0.0, f64::max);
    GradCase {
        name,
        trials,
        max_error,
    }
}

fn dims(r: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (
        2 * r.gen_range(1..=3),
        2 * r.gen_range(1..=3),
        r.gen_range(1..=3),
    )
}

const H: f64 = 1e-6;

/// Finite-difference checks of every differentiable op and of full
/// backbones, `trials` randomized instances each.
pub fn gradient_suite(trials: usize) -> Vec<GradCase> {
    let mut cases = Vec::new();
    cases.push(run_case("conv2d", trials, |r| {
        let (h, w, cin) = dims(r);
        let cout = r.gen_range(1..=3);
        let ins = vec![
            random_tensor(r, &[h, w, cin], 1.0),
            random_tensor(r, &[3, 3, cin, cout], 1.0),
            random_tensor(r, &[cout], 1.0),
        ];
        let target = random_tensor(r, &[h, w, cout], 1.0);
        gradient_error(
            &ins,
            &|g, v| {
                let y = g.conv2d(v[0], v[1], v[2])?;
                let t = g.leaf(target.clone());
                g.mse(y, t)
            },
            H,
        )
    }));
    cases.push(run_case("gelu", trials, |r| {
        let n = r.gen_range(1..=12);
        let ins = vec![random_tensor(r, &[n], 3.0)];
        let target = random_tensor(r, &[n], 1.0);
        gradient_error(
            &ins,
            &|g, v| {
                let y = g.gelu(v[0])?;
                let t = g.leaf(target.clone());
                g.mse(y, t)
            },
            H,
        )
    }));
    cases.push(run_case("linear", trials, |r| {
        let (n, din, dout) = (r.gen_range(1..=4), r.gen_range(1..=5), r.gen_range(1..=5));
        let ins = vec![
            random_tensor(r, &[n, din], 1.0),
            random_tensor(r, &[din, dout], 1.0),
            random_tensor(r, &[dout], 1.0),
        ];
        let target = random_tensor(r, &[n, dout], 1.0);
        gradient_error(
            &ins,
            &|g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                let t = g.leaf(target.clone());
                g.mse(y, t)
            },
            H,
        )
    }));
    cases.push(run_case("mse", trials, |r| {
        let n = r.gen_range(1..=10);
        let ins = vec![random_tensor(r, &[n], 1.0), random_tensor(r, &[n], 1.0)];
        gradient_error(&ins, &|g, v| g.mse(v[0], v[1]), H)
    }));
    cases.push(run_case("pack", trials, |r| {
        let (h, w, c) = dims(r);
        let ins = vec![random_tensor(r, &[h, w, c], 1.0)];
        let target = random_tensor(r, &[h / 2, w / 2, 4 * c], 1.0);
        gradient_error(
            &ins,
            &|g, v| {
                let y = g.pack(v[0])?;
                let y = g.gelu(y)?;
                let t = g.leaf(target.clone());
                g.mse(y, t)
            },
            H,
        )
    }));
    cases.push(run_case("unpack", trials, |r| {
        let (h, w, c) = dims(r);
        let ins = vec![random_tensor(r, &[h / 2, w / 2, 4 * c], 1.0)];
        let target = random_tensor(r, &[h, w, c], 1.0);
        gradient_error(
            &ins,
            &|g, v| {
                let y = g.unpack(v[0])?;
                let y = g.gelu(y)?;
                let t = g.leaf(target.clone());
                g.mse(y, t)
            },
            H,
        )
    }));
    cases.push(run_case("concat", trials, |r| {
        let (h, w, ca) = dims(r);
        let cb = r.gen_range(1..=3);
        let ins = vec![
            random_tensor(r, &[h, w, ca], 1.0),
            random_tensor(r, &[h, w, cb], 1.0),
        ];
        let target = random_tensor(r, &[h, w, ca + cb], 1.0);
        gradient_error(
            &ins,
            &|g, v| {
                let y = g.concat(v[0], v[1])?;
                let y = g.gelu(y)?;
                let t = g.leaf(target.clone());
                g.mse(y, t)
            },
            H,
        )
    }));
    cases.push(run_case("broadcast", trials, |r| {
        let (h, w, d) = dims(r);
        let ins = vec![random_tensor(r, &[1, d], 1.0)];
        let target = random_tensor(r, &[h, w, d], 1.0);
        gradient_error(
            &ins,
            &|g, v| {
                let y = g.broadcast(v[0], h, w)?;
                let y = g.gelu(y)?;
                let t = g.leaf(target.clone());
                g.mse(y, t)
            },
            H,
        )
    }));
    cases.push(run_case("conv-gelu-mse chain", trials, |r| {
        let (h, w, cin) = dims(r);
        let mid = r.gen_range(1..=3);
        let ins = vec![
            random_tensor(r, &[h, w, cin], 1.0),
            random_tensor(r, &[3, 3, cin, mid], 0.7),
            random_tensor(r, &[mid], 0.5),
            random_tensor(r, &[3, 3, mid, 2], 0.7),
            random_tensor(r, &[2], 0.5),
        ];
        let target = random_tensor(r, &[h, w, 2], 1.0);
        gradient_error(
            &ins,
            &|g, v| {
                let y = g.conv2d(v[0], v[1], v[2])?;
                let y = g.gelu(y)?;
                let y = g.conv2d(y, v[3], v[4])?;
                let t = g.leaf(target.clone());
                g.mse(y, t)
            },
            H,
        )
    }));
    for (name, lcm, pack, conditioned) in [
        ("backbone (pack, LCM)", true, true, false),
        ("backbone (pack, conditioned)", false, true, true),
        ("backbone (no pack)", false, false, false),
    ] {
        cases.push(run_case(name, trials, |r| {
            let cfg = NetConfig {
                latent_channels: 3,
                conditioned,
                hidden: 8,
                blocks: 2,
                time_dim: 8,
                lcm,
                pack,
            };
            let net = VelocityNet::init(r.gen(), cfg).unwrap();
            let input = random_map(r, 8, 8, cfg.input_channels());
            let target = random_tensor(r, &[8, 8, 3], 1.0);
            let t = r.gen_range(0.0..=1.0);
            let params: Vec<Tensor> = net.params().iter().map(|p| p.tensor.clone()).collect();
            gradient_error(
                &params,
                &|g, v| backbone_loss(g, &net, v, &input, t, &target),
                H,
            )
        }));
    }
    cases
}

/// Forward pass of `net` with its parameters replaced by the graph leaves
/// `params`, followed by mse against `target`.
fn backbone_loss(
    g: &mut Graph,
    net: &VelocityNet,
    params: &[Var],
    input: &LatentMap,
    t: f64,
    target: &Tensor,
) -> Result<Var> {
    let pass = net.forward_graph_with(g, input, t, params)?;
    let tv = g.leaf(target.clone());
    g.mse(pass, tv)
}

/// Brute-force per-pixel loops used as metric oracles.
/// Scenes config with the given split sizes (no test split).
pub fn small_scenes(train: usize, val: usize, resolution: usize) -> SceneConfig {
    let mut s = SceneConfig {
        resolution,
        ..SceneConfig::default()
    };
    s.splits.train = train;
    s.splits.val = val;
    s.splits.test = 0;
    s
}

/// A tiny, fast training config.
pub fn small_config(variant: FlowVariant, t: usize) -> TrainConfig {
    let mut cfg = TrainConfig::for_variant(variant, t).unwrap();
    cfg.codec = CodecSpec::AVGPOOL2;
    cfg.net.hidden = 8;
    cfg.net.blocks = 1;
    cfg.batch_size = 2;
    cfg.steps = 6;
    cfg.optimizer.lr = 1e-3;
    cfg.log_every = 1;
    cfg
}

/// Runs generate -> train -> coarse pairs -> sharpener -> infer -> eval ->
/// spectrum into `root` and returns every artifact's bytes keyed by path.
pub fn run_pipeline(root: &Path) -> Vec<(String, Vec<u8>)> {
    let scenes_cfg = small_scenes(6, 3, 16);
    let data_root = root.join("scenes");
    scenes::generate_dataset(&scenes_cfg, &data_root).unwrap();
    let mut core_cfg = small_config(FlowVariant::CORE_PREDICTOR, 1);
    core_cfg.dataset = Some(data_root.clone());
    core_cfg.net.lcm = true;
    let (core, core_hash) = pipeline::train_on_disk(&core_cfg, &root.join("core")).unwrap();
    let train_pairs: Vec<_> =
        pipeline::load_examples(&data_root, Split::Train, Task::Depth, core_cfg.codec)
            .unwrap()
            .into_iter()
            .map(|p| p.1)
            .collect();
    let pairs = pipeline::coarse_pairs(&core, &train_pairs).unwrap();
    let pairs_path = root.join("sharpener/coarse_pairs.bin");
    pipeline::save_coarse_pairs(&pairs_path, &pairs, &core_hash).unwrap();
    let sharp =
        pipeline::train_sharpener(&pairs_path, &small_config(FlowVariant::SHARPENER, 10), None)
            .unwrap();
    sharp.save(&root.join("sharpener/final.ckpt")).unwrap();

    let pipe = pipeline::Pipeline::new(core.clone(), Some(sharp)).unwrap();
    let val = data_root.join("val");
    pipe.infer_path(&val, 10, &root.join("pred/sharp")).unwrap();
    pipe.infer_path(&val, 0, &root.join("pred/core")).unwrap();
    pipeline::evaluate(
        &root.join("pred/sharp"),
        &val,
        Task::Depth,
        "two-stage",
        &root.join("eval"),
    )
    .unwrap();
    pipeline::spectrum_report(
        &[
            ("core", root.join("pred/core")),
            ("sharpened", root.join("pred/sharp")),
            ("gt", val.clone()),
        ],
        Task::Depth,
        Some(&root.join("spectrum.csv")),
    )
    .unwrap();

    let mut files = Vec::new();
    for entry in walk(root) {
        let rel = entry.strip_prefix(root).unwrap().display().to_string();
        files.push((rel, fs::read(&entry).unwrap()));
    }
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

pub mod brute {
    pub fn absrel(a: &[f64], d: &[f64], m: &[bool]) -> f64 {
        let mut s = 0.0;
        let mut n = 0;
        for i in 0..a.len() {
            if m[i] {
                s += (a[i] - d[i]).abs() / d[i];
                n += 1;
            }
        }
        s / n as f64
    }

    pub fn delta1(a: &[f64], d: &[f64], m: &[bool]) -> f64 {
        let mut pass = 0;
        let mut n = 0;
        for i in 0..a.len() {
            if m[i] {
                n += 1;
                if a[i] > 0.0 {
                    let r = if a[i] > d[i] {
                        a[i] / d[i]
                    } else {
                        d[i] / a[i]
                    };
                    if r < 1.25 {
                        pass += 1;
                    }
                }
            }
        }
        pass as f64 / n as f64
    }

    /// Angle through `atan2(|p x g|, p . g)`, independent of the arccos path.
    pub fn angular(p: &[f64], g: &[f64], m: &[bool]) -> (f64, f64) {
        let (mut s, mut below, mut n) = (0.0, 0, 0);
        for i in 0..m.len() {
            if !m[i] {
                continue;
            }
            let a = &p[3 * i..3 * i + 3];
            let b = &g[3 * i..3 * i + 3];
            let cross = [
                a[1] * b[2] - a[2] * b[1],
                a[2] * b[0] - a[0] * b[2],
                a[0] * b[1] - a[1] * b[0],
            ];
            let cn = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
            let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
            let deg = cn.atan2(dot).to_degrees();
            s += deg;
            if deg < 11.25 {
                below += 1;
            }
            n += 1;
        }
        (s / n as f64, below as f64 / n as f64)
    }

    /// Rank of each method per column by counting strictly better and tied
    /// entries, then averaged across columns.
    pub fn avg_rank(table: &[Vec<f64>], lower_better: &[bool]) -> Vec<f64> {
        let m = table.len();
        let mut out = vec![0.0; m];
        for c in 0..lower_better.len() {
            for i in 0..m {
                let mut better = 0;
                let mut ties = 0;
                for j in 0..m {
                    let (x, y) = (table[j][c], table[i][c]);
                    if x == y {
                        ties += 1;
                    } else if (x < y) == lower_better[c] {
                        better += 1;
                    }
                }
                out[i] += better as f64 + (ties as f64 + 1.0) / 2.0;
            }
        }
        out.iter().map(|s| s / lower_better.len() as f64).collect()
    }

    /// O(N^4) direct DFT power, then radial binning, for an `n x n` map.
    pub fn radial_spectrum(map: &[f64], n: usize) -> Vec<(usize, f64)> {
        let mut power = vec![0.0; n * n];
        for v in 0..n {
            for u in 0..n {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..n {
                    for x in 0..n {
                        let ang = -2.0
                            * std::f64::consts::PI
                            * ((u * x) as f64 / n as f64 + (v * y) as f64 / n as f64);
                        re += map[y * n + x] * ang.cos();
                        im += map[y * n + x] * ang.sin();
                    }
                }
                power[v * n + u] = re * re + im * im;
            }
        }
        let centred = |k: usize| {
            if 2 * k < n {
                k as i64
            } else {
                k as i64 - n as i64
            }
        };
        let mut sums: Vec<(f64, usize)> = Vec::new();
        for v in 0..n {
            for u in 0..n {
                let (a, b) = (centred(u), centred(v));
                let r = ((a * a + b * b) as f64).sqrt().floor() as usize;
                if sums.len() <= r {
                    sums.resize(r + 1, (0.0, 0));
                }
                sums[r].0 += power[v * n + u];
                sums[r].1 += 1;
            }
        }
        sums.into_iter()
            .enumerate()
            .map(|(b, (s, c))| (b, (s / c as f64 + 1e-12).log10()))
            .collect()
    }

    /// Least-squares SSE at `(s, b)`.
    pub fn sse(p: &[f64], d: &[f64], m: &[bool], s: f64, b: f64) -> f64 {
        (0..p.len())
            .filter(|&i| m[i])
            .map(|i| (s * p[i] + b - d[i]).powi(2))
            .sum()
    }
}
