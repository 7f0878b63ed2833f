use super::kernels;
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv3x3 { input: Var, kernel: Var, bias: Var },
    Gelu(Var),
    Linear { input: Var, weight: Var, bias: Var },
    Mse(Var, Var),
    Pack(Var),
    Unpack(Var),
    Concat(Var, Var),
    Broadcast(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only tape. Node ids are assigned in creation order, which is a
/// topological order because ops can only reference existing nodes.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn map_dims(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(shape_err!("{what}: expected [H, W, C], got {s:?}")),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].value.requires_grad())
    }

    fn emit(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        let mut t = Tensor::new(shape, data)?;
        t.set_requires_grad(self.tracked(inputs));
        Ok(self.push(t, op))
    }

    /// 3x3 cross-correlation, replication padding, stride 1.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (h, w, cin) = map_dims(self.value(input), "conv2d input")?;
        let (kin, cout) = match *self.value(kernel).shape() {
            [3, 3, ci, co] => (ci, co),
            ref s => {
                return Err(shape_err!(
                    "conv2d kernel must be [3, 3, Cin, Cout], got {s:?}"
                ))
            }
        };
        if kin != cin {
            return Err(shape_err!(
                "conv2d: input has {cin} channels, kernel expects {kin}"
            ));
        }
        if self.value(bias).shape() != [cout] {
            return Err(shape_err!(
                "conv2d bias must be [{cout}], got {:?}",
                self.value(bias).shape()
            ));
        }
        let out = kernels::conv3x3_forward(
            self.value(input).data(),
            h,
            w,
            cin,
            self.value(kernel).data(),
            self.value(bias).data(),
            cout,
        );
        self.emit(
            vec![h, w, cout],
            out,
            Op::Conv3x3 {
                input,
                kernel,
                bias,
            },
            &[input, kernel, bias],
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let out = t.data().iter().map(|&v| kernels::gelu(v)).collect();
        self.emit(shape, out, Op::Gelu(x), &[x])
    }

    /// `[N, Din] x [Din, Dout] + bias[Dout]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, din) = match *self.value(input).shape() {
            [n, d] => (n, d),
            ref s => return Err(shape_err!("linear input must be [N, Din], got {s:?}")),
        };
        let (win, dout) = match *self.value(weight).shape() {
            [a, b] => (a, b),
            ref s => return Err(shape_err!("linear weight must be [Din, Dout], got {s:?}")),
        };
        if win != din {
            return Err(shape_err!("linear: input width {din} vs weight rows {win}"));
        }
        if self.value(bias).shape() != [dout] {
            return Err(shape_err!(
                "linear bias must be [{dout}], got {:?}",
                self.value(bias).shape()
            ));
        }
        let out = kernels::linear_forward(
            self.value(input).data(),
            n,
            din,
            self.value(weight).data(),
            self.value(bias).data(),
            dout,
        );
        self.emit(
            vec![n, dout],
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        )
    }

    /// Mean of squared differences; a scalar node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err!("mse: {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let n = ta.len() as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.emit(vec![1], vec![s / n], Op::Mse(a, b), &[a, b])
    }

    pub fn pack(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = map_dims(self.value(x), "pack")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("pack needs even spatial dims, got {h}x{w}"));
        }
        let out = kernels::pack(self.value(x).data(), h, w, c);
        self.emit(vec![h / 2, w / 2, 4 * c], out, Op::Pack(x), &[x])
    }

    pub fn unpack(&mut self, x: Var) -> Result<Var> {
        let (h, w, c4) = map_dims(self.value(x), "unpack")?;
        if c4 % 4 != 0 {
            return Err(shape_err!("unpack needs channels divisible by 4, got {c4}"));
        }
        let c = c4 / 4;
        let out = kernels::unpack(self.value(x).data(), 2 * h, 2 * w, c);
        self.emit(vec![2 * h, 2 * w, c], out, Op::Unpack(x), &[x])
    }

    /// Channel concatenation of two maps with equal spatial size.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ha, wa, ca) = map_dims(self.value(a), "concat lhs")?;
        let (hb, wb, cb) = map_dims(self.value(b), "concat rhs")?;
        if (ha, wa) != (hb, wb) {
            return Err(shape_err!("concat: {ha}x{wa} vs {hb}x{wb}"));
        }
        let out = kernels::concat_channels(self.value(a).data(), ca, self.value(b).data(), cb);
        self.emit(vec![ha, wa, ca + cb], out, Op::Concat(a, b), &[a, b])
    }

    /// Repeats a `[1, D]` row over an `h x w` grid, giving `[h, w, D]`.
    pub fn broadcast(&mut self, row: Var, h: usize, w: usize) -> Result<Var> {
        let d = match *self.value(row).shape() {
            [1, d] => d,
            ref s => return Err(shape_err!("broadcast source must be [1, D], got {s:?}")),
        };
        let src = self.value(row).data();
        let mut out = Vec::with_capacity(h * w * d);
        for _ in 0..h * w {
            out.extend_from_slice(src);
        }
        self.emit(vec![h, w, d], out, Op::Broadcast(row), &[row])
    }

    /// Reverse-mode sweep from a scalar node. Gradients accumulate into every
    /// tracked tensor; call [`Graph::zero_grads`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        if !self.value(loss).requires_grad() {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let contributions = self.local_backward(id, &g)?;
            for (v, cg) in contributions {
                match grads[v.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, b)| *a += b),
                    None => grads[v.0] = Some(cg),
                }
            }
            self.nodes[id].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn local_backward(&self, id: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let mut out = Vec::new();
        match self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv3x3 {
                input,
                kernel,
                bias,
            } => {
                let x = self.value(input);
                let (h, w, cin) = map_dims(x, "conv2d input")?;
                let cout = self.value(bias).len();
                let grads = kernels::conv3x3_backward(
                    x.data(),
                    h,
                    w,
                    cin,
                    self.value(kernel).data(),
                    cout,
                    g,
                    [self.needs(input), self.needs(kernel), self.needs(bias)],
                );
                out.extend(grads.input.map(|gi| (input, gi)));
                out.extend(grads.kernel.map(|gk| (kernel, gk)));
                out.extend(grads.bias.map(|gb| (bias, gb)));
            }
            Op::Gelu(x) => {
                if self.needs(x) {
                    let gi = self
                        .value(x)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &go)| go * kernels::gelu_derivative(v))
                        .collect();
                    out.push((x, gi));
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xv = self.value(input);
                let wv = self.value(weight);
                let (n, din) = (xv.shape()[0], xv.shape()[1]);
                let dout = wv.shape()[1];
                if self.needs(input) {
                    let mut gi = vec![0.0; n * din];
                    for r in 0..n {
                        let go = &g[r * dout..(r + 1) * dout];
                        for i in 0..din {
                            let wrow = &wv.data()[i * dout..(i + 1) * dout];
                            gi[r * din + i] = wrow.iter().zip(go).map(|(a, b)| a * b).sum();
                        }
                    }
                    out.push((input, gi));
                }
                if self.needs(weight) {
                    let mut gw = vec![0.0; din * dout];
                    for r in 0..n {
                        let go = &g[r * dout..(r + 1) * dout];
                        for i in 0..din {
                            let v = xv.data()[r * din + i];
                            for (a, &b) in gw[i * dout..(i + 1) * dout].iter_mut().zip(go) {
                                *a += v * b;
                            }
                        }
                    }
                    out.push((weight, gw));
                }
                if self.needs(bias) {
                    let mut gb = vec![0.0; dout];
                    for row in g.chunks_exact(dout) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    out.push((bias, gb));
                }
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let scale = 2.0 * g[0] / ta.len() as f64;
                let diff: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| scale * (x - y))
                    .collect();
                if self.needs(b) {
                    out.push((b, diff.iter().map(|d| -d).collect()));
                }
                if self.needs(a) {
                    out.push((a, diff));
                }
            }
            Op::Pack(x) => {
                if self.needs(x) {
                    let (h, w, c) = map_dims(self.value(x), "pack")?;
                    out.push((x, kernels::unpack(g, h, w, c)));
                }
            }
            Op::Unpack(x) => {
                if self.needs(x) {
                    let (h, w, c) = map_dims(&self.nodes[id].value, "unpack")?;
                    out.push((x, kernels::pack(g, h, w, c)));
                }
            }
            Op::Concat(a, b) => {
                let ca = self.value(a).shape()[2];
                let cb = self.value(b).shape()[2];
                let (ga, gb) = kernels::split_channels(g, ca, cb);
                if self.needs(a) {
                    out.push((a, ga));
                }
                if self.needs(b) {
                    out.push((b, gb));
                }
            }
            Op::Broadcast(row) => {
                if self.needs(row) {
                    let d = self.value(row).len();
                    let mut gr = vec![0.0; d];
                    for cell in g.chunks_exact(d) {
                        gr.iter_mut().zip(cell).for_each(|(a, b)| *a += b);
                    }
                    out.push((row, gr));
                }
            }
        }
        Ok(out)
    }
}

impl From<Var> for usize {
    fn from(v: Var) -> usize {
        v.0
    }
}
