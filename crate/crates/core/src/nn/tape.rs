//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and enough context to
//! run its adjoint. [`Tape::backward`] walks the nodes in reverse from a
//! scalar root.

use super::conv::{self, ConvGeom};
use super::norm::{self, BatchStats, NormCache};
use super::Tensor;
use crate::error::{Error, Result};
use crate::loss::{self, DiceMode};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Var,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        cache: NormCache,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache,
        stats: BatchStats,
    },
    /// `gamma * (x - mean) * inv_std + beta` with fixed statistics.
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    Bce {
        p: Var,
        target: Tensor,
    },
    SoftDice {
        p: Var,
        target: Tensor,
        mode: DiceMode,
        smooth: f64,
    },
    Mse {
        x: Var,
        target: Tensor,
    },
    Linear {
        terms: Vec<(Var, f64)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn expect_rank5(t: &Tensor, what: &str) -> Result<[usize; 5]> {
    if t.shape().len() != 5 {
        return Err(Error::ShapeMismatch(format!(
            "{what} expects [N, C, D, H, W], got {:?}",
            t.shape()
        )));
    }
    Ok(t.dims5())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf (parameters).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable leaf (inputs).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Batch statistics recorded by a [`Tape::batch_norm`] node.
    pub fn batch_stats(&self, var: Var) -> Option<&BatchStats> {
        match &self.nodes[var.0].op {
            Op::BatchNorm { stats, .. } => Some(stats),
            _ => None,
        }
    }

    /// Cubic-kernel convolution with zero padding `pad`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, cin, d, h, wd] = expect_rank5(self.value(x), "conv3d")?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 5 || ws[1] != cin || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Error::ShapeMismatch(format!(
                "conv3d weight {ws:?} for input with {cin} channels"
            )));
        }
        if b.is_some_and(|b| self.value(b).len() != ws[0]) {
            return Err(Error::ShapeMismatch("conv3d bias length".into()));
        }
        let geom = ConvGeom {
            in_ch: cin,
            out_ch: ws[0],
            kernel: ws[2],
            stride,
            pad,
            in_size: [d, h, wd],
        };
        if [d, h, wd].iter().any(|&s| s + 2 * pad < geom.kernel) {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} smaller than kernel {}",
                [d, h, wd],
                geom.kernel
            )));
        }
        let zeros;
        let bias = match b {
            Some(b) => self.value(b).data(),
            None => {
                zeros = vec![0.0; geom.out_ch];
                &zeros
            }
        };
        let out = conv::conv3d_forward(&geom, n, self.value(x).data(), self.value(w).data(), bias);
        let [od, oh, ow] = geom.out_size();
        let value = Tensor::new(vec![n, geom.out_ch, od, oh, ow], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Conv3d { x, w, b, geom }, &inputs))
    }

    /// Kernel-2, stride-2 transposed convolution; weight `[Cin, Cout, 2, 2, 2]`.
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, cin, d, h, wd] = expect_rank5(self.value(x), "conv_transpose")?;
        let ws = self.value(w).shape().to_vec();
        if ws != [cin, ws[1], 2, 2, 2] {
            return Err(Error::ShapeMismatch(format!(
                "transposed-conv weight {ws:?} for {cin} input channels"
            )));
        }
        let cout = ws[1];
        let out = conv::conv_transpose_forward(
            cin,
            cout,
            [d, h, wd],
            n,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let value = Tensor::new(vec![n, cout, 2 * d, 2 * h, 2 * wd], out)?;
        Ok(self.push(value, Op::ConvTranspose { x, w, b }, &[x, w, b]))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{c} channels not divisible into {groups} groups"
            )));
        }
        let (y, cache) = norm::group_norm_forward(
            xv.data(),
            n,
            c,
            xv.spatial_len(),
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let value = Tensor::new(xv.shape().to_vec(), y)?;
        Ok(self.push(
            value,
            Op::GroupNorm { x, gamma, beta, groups, cache },
            &[x, gamma, beta],
        ))
    }

    /// Training-mode batch normalization (batch statistics).
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let (y, cache, stats) = norm::batch_norm_forward(
            xv.data(),
            n,
            c,
            xv.spatial_len(),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let value = Tensor::new(xv.shape().to_vec(), y)?;
        Ok(self.push(
            value,
            Op::BatchNorm { x, gamma, beta, cache, stats },
            &[x, gamma, beta],
        ))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn channel_affine(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (c, s) = (xv.shape()[1], xv.spatial_len());
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut y = xv.data().to_vec();
        for (i, chunk) in y.chunks_mut(s).enumerate() {
            let ch = i % c;
            for v in chunk {
                *v = g[ch] * (*v - mean[ch]) * inv_std[ch] + b[ch];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), y)?;
        Ok(self.push(
            value,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        self.push(value, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Sigmoid { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "add of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() < 2 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::ShapeMismatch(format!("concat of {sa:?} and {sb:?}")));
        }
        let n = sa[0];
        let (la, lb) = (self.value(a).len() / n, self.value(b).len() / n);
        let mut data = Vec::with_capacity(n * (la + lb));
        for s in 0..n {
            data.extend_from_slice(&self.value(a).data()[s * la..(s + 1) * la]);
            data.extend_from_slice(&self.value(b).data()[s * lb..(s + 1) * lb]);
        }
        let mut shape = sa.to_vec();
        shape[1] += sb[1];
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat { a, b }, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x }, &[x])
    }

    pub fn bce(&mut self, p: Var, target: &Tensor) -> Result<Var> {
        let value = Tensor::scalar(loss::bce(self.value(p), target)?);
        Ok(self.push(value, Op::Bce { p, target: target.clone() }, &[p]))
    }

    /// Soft Dice coefficient (a similarity, not a loss).
    pub fn soft_dice(&mut self, p: Var, target: &Tensor, mode: DiceMode, smooth: f64) -> Result<Var> {
        let value = Tensor::scalar(loss::soft_dice(self.value(p), target, mode, smooth)?);
        Ok(self.push(
            value,
            Op::SoftDice {
                p,
                target: target.clone(),
                mode,
                smooth,
            },
            &[p],
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        if self.value(x).shape() != target.shape() {
            return Err(Error::ShapeMismatch(format!(
                "mse of {:?} against {:?}",
                self.value(x).shape(),
                target.shape()
            )));
        }
        let xv = self.value(x);
        let m = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / xv.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mse { x, target: target.clone() }, &[x]))
    }

    /// `constant + Σ coef · var` over scalar nodes.
    pub fn linear(&mut self, terms: &[(Var, f64)], constant: f64) -> Var {
        let v = constant + terms.iter().map(|&(x, c)| c * self.value(x).item()).sum::<f64>();
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(v), Op::Linear { terms: terms.to_vec() }, &inputs)
    }

    /// Gradients of a scalar `root` with respect to every node that needs one.
    pub fn backward(&self, root: Var) -> Gradients {
        let seed = Tensor::full(self.value(root).shape(), 1.0);
        self.backward_with(root, seed)
    }

    pub fn backward_with(&self, root: Var, seed: Tensor) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, geom } => {
                let xv = self.value(*x);
                let n = xv.shape()[0];
                let mut dw = vec![0.0; self.value(*w).len()];
                let mut db = vec![0.0; geom.out_ch];
                let mut dx = self.needs(*x).then(|| vec![0.0; xv.len()]);
                conv::conv3d_backward(
                    geom,
                    n,
                    xv.data(),
                    self.value(*w).data(),
                    g.data(),
                    dx.as_deref_mut(),
                    &mut dw,
                    &mut db,
                );
                if let Some(dx) = dx {
                    acc(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                }
                if self.needs(*w) {
                    acc(*w, Tensor::new(self.value(*w).shape().to_vec(), dw).unwrap());
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    acc(b, Tensor::new(vec![geom.out_ch], db).unwrap());
                }
            }
            Op::ConvTranspose { x, w, b } => {
                let xv = self.value(*x);
                let [n, cin, d, h, wd] = xv.dims5();
                let cout = self.value(*w).shape()[1];
                let mut dw = vec![0.0; self.value(*w).len()];
                let mut db = vec![0.0; cout];
                let mut dx = self.needs(*x).then(|| vec![0.0; xv.len()]);
                conv::conv_transpose_backward(
                    cin,
                    cout,
                    [d, h, wd],
                    n,
                    xv.data(),
                    self.value(*w).data(),
                    g.data(),
                    dx.as_deref_mut(),
                    &mut dw,
                    &mut db,
                );
                if let Some(dx) = dx {
                    acc(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                }
                if self.needs(*w) {
                    acc(*w, Tensor::new(self.value(*w).shape().to_vec(), dw).unwrap());
                }
                if self.needs(*b) {
                    acc(*b, Tensor::new(vec![cout], db).unwrap());
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, cache } => {
                let xv = self.value(*x);
                let (n, c) = (xv.shape()[0], xv.shape()[1]);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let dx = norm::group_norm_backward(
                    g.data(),
                    cache,
                    n,
                    c,
                    xv.spatial_len(),
                    *groups,
                    self.value(*gamma).data(),
                    &mut dgamma,
                    &mut dbeta,
                );
                if self.needs(*x) {
                    acc(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                }
                if self.needs(*gamma) {
                    acc(*gamma, Tensor::new(vec![c], dgamma).unwrap());
                }
                if self.needs(*beta) {
                    acc(*beta, Tensor::new(vec![c], dbeta).unwrap());
                }
            }
            Op::BatchNorm { x, gamma, beta, cache, .. } => {
                let xv = self.value(*x);
                let (n, c) = (xv.shape()[0], xv.shape()[1]);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let dx = norm::batch_norm_backward(
                    g.data(),
                    cache,
                    n,
                    c,
                    xv.spatial_len(),
                    self.value(*gamma).data(),
                    &mut dgamma,
                    &mut dbeta,
                );
                if self.needs(*x) {
                    acc(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                }
                if self.needs(*gamma) {
                    acc(*gamma, Tensor::new(vec![c], dgamma).unwrap());
                }
                if self.needs(*beta) {
                    acc(*beta, Tensor::new(vec![c], dbeta).unwrap());
                }
            }
            Op::ChannelAffine { x, gamma, beta, mean, inv_std } => {
                let xv = self.value(*x);
                let (c, s) = (xv.shape()[1], xv.spatial_len());
                let gam = self.value(*gamma).data();
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (i, (gs, xs)) in g.data().chunks(s).zip(xv.data().chunks(s)).enumerate() {
                    let ch = i % c;
                    for (j, (&gv, &xval)) in gs.iter().zip(xs).enumerate() {
                        dx[i * s + j] = gv * gam[ch] * inv_std[ch];
                        dgamma[ch] += gv * (xval - mean[ch]) * inv_std[ch];
                        dbeta[ch] += gv;
                    }
                }
                if self.needs(*x) {
                    acc(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                }
                if self.needs(*gamma) {
                    acc(*gamma, Tensor::new(vec![c], dgamma).unwrap());
                }
                if self.needs(*beta) {
                    acc(*beta, Tensor::new(vec![c], dbeta).unwrap());
                }
            }
            Op::LeakyRelu { x, slope } => {
                let data = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { slope * gv })
                    .collect();
                acc(*x, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            Op::Sigmoid { x } => {
                let data = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| gv * y * (1.0 - y))
                    .collect();
                acc(*x, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Concat { a, b } => {
                let n = g.shape()[0];
                let (la, lb) = (self.value(*a).len() / n, self.value(*b).len() / n);
                let mut ga = Vec::with_capacity(n * la);
                let mut gb = Vec::with_capacity(n * lb);
                for s in 0..n {
                    let base = s * (la + lb);
                    ga.extend_from_slice(&g.data()[base..base + la]);
                    gb.extend_from_slice(&g.data()[base + la..base + la + lb]);
                }
                if self.needs(*a) {
                    acc(*a, Tensor::new(self.value(*a).shape().to_vec(), ga).unwrap());
                }
                if self.needs(*b) {
                    acc(*b, Tensor::new(self.value(*b).shape().to_vec(), gb).unwrap());
                }
            }
            Op::Sum { x } => {
                acc(*x, Tensor::full(self.value(*x).shape(), g.item()));
            }
            Op::Bce { p, target } => {
                let mut grad = loss::bce_grad(self.value(*p), target).unwrap();
                grad.data_mut().iter_mut().for_each(|v| *v *= g.item());
                acc(*p, grad);
            }
            Op::SoftDice { p, target, mode, smooth } => {
                let mut grad = loss::soft_dice_grad(self.value(*p), target, *mode, *smooth).unwrap();
                grad.data_mut().iter_mut().for_each(|v| *v *= g.item());
                acc(*p, grad);
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x);
                let scale = 2.0 * g.item() / xv.len() as f64;
                let data = xv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| scale * (a - b))
                    .collect();
                acc(*x, Tensor::new(xv.shape().to_vec(), data).unwrap());
            }
            Op::Linear { terms } => {
                for &(v, c) in terms {
                    if self.needs(v) {
                        acc(v, Tensor::scalar(c * g.item()));
                    }
                }
            }
        }
    }
}
