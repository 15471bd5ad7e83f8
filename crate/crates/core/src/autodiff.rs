//! A small tape-based reverse-mode autodiff engine over dense `f64` tensors.
//!
//! A [`Graph`] records one forward pass. Parameters live outside the tape in
//! a [`ParamStore`] so that a fresh graph can be built for every batch while
//! gradients accumulate into the store.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > 4 {
            return Err(shape_err(format!("{} axes, at most 4 supported", shape.len())));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} needs {count} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let count = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; count],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [b, c, h, w] => Ok([b, c, h, w]),
            _ => Err(shape_err(format!("expected a 4-axis tensor, got {:?}", self.shape))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

/// Named trainable tensors, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = vec![0.0; value.len()];
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    /// Stride-1 "same" convolution; `x: [B,Ci,H,W]`, `w: [Co,Ci,K,K]`, `b: [Co]`.
    Conv2d { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    /// `exp(tanh(x))`, bounded in `(1/e, e)`.
    ExpTanh(NodeId),
    AvgPool2(NodeId),
    Upsample2(NodeId),
    Add(NodeId, NodeId),
    /// `x: [B, In]`, `w: [Out, In]` -> `[B, Out]`.
    Linear { x: NodeId, w: NodeId },
    SumSquares(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// One recorded forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let out = conv2d_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Conv2d { x, w, b }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data.iter().map(|a| a.max(0.0)).collect();
        let out = Tensor {
            shape: v.shape.clone(),
            data,
        };
        self.push(out, Op::Relu(x))
    }

    pub fn exp_tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data.iter().map(|a| exp_tanh(*a)).collect();
        let out = Tensor {
            shape: v.shape.clone(),
            data,
        };
        self.push(out, Op::ExpTanh(x))
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let [b, c, h, w] = v.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err(format!("cannot pool odd spatial size {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(vec![b, c, oh, ow]);
        for plane in 0..b * c {
            let src = &v.data[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out.data[plane * oh * ow..(plane + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let s = src[2 * i * w + 2 * j]
                        + src[2 * i * w + 2 * j + 1]
                        + src[(2 * i + 1) * w + 2 * j]
                        + src[(2 * i + 1) * w + 2 * j + 1];
                    dst[i * ow + j] = 0.25 * s;
                }
            }
        }
        Ok(self.push(out, Op::AvgPool2(x)))
    }

    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let [b, c, h, w] = v.dims4()?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(vec![b, c, oh, ow]);
        for plane in 0..b * c {
            let src = &v.data[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out.data[plane * oh * ow..(plane + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    dst[i * ow + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        Ok(self.push(out, Op::Upsample2(x)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(shape_err(format!("add {:?} + {:?}", va.shape, vb.shape)));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let out = Tensor {
            shape: va.shape.clone(),
            data,
        };
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (bsz, inp) = match vx.shape[..] {
            [b, i] => (b, i),
            _ => return Err(shape_err(format!("linear input {:?}", vx.shape))),
        };
        let outp = match vw.shape[..] {
            [o, i] if i == inp => o,
            _ => return Err(shape_err(format!("linear weight {:?} for input {inp}", vw.shape))),
        };
        let mut out = Tensor::zeros(vec![bsz, outp]);
        for b in 0..bsz {
            let row = &vx.data[b * inp..(b + 1) * inp];
            for o in 0..outp {
                let wr = &vw.data[o * inp..(o + 1) * inp];
                out.data[b * outp + o] = row.iter().zip(wr).map(|(a, c)| a * c).sum();
            }
        }
        Ok(self.push(out, Op::Linear { x, w }))
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data.iter().map(|a| a * a).sum();
        self.push(
            Tensor {
                shape: vec![1],
                data: vec![s],
            },
            Op::SumSquares(x),
        )
    }

    /// Back-propagates the given output gradients (one per seeded node) and
    /// accumulates parameter gradients into `store`.
    pub fn backward(&self, seeds: &[(NodeId, &[f64])], store: &mut ParamStore) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Graph("backward called before any forward pass".into()));
        }
        if seeds.is_empty() {
            return Err(Error::Graph("backward called without output gradients".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (id, g) in seeds {
            let node = self
                .nodes
                .get(id.0)
                .ok_or_else(|| Error::Graph(format!("node {} not on this tape", id.0)))?;
            if g.len() != node.value.len() {
                return Err(shape_err(format!(
                    "seed gradient has {} values for a node of {}",
                    g.len(),
                    node.value.len()
                )));
            }
            accumulate(&mut grads[id.0], g);
            last = last.max(id.0);
        }

        for idx in (0..=last).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match node.op {
                Op::Input => {}
                Op::Param(pid) => {
                    let p = store.get_mut(pid);
                    for (a, g) in p.grad.iter_mut().zip(&gout) {
                        *a += g;
                    }
                }
                Op::Conv2d { x, w, b } => {
                    let (gx, gw, gb) =
                        conv2d_backward(self.value(x), self.value(w), &gout)?;
                    accumulate(&mut grads[x.0], &gx);
                    accumulate(&mut grads[w.0], &gw);
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::Relu(x) => {
                    let gx: Vec<f64> = self
                        .value(x)
                        .data
                        .iter()
                        .zip(&gout)
                        .map(|(a, g)| if *a > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::ExpTanh(x) => {
                    let gx: Vec<f64> = self
                        .value(x)
                        .data
                        .iter()
                        .zip(&node.value.data)
                        .zip(&gout)
                        .map(|((a, y), g)| {
                            let t = a.tanh();
                            g * y * (1.0 - t * t)
                        })
                        .collect();
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::AvgPool2(x) => {
                    let [b, c, h, w] = self.value(x).dims4()?;
                    let (oh, ow) = (h / 2, w / 2);
                    let mut gx = vec![0.0; b * c * h * w];
                    for plane in 0..b * c {
                        for i in 0..h {
                            for j in 0..w {
                                gx[plane * h * w + i * w + j] =
                                    0.25 * gout[plane * oh * ow + (i / 2) * ow + j / 2];
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::Upsample2(x) => {
                    let [b, c, h, w] = self.value(x).dims4()?;
                    let (oh, ow) = (2 * h, 2 * w);
                    let mut gx = vec![0.0; b * c * h * w];
                    for plane in 0..b * c {
                        for i in 0..oh {
                            for j in 0..ow {
                                gx[plane * h * w + (i / 2) * w + j / 2] +=
                                    gout[plane * oh * ow + i * ow + j];
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], &gout);
                    accumulate(&mut grads[b.0], &gout);
                }
                Op::Linear { x, w } => {
                    let (vx, vw) = (self.value(x), self.value(w));
                    let (bsz, inp) = (vx.shape[0], vx.shape[1]);
                    let outp = vw.shape[0];
                    let mut gx = vec![0.0; vx.len()];
                    let mut gw = vec![0.0; vw.len()];
                    for b in 0..bsz {
                        for o in 0..outp {
                            let g = gout[b * outp + o];
                            for i in 0..inp {
                                gx[b * inp + i] += g * vw.data[o * inp + i];
                                gw[o * inp + i] += g * vx.data[b * inp + i];
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], &gx);
                    accumulate(&mut grads[w.0], &gw);
                }
                Op::SumSquares(x) => {
                    let g = gout[0];
                    let gx: Vec<f64> = self.value(x).data.iter().map(|a| 2.0 * a * g).collect();
                    accumulate(&mut grads[x.0], &gx);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

/// Relative distance kept from the ends of `(1/e, e)`.
pub const EVIDENCE_MARGIN: f64 = 1e-12;

/// The bounded evidence activation `exp(tanh(x))`.
///
/// `tanh` rounds to exactly ±1 for large inputs; the result is held a
/// relative [`EVIDENCE_MARGIN`] inside the open interval `(1/e, e)`, which
/// also keeps `u = N / S` strictly inside its bounds after rounding.
pub fn exp_tanh(x: f64) -> f64 {
    x.tanh().exp().clamp(
        (-1.0f64).exp() * (1.0 + EVIDENCE_MARGIN),
        std::f64::consts::E * (1.0 - EVIDENCE_MARGIN),
    )
}

fn conv_dims(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<([usize; 4], usize, usize)> {
    let [bs, ci, h, wd] = x.dims4()?;
    let [co, wci, kh, kw] = w.dims4()?;
    if wci != ci || kh != kw || kh % 2 == 0 {
        return Err(shape_err(format!(
            "conv weight {:?} incompatible with input {:?} (odd square kernels only)",
            w.shape, x.shape
        )));
    }
    if b.shape != [co] {
        return Err(shape_err(format!("conv bias {:?} for {co} output channels", b.shape)));
    }
    Ok(([bs, ci, h, wd], co, kh))
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ([bs, ci, h, wd], co, k) = conv_dims(x, w, b)?;
    let pad = (k / 2) as isize;
    let plane = h * wd;
    let mut out = Tensor::zeros(vec![bs, co, h, wd]);
    for n in 0..bs {
        for o in 0..co {
            let dst = &mut out.data[(n * co + o) * plane..(n * co + o + 1) * plane];
            dst.iter_mut().for_each(|v| *v = b.data[o]);
            for c in 0..ci {
                let src = &x.data[(n * ci + c) * plane..(n * ci + c + 1) * plane];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let wv = w.data[((o * ci + c) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = valid_range(dx, wd);
                        for y in valid_rows(dy, h) {
                            let sy = (y as isize + dy) as usize;
                            let drow = &mut dst[y * wd + x0..y * wd + x1];
                            let sx0 = (x0 as isize + dx) as usize;
                            let srow = &src[sy * wd + sx0..sy * wd + sx0 + (x1 - x0)];
                            for (d, s) in drow.iter_mut().zip(srow) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn conv2d_backward(x: &Tensor, w: &Tensor, gout: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let [bs, ci, h, wd] = x.dims4()?;
    let [co, _, k, _] = w.dims4()?;
    let pad = (k / 2) as isize;
    let plane = h * wd;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; co];
    for n in 0..bs {
        for o in 0..co {
            let g = &gout[(n * co + o) * plane..(n * co + o + 1) * plane];
            gb[o] += g.iter().sum::<f64>();
            for c in 0..ci {
                let src = &x.data[(n * ci + c) * plane..(n * ci + c + 1) * plane];
                let gsrc = &mut gx[(n * ci + c) * plane..(n * ci + c + 1) * plane];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let widx = ((o * ci + c) * k + ky) * k + kx;
                        let wv = w.data[widx];
                        let (x0, x1) = valid_range(dx, wd);
                        let mut acc = 0.0;
                        for y in valid_rows(dy, h) {
                            let sy = (y as isize + dy) as usize;
                            let sx0 = (x0 as isize + dx) as usize;
                            let grow = &g[y * wd + x0..y * wd + x1];
                            let srow = &src[sy * wd + sx0..sy * wd + sx0 + (x1 - x0)];
                            let gs = &mut gsrc[sy * wd + sx0..sy * wd + sx0 + (x1 - x0)];
                            for ((gv, sv), gi) in grow.iter().zip(srow).zip(gs.iter_mut()) {
                                acc += gv * sv;
                                *gi += wv * gv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

/// Output columns `x` with `x + dx` inside `[0, len)`.
fn valid_range(dx: isize, len: usize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (len as isize - dx.max(0)).max(0) as usize;
    (lo.min(len), hi.max(lo.min(len)))
}

fn valid_rows(dy: isize, len: usize) -> std::ops::Range<usize> {
    let (lo, hi) = valid_range(dy, len);
    lo..hi
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn tensor_shape_contract() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert_eq!(Tensor::zeros(vec![2, 3]).len(), 6);
    }

    #[test]
    fn exp_tanh_values() {
        assert_eq!(exp_tanh(0.0), 1.0);
        assert!((exp_tanh(1.0) - 2.141_687_684_749_35).abs() < 1e-12);
        assert!((exp_tanh(50.0) - std::f64::consts::E).abs() < 1e-11);
        assert!((exp_tanh(-50.0) - (-1.0f64).exp()).abs() < 1e-11);
        assert!(exp_tanh(f64::MAX) < std::f64::consts::E);
        assert!(exp_tanh(f64::MIN) > (-1.0f64).exp());
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 3, 3], (0..9).map(f64::from).collect()));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.input(t(&[1, 1, 3, 3], k));
        let b = g.input(t(&[1], vec![0.5]));
        let y = g.conv2d(x, w, b).unwrap();
        let expect: Vec<f64> = (0..9).map(|v| v as f64 + 0.5).collect();
        assert_eq!(g.value(y).data(), &expect[..]);
    }

    #[test]
    fn conv_zero_padding_at_borders() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 2, 2], vec![1.0; 4]));
        let w = g.input(t(&[1, 1, 3, 3], vec![1.0; 9]));
        let b = g.input(t(&[1], vec![0.0]));
        let y = g.conv2d(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn pool_and_upsample() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]));
        let p = g.avg_pool2(x).unwrap();
        assert_eq!(g.value(p).data(), &[3.0]);
        let u = g.upsample2(p).unwrap();
        assert_eq!(g.value(u).data(), &[3.0; 4]);
        let odd = g.input(t(&[1, 1, 3, 2], vec![0.0; 6]));
        assert!(g.avg_pool2(odd).is_err());
    }

    #[test]
    fn backward_without_forward_is_graph_error() {
        let g = Graph::new();
        let mut store = ParamStore::new();
        assert!(matches!(g.backward(&[], &mut store), Err(Error::Graph(_))));
        let mut g = Graph::new();
        let x = g.input(t(&[1], vec![1.0]));
        let bogus = NodeId(x.0 + 5);
        assert!(matches!(
            g.backward(&[(bogus, &[1.0])], &mut store),
            Err(Error::Graph(_))
        ));
    }

    #[test]
    fn linear_quadratic_gradient_closed_form() {
        // L = ||W x||², dL/dW = 2 W x xᵀ
        let mut store = ParamStore::new();
        let wid = store.add("w", t(&[2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.3, -0.7]));
        let xv = [1.0, 2.0, -1.5];
        let mut g = Graph::new();
        let x = g.input(t(&[1, 3], xv.to_vec()));
        let w = g.param(&store, wid);
        let y = g.linear(x, w).unwrap();
        let l = g.sum_squares(y);
        g.backward(&[(l, &[1.0])], &mut store).unwrap();
        let wx = g.value(y).data().to_vec();
        let grad = &store.get(wid).grad;
        for o in 0..2 {
            for i in 0..3 {
                assert!((grad[o * 3 + i] - 2.0 * wx[o] * xv[i]).abs() < 1e-12);
            }
        }
    }
}
