//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its value and the ids of its
//! inputs. `backward` walks the nodes in exact reverse order, so a node's
//! gradient is complete before it is propagated to its inputs.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::kernels::{self, Padding, RoiBox};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, rows: usize, inner: usize, cols: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Scale { x: usize, s: usize },
    BlockScale { x: usize, s: usize, block: usize },
    ScaleConst { x: usize, c: T },
    Relu(usize),
    Mask { x: usize, mask: Vec<T> },
    Concat(Vec<usize>),
    Reshape(usize),
    Conv2d { x: usize, k: usize, stride: usize, padding: Padding },
    ChannelBias { x: usize, b: usize },
    Gap(usize),
    CropResize { x: usize, roi: RoiBox },
    SoftmaxCe { x: usize, label: usize, probs: Vec<T> },
    Norm(usize),
    SoftTriplet { dp: usize, dn: usize },
    Square(usize),
    Sum(usize),
    WeightedSum(Vec<(usize, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T: Real = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    params: Vec<(String, usize)>,
    param_lookup: HashMap<String, usize>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
            param_lookup: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Usage("variable does not belong to this tape".into()));
        }
        Ok(v.idx)
    }

    fn val(&self, idx: usize) -> &Tensor<T> {
        &self.nodes[idx].value
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable does not belong to this tape");
        &self.nodes[v.idx].value
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Registers a named parameter. Registering the same name again
    /// returns the existing node, so gradients from every use accumulate.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        if let Some(&idx) = self.param_lookup.get(name) {
            return Var { tape: self.id, idx };
        }
        let v = self.push(t.clone(), Op::Leaf);
        self.params.push((name.to_string(), v.idx));
        self.param_lookup.insert(name.to_string(), v.idx);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.param_lookup.get(name).map(|&idx| Var { tape: self.id, idx })
    }

    /// Row vector or matrix times matrix: `[k]·[k,n] -> [n]`, `[m,k]·[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (self.val(ai), self.val(bi));
        bv.expect_rank(2)?;
        let (inner, cols) = (bv.shape()[0], bv.shape()[1]);
        let (rows, out_shape) = match av.shape() {
            [k] if *k == inner => (1, vec![cols]),
            [m, k] if *k == inner => (*m, vec![*m, cols]),
            s => {
                return Err(Error::Dimension(format!(
                    "matmul {:?} by {:?}",
                    s,
                    bv.shape()
                )))
            }
        };
        let mut out = vec![T::zero(); rows * cols];
        T::gemm(rows, inner, cols, av.data(), false, bv.data(), false, T::zero(), &mut out);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::MatMul { a: ai, b: bi, rows, inner, cols },
        ))
    }

    fn binary(&mut self, a: Var, b: Var, sign: T) -> Result<(usize, usize, Tensor<T>)> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (self.val(ai), self.val(bi));
        av.expect_shape(bv.shape())?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + sign * y).collect();
        Ok((ai, bi, Tensor::from_parts(av.shape().to_vec(), data)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, out) = self.binary(a, b, T::one())?;
        Ok(self.push(out, Op::Add(ai, bi)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, out) = self.binary(a, b, -T::one())?;
        Ok(self.push(out, Op::Sub(ai, bi)))
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xi, si) = (self.idx(x)?, self.idx(s)?);
        if self.val(si).len() != 1 {
            return Err(Error::Dimension(format!(
                "scale factor must have one element, got {:?}",
                self.val(si).shape()
            )));
        }
        let f = self.val(si).item();
        let out = self.val(xi).map(|v| v * f);
        Ok(self.push(out, Op::Scale { x: xi, s: si }))
    }

    /// Splits `x` into `s.len()` equal blocks and scales block `b` by `s[b]`.
    pub fn block_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xi, si) = (self.idx(x)?, self.idx(s)?);
        let (n, blocks) = (self.val(xi).len(), self.val(si).len());
        if blocks == 0 || n % blocks != 0 {
            return Err(Error::Dimension(format!(
                "cannot split {:?} into {blocks} blocks",
                self.val(xi).shape()
            )));
        }
        let block = n / blocks;
        let sv = self.val(si).data();
        let data = self.val(xi).data().iter().enumerate().map(|(i, &v)| v * sv[i / block]).collect();
        let out = Tensor::from_parts(self.val(xi).shape().to_vec(), data);
        Ok(self.push(out, Op::BlockScale { x: xi, s: si, block }))
    }

    pub fn scale_const(&mut self, x: Var, c: T) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.val(xi).map(|v| v * c);
        Ok(self.push(out, Op::ScaleConst { x: xi, c }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.val(xi).map(|v| v.max(T::zero()));
        Ok(self.push(out, Op::Relu(xi)))
    }

    /// Inverted dropout. `keep_prob >= 1` is the identity.
    pub fn dropout<R: Rng>(&mut self, x: Var, keep_prob: f32, rng: &mut R) -> Result<Var> {
        let xi = self.idx(x)?;
        if keep_prob >= 1.0 {
            return Ok(x);
        }
        if keep_prob <= 0.0 {
            return Err(Error::Argument(format!("keep probability {keep_prob} not in (0, 1]")));
        }
        let scale = T::of_f64(1.0 / keep_prob as f64);
        let mask: Vec<T> = (0..self.val(xi).len())
            .map(|_| if rng.gen::<f32>() < keep_prob { scale } else { T::zero() })
            .collect();
        let v = self.val(xi);
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        Ok(self.push(out, Op::Mask { x: xi, mask }))
    }

    /// Concatenates the flattened inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let mut data = Vec::new();
        for &i in &ids {
            data.extend_from_slice(self.val(i).data());
        }
        let n = data.len();
        Ok(self.push(Tensor::from_parts(vec![n], data), Op::Concat(ids)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.val(xi).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(xi)))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        self.reshape(x, &[n])
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (xi, ki) = (self.idx(x)?, self.idx(k)?);
        let out = kernels::conv2d(self.val(xi), self.val(ki), stride, padding)?;
        Ok(self.push(out, Op::Conv2d { x: xi, k: ki, stride, padding }))
    }

    /// Adds a per-channel bias to an `H×W×C` map.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xi, bi) = (self.idx(x)?, self.idx(b)?);
        let (xv, bv) = (self.val(xi), self.val(bi));
        xv.expect_rank(3)?;
        bv.expect_shape(&[xv.shape()[2]])?;
        let c = bv.len();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv.data()[i % c])
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(out, Op::ChannelBias { x: xi, b: bi }))
    }

    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = kernels::gap(self.val(xi))?;
        Ok(self.push(out, Op::Gap(xi)))
    }

    pub fn crop_and_resize(&mut self, x: Var, roi: &RoiBox, out_h: usize, out_w: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = kernels::crop_and_resize(self.val(xi), roi, out_h, out_w)?;
        Ok(self.push(out, Op::CropResize { x: xi, roi: *roi }))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let xi = self.idx(logits)?;
        let lv = self.val(xi);
        lv.expect_rank(1)?;
        let loss = kernels::softmax_cross_entropy(lv.data(), label)?;
        let probs = kernels::softmax(lv.data());
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCe { x: xi, label, probs }))
    }

    /// Euclidean norm of all elements.
    pub fn norm(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let n = self.val(xi).data().iter().map(|&v| v * v).sum::<T>().sqrt();
        Ok(self.push(Tensor::scalar(n), Op::Norm(xi)))
    }

    /// `exp(dp) / (exp(dp) + exp(dn))` for scalar distances.
    pub fn soft_triplet(&mut self, dp: Var, dn: Var) -> Result<Var> {
        let (pi, ni) = (self.idx(dp)?, self.idx(dn)?);
        if self.val(pi).len() != 1 || self.val(ni).len() != 1 {
            return Err(Error::Dimension("soft triplet expects scalar distances".into()));
        }
        let d = soft_plus_ratio(self.val(pi).item(), self.val(ni).item());
        Ok(self.push(Tensor::scalar(d), Op::SoftTriplet { dp: pi, dn: ni }))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.val(xi).map(|v| v * v);
        Ok(self.push(out, Op::Square(xi)))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.val(xi).sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(xi)))
    }

    /// `Σ wᵢ·xᵢ` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| Error::Usage("weighted sum of no terms".into()))?;
        let shape = self.value(first.0).shape().to_vec();
        let mut acc = Tensor::zeros(shape.clone());
        let mut ids = Vec::with_capacity(terms.len());
        for &(v, w) in terms {
            let i = self.idx(v)?;
            self.val(i).expect_shape(&shape)?;
            acc.axpy(w, self.val(i))?;
            ids.push((i, w));
        }
        Ok(self.push(acc, Op::WeightedSum(ids)))
    }

    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let weighted: Vec<_> = terms.iter().map(|&v| (v, T::one())).collect();
        self.weighted_sum(&weighted)
    }

    /// Sign pattern of every relu input on the tape, in execution order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                out.extend(self.val(x).data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    /// Gradients of a scalar loss with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self.idx(loss)?;
        if self.val(li).len() != 1 {
            return Err(Error::Usage(format!(
                "loss must be a scalar, got shape {:?}",
                self.val(li).shape()
            )));
        }
        self.backward_seeded(&[(loss, Tensor::full(self.val(li).shape().to_vec(), T::one()))])
    }

    /// Reverse pass starting from explicit output gradients.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor<T>)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            let i = self.idx(*v)?;
            g.expect_shape(self.val(i).shape())?;
            accumulate(&mut grads[i], g.clone());
            last = last.max(i);
        }

        for i in (0..=last).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let params = self
            .params
            .iter()
            .map(|(name, idx)| {
                let g = grads[*idx]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.val(*idx).shape().to_vec()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { tape: self.id, nodes: grads, params })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let zero = T::zero();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, rows, inner, cols } => {
                let (av, bv) = (self.val(a), self.val(b));
                let mut ga = vec![zero; rows * inner];
                T::gemm(rows, cols, inner, g.data(), false, bv.data(), true, zero, &mut ga);
                let mut gb = vec![zero; inner * cols];
                T::gemm(inner, rows, cols, av.data(), true, g.data(), false, zero, &mut gb);
                accumulate(&mut grads[a], Tensor::from_parts(av.shape().to_vec(), ga));
                accumulate(&mut grads[b], Tensor::from_parts(bv.shape().to_vec(), gb));
            }
            &Op::Add(a, b) => {
                accumulate(&mut grads[a], g.clone());
                accumulate(&mut grads[b], g.clone());
            }
            &Op::Sub(a, b) => {
                accumulate(&mut grads[a], g.clone());
                accumulate(&mut grads[b], g.map(|v| -v));
            }
            &Op::Scale { x, s } => {
                let f = self.val(s).item();
                accumulate(&mut grads[x], g.map(|v| v * f));
                let gs: T = g.data().iter().zip(self.val(x).data()).map(|(&a, &b)| a * b).sum();
                accumulate(&mut grads[s], Tensor::from_parts(self.val(s).shape().to_vec(), vec![gs]));
            }
            &Op::BlockScale { x, s, block } => {
                let (xv, sv) = (self.val(x), self.val(s));
                let gx = g.data().iter().enumerate().map(|(j, &gv)| gv * sv.data()[j / block]).collect();
                let mut gs = vec![zero; sv.len()];
                for (j, (&gv, &xv)) in g.data().iter().zip(xv.data()).enumerate() {
                    gs[j / block] = gs[j / block] + gv * xv;
                }
                accumulate(&mut grads[x], Tensor::from_parts(xv.shape().to_vec(), gx));
                accumulate(&mut grads[s], Tensor::from_parts(sv.shape().to_vec(), gs));
            }
            &Op::ScaleConst { x, c } => accumulate(&mut grads[x], g.map(|v| v * c)),
            &Op::Relu(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(self.val(x).data())
                    .map(|(&gv, &xv)| if xv > zero { gv } else { zero })
                    .collect();
                accumulate(&mut grads[x], Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::Mask { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                accumulate(&mut grads[*x], Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::Concat(ids) => {
                let mut offset = 0;
                for &p in ids {
                    let n = self.val(p).len();
                    let part = g.data()[offset..offset + n].to_vec();
                    accumulate(&mut grads[p], Tensor::from_parts(self.val(p).shape().to_vec(), part));
                    offset += n;
                }
            }
            &Op::Reshape(x) => {
                let reshaped = Tensor::from_parts(self.val(x).shape().to_vec(), g.data().to_vec());
                accumulate(&mut grads[x], reshaped);
            }
            &Op::Conv2d { x, k, stride, padding } => {
                let (gx, gk) =
                    kernels::conv2d_backward(self.val(x), self.val(k), stride, padding, g)?;
                accumulate(&mut grads[x], gx);
                accumulate(&mut grads[k], gk);
            }
            &Op::ChannelBias { x, b } => {
                let c = self.val(b).len();
                let mut gb = vec![zero; c];
                for (idx, &v) in g.data().iter().enumerate() {
                    gb[idx % c] = gb[idx % c] + v;
                }
                accumulate(&mut grads[x], g.clone());
                accumulate(&mut grads[b], Tensor::from_parts(vec![c], gb));
            }
            &Op::Gap(x) => {
                let shape = self.val(x).shape().to_vec();
                let k = shape[2];
                let data = (0..shape.iter().product()).map(|idx| g.data()[idx % k]).collect();
                accumulate(&mut grads[x], Tensor::from_parts(shape, data));
            }
            Op::CropResize { x, roi } => {
                let gx = kernels::crop_and_resize_backward(self.val(*x).shape(), roi, g);
                accumulate(&mut grads[*x], gx);
            }
            Op::SoftmaxCe { x, label, probs } => {
                let gl = g.item();
                let data = probs
                    .iter()
                    .enumerate()
                    .map(|(c, &p)| gl * if c == *label { p - T::one() } else { p })
                    .collect();
                accumulate(&mut grads[*x], Tensor::from_parts(vec![probs.len()], data));
            }
            &Op::Norm(x) => {
                let n = self.val(i).item();
                let gl = g.item();
                let gx = if n > zero {
                    self.val(x).map(|v| gl * v / n)
                } else {
                    Tensor::zeros(self.val(x).shape().to_vec())
                };
                accumulate(&mut grads[x], gx);
            }
            &Op::SoftTriplet { dp, dn } => {
                let s = self.val(i).item();
                let d = g.item() * s * (T::one() - s);
                accumulate(&mut grads[dp], Tensor::from_parts(self.val(dp).shape().to_vec(), vec![d]));
                accumulate(&mut grads[dn], Tensor::from_parts(self.val(dn).shape().to_vec(), vec![-d]));
            }
            &Op::Square(x) => {
                let two = T::of_f64(2.0);
                let data = g
                    .data()
                    .iter()
                    .zip(self.val(x).data())
                    .map(|(&gv, &xv)| two * xv * gv)
                    .collect();
                accumulate(&mut grads[x], Tensor::from_parts(g.shape().to_vec(), data));
            }
            &Op::Sum(x) => {
                let gl = g.item();
                accumulate(&mut grads[x], Tensor::full(self.val(x).shape().to_vec(), gl));
            }
            Op::WeightedSum(terms) => {
                for &(x, w) in terms {
                    accumulate(&mut grads[x], g.map(|v| v * w));
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        None => *slot = Some(g),
    }
}

/// `exp(a) / (exp(a) + exp(b))` without overflow.
pub fn soft_plus_ratio<T: Real>(a: T, b: T) -> T {
    T::one() / (T::one() + (b - a).exp())
}

/// Gradients produced by one reverse pass.
pub struct Gradients<T: Real = f32> {
    tape: u64,
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a registered parameter; zero when it did not reach the loss.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(String, Tensor<T>)> {
        self.params
    }

    /// Gradient of an arbitrary node, if any flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.nodes.get(v.idx).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param("x", &Tensor::scalar(1.0));
        let y = tape.square(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.param("x").unwrap().data(), &[2.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let _x = tape.param("x", &Tensor::scalar(3.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let g = tape.backward(c).unwrap();
        assert_eq!(g.param("x").unwrap().data(), &[0.0]);
    }

    #[test]
    fn loss_from_other_tape_is_rejected() {
        let mut a = Tape::<f32>::new();
        let b = Tape::<f32>::new();
        let v = a.constant(Tensor::scalar(1.0));
        assert!(matches!(b.backward(v), Err(Error::Usage(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let v = tape.constant(Tensor::zeros([3]));
        assert!(matches!(tape.backward(v), Err(Error::Usage(_))));
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param("x", &Tensor::scalar(2.0));
        let x2 = tape.param("x", &Tensor::scalar(99.0));
        assert_eq!(x, x2);
        let y = tape.add(x, x2).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.param("x").unwrap().data(), &[2.0]);
    }

    #[test]
    fn softmax_ce_gradient_is_p_minus_onehot() {
        let mut tape = Tape::<f64>::new();
        let l = tape.param("l", &Tensor::new([2], vec![0.0, 0.0]).unwrap());
        let loss = tape.softmax_cross_entropy(l, 0).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param("l").unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn soft_triplet_symmetric_is_half() {
        assert_eq!(soft_plus_ratio(1.25f32, 1.25), 0.5);
        assert_eq!(soft_plus_ratio(0.0f64, 0.0), 0.5);
    }

    #[test]
    fn dropout_keep_one_is_identity() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full([4], 1.0));
        let mut rng = rand::thread_rng();
        let y = tape.dropout(x, 1.0, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_scales_kept_units() {
        use rand::SeedableRng;
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full([1000], 1.0));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let y = tape.dropout(x, 0.5, &mut rng).unwrap();
        let v = tape.value(y);
        assert!(v.data().iter().all(|&e| e == 0.0 || e == 2.0));
        let kept = v.data().iter().filter(|&&e| e > 0.0).count();
        assert!((400..600).contains(&kept));
    }
}
