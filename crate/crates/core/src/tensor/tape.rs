use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use super::params::{Gradients, ParamStore};
use super::primitive::{broadcast_roles, eval_primitive, gemm, Primitive, Strided};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node {
    op: Option<Primitive>,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// Define-by-run record of a forward computation.
///
/// Nodes are appended in evaluation order, so inputs always precede their
/// consumers and a single reverse sweep visits every node once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, usize>,
    param_order: Vec<String>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Option<Primitive>, inputs: Vec<usize>, value: Tensor, rg: bool) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(None, Vec::new(), value, false)
    }

    /// Attaches the named trainable parameter; repeated calls return the
    /// same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&idx) = self.params.get(name) {
            return Ok(Var(idx));
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?
            .clone();
        let v = self.push(None, Vec::new(), value, true);
        self.params.insert(name.to_string(), v.0);
        self.param_order.push(name.to_string());
        Ok(v)
    }

    /// Attaches a parameter as a constant (inference without gradients).
    pub fn frozen_param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?
            .clone();
        Ok(self.constant(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn apply(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = eval_primitive(&op, &values)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let idx = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(Some(op), idx, out, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Square, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[x])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::Concat, parts)
    }

    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(Primitive::Slice { start, end }, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::ScalarMul(c), &[x])
    }

    /// `x + c` for a scalar constant `c`.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let k = self.constant(Tensor::scalar(c));
        self.add(x, k)
    }

    /// Per-row sums of a `[rows, cols]` value, as `[rows, 1]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        let ones = self.constant(Tensor::full(&[cols, 1], 1.0));
        self.matmul(x, ones)
    }

    /// Digest of the sign pattern of every relu input on the tape.
    ///
    /// Two evaluations with equal digests took the same branch at every relu,
    /// so the function is smooth between them.
    pub fn relu_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            if node.op == Some(Primitive::Relu) {
                for &v in self.nodes[node.inputs[0]].value.data() {
                    (v > 0.0).hash(&mut h);
                }
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns one gradient per entry of `store`, in store order; parameters
    /// never attached to this tape get zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else { continue };
            let input_grads = self.local_grads(op, node, &upstream)?;
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                if let Some(g) = g {
                    accumulate(&mut grads[input], g);
                }
            }
        }

        let mut out = Gradients::default();
        for (name, value) in store.iter() {
            let g = self
                .params
                .get(name)
                .and_then(|&i| grads.get(i).cloned().flatten())
                .unwrap_or_else(|| Tensor::zeros(value.shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    /// Vector-Jacobian products for each input of `node`.
    fn local_grads(&self, op: &Primitive, node: &Node, up: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let input = |i: usize| &self.nodes[node.inputs[i]];
        let wants = |i: usize| input(i).requires_grad;
        let x = &input(0).value;
        let y = &node.value;
        let zip = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            let data = a.data().iter().zip(up.data()).map(|(&p, &g)| f(p, g)).collect();
            Tensor::new(a.shape().to_vec(), data).expect("same shape")
        };

        Ok(match op {
            Primitive::MatMul => {
                let b = &input(1).value;
                let (m, k, n) = (x.shape()[0], x.shape()[1], b.shape()[1]);
                let da = wants(0).then(|| {
                    let mut out = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        Strided::row_major(up.data(), n),
                        Strided::transposed(b.data(), n),
                        &mut out,
                        false,
                    );
                    Tensor::new(vec![m, k], out).expect("shape")
                });
                let db = wants(1).then(|| {
                    let mut out = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        Strided::transposed(x.data(), k),
                        Strided::row_major(up.data(), n),
                        &mut out,
                        false,
                    );
                    Tensor::new(vec![k, n], out).expect("shape")
                });
                vec![da, db]
            }
            Primitive::Add | Primitive::Mul => {
                let b = &input(1).value;
                let (big, small, swapped) = broadcast_roles(op.name(), x, b)?;
                let period = small.len();
                let is_mul = matches!(op, Primitive::Mul);
                let d_big = if is_mul {
                    let s = small.data();
                    let data = up
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &g)| g * s[i % period])
                        .collect();
                    Tensor::new(big.shape().to_vec(), data)?
                } else {
                    up.clone()
                };
                let mut acc = vec![0.0; period];
                for (i, &g) in up.data().iter().enumerate() {
                    acc[i % period] += if is_mul { g * big.data()[i] } else { g };
                }
                let d_small = Tensor::new(small.shape().to_vec(), acc)?;
                let (da, db) = if swapped { (d_small, d_big) } else { (d_big, d_small) };
                vec![wants(0).then_some(da), wants(1).then_some(db)]
            }
            Primitive::Relu => vec![Some(zip(x, &|v, g| if v > 0.0 { g } else { 0.0 }))],
            Primitive::Tanh => vec![Some(zip(y, &|t, g| g * (1.0 - t * t)))],
            Primitive::Sigmoid => vec![Some(zip(y, &|s, g| g * s * (1.0 - s)))],
            Primitive::Exp => vec![Some(zip(y, &|e, g| g * e))],
            Primitive::Log => vec![Some(zip(x, &|v, g| g / v))],
            Primitive::Square => vec![Some(zip(x, &|v, g| 2.0 * v * g))],
            Primitive::Sum => vec![Some(Tensor::full(x.shape(), up.data()[0]))],
            Primitive::Mean => {
                let n = x.len() as f64;
                vec![Some(Tensor::full(x.shape(), up.data()[0] / n))]
            }
            Primitive::Concat => {
                let total = up.cols();
                let rows = up.len() / total;
                let mut offset = 0;
                let mut out = Vec::with_capacity(node.inputs.len());
                for i in 0..node.inputs.len() {
                    let part = &input(i).value;
                    let c = part.cols();
                    if wants(i) {
                        let mut data = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            let base = r * total + offset;
                            data.extend_from_slice(&up.data()[base..base + c]);
                        }
                        out.push(Some(Tensor::new(part.shape().to_vec(), data)?));
                    } else {
                        out.push(None);
                    }
                    offset += c;
                }
                out
            }
            Primitive::Slice { start, end } => {
                let c = x.cols();
                let w = end - start;
                let mut g = Tensor::zeros(x.shape());
                let rows = x.len() / c;
                let gd = g.data_mut();
                for r in 0..rows {
                    gd[r * c + start..r * c + end].copy_from_slice(&up.data()[r * w..(r + 1) * w]);
                }
                vec![Some(g)]
            }
            Primitive::ScalarMul(c) => vec![Some(up.map(|g| c * g))],
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, t).unwrap();
        s
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let store = store_with("w", Tensor::vector(vec![3.0]).unwrap());
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let sq = tape.square(w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss, &store).unwrap();
        assert_eq!(g["w"].data(), &[6.0]);
    }

    #[test]
    fn grad_of_sigmoid_at_zero() {
        let store = store_with("w", Tensor::vector(vec![0.0]).unwrap());
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let s = tape.sigmoid(w).unwrap();
        let loss = tape.sum(s).unwrap();
        let g = tape.backward(loss, &store).unwrap();
        assert_eq!(g["w"].data(), &[0.25]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let store = store_with("w", Tensor::vector(vec![1.0, 2.0]).unwrap());
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        assert!(matches!(
            tape.backward(w, &store),
            Err(Error::NonScalarLoss(_))
        ));
    }

    #[test]
    fn unreachable_params_get_zeros() {
        let mut store = store_with("a", Tensor::vector(vec![2.0]).unwrap());
        store.insert("b", Tensor::zeros(&[2, 3])).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, "a").unwrap();
        let loss = tape.sum(a).unwrap();
        let g = tape.backward(loss, &store).unwrap();
        assert_eq!(g["b"], Tensor::zeros(&[2, 3]));
        assert_eq!(g.keys().collect::<Vec<_>>(), vec!["a", "b"]);
    }

    #[test]
    fn relu_kink_has_zero_derivative() {
        let store = store_with("w", Tensor::vector(vec![0.0, 1.0]).unwrap());
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let r = tape.relu(w).unwrap();
        let loss = tape.sum(r).unwrap();
        let g = tape.backward(loss, &store).unwrap();
        assert_eq!(g["w"].data(), &[0.0, 1.0]);
    }

    #[test]
    fn shared_param_accumulates() {
        let store = store_with("w", Tensor::vector(vec![2.0]).unwrap());
        let mut tape = Tape::new();
        let w1 = tape.param(&store, "w").unwrap();
        let w2 = tape.param(&store, "w").unwrap();
        assert_eq!(w1, w2);
        let p = tape.mul(w1, w2).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss, &store).unwrap();
        assert_eq!(g["w"].data(), &[4.0]);
    }
}
