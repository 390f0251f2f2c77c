use super::Tensor;
use crate::error::{Error, Result};

/// The fixed set of differentiable operations.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul,
    /// Elementwise sum; the smaller operand may be a trailing-shape suffix
    /// of the larger one and is then repeated over the leading axes.
    Add,
    /// Elementwise product with the same broadcast rule as `Add`.
    Mul,
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    /// Natural log; non-positive inputs are an error.
    Log,
    Square,
    /// Sum of all elements to a rank-0 scalar.
    Sum,
    /// Mean of all elements to a rank-0 scalar.
    Mean,
    /// Concatenation along the last axis.
    Concat,
    /// Columns `start..end` of the last axis.
    Slice { start: usize, end: usize },
    ScalarMul(f64),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Relu => "relu",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Square => "square",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Concat => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::ScalarMul(_) => "scalar_mul",
        }
    }

    pub(crate) fn arity(&self) -> Option<usize> {
        match self {
            Primitive::MatMul | Primitive::Add | Primitive::Mul => Some(2),
            Primitive::Concat => None,
            _ => Some(1),
        }
    }
}

/// Evaluates `kind` on detached inputs.
pub fn eval_primitive(kind: &Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    if let Some(n) = kind.arity() {
        if inputs.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} takes {n} inputs, got {}",
                kind.name(),
                inputs.len()
            )));
        }
    } else if inputs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} needs at least one input",
            kind.name()
        )));
    }
    match kind {
        Primitive::MatMul => matmul(inputs[0], inputs[1]),
        Primitive::Add => broadcast_binary("add", inputs[0], inputs[1], |a, b| a + b),
        Primitive::Mul => broadcast_binary("mul", inputs[0], inputs[1], |a, b| a * b),
        Primitive::Relu => Ok(inputs[0].map(|v| if v > 0.0 { v } else { 0.0 })),
        Primitive::Tanh => Ok(inputs[0].map(f64::tanh)),
        Primitive::Sigmoid => Ok(inputs[0].map(sigmoid)),
        Primitive::Exp => Ok(inputs[0].map(f64::exp)),
        Primitive::Log => {
            if let Some(&bad) = inputs[0].data().iter().find(|&&v| !(v > 0.0)) {
                return Err(Error::LogDomain {
                    op: "log",
                    value: bad,
                });
            }
            Ok(inputs[0].map(f64::ln))
        }
        Primitive::Square => Ok(inputs[0].map(|v| v * v)),
        Primitive::Sum => Ok(Tensor::scalar(inputs[0].data().iter().sum())),
        Primitive::Mean => {
            let t = inputs[0];
            Ok(Tensor::scalar(
                t.data().iter().sum::<f64>() / t.len() as f64,
            ))
        }
        Primitive::Concat => concat_last(inputs),
        Primitive::Slice { start, end } => slice_last(inputs[0], *start, *end),
        Primitive::ScalarMul(c) => Ok(inputs[0].map(|v| c * v)),
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Operand roles for a suffix broadcast: `(larger, smaller, swapped)`.
pub(crate) fn broadcast_roles<'a>(
    op: &'static str,
    a: &'a Tensor,
    b: &'a Tensor,
) -> Result<(&'a Tensor, &'a Tensor, bool)> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.ends_with(sb) {
        Ok((a, b, false))
    } else if sb.ends_with(sa) {
        Ok((b, a, true))
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: sa.to_vec(),
            right: sb.to_vec(),
        })
    }
}

fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let (big, small, swapped) = broadcast_roles(op, a, b)?;
    let s = small.data();
    let period = s.len();
    let data = big
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let y = s[i % period];
            if swapped {
                f(y, x)
            } else {
                f(x, y)
            }
        })
        .collect();
    Tensor::new(big.shape().to_vec(), data)
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        Strided::row_major(a.data(), k),
        Strided::row_major(b.data(), n),
        &mut out,
        false,
    );
    Tensor::new(vec![m, n], out)
}

/// Read-only matrix view with explicit row and column strides.
#[derive(Clone, Copy)]
pub(crate) struct Strided<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> Strided<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Strided {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major `[rows, cols]` buffer.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Strided {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn max_offset(&self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `c (+)= a * b` with `a: [m, k]`, `b: [k, n]` and row-major `c: [m, n]`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: Strided<'_>,
    b: Strided<'_>,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(m > 0 && k > 0 && n > 0);
    assert!(a.max_offset(m, k) < a.data.len());
    assert!(b.max_offset(k, n) < b.data.len());
    assert_eq!(c.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above keep every strided access of `a`, `b` and `c`
    // inside its slice, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn concat_last(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs[0];
    let lead = &first.shape()[..first.rank().saturating_sub(1)];
    for t in &inputs[1..] {
        if t.rank() != first.rank() || &t.shape()[..t.rank().saturating_sub(1)] != lead {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: first.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
    }
    let rows: usize = lead.iter().product();
    let total: usize = inputs.iter().map(|t| t.cols()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for t in inputs {
            let c = t.cols();
            data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Tensor::new(shape, data)
}

fn slice_last(t: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let c = t.cols();
    if t.rank() == 0 || start >= end || end > c {
        return Err(Error::InvalidArgument(format!(
            "slice {start}..{end} out of range for shape {:?}",
            t.shape()
        )));
    }
    let rows = t.len() / c;
    let mut data = Vec::with_capacity(rows * (end - start));
    for r in 0..rows {
        data.extend_from_slice(&t.data()[r * c + start..r * c + end]);
    }
    let mut shape = t.shape().to_vec();
    *shape.last_mut().unwrap() = end - start;
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_by_hand() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[1.0, 1.0]);
        let c = eval_primitive(&Primitive::MatMul, &[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn relu_and_sigmoid() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        let y = eval_primitive(&Primitive::Relu, &[&x]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let z = eval_primitive(&Primitive::Sigmoid, &[&t(&[1], &[0.0])]).unwrap();
        assert_eq!(z.data(), &[0.5]);
    }

    #[test]
    fn add_broadcasts_over_leading_axis() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3], &[10.0, 20.0, 30.0]);
        let c = eval_primitive(&Primitive::Add, &[&a, &b]).unwrap();
        assert_eq!(c.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let d = eval_primitive(&Primitive::Add, &[&b, &a]).unwrap();
        assert_eq!(c, d);
        let s = eval_primitive(&Primitive::Add, &[&a, &Tensor::scalar(1.0)]).unwrap();
        assert_eq!(s.data()[5], 7.0);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2], &[0.0; 2]);
        let err = eval_primitive(&Primitive::Add, &[&a, &b]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
        let err = eval_primitive(&Primitive::MatMul, &[&a, &a]).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn log_rejects_non_positive() {
        let x = t(&[2], &[1.0, 0.0]);
        assert!(matches!(
            eval_primitive(&Primitive::Log, &[&x]),
            Err(Error::LogDomain { .. })
        ));
        let x = t(&[1], &[-2.0]);
        assert!(eval_primitive(&Primitive::Log, &[&x]).is_err());
    }

    #[test]
    fn concat_and_slice() {
        let a = t(&[2, 1], &[1.0, 2.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let c = eval_primitive(&Primitive::Concat, &[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = eval_primitive(&Primitive::Slice { start: 1, end: 3 }, &[&c]).unwrap();
        assert_eq!(s, b);
        assert!(eval_primitive(&Primitive::Slice { start: 2, end: 4 }, &[&c]).is_err());
    }

    #[test]
    fn reductions_are_rank_zero() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let s = eval_primitive(&Primitive::Sum, &[&x]).unwrap();
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item().unwrap(), 10.0);
        let m = eval_primitive(&Primitive::Mean, &[&x]).unwrap();
        assert_eq!(m.item().unwrap(), 2.5);
    }

    #[test]
    fn eval_is_bitwise_pure() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[17, 33], &mut rng);
        let b = Tensor::randn(&[33, 9], &mut rng);
        let c1 = eval_primitive(&Primitive::MatMul, &[&a, &b]).unwrap();
        let c2 = eval_primitive(&Primitive::MatMul, &[&a, &b]).unwrap();
        assert!(c1.data().iter().zip(c2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
