//! Pointwise arithmetic.
//!
//! Subgradient conventions: `abs` and `relu` use 0 at exactly 0, `sqrt`
//! uses 0 where its output is 0, and `clamp` passes gradient only strictly
//! inside its bounds.

use crate::element::Element;
use crate::error::{shape_err, Result, TensorError};
use crate::tensor::{Backward, Tensor};

/// Pointwise op selector for [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Square,
    Abs,
    Sqrt,
    Log,
    Exp,
    Relu,
    Sigmoid,
    AddScalar(f64),
    MulScalar(f64),
    Clamp { min: f64, max: f64 },
}

impl ElementwiseKind {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul | Self::Div)
    }

    fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Div => "div",
            Self::Neg => "neg",
            Self::Square => "square",
            Self::Abs => "abs",
            Self::Sqrt => "sqrt",
            Self::Log => "log",
            Self::Exp => "exp",
            Self::Relu => "relu",
            Self::Sigmoid => "sigmoid",
            Self::AddScalar(_) => "add_scalar",
            Self::MulScalar(_) => "mul_scalar",
            Self::Clamp { .. } => "clamp",
        }
    }
}

/// Applies `kind` to `a` (and `b` for binary kinds).
///
/// Binary kinds accept `b` with the same shape as `a`, or a single-element
/// `b` that is broadcast. The result always has `a`'s shape.
pub fn elementwise<T: Element>(kind: ElementwiseKind, a: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    if kind.is_binary() {
        let b = b.ok_or_else(|| TensorError::Contract(format!("{} needs a second operand", kind.name())))?;
        binary(kind, a, b)
    } else {
        if b.is_some() {
            return Err(TensorError::Contract(format!("{} takes a single operand", kind.name())));
        }
        unary(kind, a)
    }
}

struct UnaryOp {
    kind: ElementwiseKind,
}

fn unary<T: Element>(kind: ElementwiseKind, a: &Tensor<T>) -> Result<Tensor<T>> {
    let x = a.data();
    let f = |v: f64| T::from_f64(v);
    let out: Vec<T> = match kind {
        ElementwiseKind::Neg => x.iter().map(|&v| -v).collect(),
        ElementwiseKind::Square => x.iter().map(|&v| v * v).collect(),
        ElementwiseKind::Abs => x.iter().map(|&v| v.abs()).collect(),
        ElementwiseKind::Sqrt => {
            if let Some(v) = x.iter().find(|v| **v < T::zero()) {
                return Err(TensorError::Domain(format!("sqrt of negative value {v}")));
            }
            x.iter().map(|&v| v.sqrt()).collect()
        }
        ElementwiseKind::Log => {
            if let Some(v) = x.iter().find(|v| **v < T::zero()) {
                return Err(TensorError::Domain(format!("log of negative value {v}")));
            }
            x.iter().map(|&v| v.ln()).collect()
        }
        ElementwiseKind::Exp => x.iter().map(|&v| v.exp()).collect(),
        ElementwiseKind::Relu => x.iter().map(|&v| v.max(T::zero())).collect(),
        ElementwiseKind::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
        ElementwiseKind::AddScalar(s) => x.iter().map(|&v| v + f(s)).collect(),
        ElementwiseKind::MulScalar(s) => x.iter().map(|&v| v * f(s)).collect(),
        ElementwiseKind::Clamp { min, max } => {
            if min > max {
                return Err(TensorError::Contract(format!("clamp bounds {min} > {max}")));
            }
            x.iter().map(|&v| v.max(f(min)).min(f(max))).collect()
        }
        _ => unreachable!("binary kind routed to unary"),
    };
    drop(x);
    Tensor::from_op(out, a.shape().to_vec(), Box::new(UnaryOp { kind }), vec![a.clone()])
}

fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Element> Backward<T> for UnaryOp {
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn backward(&self, inputs: &[Tensor<T>], output: &[T], g: &[T], _needs: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
        let x = inputs[0].data();
        let two = T::from_f64(2.0);
        let zero = T::zero();
        let grad: Vec<T> = match self.kind {
            ElementwiseKind::Neg => g.iter().map(|&gi| -gi).collect(),
            ElementwiseKind::Square => g.iter().zip(x.iter()).map(|(&gi, &v)| gi * two * v).collect(),
            ElementwiseKind::Abs => g
                .iter()
                .zip(x.iter())
                .map(|(&gi, &v)| {
                    if v > zero {
                        gi
                    } else if v < zero {
                        -gi
                    } else {
                        zero
                    }
                })
                .collect(),
            ElementwiseKind::Sqrt => {
                g.iter().zip(output).map(|(&gi, &y)| if y > zero { gi / (two * y) } else { zero }).collect()
            }
            ElementwiseKind::Log => g.iter().zip(x.iter()).map(|(&gi, &v)| gi / v).collect(),
            ElementwiseKind::Exp => g.iter().zip(output).map(|(&gi, &y)| gi * y).collect(),
            ElementwiseKind::Relu => g.iter().zip(x.iter()).map(|(&gi, &v)| if v > zero { gi } else { zero }).collect(),
            ElementwiseKind::Sigmoid => g.iter().zip(output).map(|(&gi, &y)| gi * y * (T::one() - y)).collect(),
            ElementwiseKind::AddScalar(_) => g.to_vec(),
            ElementwiseKind::MulScalar(s) => g.iter().map(|&gi| gi * T::from_f64(s)).collect(),
            ElementwiseKind::Clamp { min, max } => {
                let (lo, hi) = (T::from_f64(min), T::from_f64(max));
                g.iter().zip(x.iter()).map(|(&gi, &v)| if v > lo && v < hi { gi } else { zero }).collect()
            }
            _ => unreachable!("binary kind in unary backward"),
        };
        Ok(vec![Some(grad)])
    }
}

struct BinaryOp {
    kind: ElementwiseKind,
    broadcast: bool,
}

fn binary<T: Element>(kind: ElementwiseKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let broadcast = if a.shape() == b.shape() {
        false
    } else if b.numel() == 1 {
        true
    } else {
        return shape_err(format!(
            "{}: shapes {:?} and {:?} differ and rhs is not a scalar",
            kind.name(),
            a.shape(),
            b.shape()
        ));
    };
    let out = {
        let x = a.data();
        let y = b.data();
        let rhs = |i: usize| if broadcast { y[0] } else { y[i] };
        if kind == ElementwiseKind::Div {
            if let Some(i) = (0..y.len()).find(|&i| y[i] == T::zero()) {
                return Err(TensorError::Domain(format!("division by zero at index {i}")));
            }
        }
        let op = |l: T, r: T| match kind {
            ElementwiseKind::Add => l + r,
            ElementwiseKind::Sub => l - r,
            ElementwiseKind::Mul => l * r,
            ElementwiseKind::Div => l / r,
            _ => unreachable!(),
        };
        x.iter().enumerate().map(|(i, &l)| op(l, rhs(i))).collect::<Vec<T>>()
    };
    Tensor::from_op(out, a.shape().to_vec(), Box::new(BinaryOp { kind, broadcast }), vec![a.clone(), b.clone()])
}

impl<T: Element> Backward<T> for BinaryOp {
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn backward(&self, inputs: &[Tensor<T>], _output: &[T], g: &[T], needs: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
        let x = inputs[0].data();
        let y = inputs[1].data();
        let rhs = |i: usize| if self.broadcast { y[0] } else { y[i] };

        let ga = needs[0].then(|| match self.kind {
            ElementwiseKind::Add | ElementwiseKind::Sub => g.to_vec(),
            ElementwiseKind::Mul => g.iter().enumerate().map(|(i, &gi)| gi * rhs(i)).collect(),
            ElementwiseKind::Div => g.iter().enumerate().map(|(i, &gi)| gi / rhs(i)).collect(),
            _ => unreachable!(),
        });

        let gb = needs[1].then(|| {
            let per_elem: Vec<T> = match self.kind {
                ElementwiseKind::Add => g.to_vec(),
                ElementwiseKind::Sub => g.iter().map(|&gi| -gi).collect(),
                ElementwiseKind::Mul => g.iter().zip(x.iter()).map(|(&gi, &l)| gi * l).collect(),
                ElementwiseKind::Div => g
                    .iter()
                    .zip(x.iter())
                    .enumerate()
                    .map(|(i, (&gi, &l))| {
                        let r = rhs(i);
                        -gi * l / (r * r)
                    })
                    .collect(),
                _ => unreachable!(),
            };
            if self.broadcast {
                vec![per_elem.into_iter().sum()]
            } else {
                per_elem
            }
        });
        Ok(vec![ga, gb])
    }
}

/// Method-style shorthands for [`elementwise`].
impl<T: Element> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(ElementwiseKind::Add, self, other)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(ElementwiseKind::Sub, self, other)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(ElementwiseKind::Mul, self, other)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(ElementwiseKind::Div, self, other)
    }

    pub fn neg(&self) -> Result<Tensor<T>> {
        unary(ElementwiseKind::Neg, self)
    }

    pub fn square(&self) -> Result<Tensor<T>> {
        unary(ElementwiseKind::Square, self)
    }

    pub fn abs(&self) -> Result<Tensor<T>> {
        unary(ElementwiseKind::Abs, self)
    }

    pub fn sqrt(&self) -> Result<Tensor<T>> {
        unary(ElementwiseKind::Sqrt, self)
    }

    pub fn log(&self) -> Result<Tensor<T>> {
        unary(ElementwiseKind::Log, self)
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        unary(ElementwiseKind::Exp, self)
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        unary(ElementwiseKind::Relu, self)
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        unary(ElementwiseKind::Sigmoid, self)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor<T>> {
        unary(ElementwiseKind::AddScalar(s), self)
    }

    pub fn mul_scalar(&self, s: f64) -> Result<Tensor<T>> {
        unary(ElementwiseKind::MulScalar(s), self)
    }

    pub fn clamp(&self, min: f64, max: f64) -> Result<Tensor<T>> {
        unary(ElementwiseKind::Clamp { min, max }, self)
    }
}
