//! Dense real arrays, reverse-mode differentiation and a finite-difference
//! gradient checker.
//!
//! All math runs in `f64`. [`Tensor`] is the plain value type; [`Tape`]
//! records operations over tensors and replays them backward.

mod gradcheck;
pub mod kernels;
mod tape;

use thiserror::Error;

pub use gradcheck::{grad_check, GradCheckReport};
pub use kernels::AttnMask;
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;

/// Dense row-major array. The last axis is treated as the column axis by
/// every row-wise operation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(NumericsError::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("zeros: valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).expect("scalar shape")
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Product of all but the last axis.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn shape2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// Standard matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(NumericsError::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k) = shape2(a);
    let n = b.shape[1];
    Tensor::matrix(m, n, kernels::matmul(&a.data, &b.data, m, k, n))
}

/// Softmax over the last axis with max subtraction.
pub fn softmax(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut data = x.data.clone();
    for row in data.chunks_mut(c) {
        kernels::softmax_in_place(row);
    }
    Tensor::new(x.shape.clone(), data).expect("same shape")
}

pub fn log_softmax(x: &Tensor) -> Tensor {
    let c = x.cols();
    let data = x.data.chunks(c).flat_map(kernels::log_softmax).collect();
    Tensor::new(x.shape.clone(), data).expect("same shape")
}

/// `-log_softmax(logits)[target]` for a single row of logits.
pub fn cross_entropy(logits: &Tensor, target: usize) -> Result<f64> {
    let v = logits.len();
    if target >= v {
        return Err(NumericsError::Index {
            op: "cross_entropy",
            index: target,
            extent: v,
        });
    }
    Ok(kernels::log_sum_exp(&logits.data) - logits.data[target])
}

/// `KL(teacher ‖ softmax(student_logits))` for one row.
pub fn kl_divergence(student_logits: &Tensor, teacher_probs: &Tensor) -> Result<f64> {
    if student_logits.len() != teacher_probs.len() {
        return Err(NumericsError::Shape {
            op: "kl_divergence",
            lhs: student_logits.shape.clone(),
            rhs: teacher_probs.shape.clone(),
        });
    }
    let lse = kernels::log_sum_exp(&student_logits.data);
    Ok(teacher_probs
        .data
        .iter()
        .zip(&student_logits.data)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, s)| t * (t.ln() - (s - lse)))
        .sum())
}

/// Checks that `p` is a probability vector within `tol`.
pub fn check_distribution(p: &[f64], tol: f64) -> Result<()> {
    if p.is_empty() {
        return Err(NumericsError::Contract("empty distribution".into()));
    }
    if let Some(bad) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(NumericsError::Contract(format!(
            "distribution has invalid entry {bad}"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(NumericsError::Contract(format!(
            "distribution sums to {sum}, not 1"
        )));
    }
    Ok(())
}

/// Shannon entropy in nats, with `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_distribution(p, 1e-6)?;
    Ok(-p
        .iter()
        .filter(|v| **v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>())
}
