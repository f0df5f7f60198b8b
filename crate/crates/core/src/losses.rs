//! Training objectives: negative cosine similarity, the symmetrized
//! online/target alignment loss, cross-entropy and the λ-weighted sum used
//! for joint training.
//!
//! Each objective comes in two forms: a plain function on values, and a
//! graph builder that records the same computation for backpropagation.

use crate::autodiff::{log_softmax_parts, Graph, Var, NORM_EPS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `v / ‖v‖₂`, rejecting vectors with `‖v‖ ≤ 1e-12`.
pub fn l2_normalize<T: Scalar>(v: &Tensor<T>) -> Result<Tensor<T>> {
    let norm = v.norm();
    if !(norm > T::lit(NORM_EPS)) {
        return Err(Error::DegenerateVector {
            context: "l2_normalize",
            norm: norm.to_f64_lossy(),
        });
    }
    Ok(v.map(|x| x / norm))
}

/// `−⟨z/‖z‖, h/‖h‖⟩`, always in `[−1, 1]`.
pub fn neg_cosine<T: Scalar>(z: &[T], h: &[T]) -> Result<T> {
    if z.len() != h.len() {
        return Err(Error::Dimension {
            op: "neg_cosine",
            left: vec![z.len()],
            right: vec![h.len()],
        });
    }
    let zn = l2_normalize(&Tensor::vector(z.to_vec()))?;
    let hn = l2_normalize(&Tensor::vector(h.to_vec()))?;
    let dot: T = zn.data().iter().zip(hn.data()).map(|(&a, &b)| a * b).sum();
    // Rounding can push |dot| a hair past 1.
    Ok(-dot.max(-T::one()).min(T::one()))
}

/// Row-wise negative cosine similarity of two `[n×d]` nodes: `[n]`.
///
/// Gradient reaches `h` only if `h` itself requires gradient; pass a
/// stop-gradient node to confine it to `z`.
pub fn d_loss<T: Scalar>(g: &mut Graph<T>, z: Var, h: Var) -> Result<Var> {
    let cos = g.cosine_rows(z, h)?;
    Ok(g.scale(cos, -T::one()))
}

/// Per-pair `½·D(z₁, h₂) + ½·D(z̃₂, h̃₁)`, returned as an `[n]` node.
///
/// `z1`, `z2` are the online predictions for the two sides of each pair and
/// `h1`, `h2` the target projections.
pub fn byol_loss<T: Scalar>(g: &mut Graph<T>, z1: Var, h2: Var, z2: Var, h1: Var) -> Result<Var> {
    let a = d_loss(g, z1, h2)?;
    let b = d_loss(g, z2, h1)?;
    let sum = g.add(a, b)?;
    Ok(g.scale(sum, T::lit(0.5)))
}

/// `−(1/N) Σᵢ yᵢᵀ log ŷᵢ` for one-hot `y` and probability rows `ŷ`.
pub fn cross_entropy<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<T> {
    let (n, k) = y.dims2()?;
    if y_hat.shape() != y.shape() {
        return Err(Error::Dimension {
            op: "cross_entropy",
            left: y.shape().to_vec(),
            right: y_hat.shape().to_vec(),
        });
    }
    if n == 0 {
        return Err(Error::EmptyInput("cross_entropy"));
    }
    let tol = T::lit(1e-9);
    let mut total = T::zero();
    for (i, (yr, pr)) in y.rows().zip(y_hat.rows()).take(n).enumerate() {
        let ones = yr.iter().filter(|&&v| v == T::one()).count();
        let zeros = yr.iter().filter(|&&v| v.is_zero()).count();
        if ones != 1 || ones + zeros != k {
            return Err(Error::contract(format!("row {i} of y is not one-hot")));
        }
        let sum: T = pr.iter().copied().sum();
        if pr.iter().any(|&p| !(p >= T::zero())) || (sum - T::one()).abs() > tol {
            return Err(Error::contract(format!("row {i} of y_hat is not a probability distribution")));
        }
        let true_class = yr.iter().position(|&v| v == T::one()).expect("one-hot");
        total -= pr[true_class].ln();
    }
    Ok(total / T::lit(n as f64))
}

/// Cross-entropy from `[N×K]` logits and integer labels via log-sum-exp.
pub fn cross_entropy_logits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Dimension {
            op: "cross_entropy_logits",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if n == 0 {
        return Err(Error::EmptyInput("cross_entropy_logits"));
    }
    let mut total = T::zero();
    for (row, &y) in logits.rows().zip(labels) {
        if y >= k {
            return Err(Error::contract(format!("label {y} out of range for {k} classes")));
        }
        let (lse, _) = log_softmax_parts(row);
        total += lse - row[y];
    }
    Ok(total / T::lit(n as f64))
}

/// Graph form of [`cross_entropy_logits`].
pub fn cross_entropy_graph<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.softmax_cross_entropy(logits, labels)
}

/// `cls + λ·cont` on scalar values.
pub fn total_loss<T: Scalar>(cls: T, cont: T, lambda: T) -> Result<T> {
    check_lambda(lambda)?;
    Ok(cls + lambda * cont)
}

/// Graph form of [`total_loss`].
pub fn total_loss_graph<T: Scalar>(g: &mut Graph<T>, cls: Var, cont: Var, lambda: T) -> Result<Var> {
    check_lambda(lambda)?;
    let weighted = g.scale(cont, lambda);
    g.add(cls, weighted)
}

fn check_lambda<T: Scalar>(lambda: T) -> Result<()> {
    if !(lambda >= T::zero()) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(())
}
