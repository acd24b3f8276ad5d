//! Batch losses with their gradients.
//!
//! Each function returns the batch-mean loss and the gradient of that mean with respect to its
//! first argument.

use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, Real, Tensor};

fn check_rows<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<()> {
    if logits.shape().len() != 2 || logits.dim(0) != targets.len() {
        return Err(Error::Input(format!(
            "{} targets for logits of shape {:?}",
            targets.len(),
            logits.shape()
        )));
    }
    let k = logits.dim(1);
    if let Some(&t) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::Input(format!("target {t} outside [0, {k})")));
    }
    if !logits.all_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(())
}

/// Mean cross-entropy of `softmax(logits)` against `targets`.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<(f64, Tensor<T>)> {
    check_rows(logits, targets)?;
    let b = targets.len();
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    let inv = T::from_f64(1.0 / b as f64);
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.item(i);
        let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v)).as_f64();
        let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        loss += lse - row[t].as_f64();
        let g = grad.item_mut(i);
        g[t] = g[t] - T::one();
        g.iter_mut().for_each(|v| *v = *v * inv);
    }
    Ok((loss / b as f64, grad))
}

/// Negative target logit, averaged over the batch.
pub fn logit_loss<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<(f64, Tensor<T>)> {
    check_rows(logits, targets)?;
    let b = targets.len();
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        loss -= logits.item(i)[t].as_f64();
        grad.item_mut(i)[t] = T::from_f64(-1.0 / b as f64);
    }
    Ok((loss / b as f64, grad))
}

/// Mean squared Euclidean distance between matching rows.
pub fn embedding_distance<T: Real>(embeddings: &Tensor<T>, references: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if embeddings.shape() != references.shape() || embeddings.shape().len() != 2 {
        return Err(Error::Input(format!(
            "embedding shapes differ: {:?} vs {:?}",
            embeddings.shape(),
            references.shape()
        )));
    }
    let b = embeddings.dim(0).max(1) as f64;
    let diff = embeddings.zip_map(references, |a, r| a - r);
    let loss = diff.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / b;
    let grad = diff.map(|v| v * T::from_f64(2.0 / b));
    Ok((loss, grad))
}

/// Squared distance per row pair.
pub fn squared_distances<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Vec<f64> {
    (0..a.dim(0))
        .map(|i| {
            a.item(i)
                .iter()
                .zip(b.item(i))
                .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::<f64>::zeros(&[1, 10]);
        let (l, _) = cross_entropy(&uniform, &[3]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        let x = Tensor::from_vec(&[1, 3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let (l, g) = cross_entropy(&x, &[0]).unwrap();
        assert!((l - 2.4076059644443806).abs() < 1e-12);
        assert!(g.sum().abs() < 1e-12);
        let peaked = Tensor::from_vec(&[1, 2], vec![1e4f64, 0.0]).unwrap();
        assert!(cross_entropy(&peaked, &[0]).unwrap().0 < 1e-12);
        assert!(cross_entropy(&x, &[3]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_differences() {
        let x = Tensor::from_vec(&[2, 3], vec![0.3f64, -1.0, 2.0, 0.5, 0.1, -0.4]).unwrap();
        let t = [2, 0];
        let (_, g) = cross_entropy(&x, &t).unwrap();
        for i in 0..6 {
            let mut p = x.clone();
            p.data_mut()[i] += 1e-6;
            let mut m = x.clone();
            m.data_mut()[i] -= 1e-6;
            let fd = (cross_entropy(&p, &t).unwrap().0 - cross_entropy(&m, &t).unwrap().0) / 2e-6;
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn logit_and_distance_examples() {
        let x = Tensor::from_vec(&[1, 3], vec![0.0f64, 5.0, 1.0]).unwrap();
        let (l, g) = logit_loss(&x, &[1]).unwrap();
        assert_eq!(l, -5.0);
        assert_eq!(g.data(), &[0.0, -1.0, 0.0]);
        let e = Tensor::from_vec(&[1, 2], vec![1.0f64, 0.0]).unwrap();
        let r = Tensor::from_vec(&[1, 2], vec![0.0f64, 1.0]).unwrap();
        assert_eq!(embedding_distance(&e, &r).unwrap().0, 2.0);
        assert_eq!(embedding_distance(&e, &e).unwrap().0, 0.0);
        let s = 3.0;
        let (es, rs) = (e.map(|v| v * s), r.map(|v| v * s));
        assert!((embedding_distance(&es, &rs).unwrap().0 - 2.0 * s * s).abs() < 1e-12);
        assert!(embedding_distance(&e, &Tensor::zeros(&[1, 3])).is_err());
    }
}
