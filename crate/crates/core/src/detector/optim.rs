use super::config::OptimConfig;
use super::params::ParamStore;
use crate::error::{Error, Result};

/// L2 norm over all gradient buffers.
pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// One SGD step with momentum and decoupled weight decay:
/// `v ← μ·v + g`, `p ← p − lr·(v + wd·p)`.
///
/// `grads` and `momentum` follow the store order of `params`.
pub fn sgd_step(
    params: &mut ParamStore,
    momentum: &mut ParamStore,
    grads: &[Vec<f64>],
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    if grads.len() != params.len() || momentum.len() != params.len() {
        return Err(Error::invalid("sgd_step", "gradient/momentum count differs from parameters"));
    }
    let clip = match cfg.grad_clip {
        Some(max) => {
            let norm = global_norm(grads);
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    for ((p, v), g) in params.tensors_mut().iter_mut().zip(momentum.tensors_mut().iter_mut()).zip(grads) {
        if g.len() != p.len() || v.len() != p.len() {
            return Err(Error::shape("sgd_step", "gradient length differs from parameter"));
        }
        for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut().iter_mut()).zip(g) {
            *vi = cfg.momentum * *vi + clip * gi;
            *pi -= lr * (*vi + cfg.weight_decay * *pi);
        }
    }
    Ok(())
}

/// Zero buffers shaped like `params`, under the same names.
pub fn zero_momentum(params: &ParamStore) -> ParamStore {
    let mut m = ParamStore::new();
    for (name, t) in params.iter() {
        m.insert(name, crate::tensor::Tensor::zeros(t.shape()));
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one(p: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(p));
        s
    }

    #[test]
    fn quadratic_step_without_momentum() {
        let cfg = OptimConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut p = one(2.0);
        let mut m = zero_momentum(&p);
        // loss p²/2 has gradient p
        sgd_step(&mut p, &mut m, &[vec![2.0]], 0.1, &cfg).unwrap();
        assert!((p.get("p").unwrap().data()[0] - 1.8).abs() < 1e-15);

        let decayed = OptimConfig {
            weight_decay: 0.5,
            ..cfg
        };
        let mut p = one(2.0);
        let mut m = zero_momentum(&p);
        sgd_step(&mut p, &mut m, &[vec![2.0]], 0.1, &decayed).unwrap();
        // 2 − 0.1·(2 + 0.5·2)
        assert!((p.get("p").unwrap().data()[0] - 1.7).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let cfg = OptimConfig {
            momentum: 0.9,
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut p = one(0.0);
        let mut m = zero_momentum(&p);
        sgd_step(&mut p, &mut m, &[vec![1.0]], 1.0, &cfg).unwrap();
        sgd_step(&mut p, &mut m, &[vec![1.0]], 1.0, &cfg).unwrap();
        assert!((p.get("p").unwrap().data()[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut p = one(1.25);
        let mut m = zero_momentum(&p);
        sgd_step(&mut p, &mut m, &[vec![7.0]], 0.0, &OptimConfig::default()).unwrap();
        assert_eq!(p.get("p").unwrap().data()[0], 1.25);
    }

    #[test]
    fn clipping_rescales_gradient() {
        let cfg = OptimConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            grad_clip: Some(1.0),
            ..OptimConfig::default()
        };
        let mut p = one(0.0);
        let mut m = zero_momentum(&p);
        sgd_step(&mut p, &mut m, &[vec![10.0]], 1.0, &cfg).unwrap();
        assert!((p.get("p").unwrap().data()[0] + 1.0).abs() < 1e-15);
    }
}
