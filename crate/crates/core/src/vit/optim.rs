use super::params::ViTParams;
use super::tensor::Real;

/// Plain SGD with momentum and L2 weight decay, matching the common
/// `torch.optim.SGD` update (no dampening, no Nesterov):
///
/// ```text
/// g   <- grad + weight_decay * param
/// buf <- momentum * buf + g
/// p   <- p - lr * buf
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }
}

/// Momentum buffers, allocated lazily on the first step.
#[derive(Debug, Clone)]
pub struct SgdState<T> {
    pub momentum: Option<ViTParams<T>>,
}

impl<T> SgdState<T> {
    pub fn new() -> Self {
        Self { momentum: None }
    }
}

impl<T> Default for SgdState<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub fn sgd_step<T: Real>(
    params: &mut ViTParams<T>,
    grads: &ViTParams<T>,
    opt: &SgdConfig,
    state: &mut SgdState<T>,
) {
    let lr = T::of(opt.lr);
    let mu = T::of(opt.momentum);
    let wd = T::of(opt.weight_decay);
    let bufs = state.momentum.get_or_insert_with(|| params.zeros_like());
    let grads = grads.tensors();
    for ((p, g), b) in params
        .tensors_mut()
        .into_iter()
        .zip(grads)
        .zip(bufs.tensors_mut())
    {
        for ((p, &g), b) in p.iter_mut().zip(g.data).zip(b.iter_mut()) {
            let d = g + wd * *p;
            *b = mu * *b + d;
            *p -= lr * *b;
        }
    }
}
