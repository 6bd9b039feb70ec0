//! Hand-derived reverse passes for the fixed module/extractor topology, and a
//! central-difference oracle.
//!
//! For `p = softmax(z)` and a local loss
//! `alpha * KL(p || py) + (1 - alpha) * KL(p || t)`, write
//! `f_k = ln p_k - alpha ln py_k - (1 - alpha) ln t_k`. The logit gradient is
//! `p_k (f_k - sum_j p_j f_j)`, which vanishes exactly at the geometric
//! interpolation `p ∝ t^(1-alpha) py^alpha`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SidError};
use crate::math::{log_softmax_rows, Mat};
use crate::network::{
    ExtractorCache, ExtractorParams, ModuleCache, ModuleParams, ParamTensors, PipelineParams,
};

/// Per-module gradients plus the accumulated extractor gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    pub module_grads: Vec<ModuleParams>,
    pub extractor_grad: ExtractorParams,
    pub loss_values: Vec<f64>,
}

impl GradientSet {
    pub fn zeros_for(params: &PipelineParams) -> Self {
        GradientSet {
            module_grads: params.modules.iter().map(|m| m.zeros_like()).collect(),
            extractor_grad: params.extractor.zeros_like(),
            loss_values: vec![0.0; params.depth()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        crate::math::l2_norm(&self.flatten())
    }
}

// Same tensor order as `PipelineParams`, so gradients line up with parameters.
impl ParamTensors for GradientSet {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = self.extractor_grad.tensors();
        for m in &self.module_grads {
            out.extend(m.tensors());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.extractor_grad.tensors_mut();
        for m in &mut self.module_grads {
            out.extend(m.tensors_mut());
        }
        out
    }
}

fn check_same_shape(a: &Mat, b: &Mat, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(SidError::dim(format!(
            "{what}: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Batch-mean local loss and its gradient with respect to the logits.
/// `teacher` is a constant: nothing flows back into it.
pub fn local_loss_and_grad(
    logits: &Mat,
    teacher: &Mat,
    py: &Mat,
    alpha: f64,
) -> Result<(f64, Mat)> {
    check_same_shape(logits, teacher, "teacher beliefs")?;
    check_same_shape(logits, py, "target beliefs")?;
    let logp = log_softmax_rows(logits);
    let batch = logits.rows() as f64;
    let mut grad = Mat::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    let mut f = vec![0.0; logits.cols()];
    for i in 0..logits.rows() {
        let (lp, t, y) = (logp.row(i), teacher.row(i), py.row(i));
        let mut mean_f = 0.0;
        for k in 0..f.len() {
            f[k] = lp[k] - alpha * y[k].ln() - (1.0 - alpha) * t[k].ln();
            mean_f += lp[k].exp() * f[k];
        }
        // sum_k p_k f_k is exactly the per-sample loss
        total += mean_f;
        for (k, g) in grad.row_mut(i).iter_mut().enumerate() {
            *g = lp[k].exp() * (f[k] - mean_f) / batch;
        }
    }
    Ok((total / batch, grad))
}

/// `mean_b [alpha KL(p||py) + (1-alpha) KL(p||teacher)]` with `p = softmax(logits)`.
pub fn local_loss(logits: &Mat, teacher: &Mat, py: &Mat, alpha: f64) -> Result<f64> {
    Ok(local_loss_and_grad(logits, teacher, py, alpha)?.0)
}

/// Gradients of one module for a given upstream logit gradient.
#[derive(Clone, Debug)]
pub struct ModuleBackward {
    pub grads: ModuleParams,
    pub grad_z: Mat,
    /// Gradient reaching the incoming belief. Local training discards it.
    pub grad_input_belief: Mat,
}

pub(crate) fn require<'a, T>(cache: Option<&'a T>, what: &'static str) -> Result<&'a T> {
    cache.ok_or(SidError::MissingCache(what))
}

/// Reverse pass through `Linear -> ReLU -> Linear` given `dL/dlogits`.
pub fn module_backward_from_logit_grad(
    params: &ModuleParams,
    cache: &ModuleCache,
    dlogits: &Mat,
) -> Result<ModuleBackward> {
    check_same_shape(dlogits, &cache.logits, "logit gradient")?;
    let m = params.classes();
    let w2 = dlogits.t_matmul(&cache.hidden)?;
    let b2 = dlogits.sum_rows();
    let mut dh = dlogits.matmul(&params.w2)?;
    for (g, &pre) in dh
        .as_mut_slice()
        .iter_mut()
        .zip(cache.hidden_pre.as_slice())
    {
        if pre <= 0.0 {
            *g = 0.0;
        }
    }
    let w1 = dh.t_matmul(&cache.input)?;
    let b1 = dh.sum_rows();
    let dinput = dh.matmul(&params.w1)?;
    Ok(ModuleBackward {
        grads: ModuleParams { w1, b1, w2, b2 },
        grad_z: dinput.col_range(m, dinput.cols()),
        grad_input_belief: dinput.col_range(0, m),
    })
}

/// Exact gradients of the local loss for one module. Returns the loss too.
pub fn module_backward(
    params: &ModuleParams,
    cache: Option<&ModuleCache>,
    teacher: &Mat,
    py: &Mat,
    alpha: f64,
) -> Result<(ModuleBackward, f64)> {
    let cache = require(cache, "module")?;
    let (loss, dlogits) = local_loss_and_grad(&cache.logits, teacher, py, alpha)?;
    Ok((
        module_backward_from_logit_grad(params, cache, &dlogits)?,
        loss,
    ))
}

/// Reverse pass through the extractor MLP. Accumulating over modules is the caller's job.
pub fn extractor_backward(
    params: &ExtractorParams,
    cache: Option<&ExtractorCache>,
    grad_z: &Mat,
) -> Result<ExtractorParams> {
    let cache = require(cache, "extractor")?;
    if grad_z.rows() != cache.batch_size() || grad_z.cols() != params.feature_dim {
        return Err(SidError::dim(format!(
            "feature gradient has shape {:?}, expected ({}, {})",
            grad_z.shape(),
            cache.batch_size(),
            params.feature_dim
        )));
    }
    let mut grads = params.zeros_like();
    let mut delta = grad_z.clone();
    for l in (0..params.layers.len()).rev() {
        if l < params.layers.len() - 1 {
            for (g, &pre) in delta.as_mut_slice().iter_mut().zip(cache.pre[l].as_slice()) {
                if pre <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        grads.layers[l].weight = delta.t_matmul(&cache.inputs[l])?;
        grads.layers[l].bias = delta.sum_rows();
        if l > 0 {
            delta = delta.matmul(&params.layers[l].weight)?;
        }
    }
    Ok(grads)
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn finite_diff_grad<F>(mut loss_fn: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(SidError::param(format!(
            "finite-difference step {step} must be positive"
        )));
    }
    let mut x = params.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = loss_fn(&x);
        x[i] = orig - step;
        let down = loss_fn(&x);
        x[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Smallest gradient magnitude used as the denominator of a relative error.
pub const FD_SCALE_FLOOR: f64 = 1e-4;

/// Worst-case discrepancy between an analytic and a numerical gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub worst_relative: f64,
    pub worst_absolute: f64,
    pub coordinates: usize,
}

impl GradCheck {
    /// Relative error is `|a - n| / max(|a|, |n|, FD_SCALE_FLOOR)`, so
    /// near-zero coordinates are held to an absolute standard instead.
    pub fn compare(analytic: &[f64], numeric: &[f64]) -> Self {
        let mut out = GradCheck {
            coordinates: analytic.len(),
            ..Default::default()
        };
        for (&a, &n) in analytic.iter().zip(numeric) {
            let abs = (a - n).abs();
            out.worst_absolute = out.worst_absolute.max(abs);
            let scale = a.abs().max(n.abs()).max(FD_SCALE_FLOOR);
            out.worst_relative = out.worst_relative.max(abs / scale);
        }
        out
    }

    pub fn merge(self, other: GradCheck) -> Self {
        GradCheck {
            worst_relative: self.worst_relative.max(other.worst_relative),
            worst_absolute: self.worst_absolute.max(other.worst_absolute),
            coordinates: self.coordinates + other.coordinates,
        }
    }
}
