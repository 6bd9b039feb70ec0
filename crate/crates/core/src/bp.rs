//! End-to-end backpropagation over the same belief pipeline.

use std::time::Instant;

use crate::data::Dataset;
use crate::error::{Result, SidError};
use crate::grad::{extractor_backward, module_backward_from_logit_grad, GradientSet};
use crate::math::{log_softmax_rows, softmax_rows, Mat};
use crate::memory::CacheMeter;
use crate::network::{
    extractor_forward, init_pipeline, module_forward, uniform_beliefs, ParamTensors, PipelineParams,
};
use crate::optim::{adam_step, OptimizerState};
use crate::report::{EpochMetrics, PhaseTiming, TrainConfig, TrainReport};
use crate::sid::finish_report;
use crate::train::{accuracy, check_datasets, millis, Batch, BatchPlan};

/// One forward/backward pass with its bookkeeping.
#[derive(Clone, Debug)]
pub struct BpPass {
    pub loss: f64,
    pub grads: GradientSet,
    /// Peak simultaneously-live cache bytes.
    pub peak_cache_bytes: usize,
    pub extractor_cache_bytes: usize,
    /// Module indices (1-based) in the order their backward ran, with
    /// start/end instants.
    pub backward_trace: Vec<(usize, Instant, Instant)>,
    pub forward_ms: f64,
    pub backward_ms: f64,
}

/// Mean cross-entropy `-sum_k t_k ln p_k` of the final belief against `targets`.
pub fn cross_entropy(logits: &Mat, targets: &Mat) -> Result<f64> {
    if logits.shape() != targets.shape() {
        return Err(SidError::dim(format!(
            "logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    let logp = log_softmax_rows(logits);
    let total: f64 = logp
        .as_slice()
        .iter()
        .zip(targets.as_slice())
        .map(|(lp, t)| -t * lp)
        .sum();
    Ok(total / logits.rows() as f64)
}

/// Loss and exact gradients of the global cross-entropy, through every
/// belief and feature path.
pub fn bp_forward_backward(batch: &Batch, params: &PipelineParams) -> Result<(f64, GradientSet)> {
    let pass = bp_pass(batch, params)?;
    Ok((pass.loss, pass.grads))
}

pub fn bp_pass(batch: &Batch, params: &PipelineParams) -> Result<BpPass> {
    let depth = params.depth();
    let mut meter = CacheMeter::new();
    let t0 = Instant::now();
    let (z, ext_cache) = extractor_forward(&batch.x, &params.extractor, true)?;
    let ext_cache = ext_cache.expect("cache requested");
    let extractor_cache_bytes = ext_cache.bytes();
    meter.alloc(extractor_cache_bytes);

    // beliefs[i] is p_i; caches[i] belongs to module i + 1
    let mut beliefs = vec![uniform_beliefs(batch.len(), params.m)];
    let mut caches = Vec::with_capacity(depth);
    for (i, module) in params.modules.iter().enumerate() {
        let (logits, cache) = module_forward(&beliefs[i], &z, module, true)?;
        let mut cache = cache.expect("cache requested");
        cache.owner = i + 1;
        meter.alloc(cache.bytes());
        beliefs.push(softmax_rows(&logits));
        caches.push(Some(cache));
    }
    let last_logits = &caches[depth - 1].as_ref().unwrap().logits;
    let loss = cross_entropy(last_logits, &batch.targets)?;
    let t1 = Instant::now();

    let n = batch.len() as f64;
    let mut dlogits = beliefs[depth].clone();
    for (g, t) in dlogits
        .as_mut_slice()
        .iter_mut()
        .zip(batch.targets.as_slice())
    {
        *g = (*g - t) / n;
    }
    let mut grads = GradientSet::zeros_for(params);
    grads.loss_values[depth - 1] = loss;
    let mut grad_z = Mat::zeros(z.rows(), z.cols());
    let mut backward_trace = Vec::with_capacity(depth);
    for i in (0..depth).rev() {
        let start = Instant::now();
        let cache = caches[i].take().expect("each cache consumed once");
        let back = module_backward_from_logit_grad(&params.modules[i], &cache, &dlogits)?;
        meter.free(cache.bytes());
        drop(cache);
        grads.module_grads[i] = back.grads;
        grad_z.add_assign(&back.grad_z);
        if i > 0 {
            // softmax Jacobian: dL/dlogit = p * (g - <p, g>)
            let p = &beliefs[i];
            let g = &back.grad_input_belief;
            dlogits = Mat::zeros(p.rows(), p.cols());
            for r in 0..p.rows() {
                let (pr, gr) = (p.row(r), g.row(r));
                let inner: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for (k, d) in dlogits.row_mut(r).iter_mut().enumerate() {
                    *d = pr[k] * (gr[k] - inner);
                }
            }
        }
        backward_trace.push((i + 1, start, Instant::now()));
    }
    grads.extractor_grad = extractor_backward(&params.extractor, Some(&ext_cache), &grad_z)?;
    meter.free(extractor_cache_bytes);
    let t2 = Instant::now();

    Ok(BpPass {
        loss,
        grads,
        peak_cache_bytes: meter.peak(),
        extractor_cache_bytes,
        backward_trace,
        forward_ms: millis(t1 - t0),
        backward_ms: millis(t2 - t1),
    })
}

/// Trains the same pipeline end to end with the same optimizer, schedule
/// and batch order as [`crate::sid::train_sid`].
pub fn train_bp(
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<(TrainReport, PipelineParams)> {
    check_datasets(train, test, cfg)?;
    let mut plan = BatchPlan::new(train.len(), cfg.batch_size, cfg.seed);
    let total = (cfg.epochs * plan.steps_per_epoch()) as u64;
    let mut params = init_pipeline(cfg.seed, &cfg.dims(train.dim(), train.m))?;
    params.alpha = cfg.alpha;
    let mut opt = OptimizerState::new(params.num_params(), cfg.lr, total);

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut timing = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let (mut loss_sum, mut fwd, mut bwd) = (0.0, 0.0, 0.0);
        for idx in plan.next_epoch() {
            let batch = Batch::from_dataset(train, &idx, cfg.label_smoothing)?;
            let pass = bp_pass(&batch, &params)?;
            adam_step(&mut params, &pass.grads, &mut opt)?;
            loss_sum += pass.loss * idx.len() as f64;
            fwd += pass.forward_ms;
            bwd += pass.backward_ms;
        }
        epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            test_acc: accuracy(&params, test)?,
        });
        timing.push(PhaseTiming {
            epoch,
            phase1_ms: fwd,
            phase2_ms: bwd,
        });
    }
    let report = finish_report("bp", cfg, &params, test, epochs, timing)?;
    Ok((report, params))
}
