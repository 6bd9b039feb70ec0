//! Randomized comparison of analytic gradients against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bp::bp_pass;
use crate::error::{Result, SidError};
use crate::grad::{
    extractor_backward, finite_diff_grad, local_loss, module_backward, GradCheck, FD_STEP,
};
use crate::math::Mat;
use crate::network::{
    extractor_forward, init_pipeline, module_forward, ExtractorParams, ModuleParams, ParamTensors,
    PipelineDims, PipelineParams,
};
use crate::sid::generate_teachers;
use crate::train::Batch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub m: usize,
    pub layers: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub input_dim: usize,
    pub extractor_hidden: Vec<usize>,
    pub batch: usize,
    pub alpha: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            m: 3,
            layers: 2,
            hidden: 5,
            feature_dim: 3,
            input_dim: 4,
            extractor_hidden: vec![4],
            batch: 4,
            alpha: 0.5,
            trials: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    /// Every module's local loss, wrt its own parameters and the extractor.
    pub local: GradCheck,
    /// Global cross-entropy wrt every parameter.
    pub global: GradCheck,
}

impl GradCheckSummary {
    pub fn worst_relative(&self) -> f64 {
        self.local.worst_relative.max(self.global.worst_relative)
    }
}

fn random_instance(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<(PipelineParams, Batch)> {
    let dims = PipelineDims {
        input_dim: cfg.input_dim,
        extractor_hidden: cfg.extractor_hidden.clone(),
        feature_dim: cfg.feature_dim,
        hidden: cfg.hidden,
        m: cfg.m,
        layers: cfg.layers,
    };
    let mut params = init_pipeline(rng.random(), &dims)?;
    params.alpha = cfg.alpha;
    // nonzero biases so every code path is exercised
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            if *v == 0.0 {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    let x = (0..cfg.batch * cfg.input_dim)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let labels = (0..cfg.batch).map(|_| rng.random_range(0..cfg.m)).collect();
    let smoothing = rng.random_range(0.05..0.3);
    let batch = Batch::new(
        Mat::from_vec(cfg.batch, cfg.input_dim, x)?,
        labels,
        cfg.m,
        smoothing,
    )?;
    Ok((params, batch))
}

fn split_flat(flat: &[f64], ext: &mut ExtractorParams, module: &mut ModuleParams) {
    let n = ext.num_params();
    ext.assign_flat(&flat[..n]);
    module.assign_flat(&flat[n..]);
}

/// Local loss of module `i` against fixed teachers, over `[extractor, module_i]`.
fn check_local(params: &PipelineParams, batch: &Batch, i: usize) -> Result<GradCheck> {
    let teachers = generate_teachers(&batch.x, params, 0)?;
    let teacher = &teachers.teachers[i];
    let module = &params.modules[i];
    let (z, ext_cache) = extractor_forward(&batch.x, &params.extractor, true)?;
    let (_, cache) = module_forward(teacher, &z, module, true)?;
    let (back, _) = module_backward(
        module,
        cache.as_ref(),
        teacher,
        &batch.targets,
        params.alpha,
    )?;
    let ext_grad = extractor_backward(&params.extractor, ext_cache.as_ref(), &back.grad_z)?;
    let mut analytic = ext_grad.flatten();
    analytic.extend(back.grads.flatten());

    let mut x0 = params.extractor.flatten();
    x0.extend(module.flatten());
    let (mut ext, mut m) = (params.extractor.clone(), module.clone());
    let numeric = finite_diff_grad(
        |flat| {
            split_flat(flat, &mut ext, &mut m);
            let (z, _) = extractor_forward(&batch.x, &ext, false).expect("shapes fixed");
            let (logits, _) = module_forward(teacher, &z, &m, false).expect("shapes fixed");
            local_loss(&logits, teacher, &batch.targets, params.alpha).expect("shapes fixed")
        },
        &x0,
        FD_STEP,
    )?;
    Ok(GradCheck::compare(&analytic, &numeric))
}

fn check_global(params: &PipelineParams, batch: &Batch) -> Result<GradCheck> {
    let analytic = bp_pass(batch, params)?.grads.flatten();
    let mut probe = params.clone();
    let numeric = finite_diff_grad(
        |flat| {
            probe.assign_flat(flat);
            bp_pass(batch, &probe).expect("shapes fixed").loss
        },
        &params.flatten(),
        FD_STEP,
    )?;
    Ok(GradCheck::compare(&analytic, &numeric))
}

/// Runs `trials` random instances through both checks.
pub fn gradient_check(cfg: &GradCheckConfig) -> Result<GradCheckSummary> {
    if cfg.trials == 0 {
        return Err(SidError::param("trials must be at least 1"));
    }
    crate::cascade::check_alpha(cfg.alpha)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = GradCheckSummary::default();
    for _ in 0..cfg.trials {
        let (params, batch) = random_instance(cfg, &mut rng)?;
        for i in 0..params.depth() {
            out.local = out.local.merge(check_local(&params, &batch, i)?);
        }
        out.global = out.global.merge(check_global(&params, &batch)?);
    }
    Ok(out)
}
