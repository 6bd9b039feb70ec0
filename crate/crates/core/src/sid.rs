//! The two-phase training rule.
//!
//! Phase 1 runs the pipeline without caches to collect teacher beliefs
//! `P_0..P_{L-1}`. Phase 2 recomputes the features with a cache and lets each
//! module fit its local loss against its own teacher, on a pool of scoped
//! threads. The extractor gradient is reduced in module order, so results do
//! not depend on the number of workers.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cascade::{
    epsilon_bound_check, local_excess, BoundReport, CascadeTrace, BOUND_TOLERANCE,
};
use crate::data::Dataset;
use crate::error::{Result, SidError};
use crate::grad::{extractor_backward, module_backward, GradientSet};
use crate::math::{l2_norm, Belief, Mat};
use crate::memory::{CacheMeter, CacheStats};
use crate::network::{
    belief_chain, extractor_forward, init_pipeline, module_forward, pipeline_forward, ModuleParams,
    ParamTensors, PipelineParams,
};
use crate::optim::{adam_step, OptimizerState};
use crate::report::{
    AuditSummary, EpochMetrics, ExtractorStrategy, PhaseTiming, TrainConfig, TrainReport,
};
use crate::train::{
    accuracy, belief_trajectories, check_datasets, millis, probe_batch, Batch, BatchPlan,
};

/// Teacher beliefs for one batch and the optimizer step of the parameters
/// that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherCache {
    /// `P_0..P_{L-1}`; `P_0` is uniform.
    pub teachers: Vec<Mat>,
    pub step_stamp: u64,
}

/// Gradient-free forward pass collecting `P_0..P_{L-1}`.
pub fn generate_teachers(
    x: &Mat,
    params: &PipelineParams,
    step_stamp: u64,
) -> Result<TeacherCache> {
    let (z, _) = extractor_forward(x, &params.extractor, false)?;
    let teachers = belief_chain(&z, params, params.depth() - 1)?;
    Ok(TeacherCache {
        teachers,
        step_stamp,
    })
}

/// What Phase 2 needs besides the batch and parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalUpdate {
    pub alpha: f64,
    pub strategy: ExtractorStrategy,
    pub staleness_k: u64,
    /// Optimizer step the update is computed at.
    pub current_step: u64,
    pub workers: usize,
}

impl LocalUpdate {
    pub fn from_config(cfg: &TrainConfig, current_step: u64, workers: usize) -> Self {
        LocalUpdate {
            alpha: cfg.alpha,
            strategy: cfg.extractor_strategy,
            staleness_k: cfg.staleness_k,
            current_step,
            workers,
        }
    }
}

struct ModuleResult {
    index: usize,
    grads: ModuleParams,
    grad_z: Mat,
    loss: f64,
}

/// Phase 2: every module's local gradient plus the reduced extractor gradient.
pub fn parallel_local_update(
    batch: &Batch,
    teachers: &TeacherCache,
    params: &PipelineParams,
    upd: &LocalUpdate,
) -> Result<GradientSet> {
    Ok(local_update_impl(batch, teachers, params, upd)?.0)
}

/// As [`parallel_local_update`], also reporting peak cache bytes per worker.
pub fn parallel_local_update_instrumented(
    batch: &Batch,
    teachers: &TeacherCache,
    params: &PipelineParams,
    upd: &LocalUpdate,
) -> Result<(GradientSet, CacheStats)> {
    local_update_impl(batch, teachers, params, upd)
}

fn local_update_impl(
    batch: &Batch,
    teachers: &TeacherCache,
    params: &PipelineParams,
    upd: &LocalUpdate,
) -> Result<(GradientSet, CacheStats)> {
    let depth = params.depth();
    let age = upd.current_step.saturating_sub(teachers.step_stamp);
    if age > upd.staleness_k || teachers.step_stamp > upd.current_step {
        return Err(SidError::StaleTeachers {
            generated: teachers.step_stamp,
            current: upd.current_step,
            limit: upd.staleness_k,
        });
    }
    if teachers.teachers.len() != depth {
        return Err(SidError::dim(format!(
            "{} teacher batches for {depth} modules",
            teachers.teachers.len()
        )));
    }
    if let Some(t) = teachers
        .teachers
        .iter()
        .find(|t| t.shape() != batch.targets.shape())
    {
        return Err(SidError::dim(format!(
            "teacher batch {:?} does not match targets {:?}",
            t.shape(),
            batch.targets.shape()
        )));
    }

    let train_extractor = upd.strategy != ExtractorStrategy::Frozen;
    let (z, ext_cache) = extractor_forward(&batch.x, &params.extractor, train_extractor)?;
    let workers = upd.workers.clamp(1, depth);

    let run_worker = |w: usize| -> Result<(Vec<ModuleResult>, usize)> {
        let mut meter = CacheMeter::new();
        let mut out = Vec::new();
        for i in (w..depth).step_by(workers) {
            let module = &params.modules[i];
            let (_, cache) = module_forward(&teachers.teachers[i], &z, module, true)?;
            let mut cache = cache.expect("cache requested");
            cache.owner = i + 1;
            let bytes = cache.bytes();
            meter.alloc(bytes);
            debug_assert_eq!(cache.owner, i + 1, "module {} read a foreign cache", i + 1);
            let (back, loss) = module_backward(
                module,
                Some(&cache),
                &teachers.teachers[i],
                &batch.targets,
                upd.alpha,
            )?;
            drop(cache);
            meter.free(bytes);
            out.push(ModuleResult {
                index: i,
                grads: back.grads,
                grad_z: back.grad_z,
                loss,
            });
        }
        Ok((out, meter.peak()))
    };

    let per_worker: Vec<Result<(Vec<ModuleResult>, usize)>> = if workers == 1 {
        vec![run_worker(0)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| s.spawn(move || run_worker(w)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("phase-2 worker panicked"))
                .collect()
        })
    };

    let mut slots: Vec<Option<ModuleResult>> = (0..depth).map(|_| None).collect();
    let mut worker_peaks = Vec::with_capacity(workers);
    for res in per_worker {
        let (results, peak) = res?;
        worker_peaks.push(peak);
        for r in results {
            let idx = r.index;
            slots[idx] = Some(r);
        }
    }
    let results: Vec<ModuleResult> = slots
        .into_iter()
        .map(|s| s.expect("every module assigned to a worker"))
        .collect();

    let mut grads = GradientSet::zeros_for(params);
    let mut grad_z: Option<Mat> = None;
    let contributes = |i: usize| match upd.strategy {
        ExtractorStrategy::AllLayers => true,
        ExtractorStrategy::FinalLayer => i + 1 == depth,
        ExtractorStrategy::Frozen => false,
    };
    for (i, r) in results.into_iter().enumerate() {
        grads.loss_values[i] = r.loss;
        grads.module_grads[i] = r.grads;
        if contributes(i) {
            match grad_z.as_mut() {
                Some(acc) => acc.add_assign(&r.grad_z),
                None => grad_z = Some(r.grad_z),
            }
        }
    }
    if let Some(gz) = grad_z {
        grads.extractor_grad = extractor_backward(&params.extractor, ext_cache.as_ref(), &gz)?;
    }

    let extractor_bytes = ext_cache.as_ref().map_or(0, |c| c.bytes());
    let stats = CacheStats {
        extractor_bytes,
        total_peak: extractor_bytes + worker_peaks.iter().sum::<usize>(),
        worker_peaks,
    };
    Ok((grads, stats))
}

/// Owns the parameters, the optimizer and the teacher snapshot across steps.
pub(crate) struct SidTrainer {
    pub(crate) params: PipelineParams,
    pub(crate) opt: OptimizerState,
    cfg: TrainConfig,
    workers: usize,
    /// Parameters that produce teachers, with the step they were taken at.
    teacher_source: Option<(PipelineParams, u64)>,
}

impl SidTrainer {
    pub(crate) fn new(
        cfg: &TrainConfig,
        input_dim: usize,
        m: usize,
        total_steps: u64,
        workers: usize,
    ) -> Result<Self> {
        let mut params = init_pipeline(cfg.seed, &cfg.dims(input_dim, m))?;
        params.alpha = cfg.alpha;
        let opt = OptimizerState::new(params.num_params(), cfg.lr, total_steps);
        Ok(SidTrainer {
            params,
            opt,
            cfg: cfg.clone(),
            workers,
            teacher_source: None,
        })
    }

    /// Phase 1. Teachers come from a parameter snapshot that is refreshed once
    /// it is more than `staleness_k` steps old.
    pub(crate) fn teachers(&mut self, batch: &Batch) -> Result<TeacherCache> {
        let step = self.opt.step;
        let refresh = match &self.teacher_source {
            None => true,
            Some((_, stamp)) => step - stamp > self.cfg.staleness_k,
        };
        if refresh {
            if self.cfg.staleness_k == 0 {
                return generate_teachers(&batch.x, &self.params, step);
            }
            self.teacher_source = Some((self.params.clone(), step));
        }
        let (source, stamp) = self.teacher_source.as_ref().expect("snapshot present");
        generate_teachers(&batch.x, source, *stamp)
    }

    pub(crate) fn gradients(&self, batch: &Batch, teachers: &TeacherCache) -> Result<GradientSet> {
        let upd = LocalUpdate::from_config(&self.cfg, self.opt.step, self.workers);
        parallel_local_update(batch, teachers, &self.params, &upd)
    }

    /// One full step; returns the summed local loss and both phase durations.
    pub(crate) fn step(&mut self, batch: &Batch) -> Result<(f64, f64, f64)> {
        let t0 = Instant::now();
        let teachers = self.teachers(batch)?;
        let t1 = Instant::now();
        let grads = self.gradients(batch, &teachers)?;
        adam_step(&mut self.params, &grads, &mut self.opt)?;
        let t2 = Instant::now();
        let loss = grads.loss_values.iter().sum();
        Ok((loss, millis(t1 - t0), millis(t2 - t1)))
    }
}

/// Trains with the two-phase rule. `workers` only changes wall-clock time.
pub fn train_sid(
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    workers: usize,
) -> Result<(TrainReport, PipelineParams)> {
    check_datasets(train, test, cfg)?;
    let mut plan = BatchPlan::new(train.len(), cfg.batch_size, cfg.seed);
    let total = (cfg.epochs * plan.steps_per_epoch()) as u64;
    let mut trainer = SidTrainer::new(cfg, train.dim(), train.m, total, workers)?;

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut timing = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let (mut loss_sum, mut p1, mut p2) = (0.0, 0.0, 0.0);
        for idx in plan.next_epoch() {
            let batch = Batch::from_dataset(train, &idx, cfg.label_smoothing)?;
            let (loss, a, b) = trainer.step(&batch)?;
            loss_sum += loss * idx.len() as f64;
            p1 += a;
            p2 += b;
        }
        epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            test_acc: accuracy(&trainer.params, test)?,
        });
        timing.push(PhaseTiming {
            epoch,
            phase1_ms: p1,
            phase2_ms: p2,
        });
    }
    let params = trainer.params;
    let report = finish_report("sid", cfg, &params, test, epochs, timing)?;
    Ok((report, params))
}

pub(crate) fn finish_report(
    rule: &str,
    cfg: &TrainConfig,
    params: &PipelineParams,
    test: &Dataset,
    epochs: Vec<EpochMetrics>,
    timing: Vec<PhaseTiming>,
) -> Result<TrainReport> {
    let final_test_acc = accuracy(params, test)?;
    let (trajectories, audit) = match probe_batch(test, cfg.probe_size, cfg.label_smoothing)? {
        Some(probe) => (
            belief_trajectories(params, &probe)?,
            summarize_audit(&audit_descent(params, &probe, cfg.alpha)?),
        ),
        None => (Vec::new(), AuditSummary::default()),
    };
    Ok(TrainReport {
        rule: rule.into(),
        config: cfg.clone(),
        epochs,
        final_test_acc,
        trajectories,
        audit,
        timing,
    })
}

/// Bound check of one probe sample with its measured per-step errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleAudit {
    pub bound: BoundReport,
    /// `max(0, S_i(p_i) - S_i(p_{i-1}))` per step.
    pub epsilons: Vec<f64>,
}

impl SampleAudit {
    /// Every step improved (within tolerance) on its local objective.
    pub fn pure_descent(&self) -> bool {
        self.epsilons.iter().all(|&e| e <= BOUND_TOLERANCE)
    }
}

/// Measures each module's local-objective excess on the probe samples and
/// checks the relaxed descent bound with those errors.
pub fn audit_descent(
    params: &PipelineParams,
    probe: &Batch,
    alpha: f64,
) -> Result<Vec<SampleAudit>> {
    let out = pipeline_forward(&probe.x, params)?;
    (0..probe.len())
        .map(|i| {
            let py = Belief::from_row_unchecked(probe.targets.row(i));
            let trace = CascadeTrace::from_beliefs(out.sample_beliefs(i), &py)?;
            let epsilons: Vec<f64> = local_excess(&trace, &py, alpha)
                .into_iter()
                .map(|e| e.max(0.0))
                .collect();
            let bound = epsilon_bound_check(&trace, &py, alpha, &epsilons)?;
            Ok(SampleAudit { bound, epsilons })
        })
        .collect()
}

pub fn summarize_audit(audits: &[SampleAudit]) -> AuditSummary {
    if audits.is_empty() {
        return AuditSummary::default();
    }
    let pure = audits.iter().filter(|a| a.pure_descent()).count();
    AuditSummary {
        samples: audits.len(),
        bound_holds: audits.iter().filter(|a| a.bound.holds).count(),
        pure_descent_fraction: pure as f64 / audits.len() as f64,
        min_slack: audits
            .iter()
            .map(|a| a.bound.slack)
            .fold(f64::INFINITY, f64::min),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StalenessRow {
    pub k: u64,
    /// Mean `||theta_{t-k} - theta_t||` over the sampled steps.
    pub mean_param_delta: f64,
    /// Mean `||g(stale teachers) - g(fresh teachers)||`.
    pub mean_grad_error: f64,
    pub samples: usize,
}

/// Number of steps at which stale and fresh gradients are compared.
pub const STALENESS_SAMPLES: usize = 20;

/// Trains with fresh teachers and, at evenly spaced steps, recomputes the
/// Phase-2 gradient with teachers from the parameters `k` steps back.
pub fn staleness_experiment(
    train: &Dataset,
    cfg: &TrainConfig,
    k_values: &[u64],
) -> Result<Vec<StalenessRow>> {
    cfg.validate()?;
    if k_values.is_empty() {
        return Err(SidError::param("k_values is empty"));
    }
    if train.is_empty() {
        return Err(SidError::input("training set is empty"));
    }
    let max_k = *k_values.iter().max().unwrap() as usize;
    let fresh_cfg = TrainConfig {
        staleness_k: 0,
        ..cfg.clone()
    };
    let mut plan = BatchPlan::new(train.len(), cfg.batch_size, cfg.seed);
    let total = cfg.epochs * plan.steps_per_epoch();
    if total <= max_k {
        return Err(SidError::param(format!(
            "{total} training steps cannot look {max_k} steps back"
        )));
    }
    let sampled: Vec<usize> = (0..STALENESS_SAMPLES)
        .map(|j| max_k + j * (total - 1 - max_k) / (STALENESS_SAMPLES - 1).max(1))
        .collect();
    let mut trainer = SidTrainer::new(&fresh_cfg, train.dim(), train.m, total as u64, 1)?;

    // history[j] holds the parameters j steps back
    let mut history: std::collections::VecDeque<PipelineParams> = Default::default();
    let mut delta_sum = vec![0.0; k_values.len()];
    let mut err_sum = vec![0.0; k_values.len()];
    let mut counts = vec![0usize; k_values.len()];
    let mut step = 0usize;
    'outer: for _ in 0..cfg.epochs {
        for idx in plan.next_epoch() {
            let batch = Batch::from_dataset(train, &idx, cfg.label_smoothing)?;
            history.push_front(trainer.params.clone());
            history.truncate(max_k + 1);
            if sampled.contains(&step) {
                let now = trainer.opt.step;
                let fresh_t = generate_teachers(&batch.x, &trainer.params, now)?;
                let fresh = trainer.gradients(&batch, &fresh_t)?.flatten();
                let current = trainer.params.flatten();
                for (j, &k) in k_values.iter().enumerate() {
                    let old = &history[k as usize];
                    let stale_t = TeacherCache {
                        step_stamp: now,
                        ..generate_teachers(&batch.x, old, now)?
                    };
                    let stale = trainer.gradients(&batch, &stale_t)?.flatten();
                    let diff: Vec<f64> = stale.iter().zip(&fresh).map(|(a, b)| a - b).collect();
                    let dtheta: Vec<f64> = old
                        .flatten()
                        .iter()
                        .zip(&current)
                        .map(|(a, b)| a - b)
                        .collect();
                    err_sum[j] += l2_norm(&diff);
                    delta_sum[j] += l2_norm(&dtheta);
                    counts[j] += 1;
                }
            }
            trainer.step(&batch)?;
            step += 1;
            if step >= total {
                break 'outer;
            }
        }
    }
    Ok(k_values
        .iter()
        .enumerate()
        .map(|(j, &k)| StalenessRow {
            k,
            mean_param_delta: delta_sum[j] / counts[j] as f64,
            mean_grad_error: err_sum[j] / counts[j] as f64,
            samples: counts[j],
        })
        .collect())
}

/// Spearman rank correlation, average ranks for ties. `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = avg;
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_blobs, split};
    use crate::network::{uniform_beliefs, PipelineDims};

    fn small_setup(layers: usize, seed: u64) -> (PipelineParams, Batch) {
        let dims = PipelineDims {
            input_dim: 3,
            extractor_hidden: vec![5],
            feature_dim: 4,
            hidden: 6,
            m: 3,
            layers,
        };
        let params = init_pipeline(seed, &dims).unwrap();
        let ds = make_blobs(12, 3, 3, 2.0, seed).unwrap();
        let idx: Vec<usize> = (0..12).collect();
        (params, Batch::from_dataset(&ds, &idx, 0.1).unwrap())
    }

    fn update(strategy: ExtractorStrategy, workers: usize) -> LocalUpdate {
        LocalUpdate {
            alpha: 0.5,
            strategy,
            staleness_k: 0,
            current_step: 0,
            workers,
        }
    }

    #[test]
    fn teachers_match_inference_beliefs() {
        let (params, batch) = small_setup(4, 1);
        let t = generate_teachers(&batch.x, &params, 0).unwrap();
        let out = pipeline_forward(&batch.x, &params).unwrap();
        assert_eq!(t.teachers.len(), 4);
        assert_eq!(&t.teachers[..], &out.beliefs[..4]);
        assert_eq!(t.teachers[0], uniform_beliefs(12, 3));

        let (params, batch) = small_setup(1, 1);
        let t = generate_teachers(&batch.x, &params, 0).unwrap();
        assert_eq!(t.teachers, vec![uniform_beliefs(12, 3)]);
    }

    #[test]
    fn zero_params_give_uniform_teachers() {
        let (mut params, batch) = small_setup(3, 2);
        params.fill(0.0);
        let t = generate_teachers(&batch.x, &params, 0).unwrap();
        for b in &t.teachers {
            assert_eq!(b, &uniform_beliefs(12, 3));
        }
    }

    #[test]
    fn worker_count_does_not_change_gradients() {
        let (params, batch) = small_setup(5, 3);
        let t = generate_teachers(&batch.x, &params, 0).unwrap();
        let one = parallel_local_update(
            &batch,
            &t,
            &params,
            &update(ExtractorStrategy::AllLayers, 1),
        )
        .unwrap();
        for w in [2, 3, 5, 16] {
            let many = parallel_local_update(
                &batch,
                &t,
                &params,
                &update(ExtractorStrategy::AllLayers, w),
            )
            .unwrap();
            assert_eq!(one, many);
        }
    }

    #[test]
    fn strategies_route_extractor_gradient() {
        let (params, batch) = small_setup(3, 4);
        let t = generate_teachers(&batch.x, &params, 0).unwrap();
        let frozen =
            parallel_local_update(&batch, &t, &params, &update(ExtractorStrategy::Frozen, 2))
                .unwrap();
        assert!(frozen.extractor_grad.flatten().iter().all(|&g| g == 0.0));

        let all = parallel_local_update(
            &batch,
            &t,
            &params,
            &update(ExtractorStrategy::AllLayers, 1),
        )
        .unwrap();
        let last = parallel_local_update(
            &batch,
            &t,
            &params,
            &update(ExtractorStrategy::FinalLayer, 1),
        )
        .unwrap();
        // module gradients are unaffected by the strategy
        assert_eq!(all.module_grads, frozen.module_grads);
        assert_eq!(all.module_grads, last.module_grads);

        // the all-layers sum equals the sum of isolated single-module runs
        let mut summed = params.extractor.zeros_like();
        for i in 0..3 {
            let mut solo = params.clone();
            solo.modules = vec![params.modules[i].clone()];
            let solo_t = TeacherCache {
                teachers: vec![t.teachers[i].clone()],
                step_stamp: 0,
            };
            let g = parallel_local_update(
                &batch,
                &solo_t,
                &solo,
                &update(ExtractorStrategy::AllLayers, 1),
            )
            .unwrap();
            summed.add_scaled(&g.extractor_grad, 1.0);
            if i == 2 {
                assert_eq!(g.extractor_grad, last.extractor_grad);
            }
        }
        for (a, b) in summed.flatten().iter().zip(all.extractor_grad.flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stale_teachers_rejected() {
        let (params, batch) = small_setup(2, 5);
        let t = generate_teachers(&batch.x, &params, 3).unwrap();
        let mut upd = update(ExtractorStrategy::AllLayers, 1);
        upd.current_step = 5;
        upd.staleness_k = 1;
        assert!(matches!(
            parallel_local_update(&batch, &t, &params, &upd),
            Err(SidError::StaleTeachers {
                generated: 3,
                current: 5,
                limit: 1
            })
        ));
        upd.staleness_k = 2;
        assert!(parallel_local_update(&batch, &t, &params, &upd).is_ok());
    }

    #[test]
    fn memory_peak_is_one_module_per_worker() {
        let (params, batch) = small_setup(6, 6);
        let t = generate_teachers(&batch.x, &params, 0).unwrap();
        let (_, stats) = parallel_local_update_instrumented(
            &batch,
            &t,
            &params,
            &update(ExtractorStrategy::AllLayers, 1),
        )
        .unwrap();
        let one = crate::network::module_cache_bytes(12, 3, 4, 6);
        assert_eq!(stats.worker_peaks, vec![one]);
        assert!(stats.extractor_bytes > 0);
        assert_eq!(stats.per_worker_peak(), one + stats.extractor_bytes);
        let (_, stats) = parallel_local_update_instrumented(
            &batch,
            &t,
            &params,
            &update(ExtractorStrategy::AllLayers, 3),
        )
        .unwrap();
        assert_eq!(stats.worker_peaks, vec![one; 3]);
    }

    #[test]
    fn untrained_zero_params_audit() {
        let (mut params, batch) = small_setup(3, 7);
        params.fill(0.0);
        let audits = audit_descent(&params, &batch, 0.5).unwrap();
        for a in &audits {
            assert!(a.bound.holds);
            assert_eq!(a.bound.slack, 0.0);
            assert!(a.epsilons.iter().all(|&e| e == 0.0));
        }
        assert_eq!(summarize_audit(&audits).pure_descent_fraction, 1.0);
    }

    #[test]
    fn audit_bound_holds_for_random_params() {
        for seed in 0..10 {
            let (params, batch) = small_setup(4, seed);
            for a in audit_descent(&params, &batch, 0.3).unwrap() {
                assert!(a.bound.holds, "{:?}", a.bound);
            }
        }
    }

    #[test]
    fn training_is_reproducible_and_learns() {
        let ds = make_blobs(200, 2, 2, 6.0, 11).unwrap();
        let (tr, te) = split(&ds, 0.75, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 8,
            batch_size: 32,
            lr: 5e-3,
            layers: 2,
            hidden: 16,
            feature_dim: 8,
            extractor_hidden: vec![16],
            probe_size: 16,
            ..Default::default()
        };
        let (a, pa) = train_sid(&tr, &te, &cfg, 1).unwrap();
        let (b, pb) = train_sid(&tr, &te, &cfg, 2).unwrap();
        assert_eq!(a.without_timing(), b.without_timing());
        assert_eq!(pa, pb);
        assert_eq!(a.epochs.len(), 8);
        assert_eq!(a.trajectories.len(), 16);
        assert_eq!(a.trajectories[0].true_class_prob.len(), 3);
        assert!(a.final_test_acc > 0.9, "{}", a.final_test_acc);
        assert_eq!(a.audit.bound_holds, 16);
    }

    #[test]
    fn stale_training_runs() {
        let ds = make_blobs(80, 2, 2, 6.0, 1).unwrap();
        let (tr, te) = split(&ds, 0.75, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            staleness_k: 3,
            layers: 2,
            hidden: 8,
            feature_dim: 4,
            extractor_hidden: vec![8],
            ..Default::default()
        };
        let (r, _) = train_sid(&tr, &te, &cfg, 1).unwrap();
        assert!(r.epochs.iter().all(|e| e.train_loss.is_finite()));
    }

    #[test]
    fn staleness_zero_has_no_error() {
        let ds = make_blobs(64, 2, 2, 4.0, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 16,
            layers: 2,
            hidden: 8,
            feature_dim: 4,
            extractor_hidden: vec![8],
            ..Default::default()
        };
        let rows = staleness_experiment(&ds, &cfg, &[0, 2]).unwrap();
        assert_eq!(rows[0].mean_grad_error, 0.0);
        assert_eq!(rows[0].mean_param_delta, 0.0);
        assert!(rows[1].mean_grad_error > 0.0);
        assert_eq!(rows[1].samples, STALENESS_SAMPLES);
        assert!(staleness_experiment(&ds, &cfg, &[100]).is_err());
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        let r = spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!(r > 0.9 && r < 1.0);
    }
}
