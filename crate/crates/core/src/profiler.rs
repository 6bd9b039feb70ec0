//! Host-side cost measurement and a multi-device time/memory projection.
//!
//! Modules are placed on devices round-robin (`i mod P`). With costs measured
//! once, the projection is a pure function of the cost model and `P`:
//!
//! - `T_BP = sum_i (C_f[i] + C_b[i]) + E_fwd + E_bwd`, independent of `P`
//! - `T_SID(P) = teacher_pass + E_fwd + max_j sum_{i on j} C_b[i] + E_bwd`
//! - `M_BP = sum_i A[i] + A_ext`, `M_SID(P) = max_j sum_{i on j} A[i] + A_ext`

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bp::bp_pass;
use crate::error::{Result, SidError};
use crate::grad::{extractor_backward, module_backward};
use crate::network::{extractor_forward, module_cache_bytes, module_forward, PipelineParams};
use crate::report::ExtractorStrategy;
use crate::sid::{generate_teachers, parallel_local_update_instrumented, LocalUpdate};
use crate::train::Batch;

/// Per-component costs in seconds and cache sizes in bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Module forward with cache kept.
    pub forward: Vec<f64>,
    /// Module loss gradient and reverse pass.
    pub backward: Vec<f64>,
    pub activation_bytes: Vec<usize>,
    pub extractor_forward_detached: f64,
    pub extractor_forward_grad: f64,
    pub extractor_backward: f64,
    pub extractor_bytes: usize,
    /// Whole gradient-free Phase-1 pass.
    pub teacher_pass: f64,
}

impl CostModel {
    /// Costs for modules alone: free extractor, teacher pass = `sum C_f`.
    pub fn from_module_costs(
        forward: Vec<f64>,
        backward: Vec<f64>,
        activation_bytes: Vec<usize>,
    ) -> Result<Self> {
        let c = CostModel {
            teacher_pass: forward.iter().sum(),
            forward,
            backward,
            activation_bytes,
            extractor_forward_detached: 0.0,
            extractor_forward_grad: 0.0,
            extractor_backward: 0.0,
            extractor_bytes: 0,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn depth(&self) -> usize {
        self.forward.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.forward.len();
        if l == 0 || self.backward.len() != l || self.activation_bytes.len() != l {
            return Err(SidError::dim(format!(
                "cost vectors have lengths {}, {}, {}",
                l,
                self.backward.len(),
                self.activation_bytes.len()
            )));
        }
        let scalars = [
            self.extractor_forward_detached,
            self.extractor_forward_grad,
            self.extractor_backward,
            self.teacher_pass,
        ];
        if self
            .forward
            .iter()
            .chain(&self.backward)
            .chain(&scalars)
            .any(|c| !(c.is_finite() && *c >= 0.0))
        {
            return Err(SidError::input("costs must be finite and nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub devices: usize,
    pub t_bp: f64,
    pub t_sid: f64,
    pub speedup: f64,
    pub m_bp: usize,
    pub m_sid: usize,
    pub memory_ratio: f64,
}

impl ProjectionReport {
    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}

/// Largest per-device sum of `costs` under round-robin placement.
pub fn round_robin_max<T>(costs: &[T], devices: usize) -> T
where
    T: Copy + Default + PartialOrd + std::ops::Add<Output = T>,
{
    let mut load = vec![T::default(); devices.max(1)];
    for (i, &c) in costs.iter().enumerate() {
        let d = i % load.len();
        load[d] = load[d] + c;
    }
    load.into_iter()
        .fold(T::default(), |a, b| if b > a { b } else { a })
}

pub fn project(cost: &CostModel, devices: usize) -> Result<ProjectionReport> {
    if devices < 1 {
        return Err(SidError::param("device count must be at least 1"));
    }
    cost.validate()?;
    let t_bp = cost.forward.iter().sum::<f64>()
        + cost.backward.iter().sum::<f64>()
        + cost.extractor_forward_grad
        + cost.extractor_backward;
    let t_sid = cost.teacher_pass
        + cost.extractor_forward_grad
        + round_robin_max(&cost.backward, devices)
        + cost.extractor_backward;
    let m_bp = cost.activation_bytes.iter().sum::<usize>() + cost.extractor_bytes;
    let m_sid = round_robin_max(&cost.activation_bytes, devices) + cost.extractor_bytes;
    Ok(ProjectionReport {
        devices,
        t_bp,
        t_sid,
        speedup: if t_sid > 0.0 { t_bp / t_sid } else { 1.0 },
        m_bp,
        m_sid,
        memory_ratio: if m_sid > 0 {
            m_bp as f64 / m_sid as f64
        } else {
            1.0
        },
    })
}

/// `P,T_BP,T_SID,speedup` rows.
pub fn write_speedup_csv<W: Write>(rows: &[ProjectionReport], mut w: W) -> Result<()> {
    writeln!(w, "P,T_BP,T_SID,speedup")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.9e},{:.9e},{:.6}",
            r.devices, r.t_bp, r.t_sid, r.speedup
        )?;
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median of `repeats` timings after one warmup call.
fn time_median<F: FnMut() -> Result<()>>(repeats: usize, mut f: F) -> Result<f64> {
    f()?;
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64());
    }
    Ok(median(samples))
}

pub const MIN_REPEATS: usize = 3;

/// Times every component on this host, single-threaded.
pub fn measure_costs(params: &PipelineParams, batch: &Batch, repeats: usize) -> Result<CostModel> {
    if repeats < MIN_REPEATS {
        return Err(SidError::param(format!(
            "repeats must be at least {MIN_REPEATS}, got {repeats}"
        )));
    }
    let teachers = generate_teachers(&batch.x, params, 0)?;
    let (z, ext_cache) = extractor_forward(&batch.x, &params.extractor, true)?;
    let ext_cache = ext_cache.expect("cache requested");
    let dims = params.dims();

    let extractor_forward_detached = time_median(repeats, || {
        extractor_forward(&batch.x, &params.extractor, false).map(drop)
    })?;
    let extractor_forward_grad = time_median(repeats, || {
        extractor_forward(&batch.x, &params.extractor, true).map(drop)
    })?;
    let extractor_backward_t = time_median(repeats, || {
        extractor_backward(&params.extractor, Some(&ext_cache), &z).map(drop)
    })?;
    let teacher_pass = time_median(repeats, || generate_teachers(&batch.x, params, 0).map(drop))?;

    let mut forward = Vec::with_capacity(dims.layers);
    let mut backward = Vec::with_capacity(dims.layers);
    let mut activation_bytes = Vec::with_capacity(dims.layers);
    for (i, module) in params.modules.iter().enumerate() {
        let p_prev = &teachers.teachers[i];
        forward.push(time_median(repeats, || {
            module_forward(p_prev, &z, module, true).map(drop)
        })?);
        let (_, cache) = module_forward(p_prev, &z, module, true)?;
        let cache = cache.expect("cache requested");
        backward.push(time_median(repeats, || {
            module_backward(module, Some(&cache), p_prev, &batch.targets, params.alpha).map(drop)
        })?);
        activation_bytes.push(cache.bytes());
        debug_assert_eq!(
            cache.bytes(),
            module_cache_bytes(batch.len(), dims.m, dims.feature_dim, dims.hidden)
        );
    }
    Ok(CostModel {
        forward,
        backward,
        activation_bytes,
        extractor_forward_detached,
        extractor_forward_grad,
        extractor_backward: extractor_backward_t,
        extractor_bytes: ext_cache.bytes(),
        teacher_pass,
    })
}

/// Measured peak cache bytes of one training step under each rule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryAudit {
    pub peak_bp_bytes: usize,
    /// Largest single-worker peak plus the shared extractor cache.
    pub peak_sid_bytes: usize,
    pub extractor_bytes: usize,
}

/// Runs one instrumented BP step and one instrumented Phase-2 step.
pub fn memory_audit(params: &PipelineParams, batch: &Batch, workers: usize) -> Result<MemoryAudit> {
    let bp = bp_pass(batch, params)?;
    let teachers = generate_teachers(&batch.x, params, 0)?;
    let upd = LocalUpdate {
        alpha: params.alpha,
        strategy: ExtractorStrategy::AllLayers,
        staleness_k: 0,
        current_step: 0,
        workers,
    };
    let (_, stats) = parallel_local_update_instrumented(batch, &teachers, params, &upd)?;
    Ok(MemoryAudit {
        peak_bp_bytes: bp.peak_cache_bytes,
        peak_sid_bytes: stats.per_worker_peak(),
        extractor_bytes: stats.extractor_bytes,
    })
}
