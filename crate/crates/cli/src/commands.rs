use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use sid_core::bp::train_bp;
use sid_core::cascade::{descent_bound_check, ideal_cascade, CascadeConfig};
use sid_core::check::{gradient_check, GradCheckConfig};
use sid_core::data::make_blobs;
use sid_core::network::{init_pipeline, write_checkpoint, PipelineDims};
use sid_core::profiler::{measure_costs, memory_audit, project, write_speedup_csv};
use sid_core::sid::{spearman, staleness_experiment, train_sid};
use sid_core::train::Batch;
use sid_core::{smooth_onehot, Belief, ExtractorStrategy, SidError};

use crate::config::ExperimentConfig;
use crate::{
    CascadeArgs, Failure, GradcheckArgs, NoiseArgs, Overrides, ProfileArgs, Rule, StalenessArgs,
    TrainArgs,
};

type Outcome = Result<(), Failure>;

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn failed(e: impl std::fmt::Display) -> Failure {
    Failure::Check(e.to_string())
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| failed(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| failed(format!("cannot write {}: {e}", path.display())))
}

fn finish(mut w: BufWriter<File>) -> Outcome {
    w.flush().map_err(failed)
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    match path {
        Some(p) => ExperimentConfig::load(p).map_err(Failure::Usage),
        None => Ok(ExperimentConfig::default()),
    }
}

fn apply(cfg: &mut ExperimentConfig, o: &Overrides) -> Outcome {
    let t = &mut cfg.train;
    if let Some(v) = o.seed {
        t.seed = v;
    }
    if let Some(v) = o.epochs {
        t.epochs = v;
    }
    if let Some(v) = o.alpha {
        t.alpha = v;
    }
    if let Some(v) = o.lr {
        t.lr = v;
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = o.layers {
        t.layers = v;
    }
    if let Some(s) = &o.strategy {
        t.extractor_strategy = s.parse::<ExtractorStrategy>().map_err(usage)?;
    }
    if let Some(v) = o.staleness_k {
        t.staleness_k = v;
    }
    Ok(())
}

pub fn cascade(a: &CascadeArgs) -> Outcome {
    let py = smooth_onehot(a.label, a.m, a.eps_smoothing).map_err(usage)?;
    let p0 = Belief::uniform(a.m).map_err(usage)?;
    let cfg = CascadeConfig::new(a.alpha, a.depth, p0, py.clone()).map_err(usage)?;
    let trace = ideal_cascade(&cfg).map_err(failed)?;
    let report = descent_bound_check(&trace, &py, a.alpha);

    let mut w = create(&a.out.out, "trace.csv")?;
    trace.write_csv(&mut w).map_err(failed)?;
    finish(w)?;

    println!(
        "KL(p_L||p_y) = {:.6e}  bound rhs = {:.6e}  slack = {:.3e}",
        report.lhs, report.rhs, report.slack
    );
    if report.holds {
        println!("descent bound holds");
        Ok(())
    } else {
        Err(failed(format!(
            "descent bound violated (first failing step {:?})",
            report.violating_step
        )))
    }
}

pub fn train(a: &TrainArgs, workers: usize) -> Outcome {
    let mut cfg = load_config(a.config.as_deref())?;
    apply(&mut cfg, &a.overrides)?;
    cfg.validate().map_err(Failure::Usage)?;
    let (train, test) = cfg.datasets().map_err(usage)?;
    let (report, params) = match a.rule {
        Rule::Sid => train_sid(&train, &test, &cfg.train, workers),
        Rule::Bp => train_bp(&train, &test, &cfg.train),
    }
    .map_err(failed)?;

    let out = &a.out.out;
    let mut w = create(out, "report.json")?;
    report.write_json(&mut w).map_err(failed)?;
    finish(w)?;
    let mut w = create(out, "report.csv")?;
    report.write_csv(&mut w).map_err(failed)?;
    finish(w)?;
    let mut w = create(out, "model.ckpt")?;
    write_checkpoint(&params, &mut w).map_err(failed)?;
    finish(w)?;

    println!("final test accuracy: {:.4}", report.final_test_acc);
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Outcome {
    if !(a.tolerance > 0.0) {
        return Err(usage("tolerance must be positive"));
    }
    let cfg = GradCheckConfig {
        m: a.m,
        layers: a.layers,
        hidden: a.hidden,
        trials: a.trials as usize,
        seed: a.seed,
        ..Default::default()
    };
    let summary = gradient_check(&cfg).map_err(|e| match e {
        SidError::InvalidParameter(_) | SidError::InvalidInput(_) => usage(e),
        other => failed(other),
    })?;
    let worst = summary.worst_relative();
    println!(
        "worst relative error: {worst:.3e} (local losses {:.3e}, global loss {:.3e}, {} coordinates)",
        summary.local.worst_relative,
        summary.global.worst_relative,
        summary.local.coordinates + summary.global.coordinates
    );
    if worst < a.tolerance {
        Ok(())
    } else {
        Err(failed(format!(
            "worst relative error {worst:.3e} >= tolerance {:.3e}",
            a.tolerance
        )))
    }
}

pub fn profile(a: &ProfileArgs) -> Outcome {
    if a.devices.is_empty() || a.devices.contains(&0) {
        return Err(usage("device counts must be at least 1"));
    }
    let dims = PipelineDims {
        input_dim: a.input_dim,
        extractor_hidden: vec![a.hidden],
        feature_dim: a.feature_dim,
        hidden: a.hidden,
        m: a.m,
        layers: a.layers,
    };
    let params = init_pipeline(0, &dims).map_err(usage)?;
    if a.batch < a.m {
        return Err(usage("batch must hold at least one sample per class"));
    }
    let ds = make_blobs(a.batch, a.m, a.input_dim, 3.0, 0).map_err(usage)?;
    let idx: Vec<usize> = (0..a.batch).collect();
    let batch = Batch::from_dataset(&ds, &idx, 0.1).map_err(failed)?;

    let costs = measure_costs(&params, &batch, a.repeats as usize).map_err(failed)?;
    let rows = a
        .devices
        .iter()
        .map(|&p| project(&costs, p))
        .collect::<Result<Vec<_>, _>>()
        .map_err(failed)?;
    let mut w = create(&a.out.out, "speedup.csv")?;
    write_speedup_csv(&rows, &mut w).map_err(failed)?;
    finish(w)?;
    let mut w = create(&a.out.out, "projection.json")?;
    serde_json::to_writer_pretty(&mut w, &rows).map_err(failed)?;
    finish(w)?;

    for r in &rows {
        println!(
            "P={:<3} T_BP={:.3e}s T_SID={:.3e}s speedup={:.3} M_BP={}B M_SID={}B",
            r.devices, r.t_bp, r.t_sid, r.speedup, r.m_bp, r.m_sid
        );
    }
    let mem = memory_audit(&params, &batch, 1).map_err(failed)?;
    println!(
        "measured peak cache: bp {} B, sid per worker {} B (ratio {:.2})",
        mem.peak_bp_bytes,
        mem.peak_sid_bytes,
        mem.peak_bp_bytes as f64 / mem.peak_sid_bytes as f64
    );
    Ok(())
}

pub fn noise_sweep(a: &NoiseArgs, workers: usize) -> Outcome {
    if a.rates.is_empty() {
        return Err(usage("rates list is empty"));
    }
    if let Some(r) = a.rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(usage(format!("noise rate {r} not in [0, 1]")));
    }
    if a.seeds.is_empty() {
        return Err(usage("seeds list is empty"));
    }
    let base = load_config(a.config.as_deref())?;
    base.validate().map_err(Failure::Usage)?;

    let mut w = create(&a.out.out, "noise.csv")?;
    writeln!(w, "rate,acc_sid,acc_bp,gap").map_err(failed)?;
    for &rate in &a.rates {
        let (mut sid, mut bp) = (0.0, 0.0);
        for &seed in &a.seeds {
            let mut cfg = base.clone();
            cfg.train.seed = seed;
            cfg.data.data_seed = base.data.data_seed.wrapping_add(seed);
            cfg.data.noise_rate = rate;
            let (train, test) = cfg.datasets().map_err(usage)?;
            sid += train_sid(&train, &test, &cfg.train, workers)
                .map_err(failed)?
                .0
                .final_test_acc;
            bp += train_bp(&train, &test, &cfg.train)
                .map_err(failed)?
                .0
                .final_test_acc;
        }
        let n = a.seeds.len() as f64;
        let (sid, bp) = (sid / n, bp / n);
        writeln!(w, "{rate},{sid:.6},{bp:.6},{:.6}", sid - bp).map_err(failed)?;
        println!(
            "rate {rate:.2}: sid {sid:.4}  bp {bp:.4}  gap {:+.4}",
            sid - bp
        );
    }
    finish(w)
}

pub fn staleness(a: &StalenessArgs) -> Outcome {
    if a.k.is_empty() {
        return Err(usage("k list is empty"));
    }
    let cfg = load_config(a.config.as_deref())?;
    cfg.validate().map_err(Failure::Usage)?;
    let (train, _) = cfg.datasets().map_err(usage)?;
    let rows = staleness_experiment(&train, &cfg.train, &a.k).map_err(|e| match e {
        SidError::InvalidParameter(_) => usage(e),
        other => failed(other),
    })?;

    let mut w = create(&a.out.out, "staleness.csv")?;
    writeln!(w, "k,mean_param_delta,mean_grad_error,samples").map_err(failed)?;
    for r in &rows {
        writeln!(
            w,
            "{},{:.9e},{:.9e},{}",
            r.k, r.mean_param_delta, r.mean_grad_error, r.samples
        )
        .map_err(failed)?;
        println!(
            "k={:<3} param delta {:.4e}  gradient error {:.4e}",
            r.k, r.mean_param_delta, r.mean_grad_error
        );
    }
    finish(w)?;

    let deltas: Vec<f64> = rows.iter().map(|r| r.mean_param_delta).collect();
    let errors: Vec<f64> = rows.iter().map(|r| r.mean_grad_error).collect();
    if let Some(rho) = spearman(&deltas, &errors) {
        println!("rank correlation (delta, error): {rho:.3}");
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(failed("non-finite gradient error"));
    }
    if let Some(r) = rows.iter().find(|r| r.k == 0 && r.mean_grad_error != 0.0) {
        return Err(failed(format!(
            "gradient error at k=0 is {}",
            r.mean_grad_error
        )));
    }
    Ok(())
}
