//! Shared feature extractor plus a pipeline of belief-refinement modules.
//!
//! The extractor is a small MLP (`input -> hidden.. -> feature_dim`, rectifier
//! between layers, linear head). Each module maps `concat(p_prev, z)` through
//! `Linear -> ReLU -> Linear` to logits; the next belief is their softmax.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SidError};
use crate::math::{argmax, softmax_rows, Belief, Mat};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SIDCKPT1";
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineDims {
    pub input_dim: usize,
    /// Hidden widths of the extractor MLP, in order. Empty means a single linear map.
    pub extractor_hidden: Vec<usize>,
    pub feature_dim: usize,
    /// Hidden width of every processing module.
    pub hidden: usize,
    /// Number of classes.
    pub m: usize,
    /// Number of processing modules `L`.
    pub layers: usize,
}

impl PipelineDims {
    pub fn new(
        input_dim: usize,
        feature_dim: usize,
        hidden: usize,
        m: usize,
        layers: usize,
    ) -> Self {
        PipelineDims {
            input_dim,
            extractor_hidden: vec![64],
            feature_dim,
            hidden,
            m,
            layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths_ok = self.extractor_hidden.iter().all(|&w| w > 0);
        if self.input_dim == 0 || self.feature_dim == 0 || self.hidden == 0 || !widths_ok {
            return Err(SidError::param(format!(
                "all dimensions must be positive: {self:?}"
            )));
        }
        if self.m < 2 {
            return Err(SidError::param("need at least two classes"));
        }
        if self.layers == 0 {
            return Err(SidError::param("need at least one processing module"));
        }
        Ok(())
    }

    /// Total trainable scalars, or `None` on overflow.
    pub fn num_params(&self) -> Option<usize> {
        let linear = |i: usize, o: usize| i.checked_mul(o)?.checked_add(o);
        let mut total = 0usize;
        let mut prev = self.input_dim;
        for &w in self.extractor_hidden.iter().chain([&self.feature_dim]) {
            total = total.checked_add(linear(prev, w)?)?;
            prev = w;
        }
        let module = linear(self.m.checked_add(self.feature_dim)?, self.hidden)?
            .checked_add(linear(self.hidden, self.m)?)?;
        total.checked_add(module.checked_mul(self.layers)?)
    }
}

/// Dense layer `y = x W^T + b` with `W` stored as (out x in).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Mat::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut weight = Mat::zeros(output, input);
        for w in weight.as_mut_slice() {
            *w = rng.random_range(-bound..=bound);
        }
        Linear {
            weight,
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        let mut y = x.matmul_t(&self.weight)?;
        y.add_row(&self.bias);
        Ok(y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorParams {
    pub layers: Vec<Linear>,
    pub input_dim: usize,
    pub feature_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleParams {
    /// hidden x (m + feature_dim); the first `m` columns read the incoming belief.
    pub w1: Mat,
    pub b1: Vec<f64>,
    /// m x hidden
    pub w2: Mat,
    pub b2: Vec<f64>,
}

impl ModuleParams {
    pub fn zeros(m: usize, feature_dim: usize, hidden: usize) -> Self {
        ModuleParams {
            w1: Mat::zeros(hidden, m + feature_dim),
            b1: vec![0.0; hidden],
            w2: Mat::zeros(m, hidden),
            b2: vec![0.0; m],
        }
    }

    pub fn classes(&self) -> usize {
        self.w2.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.w1.cols() - self.classes()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    pub extractor: ExtractorParams,
    pub modules: Vec<ModuleParams>,
    pub m: usize,
    pub alpha: f64,
}

impl PipelineParams {
    pub fn depth(&self) -> usize {
        self.modules.len()
    }

    pub fn dims(&self) -> PipelineDims {
        let ext = &self.extractor.layers;
        PipelineDims {
            input_dim: self.extractor.input_dim,
            extractor_hidden: ext[..ext.len() - 1]
                .iter()
                .map(Linear::output_dim)
                .collect(),
            feature_dim: self.extractor.feature_dim,
            hidden: self.modules[0].hidden(),
            m: self.m,
            layers: self.modules.len(),
        }
    }
}

/// Flat access to every trainable tensor, in declaration order.
pub trait ParamTensors {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        debug_assert_eq!(off, flat.len());
    }

    fn fill(&mut self, v: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = v);
        }
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut out = self.clone();
        out.fill(0.0);
        out
    }

    /// `self += s * other`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, s: f64)
    where
        Self: Sized,
    {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }
}

impl ParamTensors for Linear {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.weight.as_slice(), &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.as_mut_slice(), &mut self.bias]
    }
}

impl ParamTensors for ExtractorParams {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.tensors_mut())
            .collect()
    }
}

impl ParamTensors for ModuleParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.w1.as_slice(), &self.b1, self.w2.as_slice(), &self.b2]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
        ]
    }
}

impl ParamTensors for PipelineParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = self.extractor.tensors();
        for m in &self.modules {
            out.extend(m.tensors());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.extractor.tensors_mut();
        for m in &mut self.modules {
            out.extend(m.tensors_mut());
        }
        out
    }
}

/// Scaled-uniform initialization (`U(-1/sqrt(fan_in), 1/sqrt(fan_in))`), zero biases.
pub fn init_pipeline(seed: u64, dims: &PipelineDims) -> Result<PipelineParams> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut widths = vec![dims.input_dim];
    widths.extend(&dims.extractor_hidden);
    widths.push(dims.feature_dim);
    let layers = widths
        .windows(2)
        .map(|w| Linear::init(w[0], w[1], &mut rng))
        .collect();
    let modules = (0..dims.layers)
        .map(|_| {
            let l1 = Linear::init(dims.m + dims.feature_dim, dims.hidden, &mut rng);
            let l2 = Linear::init(dims.hidden, dims.m, &mut rng);
            ModuleParams {
                w1: l1.weight,
                b1: l1.bias,
                w2: l2.weight,
                b2: l2.bias,
            }
        })
        .collect();
    Ok(PipelineParams {
        extractor: ExtractorParams {
            layers,
            input_dim: dims.input_dim,
            feature_dim: dims.feature_dim,
        },
        modules,
        m: dims.m,
        alpha: DEFAULT_ALPHA,
    })
}

/// Activations kept by the extractor for its backward pass.
#[derive(Clone, Debug)]
pub struct ExtractorCache {
    /// Input of every layer; `inputs[0]` is the raw batch.
    pub inputs: Vec<Mat>,
    /// Pre-activations of the hidden (rectified) layers.
    pub pre: Vec<Mat>,
}

impl ExtractorCache {
    pub fn bytes(&self) -> usize {
        self.inputs.iter().chain(&self.pre).map(Mat::bytes).sum()
    }

    pub fn batch_size(&self) -> usize {
        self.inputs[0].rows()
    }
}

/// Activations kept by one processing module for its backward pass.
#[derive(Clone, Debug)]
pub struct ModuleCache {
    /// Index of the module that produced this cache (1-based; 0 when untagged).
    pub owner: usize,
    /// `concat(p_prev, z)`.
    pub input: Mat,
    pub hidden_pre: Mat,
    pub hidden: Mat,
    pub logits: Mat,
}

impl ModuleCache {
    pub fn bytes(&self) -> usize {
        self.input.bytes() + self.hidden_pre.bytes() + self.hidden.bytes() + self.logits.bytes()
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    /// The belief this module received.
    pub fn input_belief(&self) -> Mat {
        self.input.col_range(0, self.logits.cols())
    }
}

/// Bytes a module cache occupies for a given batch and shape.
pub fn module_cache_bytes(batch: usize, m: usize, feature_dim: usize, hidden: usize) -> usize {
    batch * (m + feature_dim + 2 * hidden + m) * std::mem::size_of::<f64>()
}

pub fn extractor_forward(
    x: &Mat,
    params: &ExtractorParams,
    keep_cache: bool,
) -> Result<(Mat, Option<ExtractorCache>)> {
    if x.cols() != params.input_dim {
        return Err(SidError::dim(format!(
            "extractor expects {} input features, got {}",
            params.input_dim,
            x.cols()
        )));
    }
    let last = params.layers.len() - 1;
    let mut inputs = Vec::new();
    let mut pre_acts = Vec::new();
    let mut h = x.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let pre = layer.forward(&h)?;
        let next = if l < last { pre.relu() } else { pre.clone() };
        if keep_cache {
            inputs.push(std::mem::replace(&mut h, next));
            if l < last {
                pre_acts.push(pre);
            }
        } else {
            h = next;
        }
    }
    let cache = keep_cache.then_some(ExtractorCache {
        inputs,
        pre: pre_acts,
    });
    Ok((h, cache))
}

/// Logits of one module given the incoming beliefs and shared features.
pub fn module_forward(
    p_prev: &Mat,
    z: &Mat,
    params: &ModuleParams,
    keep_cache: bool,
) -> Result<(Mat, Option<ModuleCache>)> {
    if p_prev.cols() != params.classes() {
        return Err(SidError::dim(format!(
            "module expects beliefs over {} classes, got {}",
            params.classes(),
            p_prev.cols()
        )));
    }
    if z.cols() != params.feature_dim() {
        return Err(SidError::dim(format!(
            "module expects {} features, got {}",
            params.feature_dim(),
            z.cols()
        )));
    }
    let input = p_prev.hcat(z)?;
    let mut hidden_pre = input.matmul_t(&params.w1)?;
    hidden_pre.add_row(&params.b1);
    let hidden = hidden_pre.relu();
    let mut logits = hidden.matmul_t(&params.w2)?;
    logits.add_row(&params.b2);
    let cache = keep_cache.then(|| ModuleCache {
        owner: 0,
        input,
        hidden_pre,
        hidden,
        logits: logits.clone(),
    });
    Ok((logits, cache))
}

/// Uniform beliefs for a batch.
pub fn uniform_beliefs(batch: usize, m: usize) -> Mat {
    Mat::broadcast_row(&vec![1.0 / m as f64; m], batch)
}

/// Beliefs `p_0..p_upto` from features `z`, without caches.
pub(crate) fn belief_chain(z: &Mat, params: &PipelineParams, upto: usize) -> Result<Vec<Mat>> {
    let mut beliefs = Vec::with_capacity(upto + 1);
    beliefs.push(uniform_beliefs(z.rows(), params.m));
    for module in &params.modules[..upto] {
        let (logits, _) = module_forward(beliefs.last().unwrap(), z, module, false)?;
        beliefs.push(softmax_rows(&logits));
    }
    Ok(beliefs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    /// `p_0..p_L`, each a batch of beliefs.
    pub beliefs: Vec<Mat>,
    pub predictions: Vec<usize>,
}

impl PipelineOutput {
    /// Belief trace of one sample across all stages.
    pub fn sample_beliefs(&self, i: usize) -> Vec<Belief> {
        self.beliefs
            .iter()
            .map(|b| Belief::from_row_unchecked(b.row(i)))
            .collect()
    }
}

/// Plain inference pass: no caches, no gradients.
pub fn pipeline_forward(x: &Mat, params: &PipelineParams) -> Result<PipelineOutput> {
    let (z, _) = extractor_forward(x, &params.extractor, false)?;
    let beliefs = belief_chain(&z, params, params.depth())?;
    let last = beliefs.last().unwrap();
    let predictions = last.iter_rows().map(argmax).collect();
    Ok(PipelineOutput {
        beliefs,
        predictions,
    })
}

/// Writes the binary checkpoint: magic, little-endian u32 dims, then every
/// tensor as little-endian f64 in declaration order, then `alpha`.
pub fn write_checkpoint<W: Write>(params: &PipelineParams, mut w: W) -> Result<()> {
    let dims = params.dims();
    w.write_all(CHECKPOINT_MAGIC)?;
    let mut header = vec![
        dims.input_dim,
        dims.feature_dim,
        dims.hidden,
        dims.m,
        dims.layers,
        dims.extractor_hidden.len(),
    ];
    header.extend(&dims.extractor_hidden);
    for d in header {
        let d = u32::try_from(d).map_err(|_| SidError::param("dimension exceeds u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for t in params.tensors() {
        for v in t {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.write_all(&params.alpha.to_le_bytes())?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<PipelineParams> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if bytes.len() < off + n {
            return Err(SidError::Format {
                offset: off,
                msg: format!("truncated checkpoint while reading {what}"),
            });
        }
        let s = &bytes[off..off + n];
        off += n;
        Ok(s)
    };
    if take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(SidError::Format {
            offset: 0,
            msg: "bad checkpoint magic".into(),
        });
    }
    let mut read_u32 = |what: &str| -> Result<usize> {
        Ok(u32::from_le_bytes(take(4, what)?.try_into().unwrap()) as usize)
    };
    let input_dim = read_u32("input_dim")?;
    let feature_dim = read_u32("feature_dim")?;
    let hidden = read_u32("hidden")?;
    let m = read_u32("m")?;
    let layers = read_u32("layers")?;
    let n_hidden = read_u32("extractor depth")?;
    let extractor_hidden = (0..n_hidden)
        .map(|_| read_u32("extractor width"))
        .collect::<Result<Vec<_>>>()?;
    let dims = PipelineDims {
        input_dim,
        extractor_hidden,
        feature_dim,
        hidden,
        m,
        layers,
    };
    dims.validate()?;
    let need = dims
        .num_params()
        .and_then(|n| n.checked_add(1)?.checked_mul(8))
        .ok_or_else(|| SidError::Format {
            offset: off,
            msg: format!("checkpoint header is implausibly large: {dims:?}"),
        })?;
    let payload = &bytes[off..];
    if payload.len() != need {
        let kind = if payload.len() < need {
            "truncated checkpoint"
        } else {
            "trailing bytes after checkpoint payload"
        };
        return Err(SidError::Format {
            offset: off + payload.len().min(need),
            msg: format!("{kind}: weights need {need} bytes, have {}", payload.len()),
        });
    }
    let mut flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut params = init_pipeline(0, &dims)?;
    params.alpha = flat.pop().unwrap();
    params.assign_flat(&flat);
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::MASS_TOLERANCE;

    fn dims(layers: usize) -> PipelineDims {
        PipelineDims::new(3, 4, 5, 3, layers)
    }

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        Mat::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_pipeline(7, &dims(2)).unwrap();
        let b = init_pipeline(7, &dims(2)).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        let c = init_pipeline(8, &dims(2)).unwrap();
        assert_ne!(a.flatten(), c.flatten());
        let single = init_pipeline(1, &dims(1)).unwrap();
        assert_eq!(single.depth(), 1);
        assert!(init_pipeline(1, &dims(0)).is_err());
        assert!(init_pipeline(1, &PipelineDims::new(3, 4, 5, 1, 2)).is_err());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let p = init_pipeline(3, &dims(2)).unwrap();
        let b1 = 1.0 / 3f64.sqrt();
        assert!(p.extractor.layers[0]
            .weight
            .as_slice()
            .iter()
            .all(|w| w.abs() <= b1));
        assert!(p.modules[0].b1.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn extractor_zero_and_identity() {
        let mut p = init_pipeline(1, &dims(1)).unwrap();
        p.extractor.fill(0.0);
        let x = random_batch(4, 3, 2);
        let (z, _) = extractor_forward(&x, &p.extractor, false).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));

        let mut eye = Linear::zeros(3, 3);
        for i in 0..3 {
            eye.weight.set(i, i, 1.0);
        }
        let ident = ExtractorParams {
            layers: vec![eye],
            input_dim: 3,
            feature_dim: 3,
        };
        let x = x.map(f64::abs);
        let (z, _) = extractor_forward(&x, &ident, false).unwrap();
        assert_eq!(z, x);
        let bad = random_batch(2, 4, 1);
        assert!(matches!(
            extractor_forward(&bad, &ident, false),
            Err(SidError::Dimension(_))
        ));
    }

    #[test]
    fn cache_is_observationally_inert() {
        let p = init_pipeline(5, &dims(2)).unwrap();
        let x = random_batch(6, 3, 9);
        let (z0, c0) = extractor_forward(&x, &p.extractor, false).unwrap();
        let (z1, c1) = extractor_forward(&x, &p.extractor, true).unwrap();
        assert_eq!(z0, z1);
        assert!(c0.is_none());
        assert!(c1.unwrap().bytes() > 0);
        let pb = uniform_beliefs(6, 3);
        let (l0, m0) = module_forward(&pb, &z0, &p.modules[0], false).unwrap();
        let (l1, m1) = module_forward(&pb, &z0, &p.modules[0], true).unwrap();
        assert_eq!(l0, l1);
        assert!(m0.is_none());
        assert_eq!(m1.unwrap().bytes(), module_cache_bytes(6, 3, 4, 5));
    }

    #[test]
    fn zero_module_gives_uniform_belief() {
        let mut p = init_pipeline(5, &dims(1)).unwrap();
        p.modules[0].fill(0.0);
        let out = pipeline_forward(&random_batch(3, 3, 1), &p).unwrap();
        assert!(out.beliefs[1]
            .as_slice()
            .iter()
            .all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(out.predictions, vec![0, 0, 0]);
    }

    #[test]
    fn module_output_beliefs_are_valid() {
        for seed in 0..1000 {
            let p = init_pipeline(seed, &dims(1)).unwrap();
            let z = random_batch(1, 4, seed + 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f64> = (0..3).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = w.iter().sum();
            let pb = Mat::from_vec(1, 3, w.iter().map(|v| v / s).collect()).unwrap();
            let (logits, _) = module_forward(&pb, &z, &p.modules[0], false).unwrap();
            let b = softmax_rows(&logits);
            let mass: f64 = b.as_slice().iter().sum();
            assert!((mass - 1.0).abs() <= MASS_TOLERANCE);
            assert!(b.as_slice().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn feature_permutation_invariance() {
        let p = init_pipeline(11, &dims(1)).unwrap();
        let module = &p.modules[0];
        let z = random_batch(3, 4, 4);
        let pb = uniform_beliefs(3, 3);
        let perm = [2usize, 0, 3, 1];
        let mut zp = z.clone();
        let mut mp = module.clone();
        for r in 0..3 {
            for (j, &src) in perm.iter().enumerate() {
                zp.set(r, j, z.get(r, src));
            }
        }
        for h in 0..module.hidden() {
            for (j, &src) in perm.iter().enumerate() {
                mp.w1.set(h, 3 + j, module.w1.get(h, 3 + src));
            }
        }
        let (a, _) = module_forward(&pb, &z, module, false).unwrap();
        let (b, _) = module_forward(&pb, &zp, &mp, false).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn pipeline_structure() {
        for layers in 1..5 {
            let p = init_pipeline(2, &dims(layers)).unwrap();
            let x = Mat::broadcast_row(&[0.3, -1.0, 2.0], 4);
            let out = pipeline_forward(&x, &p).unwrap();
            assert_eq!(out.beliefs.len(), layers + 1);
            let last = out.beliefs.last().unwrap();
            for i in 1..4 {
                assert_eq!(last.row(i), last.row(0));
            }
        }
    }

    #[test]
    fn module_shape_errors() {
        let p = init_pipeline(2, &dims(1)).unwrap();
        let z = random_batch(2, 4, 0);
        assert!(module_forward(&uniform_beliefs(2, 2), &z, &p.modules[0], false).is_err());
        assert!(module_forward(
            &uniform_beliefs(2, 3),
            &random_batch(2, 5, 0),
            &p.modules[0],
            false
        )
        .is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut p = init_pipeline(21, &dims(3)).unwrap();
        p.alpha = 0.3;
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 3);
        let expected = 8 + 4 * 7 + 8 * (p.num_params() + 1);
        assert_eq!(buf.len(), expected);
        let q = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(p, q);

        let err = read_checkpoint(&buf[..buf.len() - 3]).unwrap_err();
        assert!(matches!(err, SidError::Format { .. }));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_checkpoint(&bad[..]),
            Err(SidError::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn dims_count_matches_params() {
        for l in [1, 2, 5] {
            let d = dims(l);
            assert_eq!(
                d.num_params(),
                Some(init_pipeline(0, &d).unwrap().num_params())
            );
        }
        let huge = PipelineDims::new(usize::MAX, 2, 2, 2, 1);
        assert_eq!(huge.num_params(), None);
    }

    #[test]
    fn oversized_header_rejected_without_allocating() {
        let p = init_pipeline(21, &dims(1)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        // layers field
        buf[24..28].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            read_checkpoint(&buf[..]),
            Err(SidError::Format { .. })
        ));
        let mut trailing = Vec::new();
        write_checkpoint(&p, &mut trailing).unwrap();
        trailing.push(0);
        assert!(matches!(
            read_checkpoint(&trailing[..]),
            Err(SidError::Format { .. })
        ));
    }
}
