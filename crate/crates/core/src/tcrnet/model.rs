use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::attention::{cross_attention, cross_attention_backward, AttentionCache, AttentionParams};
use super::{Flow, ModelError, StreamSet, Task};
use crate::data::{EmbeddingTriple, Stream, DEFAULT_MODEL_DIM};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub streams: StreamSet,
    pub tasks: Vec<Task>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: DEFAULT_MODEL_DIM,
            heads: 8,
            dropout: 0.3,
            streams: StreamSet::ALL,
            tasks: vec![Task::DarkHumor],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.streams.len() < 2 {
            return Err(ModelError::TooFewStreams(self.streams));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "{} heads do not divide model dim {}",
                self.heads, self.dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.tasks.is_empty() {
            return Err(ModelError::InvalidConfig("no tasks".into()));
        }
        let mut seen = self.tasks.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.tasks.len() {
            return Err(ModelError::InvalidConfig("duplicate task".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowParams {
    pub flow: Flow,
    pub attn: AttentionParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub task: Task,
    /// `fused_dim × classes`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// All learnable tensors plus the structural settings they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct TcrNetParams {
    pub dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub streams: StreamSet,
    pub flows: Vec<FlowParams>,
    pub classifiers: Vec<ClassifierHead>,
}

impl TcrNetParams {
    pub fn fused_dim(&self) -> usize {
        self.dim * self.flows.len()
    }

    pub fn head(&self, task: Task) -> Result<&ClassifierHead, ModelError> {
        self.classifiers
            .iter()
            .find(|c| c.task == task)
            .ok_or(ModelError::MissingHead(task))
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.classifiers.iter().map(|c| c.task).collect()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_tensor_mut(|_, t| t.fill(0.0));
        z
    }

    /// Visits every tensor in a fixed order: per flow `w_q, w_k, w_v, w_o`,
    /// then per classifier `weight, bias`.
    pub fn for_each_tensor(&self, mut f: impl FnMut(String, &[f64])) {
        for fp in &self.flows {
            for (name, m) in ["w_q", "w_k", "w_v", "w_o"].into_iter().zip(fp.attn.matrices()) {
                f(format!("{}.{name}", fp.flow), m.as_slice().expect("standard layout"));
            }
        }
        for c in &self.classifiers {
            f(format!("classifier[{}].weight", c.task), c.weight.as_slice().expect("standard layout"));
            f(format!("classifier[{}].bias", c.task), c.bias.as_slice().expect("standard layout"));
        }
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(String, &mut [f64])) {
        for fp in &mut self.flows {
            let flow = fp.flow;
            for (name, m) in ["w_q", "w_k", "w_v", "w_o"].into_iter().zip(fp.attn.matrices_mut()) {
                f(format!("{flow}.{name}"), m.as_slice_mut().expect("standard layout"));
            }
        }
        for c in &mut self.classifiers {
            let task = c.task;
            f(format!("classifier[{task}].weight"), c.weight.as_slice_mut().expect("standard layout"));
            f(format!("classifier[{task}].bias"), c.bias.as_slice_mut().expect("standard layout"));
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, t| n += t.len());
        n
    }

    /// Elementwise `self += other`; both must share structure.
    pub fn add_assign(&mut self, other: &TcrNetParams) {
        let mut others = Vec::new();
        other.for_each_tensor(|_, t| others.push(t.to_vec()));
        let mut it = others.into_iter();
        self.for_each_tensor_mut(|_, t| {
            let o = it.next().expect("matching structure");
            t.iter_mut().zip(o).for_each(|(a, b)| *a += b);
        });
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.streams.len() < 2 {
            return Err(ModelError::TooFewStreams(self.streams));
        }
        let expected: Vec<Flow> = self.streams.flows();
        let actual: Vec<Flow> = self.flows.iter().map(|f| f.flow).collect();
        if expected != actual {
            return Err(ModelError::ShapeMismatch(format!(
                "flows {actual:?} do not match streams {}",
                self.streams
            )));
        }
        for fp in &self.flows {
            fp.attn.validate()?;
            if fp.attn.dim() != self.dim || fp.attn.heads != self.heads {
                return Err(ModelError::ShapeMismatch(format!("flow {} has wrong dims", fp.flow)));
            }
        }
        for c in &self.classifiers {
            let classes = c.task.num_classes();
            if c.weight.dim() != (self.fused_dim(), classes) || c.bias.len() != classes {
                return Err(ModelError::ShapeMismatch(format!(
                    "classifier for {} is {:?}, expected ({}, {classes})",
                    c.task,
                    c.weight.dim(),
                    self.fused_dim()
                )));
            }
        }
        Ok(())
    }
}

fn uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Seeded initialization: every weight uniform in `±1/√fan_in`, classifier
/// biases zero. Projections for all three flows are always drawn, so a model
/// with streams removed shares its surviving projections with the full model
/// built from the same seed.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<TcrNetParams, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.dim;
    let mut flows = Vec::new();
    for flow in Flow::CANONICAL {
        let attn = AttentionParams {
            w_q: uniform(d, d, d, &mut rng),
            w_k: uniform(d, d, d, &mut rng),
            w_v: uniform(d, d, d, &mut rng),
            w_o: uniform(d, d, d, &mut rng),
            heads: config.heads,
        };
        if config.streams.contains(flow.query) && config.streams.contains(flow.context) {
            flows.push(FlowParams { flow, attn });
        }
    }
    let fused = d * flows.len();
    let classifiers = config
        .tasks
        .iter()
        .map(|&task| ClassifierHead {
            task,
            weight: uniform(fused, task.num_classes(), fused, &mut rng),
            bias: Array1::zeros(task.num_classes()),
        })
        .collect();
    Ok(TcrNetParams {
        dim: d,
        heads: config.heads,
        dropout: config.dropout,
        streams: config.streams,
        flows,
        classifiers,
    })
}

/// Drops every flow touching a removed stream and the matching classifier
/// rows.
pub fn ablate(template: &TcrNetParams, keep: StreamSet) -> Result<TcrNetParams, ModelError> {
    if keep.len() < 2 {
        return Err(ModelError::TooFewStreams(keep));
    }
    if keep.bits() & !template.streams.bits() != 0 {
        return Err(ModelError::InvalidConfig(format!(
            "cannot keep {keep}: template only has {}",
            template.streams
        )));
    }
    let d = template.dim;
    let kept: Vec<usize> = template
        .flows
        .iter()
        .enumerate()
        .filter(|(_, f)| keep.contains(f.flow.query) && keep.contains(f.flow.context))
        .map(|(i, _)| i)
        .collect();
    let flows = kept.iter().map(|&i| template.flows[i].clone()).collect();
    let classifiers = template
        .classifiers
        .iter()
        .map(|c| {
            let mut weight = Array2::zeros((d * kept.len(), c.weight.ncols()));
            for (new, &old) in kept.iter().enumerate() {
                weight
                    .slice_mut(s![new * d..(new + 1) * d, ..])
                    .assign(&c.weight.slice(s![old * d..(old + 1) * d, ..]));
            }
            ClassifierHead {
                task: c.task,
                weight,
                bias: c.bias.clone(),
            }
        })
        .collect();
    Ok(TcrNetParams {
        streams: keep,
        flows,
        classifiers,
        ..template.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active; masks are drawn from `seed`.
    Train { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct FlowTrace {
    pub flow: Flow,
    pub attended: Array2<f64>,
    pub pooled: Array1<f64>,
    pub cache: AttentionCache,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub flows: Vec<FlowTrace>,
    /// Concatenated pooled vectors before dropout.
    pub fused: Array1<f64>,
    /// Scaled dropout mask applied to `fused` in train mode.
    pub fused_mask: Option<Array1<f64>>,
    pub logits: Vec<(Task, Array1<f64>)>,
}

impl ForwardTrace {
    pub fn flow(&self, flow: Flow) -> Result<&FlowTrace, ModelError> {
        self.flows
            .iter()
            .find(|f| f.flow == flow)
            .ok_or(ModelError::InactiveFlowRequested(flow))
    }

    pub fn logits(&self, task: Task) -> Result<&Array1<f64>, ModelError> {
        self.logits
            .iter()
            .find(|(t, _)| *t == task)
            .map(|(_, l)| l)
            .ok_or(ModelError::MissingHead(task))
    }

    /// Highest-scoring class; ties go to the lowest index.
    pub fn predict(&self, task: Task) -> Result<usize, ModelError> {
        let logits = self.logits(task)?;
        Ok(argmax(logits))
    }

    fn dropped_fused(&self) -> Array1<f64> {
        match &self.fused_mask {
            Some(m) => &self.fused * m,
            None => self.fused.clone(),
        }
    }
}

fn argmax(v: &Array1<f64>) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

fn stream_f64(triple: &EmbeddingTriple, s: Stream) -> Array2<f64> {
    triple.stream(s).mapv(f64::from)
}

fn check_input(triple: &EmbeddingTriple, params: &TcrNetParams) -> Result<(), ModelError> {
    triple
        .validate()
        .map_err(|e| ModelError::ShapeMismatch(e.to_string()))?;
    if triple.dim() != params.dim {
        return Err(ModelError::ShapeMismatch(format!(
            "embeddings have dim {}, model expects {}",
            triple.dim(),
            params.dim
        )));
    }
    if triple.tokens() == 0 {
        return Err(ModelError::ShapeMismatch("zero tokens".into()));
    }
    Ok(())
}

/// Mixes a batch-level seed with a sample index (splitmix64 finalizer).
fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn forward(triple: &EmbeddingTriple, params: &TcrNetParams, mode: Mode) -> Result<ForwardTrace, ModelError> {
    params.validate()?;
    check_input(triple, params)?;
    let mut rng = match mode {
        Mode::Train { seed } if params.dropout > 0.0 => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    let streams: Vec<(Stream, Array2<f64>)> = Stream::ALL
        .into_iter()
        .filter(|s| params.streams.contains(*s))
        .map(|s| (s, stream_f64(triple, s)))
        .collect();
    let get = |s: Stream| {
        streams
            .iter()
            .find(|(k, _)| *k == s)
            .map(|(_, m)| m.view())
            .expect("stream present for active flow")
    };

    let mut flows = Vec::with_capacity(params.flows.len());
    let mut fused = Array1::zeros(params.fused_dim());
    for (i, fp) in params.flows.iter().enumerate() {
        let dropout = rng.as_mut().map(|r| (params.dropout, r));
        let (attended, cache) = cross_attention(get(fp.flow.query), get(fp.flow.context), &fp.attn, dropout)?;
        let pooled = attended.mean_axis(Axis(0)).expect("nonempty token axis");
        fused.slice_mut(s![i * params.dim..(i + 1) * params.dim]).assign(&pooled);
        flows.push(FlowTrace {
            flow: fp.flow,
            attended,
            pooled,
            cache,
        });
    }
    let fused_mask = rng.as_mut().map(|r| {
        let keep = 1.0 - params.dropout;
        Array1::from_shape_fn(fused.len(), |_| if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
    });
    let mut trace = ForwardTrace {
        flows,
        fused,
        fused_mask,
        logits: Vec::new(),
    };
    let input = trace.dropped_fused();
    trace.logits = params
        .classifiers
        .iter()
        .map(|c| (c.task, input.dot(&c.weight) + &c.bias))
        .collect();
    Ok(trace)
}

/// Per-task gold labels for one example; `None` where the task does not
/// apply.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Labels([Option<usize>; 3]);

impl Labels {
    pub fn single(task: Task, label: usize) -> Self {
        let mut l = Labels::default();
        l.set(task, Some(label));
        l
    }

    pub fn get(&self, task: Task) -> Option<usize> {
        self.0[usize::from(task.code())]
    }

    pub fn set(&mut self, task: Task, label: Option<usize>) {
        self.0[usize::from(task.code())] = label;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub triple: &'a EmbeddingTriple,
    pub labels: Labels,
}

fn log_softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.mapv(|v| (v - max).exp()).sum().ln();
    logits.mapv(|v| v - lse)
}

fn sample_loss_and_grads(
    example: &Example<'_>,
    params: &TcrNetParams,
    mode: Mode,
    counts: &[(Task, usize)],
) -> Result<(f64, TcrNetParams), ModelError> {
    let trace = forward(example.triple, params, mode)?;
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    let input = trace.dropped_fused();
    let mut d_input = Array1::<f64>::zeros(params.fused_dim());

    for (ci, head) in params.classifiers.iter().enumerate() {
        let Some(label) = example.labels.get(head.task) else {
            continue;
        };
        let n = counts.iter().find(|(t, _)| *t == head.task).map_or(1, |(_, n)| *n) as f64;
        let logp = log_softmax(trace.logits(head.task)?);
        loss -= logp[label] / n;
        let mut g = logp.mapv(f64::exp);
        g[label] -= 1.0;
        g /= n;
        let gh = &mut grads.classifiers[ci];
        gh.weight += &input
            .view()
            .insert_axis(Axis(1))
            .dot(&g.view().insert_axis(Axis(0)));
        gh.bias += &g;
        d_input += &head.weight.dot(&g);
    }

    let d_fused = match &trace.fused_mask {
        Some(m) => d_input * m,
        None => d_input,
    };
    let streams = |s: Stream| stream_f64(example.triple, s);
    for (i, (fp, ft)) in params.flows.iter().zip(&trace.flows).enumerate() {
        let d_pooled = d_fused.slice(s![i * params.dim..(i + 1) * params.dim]);
        let rows = ft.attended.nrows();
        let d_attended = d_pooled
            .mapv(|v| v / rows as f64)
            .insert_axis(Axis(0))
            .broadcast((rows, params.dim))
            .expect("broadcast pooled gradient")
            .to_owned();
        let x = streams(fp.flow.query);
        let y = streams(fp.flow.context);
        grads.flows[i].attn = cross_attention_backward(d_attended.view(), x.view(), y.view(), &fp.attn, &ft.cache);
    }
    Ok((loss, grads))
}

/// Mean cross-entropy over the batch (summed across tasks when the model has
/// several heads, each task averaged over the examples labelled for it) and
/// its gradient with respect to every parameter.
///
/// In train mode example `i` draws its dropout masks from a seed derived
/// from `(seed, i)`. Per-example gradients are computed in parallel and
/// summed in index order, so the result does not depend on thread count.
pub fn loss_and_grads(
    batch: &[Example<'_>],
    params: &TcrNetParams,
    mode: Mode,
) -> Result<(f64, TcrNetParams), ModelError> {
    params.validate()?;
    let mut counts: Vec<(Task, usize)> = params.classifiers.iter().map(|c| (c.task, 0)).collect();
    for ex in batch {
        for (task, n) in counts.iter_mut() {
            if let Some(label) = ex.labels.get(*task) {
                let classes = task.num_classes();
                if label >= classes {
                    return Err(ModelError::LabelOutOfRange { task: *task, label, classes });
                }
                *n += 1;
            }
        }
    }
    if counts.iter().all(|(_, n)| *n == 0) {
        return Err(ModelError::EmptyBatch);
    }

    let sample_mode = |i: usize| match mode {
        Mode::Eval => Mode::Eval,
        Mode::Train { seed } => Mode::Train { seed: sample_seed(seed, i) },
    };
    let mut total_loss = 0.0;
    let mut total = params.zeros_like();
    let chunk = rayon::current_num_threads().max(1);
    for (c, examples) in batch.chunks(chunk).enumerate() {
        let results: Vec<_> = examples
            .par_iter()
            .enumerate()
            .map(|(j, ex)| sample_loss_and_grads(ex, params, sample_mode(c * chunk + j), &counts))
            .collect();
        for r in results {
            let (loss, grads) = r?;
            total_loss += loss;
            total.add_assign(&grads);
        }
    }
    Ok((total_loss, total))
}
