//! Central finite-difference check of `loss_and_grads` on a small model.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::EmbeddingTriple;
use crate::tcrnet::{init_params, loss_and_grads, Example, Labels, Mode, ModelConfig, ModelError, StreamSet, Task, TcrNetParams};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    pub task: Task,
    pub samples: usize,
    /// Masks are fixed by the seed, so the check also covers dropout.
    pub dropout: f64,
    pub epsilon: f64,
    pub streams: StreamSet,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            tokens: 5,
            dim: 8,
            heads: 2,
            task: Task::Intensity,
            samples: 2,
            dropout: 0.3,
            epsilon: 1e-3,
            streams: StreamSet::ALL,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per tensor, in parameter order.
    pub groups: Vec<(String, f64)>,
    pub checked: usize,
}

fn rel_error(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8)
}

fn flatten(p: &TcrNetParams) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    p.for_each_tensor(|name, t| out.push((name, t.to_vec())));
    out
}

fn nudge(p: &mut TcrNetParams, tensor: usize, elem: usize, delta: f64) {
    let mut idx = 0;
    p.for_each_tensor_mut(|_, t| {
        if idx == tensor {
            t[elem] += delta;
        }
        idx += 1;
    });
}

/// Compares analytic gradients against central differences for every
/// parameter. Relative error is `|a − fd| / max(|a|, |fd|, 1e-8)`.
pub fn gradcheck_params(
    params: &TcrNetParams,
    batch: &[Example<'_>],
    mode: Mode,
    epsilon: f64,
) -> Result<GradcheckReport, ModelError> {
    let (_, grads) = loss_and_grads(batch, params, mode)?;
    let analytic = flatten(&grads);
    let mut work = params.clone();
    let mut groups = Vec::new();
    let mut checked = 0;
    for (ti, (name, g)) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for (ei, &a) in g.iter().enumerate() {
            nudge(&mut work, ti, ei, epsilon);
            let (plus, _) = loss_and_grads(batch, &work, mode)?;
            nudge(&mut work, ti, ei, -2.0 * epsilon);
            let (minus, _) = loss_and_grads(batch, &work, mode)?;
            nudge(&mut work, ti, ei, epsilon);
            let fd = (plus - minus) / (2.0 * epsilon);
            worst = worst.max(rel_error(a, fd));
            checked += 1;
        }
        groups.push((name.clone(), worst));
    }
    let max_rel_error = groups.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradcheckReport { max_rel_error, groups, checked })
}

/// Random model and data from `seed`, then [`gradcheck_params`].
pub fn gradcheck(config: &GradcheckConfig, seed: u64) -> Result<GradcheckReport, ModelError> {
    let model = ModelConfig {
        dim: config.dim,
        heads: config.heads,
        dropout: config.dropout,
        streams: config.streams,
        tasks: vec![config.task],
    };
    let params = init_params(&model, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let matrix = |rng: &mut ChaCha8Rng| Array2::from_shape_fn((config.tokens, config.dim), |_| rng.random_range(-1.0f32..1.0));
    let triples: Vec<EmbeddingTriple> = (0..config.samples)
        .map(|_| EmbeddingTriple {
            text: matrix(&mut rng),
            reasoning: matrix(&mut rng),
            image: matrix(&mut rng),
        })
        .collect();
    let classes = config.task.num_classes();
    let batch: Vec<Example<'_>> = triples
        .iter()
        .enumerate()
        .map(|(i, t)| Example { triple: t, labels: Labels::single(config.task, i % classes) })
        .collect();
    let mode = if config.dropout > 0.0 { Mode::Train { seed } } else { Mode::Eval };
    gradcheck_params(&params, &batch, mode, config.epsilon)
}
