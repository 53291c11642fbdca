use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::ModelError;

/// Projections for one directed flow. All matrices are `d × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub heads: usize,
}

impl AttentionParams {
    pub fn zeros(dim: usize, heads: usize) -> Self {
        AttentionParams {
            w_q: Array2::zeros((dim, dim)),
            w_k: Array2::zeros((dim, dim)),
            w_v: Array2::zeros((dim, dim)),
            w_o: Array2::zeros((dim, dim)),
            heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let d = self.dim();
        if self.heads == 0 || d % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "{} heads do not divide model dim {d}",
                self.heads
            )));
        }
        for (name, w) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_o", &self.w_o)] {
            if w.dim() != (d, d) {
                return Err(ModelError::ShapeMismatch(format!("{name} is {:?}, expected ({d}, {d})", w.dim())));
            }
        }
        Ok(())
    }

    pub fn matrices(&self) -> [&Array2<f64>; 4] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o]
    }

    pub fn matrices_mut(&mut self) -> [&mut Array2<f64>; 4] {
        [&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o]
    }
}

/// Intermediates kept from the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Softmax weights per head, `L_x × L_y`, before dropout.
    pub weights: Vec<Array2<f64>>,
    /// Per-head dropout masks already scaled by `1 / (1 - p)`.
    pub masks: Option<Vec<Array2<f64>>>,
    /// Concatenated head outputs before the output projection.
    pub concat: Array2<f64>,
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn check_finite(name: &str, m: ArrayView2<f64>) -> Result<(), ModelError> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFiniteInput(name.to_string()))
    }
}

/// Multi-head scaled dot-product attention with queries from `f_x` and keys
/// and values from `f_y`:
///
/// `concat_h( softmax(Q_h K_hᵀ / √d_k) V_h ) · W_o`
///
/// When `dropout` is given, each attention weight is zeroed with
/// probability `p` and survivors are scaled by `1 / (1 - p)`.
pub fn cross_attention<R: Rng>(
    f_x: ArrayView2<f64>,
    f_y: ArrayView2<f64>,
    params: &AttentionParams,
    dropout: Option<(f64, &mut R)>,
) -> Result<(Array2<f64>, AttentionCache), ModelError> {
    params.validate()?;
    let d = params.dim();
    if f_x.ncols() != d || f_y.ncols() != d {
        return Err(ModelError::ShapeMismatch(format!(
            "inputs have {} and {} columns, model dim is {d}",
            f_x.ncols(),
            f_y.ncols()
        )));
    }
    if f_x.nrows() == 0 || f_y.nrows() == 0 {
        return Err(ModelError::ShapeMismatch("empty token axis".into()));
    }
    check_finite("query stream", f_x)?;
    check_finite("context stream", f_y)?;

    let dk = params.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let q = f_x.dot(&params.w_q);
    let k = f_y.dot(&params.w_k);
    let v = f_y.dot(&params.w_v);
    let mut concat = Array2::zeros((f_x.nrows(), d));
    let mut weights = Vec::with_capacity(params.heads);
    let mut masks = dropout.as_ref().map(|_| Vec::with_capacity(params.heads));
    let mut dropout = dropout;

    for h in 0..params.heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let mut a = q.slice(cols).dot(&k.slice(cols).t());
        a.mapv_inplace(|x| x * scale);
        softmax_rows(&mut a);
        let head_out = match (&mut dropout, &mut masks) {
            (Some((p, rng)), Some(masks)) => {
                let keep = 1.0 - *p;
                let mask = Array2::from_shape_fn(a.dim(), |_| {
                    if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }
                });
                let out = (&a * &mask).dot(&v.slice(cols));
                masks.push(mask);
                out
            }
            _ => a.dot(&v.slice(cols)),
        };
        concat.slice_mut(cols).assign(&head_out);
        weights.push(a);
    }
    let out = concat.dot(&params.w_o);
    Ok((out, AttentionCache { q, k, v, weights, masks, concat }))
}

/// Gradients of the four projections given the upstream gradient `d_out`
/// (same shape as the forward output).
pub fn cross_attention_backward(
    d_out: ArrayView2<f64>,
    f_x: ArrayView2<f64>,
    f_y: ArrayView2<f64>,
    params: &AttentionParams,
    cache: &AttentionCache,
) -> AttentionParams {
    let d = params.dim();
    let dk = params.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();

    let w_o = cache.concat.t().dot(&d_out);
    let d_concat = d_out.dot(&params.w_o.t());
    let mut dq = Array2::zeros(cache.q.dim());
    let mut dk_all = Array2::zeros(cache.k.dim());
    let mut dv = Array2::zeros(cache.v.dim());

    for h in 0..params.heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let a = &cache.weights[h];
        let d_head = d_concat.slice(cols);
        let vh = cache.v.slice(cols);
        let (dropped, mut da) = match &cache.masks {
            Some(masks) => {
                let mask = &masks[h];
                (a * mask, d_head.dot(&vh.t()) * mask)
            }
            None => (a.clone(), d_head.dot(&vh.t())),
        };
        dv.slice_mut(cols).assign(&dropped.t().dot(&d_head));
        // softmax backward: dS = A ⊙ (dA − rowsum(dA ⊙ A))
        let row_dot = (&da * a).sum_axis(Axis(1));
        Zip::from(da.rows_mut()).and(&row_dot).for_each(|mut row, &c| row -= c);
        da *= a;
        da.mapv_inplace(|x| x * scale);
        dq.slice_mut(cols).assign(&da.dot(&cache.k.slice(cols)));
        dk_all.slice_mut(cols).assign(&da.t().dot(&cache.q.slice(cols)));
    }
    debug_assert_eq!(w_o.dim(), (d, d));
    AttentionParams {
        w_q: f_x.t().dot(&dq),
        w_k: f_y.t().dot(&dk_all),
        w_v: f_y.t().dot(&dv),
        w_o,
        heads: params.heads,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type NoRng = ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn random_params(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> AttentionParams {
        AttentionParams {
            w_q: random(d, d, rng),
            w_k: random(d, d, rng),
            w_v: random(d, d, rng),
            w_o: random(d, d, rng),
            heads,
        }
    }

    #[test]
    fn single_key_returns_value_times_output_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(8, 2, &mut rng);
        let x = random(3, 8, &mut rng);
        let y = random(1, 8, &mut rng);
        let (out, cache) = cross_attention::<NoRng>(x.view(), y.view(), &p, None).unwrap();
        let expected = y.dot(&p.w_v).dot(&p.w_o);
        for row in out.rows() {
            assert_eq!(row, expected.row(0));
        }
        assert!(cache.weights.iter().all(|w| w.iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn zero_query_key_projections_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = random_params(8, 4, &mut rng);
        p.w_q.fill(0.0);
        p.w_k.fill(0.0);
        let x = random(5, 8, &mut rng);
        let y = random(4, 8, &mut rng);
        let (out, cache) = cross_attention::<NoRng>(x.view(), y.view(), &p, None).unwrap();
        for w in &cache.weights {
            assert!(w.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
        let expected = y.dot(&p.w_v).mean_axis(Axis(0)).unwrap().dot(&p.w_o);
        for row in out.rows() {
            for (a, b) in row.iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_shapes_and_non_finite() {
        let p = AttentionParams::zeros(8, 3);
        let x = Array2::zeros((2, 8));
        assert!(matches!(
            cross_attention::<NoRng>(x.view(), x.view(), &p, None),
            Err(ModelError::InvalidConfig(_))
        ));
        let p = AttentionParams::zeros(8, 2);
        let y = Array2::zeros((2, 6));
        assert!(matches!(
            cross_attention::<NoRng>(x.view(), y.view(), &p, None),
            Err(ModelError::ShapeMismatch(_))
        ));
        let mut bad = Array2::zeros((2, 8));
        bad[[0, 3]] = f64::NAN;
        assert!(matches!(
            cross_attention::<NoRng>(x.view(), bad.view(), &p, None),
            Err(ModelError::NonFiniteInput(_))
        ));
    }

    #[test]
    fn dropout_keeps_weights_row_stochastic_and_masks_scaled() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(8, 2, &mut rng);
        let x = random(6, 8, &mut rng);
        let y = random(7, 8, &mut rng);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(9);
        let (_, cache) = cross_attention(x.view(), y.view(), &p, Some((0.3, &mut drop_rng))).unwrap();
        for w in &cache.weights {
            for row in w.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
        let masks = cache.masks.unwrap();
        let scaled = 1.0 / 0.7;
        assert!(masks.iter().flatten().all(|&m| m == 0.0 || m == scaled));
    }
}
