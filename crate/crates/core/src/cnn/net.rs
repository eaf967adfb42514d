use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::{Activation, LayerSpec, ModelSpec, Shape};
use crate::error::{Error, Result};
use crate::features::WindowSample;
use crate::rng::{seeded, LabRng};

/// Weights and bias of one trainable layer.
///
/// Convolution weights are stored as a `(kernel * in_channels, filters)`
/// matrix whose row `j * in_channels + c` holds tap `j` of input channel `c`.
/// Dense weights are `(inputs, units)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Param {
    fn zeros_like(&self) -> Param {
        Param {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn len(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Typical magnitude of raw input features (kilobits, seconds).
pub const INPUT_SCALE: f64 = 32.0;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Layer {
    Conv { kernel: usize, p: Param },
    Dropout(f64),
    MaxPool(usize),
    Flatten,
    Dense { activation: Activation, p: Param },
}

#[derive(Debug)]
pub(crate) enum LayerCache {
    Conv { cols: Array2<f64>, out: Array2<f64> },
    Dropout { mask: Option<Array2<f64>> },
    Pool { argmax: Vec<usize>, in_rows: usize },
    Flatten { rows: usize, channels: usize },
    Dense { input: Array2<f64>, out: Array2<f64> },
}

/// A model's layer graph with concrete weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: ModelSpec,
    pub(crate) layers: Vec<Layer>,
}

/// Expected `(rows, cols, bias)` of every trainable layer of `spec`.
pub(crate) fn param_shapes(spec: &ModelSpec) -> Result<Vec<(usize, usize, usize)>> {
    let shapes = spec.shapes()?;
    let mut input = Shape::Seq {
        len: spec.window,
        channels: spec.n_features,
    };
    let mut out = Vec::new();
    for (layer, shape) in spec.layers.iter().zip(&shapes) {
        match (*layer, input) {
            (LayerSpec::Conv1d { filters, kernel }, Shape::Seq { channels, .. }) => {
                out.push((kernel * channels, filters, filters));
            }
            (LayerSpec::Dense { units, .. }, Shape::Flat(n)) => out.push((n, units, units)),
            _ => {}
        }
        input = *shape;
    }
    Ok(out)
}

impl Network {
    /// Fan-in scaled uniform initialisation: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`
    /// for ReLU layers and `U(-sqrt(3/fan_in), sqrt(3/fan_in))` for the softmax
    /// layer. The first layer's range is further divided by [`INPUT_SCALE`]
    /// because raw features are not unit scale. Biases start at zero.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let shapes = param_shapes(&spec)?;
        let mut rng = seeded(seed);
        let mut params = Vec::with_capacity(shapes.len());
        let last = shapes.len() - 1;
        for (i, &(rows, cols, nb)) in shapes.iter().enumerate() {
            let gain = if i == last { 3.0 } else { 6.0 };
            let mut limit = (gain / rows as f64).sqrt();
            if i == 0 {
                limit /= INPUT_SCALE;
            }
            let w = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..limit));
            params.push(Param {
                w,
                b: Array1::zeros(nb),
            });
        }
        Self::from_params(spec, params)
    }

    pub fn from_params(spec: ModelSpec, params: Vec<Param>) -> Result<Self> {
        let shapes = param_shapes(&spec)?;
        if shapes.len() != params.len() {
            return Err(Error::Shape {
                expected: format!("{} trainable layers", shapes.len()),
                got: format!("{}", params.len()),
            });
        }
        for (i, ((r, c, nb), p)) in shapes.iter().zip(&params).enumerate() {
            if p.w.dim() != (*r, *c) || p.b.len() != *nb {
                return Err(Error::Shape {
                    expected: format!("layer {i}: {r}x{c} + {nb}"),
                    got: format!("{:?} + {}", p.w.dim(), p.b.len()),
                });
            }
        }
        let mut params = params.into_iter();
        let layers = spec
            .layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Conv1d { kernel, .. } => Layer::Conv {
                    kernel,
                    p: params.next().expect("checked count"),
                },
                LayerSpec::Dropout { rate } => Layer::Dropout(rate),
                LayerSpec::MaxPool { size } => Layer::MaxPool(size),
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Dense { activation, .. } => Layer::Dense {
                    activation,
                    p: params.next().expect("checked count"),
                },
            })
            .collect();
        Ok(Network { spec, layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv { p, .. } | Layer::Dense { p, .. } => Some(p),
                _ => None,
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Conv { p, .. } | Layer::Dense { p, .. } => Some(p),
                _ => None,
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Stacks samples into a `(batch * window, n_features)` input matrix.
    pub fn batch_input(&self, samples: &[&WindowSample]) -> Result<Array2<f64>> {
        let w = self.spec.window;
        let nf = self.spec.n_features;
        if nf != 3 {
            return Err(Error::invalid("window samples carry exactly 3 features"));
        }
        let mut x = Array2::zeros((samples.len() * w, nf));
        for (b, s) in samples.iter().enumerate() {
            if s.rows.len() != w {
                return Err(Error::Shape {
                    expected: format!("{w} rows"),
                    got: format!("{} rows", s.rows.len()),
                });
            }
            for (t, r) in s.rows.iter().enumerate() {
                let mut row = x.row_mut(b * w + t);
                row[0] = r.direction;
                row[1] = r.tbs_kb;
                row[2] = r.dt_s;
            }
        }
        Ok(x)
    }

    /// Logits for a batch. Dropout runs only when `dropout` is given.
    pub fn logits(&self, x: Array2<f64>, batch: usize, dropout: Option<&mut LabRng>) -> Array2<f64> {
        self.forward_layers(0, x, self.spec.window, batch, dropout, None)
    }

    /// Row-wise softmax probabilities for a batch (inference mode).
    pub fn probabilities(&self, x: Array2<f64>, batch: usize) -> Array2<f64> {
        let mut z = self.logits(x, batch, None);
        softmax_rows(&mut z);
        z
    }

    /// Mean categorical cross-entropy in inference mode.
    pub fn loss(&self, x: Array2<f64>, batch: usize, targets: &[usize]) -> f64 {
        let z = self.logits(x, batch, None);
        cross_entropy(&z, targets)
    }

    pub(crate) fn forward_layers(
        &self,
        from: usize,
        x: Array2<f64>,
        len: usize,
        batch: usize,
        dropout: Option<&mut LabRng>,
        caches: Option<&mut Vec<LayerCache>>,
    ) -> Array2<f64> {
        self.forward_range(from, self.layers.len(), x, len, batch, dropout, caches)
    }

    /// Runs layers `from..to` on activation `x` whose per-sample length is `len`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward_range(
        &self,
        from: usize,
        to: usize,
        mut x: Array2<f64>,
        mut len: usize,
        batch: usize,
        mut dropout: Option<&mut LabRng>,
        mut caches: Option<&mut Vec<LayerCache>>,
    ) -> Array2<f64> {
        for layer in &self.layers[from..to] {
            let (y, cache) = match layer {
                Layer::Conv { kernel, p } => {
                    let cols = im2col(&x, batch, len, *kernel);
                    let mut z = affine(&cols, p);
                    z.mapv_inplace(relu);
                    let cache = caches.as_ref().map(|_| LayerCache::Conv {
                        cols,
                        out: z.clone(),
                    });
                    (z, cache)
                }
                Layer::Dropout(rate) => match dropout.as_deref_mut() {
                    Some(rng) if *rate > 0.0 => {
                        let keep = 1.0 - rate;
                        let mask = Array2::from_shape_simple_fn(x.raw_dim(), || {
                            if rng.random::<f64>() < *rate {
                                0.0
                            } else {
                                1.0 / keep
                            }
                        });
                        x *= &mask;
                        let cache = caches.as_ref().map(|_| LayerCache::Dropout { mask: Some(mask) });
                        (x, cache)
                    }
                    _ => {
                        let cache = caches.as_ref().map(|_| LayerCache::Dropout { mask: None });
                        (x, cache)
                    }
                },
                Layer::MaxPool(size) => {
                    let in_rows = x.nrows();
                    let (y, argmax) = max_pool(&x, batch, len, *size);
                    len /= size;
                    let cache = caches.as_ref().map(|_| LayerCache::Pool { argmax, in_rows });
                    (y, cache)
                }
                Layer::Flatten => {
                    let (rows, channels) = x.dim();
                    let flat = x
                        .into_shape_with_order((batch, rows / batch * channels))
                        .expect("contiguous activation");
                    len = 1;
                    (flat, caches.as_ref().map(|_| LayerCache::Flatten { rows, channels }))
                }
                Layer::Dense { activation, p } => {
                    let mut z = affine(&x, p);
                    if *activation == Activation::Relu {
                        z.mapv_inplace(relu);
                    }
                    let cache = caches.as_ref().map(|_| LayerCache::Dense {
                        input: x,
                        out: z.clone(),
                    });
                    (z, cache)
                }
            };
            x = y;
            if let (Some(c), Some(cache)) = (caches.as_deref_mut(), cache) {
                c.push(cache);
            }
        }
        x
    }

    /// Forward in training mode keeping what backprop needs.
    pub(crate) fn forward_train(
        &self,
        x: Array2<f64>,
        batch: usize,
        dropout: Option<&mut LabRng>,
    ) -> (Array2<f64>, Vec<LayerCache>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let logits = self.forward_layers(0, x, self.spec.window, batch, dropout, Some(&mut caches));
        (logits, caches)
    }

    /// Gradients of the mean cross-entropy with respect to every parameter,
    /// in the order of [`Network::params`].
    pub(crate) fn backward(&self, logits: &Array2<f64>, caches: &[LayerCache], targets: &[usize]) -> Vec<Param> {
        let batch = logits.nrows();
        let mut dy = logits.clone();
        softmax_rows(&mut dy);
        for (b, &t) in targets.iter().enumerate() {
            dy[[b, t]] -= 1.0;
        }
        dy /= batch as f64;

        let mut grads: Vec<Param> = Vec::new();
        for (idx, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let need_input_grad = idx > 0;
            dy = match (layer, cache) {
                (Layer::Dense { activation, p }, LayerCache::Dense { input, out }) => {
                    if *activation == Activation::Relu {
                        relu_backward(&mut dy, out);
                    }
                    let mut g = p.zeros_like();
                    general_mat_mul(1.0, &input.t(), &dy, 0.0, &mut g.w);
                    g.b = dy.sum_axis(Axis(0));
                    let mut dx = Array2::zeros(input.raw_dim());
                    general_mat_mul(1.0, &dy, &p.w.t(), 0.0, &mut dx);
                    grads.push(g);
                    dx
                }
                (Layer::Conv { kernel, p }, LayerCache::Conv { cols, out }) => {
                    relu_backward(&mut dy, out);
                    let mut g = p.zeros_like();
                    general_mat_mul(1.0, &cols.t(), &dy, 0.0, &mut g.w);
                    g.b = dy.sum_axis(Axis(0));
                    grads.push(g);
                    if need_input_grad {
                        let mut dcols = Array2::zeros(cols.raw_dim());
                        general_mat_mul(1.0, &dy, &p.w.t(), 0.0, &mut dcols);
                        let in_ch = p.w.nrows() / kernel;
                        col2im(&dcols, batch, dy.nrows() / batch, in_ch, *kernel)
                    } else {
                        Array2::zeros((0, 0))
                    }
                }
                (Layer::Dropout(_), LayerCache::Dropout { mask }) => {
                    if let Some(m) = mask {
                        dy *= m;
                    }
                    dy
                }
                (Layer::MaxPool(_), LayerCache::Pool { argmax, in_rows }) => {
                    let ch = dy.ncols();
                    let mut dx = Array2::zeros((*in_rows, ch));
                    {
                        let dxs = dx.as_slice_mut().expect("standard layout");
                        let dys = dy.as_slice().expect("standard layout");
                        for (k, &src) in argmax.iter().enumerate() {
                            dxs[src] += dys[k];
                        }
                    }
                    dx
                }
                (Layer::Flatten, LayerCache::Flatten { rows, channels }) => dy
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((*rows, *channels))
                    .expect("contiguous gradient"),
                _ => unreachable!("cache does not match layer"),
            };
        }
        grads.reverse();
        grads
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn relu_backward(dy: &mut Array2<f64>, out: &Array2<f64>) {
    dy.zip_mut_with(out, |d, &o| {
        if o <= 0.0 {
            *d = 0.0
        }
    });
}

/// `x @ w + b`, with a plain loop for single-row inputs.
pub(crate) fn affine(x: &Array2<f64>, p: &Param) -> Array2<f64> {
    let n_out = p.w.ncols();
    if x.nrows() == 1 {
        let mut z = p.b.to_vec();
        let w = p.w.as_slice().expect("standard layout");
        for (i, &xi) in x.row(0).iter().enumerate() {
            if xi != 0.0 {
                let row = &w[i * n_out..(i + 1) * n_out];
                for (zj, &wij) in z.iter_mut().zip(row) {
                    *zj += xi * wij;
                }
            }
        }
        return Array2::from_shape_vec((1, n_out), z).expect("row vector");
    }
    let mut z = Array2::zeros((x.nrows(), n_out));
    z += &p.b;
    general_mat_mul(1.0, x, &p.w, 1.0, &mut z);
    z
}

/// Unrolls `(batch * len, channels)` into `(batch * len, kernel * channels)`
/// patches with "same" zero padding.
pub(crate) fn im2col(x: &Array2<f64>, batch: usize, len: usize, kernel: usize) -> Array2<f64> {
    let ch = x.ncols();
    let width = kernel * ch;
    let pad = kernel / 2;
    let xs = x.as_slice().expect("standard layout");
    let mut cols = vec![0.0; batch * len * width];
    for b in 0..batch {
        for t in 0..len {
            let dst = (b * len + t) * width;
            for j in 0..kernel {
                let src_t = t + j;
                if src_t < pad || src_t - pad >= len {
                    continue;
                }
                let src = (b * len + src_t - pad) * ch;
                cols[dst + j * ch..dst + (j + 1) * ch].copy_from_slice(&xs[src..src + ch]);
            }
        }
    }
    Array2::from_shape_vec((batch * len, width), cols).expect("sized above")
}

fn col2im(dcols: &Array2<f64>, batch: usize, len: usize, ch: usize, kernel: usize) -> Array2<f64> {
    let width = kernel * ch;
    let pad = kernel / 2;
    let ds = dcols.as_slice().expect("standard layout");
    let mut dx = vec![0.0; batch * len * ch];
    for b in 0..batch {
        for t in 0..len {
            let src = (b * len + t) * width;
            for j in 0..kernel {
                let src_t = t + j;
                if src_t < pad || src_t - pad >= len {
                    continue;
                }
                let dst = (b * len + src_t - pad) * ch;
                for c in 0..ch {
                    dx[dst + c] += ds[src + j * ch + c];
                }
            }
        }
    }
    Array2::from_shape_vec((batch * len, ch), dx).expect("sized above")
}

/// Non-overlapping max pooling along time; ties go to the earliest position.
pub(crate) fn max_pool(x: &Array2<f64>, batch: usize, len: usize, size: usize) -> (Array2<f64>, Vec<usize>) {
    let ch = x.ncols();
    let out_len = len / size;
    let xs = x.as_slice().expect("standard layout");
    let mut y = vec![0.0; batch * out_len * ch];
    let mut arg = vec![0usize; batch * out_len * ch];
    for b in 0..batch {
        for t in 0..out_len {
            for c in 0..ch {
                let mut best_i = (b * len + t * size) * ch + c;
                let mut best = xs[best_i];
                for j in 1..size {
                    let i = (b * len + t * size + j) * ch + c;
                    if xs[i] > best {
                        best = xs[i];
                        best_i = i;
                    }
                }
                let o = (b * out_len + t) * ch + c;
                y[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (
        Array2::from_shape_vec((batch * out_len, ch), y).expect("sized above"),
        arg,
    )
}

pub(crate) fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

/// Mean of `logsumexp(z) - z[target]` over rows.
pub(crate) fn cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.rows().into_iter().zip(targets) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    total / targets.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::build_model;

    #[test]
    fn im2col_same_padding_layout() {
        // batch 1, len 3, 1 channel, kernel 3
        let x = Array2::from_shape_vec((3, 1), vec![1.0, 2.0, 3.0]).unwrap();
        let cols = im2col(&x, 1, 3, 3);
        assert_eq!(
            cols,
            Array2::from_shape_vec((3, 3), vec![0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 3.0, 0.0]).unwrap()
        );
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let mut rng = seeded(4);
        let (batch, len, ch, k) = (2, 6, 3, 5);
        let x = Array2::from_shape_simple_fn((batch * len, ch), || rng.random_range(-1.0..1.0));
        let c = Array2::from_shape_simple_fn((batch * len, k * ch), || rng.random_range(-1.0..1.0));
        let lhs = (&im2col(&x, batch, len, k) * &c).sum();
        let rhs = (&x * &col2im(&c, batch, len, ch, k)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pool_floors_odd_lengths_and_prefers_first_tie() {
        let x = Array2::from_shape_vec((5, 1), vec![1.0, 1.0, 0.0, 4.0, 9.0]).unwrap();
        let (y, arg) = max_pool(&x, 1, 5, 2);
        assert_eq!(y.into_raw_vec_and_offset().0, vec![1.0, 4.0]);
        assert_eq!(arg, vec![0, 3]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut z = Array2::from_shape_vec((2, 3), vec![1000.0, 0.0, -1000.0, 0.1, 0.2, 0.3]).unwrap();
        softmax_rows(&mut z);
        for row in z.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_row_affine_matches_gemm() {
        let spec = build_model(20, 3, 4).unwrap();
        let net = Network::new(spec, 1).unwrap();
        let p = net.params()[1].clone();
        let mut rng = seeded(2);
        let x = Array2::from_shape_simple_fn((2, p.w.nrows()), || rng.random_range(-1.0..1.0));
        let both = affine(&x, &p);
        let one = affine(&x.slice(ndarray::s![0..1, ..]).to_owned(), &p);
        for j in 0..p.w.ncols() {
            assert!((both[[0, j]] - one[[0, j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_sample_gradients() {
        let spec = build_model(40, 3, 3).unwrap();
        let net = Network::new(spec, 5).unwrap();
        let mut rng = seeded(6);
        let x = Array2::from_shape_simple_fn((3 * 40, 3), || rng.random_range(0.0..5.0));
        let targets = [0, 2, 1];
        let (z, caches) = net.forward_train(x.clone(), 3, None);
        let batch = net.backward(&z, &caches, &targets);
        let mut summed: Vec<Param> = batch.iter().map(Param::zeros_like).collect();
        for b in 0..3 {
            let xb = x.slice(ndarray::s![b * 40..(b + 1) * 40, ..]).to_owned();
            let (z, caches) = net.forward_train(xb, 1, None);
            for (acc, g) in summed.iter_mut().zip(net.backward(&z, &caches, &targets[b..=b])) {
                acc.w.scaled_add(1.0 / 3.0, &g.w);
                acc.b.scaled_add(1.0 / 3.0, &g.b);
            }
        }
        for (a, b) in batch.iter().zip(&summed) {
            let d = (&a.w - &b.w).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
            assert!(d < 1e-10, "{d}");
            let d = (&a.b - &b.b).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
            assert!(d < 1e-10, "{d}");
        }
    }
}
