//! Finite-difference verification of the analytic gradients.
//!
//! Every parameter is perturbed by `±h` and the loss is recomputed. Only the
//! output column owned by the perturbed parameter is recomputed in its own
//! layer; the rest of the network runs from there on the cached activation.
//!
//! ReLU is not differentiable at zero, so before checking, every hidden
//! pre-activation is pushed at least `kink_margin` away from zero by shifting
//! its channel bias. Any evaluation where a ReLU mask or a pooling argmax
//! still flips is counted as a kink and skipped.

use ndarray::{Array2, Axis};
use rand::Rng;

use super::net::{affine, cross_entropy, im2col, Layer, LayerCache};
use super::{Activation, ModelSpec, Network, Shape};
use crate::error::Result;
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub seed: u64,
    /// Finite-difference step.
    pub h: f64,
    /// Minimum distance from zero enforced on hidden pre-activations.
    pub kink_margin: f64,
    /// Check at most this many evenly spaced entries per layer.
    pub max_params_per_layer: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            seed: 0,
            h: 1e-4,
            kink_margin: 0.01,
            max_params_per_layer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub n_checked: usize,
    pub n_kinks: usize,
    pub n_params: usize,
    /// Location of the largest error, e.g. `layer 2 w[14,3]`.
    pub worst: String,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn numeric_grad_check(spec: &ModelSpec, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut net = Network::new(spec.clone(), opts.seed)?;
    let mut rng = seeded(derive_seed(opts.seed, 0x6C));
    for p in net.params_mut() {
        p.b.mapv_inplace(|_| rng.random_range(-0.1..0.1));
    }
    let window = spec.window;
    let x = Array2::from_shape_fn((window, spec.n_features), |(_, c)| match c {
        0 => f64::from(rng.random_bool(0.3)),
        1 => rng.random_range(0.05..40.0),
        2 => rng.random_range(0.0..2.0),
        _ => rng.random_range(0.0..1.0),
    });
    let target = rng.random_range(0..spec.n_classes);

    let shapes = spec.shapes()?;
    let in_len: Vec<usize> = std::iter::once(window)
        .chain(shapes.iter().map(|s| match s {
            Shape::Seq { len, .. } => *len,
            Shape::Flat(_) => 1,
        }))
        .collect();

    nudge_away_from_kinks(&mut net, &x, &in_len, opts.kink_margin);

    let n_layers = net.layers.len();
    let mut acts = vec![x.clone()];
    for i in 0..n_layers {
        let next = net.forward_range(i, i + 1, acts[i].clone(), in_len[i], 1, None, None);
        acts.push(next);
    }
    let (logits, caches) = net.forward_train(x, 1, None);
    let grads = net.backward(&logits, &caches, &[target]);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        n_checked: 0,
        n_kinks: 0,
        n_params: net.n_params(),
        worst: String::new(),
    };
    let mut pi = 0;
    for li in 0..n_layers {
        let (p, patches, is_last) = match &net.layers[li] {
            Layer::Conv { kernel, p } => (p, im2col(&acts[li], 1, in_len[li], *kernel), false),
            Layer::Dense { activation, p } => (p, acts[li].clone(), *activation == Activation::Softmax),
            _ => continue,
        };
        let z = affine(&patches, p);
        let (rows, cols) = p.w.dim();
        let total = rows * cols + cols;
        let picks: Vec<usize> = match opts.max_params_per_layer {
            Some(m) if m < total => (0..m).map(|k| k * total / m).collect(),
            _ => (0..total).collect(),
        };
        for k in picks {
            let (c, input, analytic, name) = if k < rows * cols {
                let (r, c) = (k / cols, k % cols);
                (c, Some(r), grads[pi].w[[r, c]], format!("layer {li} w[{r},{c}]"))
            } else {
                let c = k - rows * cols;
                (c, None, grads[pi].b[c], format!("layer {li} b[{c}]"))
            };
            let eval = |delta: f64| -> (f64, bool) {
                let mut zc = z.column(c).to_owned();
                match input {
                    Some(r) => zc.scaled_add(delta, &patches.column(r)),
                    None => zc += delta,
                }
                if is_last {
                    let mut l = z.clone();
                    l.column_mut(c).assign(&zc);
                    return (cross_entropy(&l, &[target]), false);
                }
                let mut kink = zc.iter().zip(z.column(c)).any(|(a, b)| (*a > 0.0) != (*b > 0.0));
                let mut out = acts[li + 1].clone();
                out.column_mut(c).assign(&zc.mapv(|v| v.max(0.0)));
                let mut down = Vec::new();
                let l = net.forward_range(li + 1, n_layers, out, in_len[li + 1], 1, None, Some(&mut down));
                kink |= down.iter().zip(&caches[li + 1..]).any(|(a, b)| pattern_differs(a, b));
                (cross_entropy(&l, &[target]), kink)
            };
            let (fp, kp) = eval(opts.h);
            let (fm, km) = eval(-opts.h);
            if kp || km {
                report.n_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.h);
            let rel = relative_error(analytic, numeric);
            report.n_checked += 1;
            if rel > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = name;
            }
        }
        pi += 1;
    }
    Ok(report)
}

fn pattern_differs(a: &LayerCache, b: &LayerCache) -> bool {
    match (a, b) {
        (LayerCache::Conv { out: x, .. }, LayerCache::Conv { out: y, .. })
        | (LayerCache::Dense { out: x, .. }, LayerCache::Dense { out: y, .. }) => {
            x.iter().zip(y).any(|(p, q)| (*p > 0.0) != (*q > 0.0))
        }
        (LayerCache::Pool { argmax: x, .. }, LayerCache::Pool { argmax: y, .. }) => x != y,
        _ => false,
    }
}

/// Shifts each hidden channel's bias by the smallest amount that keeps all its
/// pre-activations at least `margin` from zero. Layers are processed in order
/// so later shifts see the already adjusted inputs.
fn nudge_away_from_kinks(net: &mut Network, x: &Array2<f64>, in_len: &[usize], margin: f64) {
    const STEP: f64 = 0.0025;
    const MAX_STEPS: i32 = 400;
    for li in 0..net.layers.len() {
        let input = net.forward_range(0, li, x.clone(), in_len[0], 1, None, None);
        let (z, p) = match &mut net.layers[li] {
            Layer::Conv { kernel, p } => (affine(&im2col(&input, 1, in_len[li], *kernel), p), p),
            Layer::Dense {
                activation: Activation::Relu,
                p,
            } => (affine(&input, p), p),
            _ => continue,
        };
        for (j, col) in z.axis_iter(Axis(1)).enumerate() {
            let clearance = |s: f64| col.iter().fold(f64::INFINITY, |m, v| m.min((v + s).abs()));
            let mut best = (clearance(0.0), 0.0);
            'search: for k in 0..=MAX_STEPS {
                for s in [k as f64 * STEP, -(k as f64) * STEP] {
                    let c = clearance(s);
                    if c >= margin {
                        best = (c, s);
                        break 'search;
                    }
                    if c > best.0 {
                        best = (c, s);
                    }
                }
            }
            p.b[j] += best.1;
        }
    }
}
