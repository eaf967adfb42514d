//! One-dimensional convolutional classifier over DCI-instance windows.
//!
//! The layer plan depends on the window length:
//!
//! ```text
//! conv1d(64, k=5) relu -> dropout 0.2
//! [W >= 40]  conv1d(64, k=7) relu -> dropout 0.2 -> maxpool 2
//! [W >= 80]  conv1d(128, k=9) relu -> dropout 0.3 -> maxpool 2
//! flatten -> dense 256 relu -> dropout 0.1 -> dense n_classes softmax
//! ```
//!
//! Convolutions use "same" zero padding, so only pooling changes the length.

mod gradcheck;
mod io;
mod net;
mod train;

pub use gradcheck::{numeric_grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use io::{load_model, model_from_bytes, model_to_bytes, save_model, MODEL_FORMAT_VERSION};
pub use net::{Network, Param, INPUT_SCALE};
pub use train::{
    argmax, balance_classes, train, train_with_classes, ModelBundle, OptimizerKind, TrainConfig,
    TrainingHistory,
};

use crate::error::{Error, Result};
use crate::features::FeatureScaling;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    /// Convolution with ReLU activation.
    Conv1d { filters: usize, kernel: usize },
    Dropout { rate: f64 },
    MaxPool { size: usize },
    Flatten,
    Dense { units: usize, activation: Activation },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub window: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub padding: Padding,
    pub scaling: FeatureScaling,
    pub layers: Vec<LayerSpec>,
}

/// Window length at which the second conv block is enabled.
pub const SECOND_BLOCK_MIN_WINDOW: usize = 40;
/// Window length at which the third conv block is enabled.
pub const THIRD_BLOCK_MIN_WINDOW: usize = 80;

pub fn build_model(window: usize, n_features: usize, n_classes: usize) -> Result<ModelSpec> {
    use LayerSpec::*;
    if window == 0 {
        return Err(Error::invalid("window must be >= 1"));
    }
    if n_features == 0 {
        return Err(Error::invalid("n_features must be >= 1"));
    }
    if n_classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    let mut layers = vec![Conv1d { filters: 64, kernel: 5 }, Dropout { rate: 0.2 }];
    if window >= SECOND_BLOCK_MIN_WINDOW {
        layers.extend([
            Conv1d { filters: 64, kernel: 7 },
            Dropout { rate: 0.2 },
            MaxPool { size: 2 },
        ]);
    }
    if window >= THIRD_BLOCK_MIN_WINDOW {
        layers.extend([
            Conv1d { filters: 128, kernel: 9 },
            Dropout { rate: 0.3 },
            MaxPool { size: 2 },
        ]);
    }
    layers.extend([
        Flatten,
        Dense { units: 256, activation: Activation::Relu },
        Dropout { rate: 0.1 },
        Dense { units: n_classes, activation: Activation::Softmax },
    ]);
    let spec = ModelSpec {
        window,
        n_features,
        n_classes,
        padding: Padding::Same,
        scaling: FeatureScaling::default(),
        layers,
    };
    spec.shapes()?;
    Ok(spec)
}

/// Output shape of a layer: a sequence `(length, channels)` or a flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Seq { len: usize, channels: usize },
    Flat(usize),
}

impl Shape {
    pub fn size(&self) -> usize {
        match *self {
            Shape::Seq { len, channels } => len * channels,
            Shape::Flat(n) => n,
        }
    }
}

impl ModelSpec {
    /// Output shape after every layer, checking the plan is well formed.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let mut cur = Shape::Seq {
            len: self.window,
            channels: self.n_features,
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match (*layer, cur) {
                (LayerSpec::Conv1d { filters, kernel }, Shape::Seq { len, .. }) => {
                    if kernel == 0 || kernel % 2 == 0 {
                        return Err(Error::invalid(format!("layer {i}: kernel must be odd")));
                    }
                    if len < kernel {
                        return Err(Error::invalid(format!(
                            "layer {i}: sequence length {len} shorter than kernel {kernel}"
                        )));
                    }
                    Shape::Seq {
                        len,
                        channels: filters,
                    }
                }
                (LayerSpec::MaxPool { size }, Shape::Seq { len, channels }) => {
                    if size == 0 || len / size == 0 {
                        return Err(Error::invalid(format!(
                            "layer {i}: cannot pool length {len} by {size}"
                        )));
                    }
                    Shape::Seq {
                        len: len / size,
                        channels,
                    }
                }
                (LayerSpec::Dropout { rate }, s) => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(Error::invalid(format!("layer {i}: dropout rate {rate}")));
                    }
                    s
                }
                (LayerSpec::Flatten, s) => Shape::Flat(s.size()),
                (LayerSpec::Dense { units, .. }, Shape::Flat(_)) => Shape::Flat(units),
                (l, s) => {
                    return Err(Error::invalid(format!(
                        "layer {i}: {l:?} cannot follow shape {s:?}"
                    )))
                }
            };
            out.push(cur);
        }
        match out.last() {
            Some(Shape::Flat(n)) if *n == self.n_classes => {}
            _ => return Err(Error::invalid("plan must end in a dense layer of n_classes units")),
        }
        if !matches!(
            self.layers.last(),
            Some(LayerSpec::Dense {
                activation: Activation::Softmax,
                ..
            })
        ) {
            return Err(Error::invalid("plan must end in softmax"));
        }
        Ok(out)
    }

    pub fn conv_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv1d { .. }))
            .count()
    }

    pub fn pool_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::MaxPool { .. }))
            .count()
    }

    pub fn flatten_size(&self) -> usize {
        let shapes = self.shapes().unwrap_or_default();
        self.layers
            .iter()
            .position(|l| matches!(l, LayerSpec::Flatten))
            .and_then(|i| shapes.get(i))
            .map(Shape::size)
            .unwrap_or(0)
    }
}
