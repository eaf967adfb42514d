//! Binary model container. The byte layout is described in
//! `docs/model-format.md`.

use std::path::Path;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use super::train::{ModelBundle, TrainingHistory};
use super::{Activation, LayerSpec, ModelSpec, Network, Padding, Param};
use crate::dci::AppLabel;
use crate::error::{Error, Result};
use crate::features::FeatureScaling;

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DCICNN\0\0";
const DIGEST_LEN: usize = 32;

const TAG_CONV: u8 = 1;
const TAG_DROPOUT: u8 = 2;
const TAG_POOL: u8 = 3;
const TAG_FLATTEN: u8 = 4;
const TAG_DENSE: u8 = 5;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.u32(vs.len());
        for &v in vs {
            self.f64(v);
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::ModelFormat(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()?;
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(Error::ModelFormat("array length exceeds file".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::ModelFormat("class name is not UTF-8".into()))
    }
}

pub fn model_to_bytes(bundle: &ModelBundle) -> Vec<u8> {
    let spec = bundle.spec();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(MODEL_FORMAT_VERSION as usize);
    w.u32(spec.window);
    w.u32(spec.n_features);
    w.u32(spec.n_classes);
    w.u8(match spec.padding {
        Padding::Same => 0,
    });
    w.f64(spec.scaling.tbs_bits_per_unit);
    w.f64(spec.scaling.ms_per_unit);
    for c in &bundle.classes {
        w.str(c.as_str());
    }
    w.u32(spec.layers.len());
    for layer in &spec.layers {
        match *layer {
            LayerSpec::Conv1d { filters, kernel } => {
                w.u8(TAG_CONV);
                w.u32(filters);
                w.u32(kernel);
            }
            LayerSpec::Dropout { rate } => {
                w.u8(TAG_DROPOUT);
                w.f64(rate);
            }
            LayerSpec::MaxPool { size } => {
                w.u8(TAG_POOL);
                w.u32(size);
            }
            LayerSpec::Flatten => w.u8(TAG_FLATTEN),
            LayerSpec::Dense { units, activation } => {
                w.u8(TAG_DENSE);
                w.u32(units);
                w.u8(match activation {
                    Activation::Relu => 0,
                    Activation::Softmax => 1,
                });
            }
        }
    }
    w.u64(bundle.seed);
    w.u32(bundle.epochs as usize);
    w.f64s(&bundle.history.train_loss);
    w.f64s(&bundle.history.val_loss);
    w.f64s(&bundle.history.val_accuracy);
    for p in bundle.network.params() {
        w.u32(p.w.nrows());
        w.u32(p.w.ncols());
        for &v in p.w.iter() {
            w.f64(v);
        }
        w.f64s(p.b.as_slice().expect("contiguous bias"));
    }
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    w.0
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelBundle> {
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
        return Err(Error::ModelFormat("file too short".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::ModelFormat("not a model file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != MODEL_FORMAT_VERSION as usize {
        return Err(Error::ModelFormat(format!(
            "unsupported format version {version} (expected {MODEL_FORMAT_VERSION})"
        )));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::ModelFormat("checksum mismatch (corrupt or truncated file)".into()));
    }

    let window = r.u32()?;
    let n_features = r.u32()?;
    let n_classes = r.u32()?;
    let padding = match r.u8()? {
        0 => Padding::Same,
        p => return Err(Error::ModelFormat(format!("unknown padding mode {p}"))),
    };
    let scaling = FeatureScaling {
        tbs_bits_per_unit: r.f64()?,
        ms_per_unit: r.f64()?,
    };
    let classes = (0..n_classes)
        .map(|_| r.str().map(AppLabel::new))
        .collect::<Result<Vec<_>>>()?;
    let n_layers = r.u32()?;
    let mut layers = Vec::with_capacity(n_layers.min(64));
    for _ in 0..n_layers {
        layers.push(match r.u8()? {
            TAG_CONV => LayerSpec::Conv1d {
                filters: r.u32()?,
                kernel: r.u32()?,
            },
            TAG_DROPOUT => LayerSpec::Dropout { rate: r.f64()? },
            TAG_POOL => LayerSpec::MaxPool { size: r.u32()? },
            TAG_FLATTEN => LayerSpec::Flatten,
            TAG_DENSE => LayerSpec::Dense {
                units: r.u32()?,
                activation: match r.u8()? {
                    0 => Activation::Relu,
                    1 => Activation::Softmax,
                    a => return Err(Error::ModelFormat(format!("unknown activation {a}"))),
                },
            },
            t => return Err(Error::ModelFormat(format!("unknown layer tag {t}"))),
        });
    }
    let spec = ModelSpec {
        window,
        n_features,
        n_classes,
        padding,
        scaling,
        layers,
    };
    let shapes = super::net::param_shapes(&spec).map_err(|e| Error::ModelFormat(format!("bad layer plan: {e}")))?;

    let seed = r.u64()?;
    let epochs = r.u32()? as u32;
    let history = TrainingHistory {
        train_loss: r.f64s()?,
        val_loss: r.f64s()?,
        val_accuracy: r.f64s()?,
    };
    let mut params = Vec::with_capacity(shapes.len());
    for (i, &(rows, cols, nb)) in shapes.iter().enumerate() {
        let (fr, fc) = (r.u32()?, r.u32()?);
        if (fr, fc) != (rows, cols) {
            return Err(Error::ModelFormat(format!(
                "layer {i}: weights {fr}x{fc}, plan needs {rows}x{cols}"
            )));
        }
        let w = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let b = r.f64s()?;
        if b.len() != nb {
            return Err(Error::ModelFormat(format!("layer {i}: bias length {}", b.len())));
        }
        params.push(Param {
            w: Array2::from_shape_vec((rows, cols), w).expect("sized above"),
            b: Array1::from(b),
        });
    }
    if r.pos != body.len() {
        return Err(Error::ModelFormat("trailing bytes after weights".into()));
    }
    let network = Network::from_params(spec, params)?;
    let mut bundle = ModelBundle::new(network, classes)?;
    bundle.seed = seed;
    bundle.epochs = epochs;
    bundle.history = history;
    Ok(bundle)
}

pub fn save_model(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_to_bytes(bundle)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::build_model;

    fn bundle(window: usize) -> ModelBundle {
        let spec = build_model(window, 3, 2).unwrap();
        let net = Network::new(spec, 9).unwrap();
        let mut b = ModelBundle::new(net, vec![AppLabel::from("A"), AppLabel::from("B")]).unwrap();
        b.seed = 42;
        b.epochs = 2;
        b.history.train_loss = vec![0.9, 0.5];
        b.history.val_loss = vec![0.8, 0.6];
        b.history.val_accuracy = vec![0.5, 0.75];
        b
    }

    #[test]
    fn round_trip_is_exact() {
        for w in [20, 40, 100] {
            let b = bundle(w);
            let bytes = model_to_bytes(&b);
            assert_eq!(model_from_bytes(&bytes).unwrap(), b);
            assert_eq!(model_to_bytes(&model_from_bytes(&bytes).unwrap()), bytes);
        }
    }

    #[test]
    fn truncation_detected() {
        let bytes = model_to_bytes(&bundle(20));
        for cut in [0, 7, 12, 100, bytes.len() / 2, bytes.len() - 1] {
            assert!(model_from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn corruption_and_version_detected() {
        let mut bytes = model_to_bytes(&bundle(20));
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(model_from_bytes(&bytes), Err(Error::ModelFormat(m)) if m.contains("checksum")));

        let mut bytes = model_to_bytes(&bundle(20));
        bytes[8] = 2;
        assert!(matches!(model_from_bytes(&bytes), Err(Error::ModelFormat(m)) if m.contains("version")));
    }
}
