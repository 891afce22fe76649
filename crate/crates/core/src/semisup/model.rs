//! Pointwise MLP classifier: features -> tanh -> tanh -> logits.

use std::io::Cursor;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;

const MAGIC: &[u8; 4] = b"MLNM";
const VERSION: u32 = 1;

/// Hidden layer widths; input and output widths come from the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: [usize; 2],
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { hidden: [32, 32] }
    }
}

impl ModelSpec {
    pub fn layer_sizes(&self, input_dim: usize, num_classes: usize) -> Vec<usize> {
        vec![input_dim, self.hidden[0], self.hidden[1], num_classes]
    }
}

/// Dense layers stored as one flat parameter vector: for each layer the
/// `out × in` weight matrix (row-major) followed by its `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseClassifier {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Per-layer activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    rows: usize,
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &[f64] {
        self.activations.last().expect("at least one layer")
    }
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
}

impl PointwiseClassifier {
    pub fn new(sizes: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("bad layer sizes {sizes:?}")));
        }
        let expected = param_count(&sizes);
        if params.len() != expected {
            return Err(Error::LengthMismatch {
                what: "model parameters",
                expected,
                found: params.len(),
            });
        }
        Ok(Self { sizes, params })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(sizes: Vec<usize>, rng: &mut impl Rng) -> Result<Self> {
        let mut params = Vec::with_capacity(param_count(&sizes));
        for w in sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let limit = (6.0 / (n_in + n_out) as f64).sqrt();
            params.extend((0..n_in * n_out).map(|_| rng.random_range(-limit..limit)));
            params.extend(std::iter::repeat_n(0.0, n_out));
        }
        Self::new(sizes, params)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn check_input(&self, x: &[f64]) -> Result<usize> {
        let d = self.input_dim();
        if x.len() % d != 0 {
            return Err(Error::DimMismatch {
                expected: d,
                found: x.len() % d,
            });
        }
        Ok(x.len() / d)
    }

    /// Forward pass over `n × input_dim` rows, keeping every activation.
    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        let rows = self.check_input(x)?;
        let layers = self.sizes.len() - 1;
        let mut activations = Vec::with_capacity(layers + 1);
        activations.push(x.to_vec());
        let mut offset = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_out * (n_in + 1);
            let input = &activations[l];
            // column-major copy so the inner loop runs over contiguous outputs
            let mut wt = vec![0.0; n_in * n_out];
            for (o, wr) in w.chunks_exact(n_in).enumerate() {
                for (i, &v) in wr.iter().enumerate() {
                    wt[i * n_out + o] = v;
                }
            }
            let mut out = vec![0.0; rows * n_out];
            for (xr, or) in input.chunks_exact(n_in).zip(out.chunks_exact_mut(n_out)) {
                or.copy_from_slice(b);
                for (&xv, wc) in xr.iter().zip(wt.chunks_exact(n_out)) {
                    for (o, &wv) in or.iter_mut().zip(wc) {
                        *o += xv * wv;
                    }
                }
                if l + 1 < layers {
                    or.iter_mut().for_each(|o| *o = fast_tanh(*o));
                }
            }
            activations.push(out);
        }
        Ok(ForwardCache { rows, activations })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.activations.pop().unwrap())
    }

    /// Parameter gradient given the loss gradient with respect to the logits.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &[f64]) -> Result<Vec<f64>> {
        let k = self.num_classes();
        if grad_logits.len() != cache.rows * k {
            return Err(Error::LengthMismatch {
                what: "logit gradient",
                expected: cache.rows * k,
                found: grad_logits.len(),
            });
        }
        let layers = self.sizes.len() - 1;
        let mut grad = vec![0.0; self.params.len()];
        let mut offsets = Vec::with_capacity(layers);
        let mut offset = 0;
        for w in self.sizes.windows(2) {
            offsets.push(offset);
            offset += w[1] * (w[0] + 1);
        }
        let mut delta = grad_logits.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let input = &cache.activations[l];
            {
                let (gw, gb) = grad[off..off + n_out * (n_in + 1)].split_at_mut(n_in * n_out);
                for (xr, dr) in input.chunks_exact(n_in).zip(delta.chunks_exact(n_out)) {
                    for (o, &d) in dr.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        gb[o] += d;
                        for (g, &xv) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(xr) {
                            *g += d * xv;
                        }
                    }
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + n_in * n_out];
            let mut prev = vec![0.0; cache.rows * n_in];
            for ((pr, dr), ar) in prev
                .chunks_exact_mut(n_in)
                .zip(delta.chunks_exact(n_out))
                .zip(input.chunks_exact(n_in))
            {
                for (o, &d) in dr.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (p, &wv) in pr.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *p += d * wv;
                    }
                }
                // tanh' = 1 - a^2
                for (p, &a) in pr.iter_mut().zip(ar) {
                    *p *= 1.0 - a * a;
                }
            }
            delta = prev;
        }
        Ok(grad)
    }

    /// Argmax class per point of a frame.
    pub fn predict_frame(&self, frame: &Frame) -> Result<Vec<u32>> {
        if frame.dim() != self.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.input_dim(),
                found: frame.dim(),
            });
        }
        self.predict(frame.features())
    }

    pub fn predict(&self, features: &[f32]) -> Result<Vec<u32>> {
        let d = self.input_dim();
        let k = self.num_classes();
        let mut out = Vec::with_capacity(features.len() / d);
        for chunk in features.chunks(4096 * d) {
            let x: Vec<f64> = chunk.iter().map(|&v| v as f64).collect();
            let logits = self.forward(&x)?;
            out.extend(logits.chunks_exact(k).map(argmax));
        }
        Ok(out)
    }

    /// Rewrites the first layer so that raw inputs `x` give the outputs this
    /// model gives on `(x - mean) / scale`.
    pub fn fold_input_standardization(&self, mean: &[f64], scale: &[f64]) -> Result<Self> {
        let n_in = self.input_dim();
        if mean.len() != n_in || scale.len() != n_in {
            return Err(Error::DimMismatch {
                expected: n_in,
                found: mean.len().min(scale.len()),
            });
        }
        let n_out = self.sizes[1];
        let mut params = self.params.clone();
        let (w, rest) = params.split_at_mut(n_in * n_out);
        for (row, b) in w.chunks_exact_mut(n_in).zip(&mut rest[..n_out]) {
            for ((wv, &m), &s) in row.iter_mut().zip(mean).zip(scale) {
                *wv /= s;
                *b -= *wv * m;
            }
        }
        Self::new(self.sizes.clone(), params)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.sizes.len() + 4 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        out.write_u32::<LittleEndian>(self.sizes.len() as u32).unwrap();
        for &s in &self.sizes {
            out.write_u32::<LittleEndian>(s as u32).unwrap();
        }
        for &p in &self.params {
            out.write_f32::<LittleEndian>(p as f32).unwrap();
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |r: &str| Error::malformed(path, r);
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut c = Cursor::new(&bytes[4..]);
        let truncated = |_| bad("truncated header");
        if c.read_u32::<LittleEndian>().map_err(truncated)? != VERSION {
            return Err(bad("unsupported version"));
        }
        let n = c.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        if n < 2 || n > 64 {
            return Err(bad("bad layer count"));
        }
        let mut sizes = Vec::with_capacity(n);
        for _ in 0..n {
            sizes.push(c.read_u32::<LittleEndian>().map_err(truncated)? as usize);
        }
        let header = 12 + 4 * n;
        let count = param_count(&sizes);
        if bytes.len() != header + 4 * count {
            return Err(bad("parameter block length does not match layer sizes"));
        }
        let params = bytes[header..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Self::new(sizes, params).map_err(|e| bad(&e.to_string()))
    }
}

/// `tanh` through one `exp`; a few ulps off libm's but several times faster.
#[inline]
fn fast_tanh(x: f64) -> f64 {
    if x.abs() < 1e-2 {
        // the exp form cancels near zero; series error is below x^9 here
        let x2 = x * x;
        return x * (1.0 - x2 * (1.0 / 3.0 - x2 * (2.0 / 15.0 - x2 * 17.0 / 315.0)));
    }
    let e = (2.0 * x.clamp(-40.0, 40.0)).exp();
    1.0 - 2.0 / (e + 1.0)
}

pub(crate) fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best as u32
}

pub fn save_model(model: &PointwiseClassifier, path: &Path) -> Result<()> {
    std::fs::write(path, model.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<PointwiseClassifier> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    PointwiseClassifier::decode(&bytes, path)
}
