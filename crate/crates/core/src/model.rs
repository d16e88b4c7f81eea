//! Dense feed-forward binary predictor with a hand-written backward pass.
//!
//! Parameters live in one flat buffer. Layer `l` maps `dims[l]` inputs to
//! `dims[l + 1]` outputs and stores its weight matrix row-major
//! (`dims[l + 1]` rows of `dims[l]`), followed by its bias vector. Hidden
//! layers use the rectifier; the single output unit is passed through the
//! logistic function.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, Purpose};
use crate::scalar::{logistic, softplus, Scalar};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    dims: Vec<usize>,
    /// Start of each layer's weights; its bias follows the weights.
    starts: Vec<usize>,
    len: usize,
}

impl Layout {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "need input, at least one hidden layer and output; got dims {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("zero-width layer in {dims:?}")));
        }
        if *dims.last().unwrap() != 1 {
            return Err(Error::InvalidArgument(format!("output dimension must be 1, got {dims:?}")));
        }
        let mut starts = Vec::with_capacity(dims.len() - 1);
        let mut len = 0;
        for w in dims.windows(2) {
            starts.push(len);
            len += w[0] * w[1] + w[1];
        }
        Ok(Self {
            dims: dims.to_vec(),
            starts,
            len,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Flat ranges of layer `l`'s weights and bias.
    pub fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
        let w = self.starts[l]..self.starts[l] + fan_in * fan_out;
        let b = w.end..w.end + fan_out;
        (w, b)
    }
}

macro_rules! flat_container {
    ($name:ident) => {
        impl<T: Scalar> $name<T> {
            pub fn zeros(layout: &Layout) -> Self {
                Self {
                    layout: layout.clone(),
                    values: vec![T::zero(); layout.len()],
                }
            }

            pub fn from_values(layout: &Layout, values: Vec<T>) -> Result<Self> {
                if values.len() != layout.len() {
                    return Err(Error::Shape(format!(
                        "{} values for a layout of {} parameters",
                        values.len(),
                        layout.len()
                    )));
                }
                Ok(Self {
                    layout: layout.clone(),
                    values,
                })
            }

            pub fn layout(&self) -> &Layout {
                &self.layout
            }

            pub fn values(&self) -> &[T] {
                &self.values
            }

            pub fn values_mut(&mut self) -> &mut [T] {
                &mut self.values
            }

            pub fn len(&self) -> usize {
                self.values.len()
            }

            pub fn is_empty(&self) -> bool {
                self.values.is_empty()
            }

            pub fn is_finite(&self) -> bool {
                self.values.iter().all(|v| v.is_finite())
            }

            pub fn l2_norm(&self) -> T {
                self.values.iter().map(|&v| v * v).sum::<T>().sqrt()
            }

            /// L2 norm of each layer's weights and bias together.
            pub fn layer_norms(&self) -> Vec<T> {
                (0..self.layout.n_layers())
                    .map(|l| {
                        let (w, b) = self.layout.layer_ranges(l);
                        self.values[w.start..b.end].iter().map(|&v| v * v).sum::<T>().sqrt()
                    })
                    .collect()
            }

            pub fn cast<U: Scalar>(&self) -> $name<U> {
                $name {
                    layout: self.layout.clone(),
                    values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
                }
            }

            pub(crate) fn check_congruent(&self, layout: &Layout) -> Result<()> {
                if &self.layout != layout {
                    return Err(Error::Shape(format!(
                        "layout {:?} is not congruent with {:?}",
                        self.layout.dims(),
                        layout.dims()
                    )));
                }
                Ok(())
            }
        }
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    layout: Layout,
    values: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient<T> {
    layout: Layout,
    values: Vec<T>,
}

flat_container!(ModelParams);
flat_container!(Gradient);

impl<T: Scalar> Gradient<T> {
    pub fn scale(&mut self, s: T) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &Gradient<T>) -> Result<()> {
        other.check_congruent(&self.layout)?;
        self.values.iter_mut().zip(&other.values).for_each(|(a, &b)| *a += b);
        Ok(())
    }
}

/// Per-batch loss expressed through the output logits.
pub trait LogitLoss<T: Scalar> {
    /// Returns the loss and its derivative with respect to each row's logit.
    /// `probs[i] = logistic(logits[i])`.
    fn evaluate(&self, logits: &[T], probs: &[T]) -> Result<(T, Vec<T>)>;
}

/// Mean binary cross-entropy.
#[derive(Debug, Clone, Copy)]
pub struct CrossEntropy<'a> {
    pub labels: &'a [u8],
}

impl<T: Scalar> LogitLoss<T> for CrossEntropy<'_> {
    fn evaluate(&self, logits: &[T], probs: &[T]) -> Result<(T, Vec<T>)> {
        Ok(cross_entropy(logits, probs, self.labels))
    }
}

/// Mean cross-entropy and its logit gradient.
pub(crate) fn cross_entropy<T: Scalar>(logits: &[T], probs: &[T], labels: &[u8]) -> (T, Vec<T>) {
    let n = T::from_count(logits.len());
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for ((&z, &p), &y) in logits.iter().zip(probs).zip(labels) {
        let y = if y == 1 { T::one() } else { T::zero() };
        loss += softplus(z) - y * z;
        grad.push((p - y) / n);
    }
    (loss / n, grad)
}

/// Activations kept from a forward pass.
struct Cache<T> {
    /// `acts[l]` is the input to layer `l`, one row per example.
    acts: Vec<Matrix<T>>,
    logits: Vec<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Weights uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
    pub fn init<R: Rng>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let layout = Layout::new(dims)?;
        let mut values = vec![T::zero(); layout.len()];
        for l in 0..layout.n_layers() {
            let bound = 1.0 / (layout.dims[l] as f64).sqrt();
            let (w, _) = layout.layer_ranges(l);
            for v in &mut values[w] {
                *v = T::lit(rng.random_range(-bound..bound));
            }
        }
        Ok(Self { layout, values })
    }

    pub fn weights(&self, l: usize) -> &[T] {
        &self.values[self.layout.layer_ranges(l).0]
    }

    pub fn bias(&self, l: usize) -> &[T] {
        &self.values[self.layout.layer_ranges(l).1]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [T] {
        let r = self.layout.layer_ranges(l).1;
        &mut self.values[r]
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.layout.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, model expects {}",
                x.cols(),
                self.layout.input_dim()
            )));
        }
        Ok(())
    }

    fn run(&self, x: &Matrix<T>) -> Result<Cache<T>> {
        self.check_input(x)?;
        let n_layers = self.layout.n_layers();
        let mut acts = Vec::with_capacity(n_layers);
        acts.push(x.clone());
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.layout.dims[l], self.layout.dims[l + 1]);
            let w = self.weights(l);
            let b = self.bias(l);
            let input = &acts[l];
            let mut out = Matrix::zeros(input.rows(), fan_out);
            for r in 0..input.rows() {
                let a = input.row(r);
                let o = out.row_mut(r);
                for (k, ok) in o.iter_mut().enumerate() {
                    let wk = &w[k * fan_in..(k + 1) * fan_in];
                    let mut s = b[k];
                    for (&wi, &ai) in wk.iter().zip(a) {
                        s += wi * ai;
                    }
                    *ok = if l + 1 < n_layers { s.max(T::zero()) } else { s };
                }
            }
            acts.push(out);
        }
        let logits = acts.pop().expect("output layer").as_slice().to_vec();
        Ok(Cache { acts, logits })
    }

    /// Output logits, one per row.
    pub fn logits(&self, x: &Matrix<T>) -> Result<Vec<T>> {
        Ok(self.run(x)?.logits)
    }

    /// Predicted probability of the positive class, one per row.
    pub fn forward(&self, x: &Matrix<T>) -> Result<Vec<T>> {
        Ok(self.logits(x)?.into_iter().map(logistic).collect())
    }

    /// Mean loss over the batch and its gradient.
    pub fn backward(&self, x: &Matrix<T>, loss: &impl LogitLoss<T>) -> Result<(T, Gradient<T>)> {
        let cache = self.run(x)?;
        let (value, upstream) = self.evaluate(&cache, loss)?;
        let mut grad = Gradient::zeros(&self.layout);
        let mut scratch = Scratch::new(&self.layout);
        for r in 0..x.rows() {
            self.backprop_row(&cache, r, upstream[r], &mut grad, &mut scratch);
        }
        Ok((value, grad))
    }

    /// Per-example decomposition of the batch gradient.
    ///
    /// Row `i` contributes `n * dL/dz_i * dz_i/dθ`, so the mean of the returned
    /// gradients equals the batch gradient. For losses that couple rows (the
    /// fairness penalties), `dL/dz_i` is taken at the batch statistics.
    pub fn per_example_gradients(&self, x: &Matrix<T>, loss: &impl LogitLoss<T>) -> Result<(T, Vec<Gradient<T>>)> {
        let cache = self.run(x)?;
        let (value, upstream) = self.evaluate(&cache, loss)?;
        let n = T::from_count(x.rows());
        let mut scratch = Scratch::new(&self.layout);
        let grads = (0..x.rows())
            .map(|r| {
                let mut g = Gradient::zeros(&self.layout);
                self.backprop_row(&cache, r, upstream[r] * n, &mut g, &mut scratch);
                g
            })
            .collect();
        Ok((value, grads))
    }

    fn evaluate(&self, cache: &Cache<T>, loss: &impl LogitLoss<T>) -> Result<(T, Vec<T>)> {
        let probs: Vec<T> = cache.logits.iter().copied().map(logistic).collect();
        let (value, upstream) = loss.evaluate(&cache.logits, &probs)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {value}")));
        }
        if upstream.len() != cache.logits.len() {
            return Err(Error::Shape(format!(
                "loss returned {} logit gradients for {} rows",
                upstream.len(),
                cache.logits.len()
            )));
        }
        Ok((value, upstream))
    }

    /// Accumulates one row's contribution, seeded with `dL/dz` at the output.
    fn backprop_row(&self, cache: &Cache<T>, r: usize, upstream: T, grad: &mut Gradient<T>, s: &mut Scratch<T>) {
        let n_layers = self.layout.n_layers();
        s.delta.clear();
        s.delta.push(upstream);
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.layout.dims[l], self.layout.dims[l + 1]);
            let (wr, br) = self.layout.layer_ranges(l);
            let a = cache.acts[l].row(r);
            {
                let gw = &mut grad.values[wr.clone()];
                for (k, &d) in s.delta.iter().enumerate() {
                    if d == T::zero() {
                        continue;
                    }
                    for (g, &ai) in gw[k * fan_in..(k + 1) * fan_in].iter_mut().zip(a) {
                        *g += d * ai;
                    }
                }
            }
            for (g, &d) in grad.values[br].iter_mut().zip(&s.delta) {
                *g += d;
            }
            if l == 0 {
                break;
            }
            let w = &self.values[wr];
            s.next.clear();
            s.next.resize(fan_in, T::zero());
            for (k, &d) in s.delta.iter().enumerate().take(fan_out) {
                if d == T::zero() {
                    continue;
                }
                for (nx, &wi) in s.next.iter_mut().zip(&w[k * fan_in..(k + 1) * fan_in]) {
                    *nx += d * wi;
                }
            }
            // rectifier derivative, taken as 0 at 0
            for (nx, &ai) in s.next.iter_mut().zip(a) {
                if ai <= T::zero() {
                    *nx = T::zero();
                }
            }
            std::mem::swap(&mut s.delta, &mut s.next);
        }
    }

    /// `θ - lr * g`.
    pub fn apply_update(&self, g: &Gradient<T>, lr: T) -> Result<Self> {
        let mut out = self.clone();
        out.apply_update_in_place(g, lr)?;
        Ok(out)
    }

    pub fn apply_update_in_place(&mut self, g: &Gradient<T>, lr: T) -> Result<()> {
        g.check_congruent(&self.layout)?;
        for (t, &gi) in self.values.iter_mut().zip(&g.values) {
            *t -= lr * gi;
        }
        Ok(())
    }

    /// `self - base`, as a gradient-shaped delta.
    pub fn delta_from(&self, base: &ModelParams<T>) -> Result<Gradient<T>> {
        base.check_congruent(&self.layout)?;
        Ok(Gradient {
            layout: self.layout.clone(),
            values: self.values.iter().zip(&base.values).map(|(&a, &b)| a - b).collect(),
        })
    }
}

struct Scratch<T> {
    delta: Vec<T>,
    next: Vec<T>,
}

impl<T: Scalar> Scratch<T> {
    fn new(layout: &Layout) -> Self {
        let widest = layout.dims().iter().copied().max().unwrap_or(1);
        Self {
            delta: Vec::with_capacity(widest),
            next: Vec::with_capacity(widest),
        }
    }
}

pub fn init_model<T: Scalar>(dims: &[usize], seed: u64) -> Result<ModelParams<T>> {
    ModelParams::init(dims, &mut rng::global(seed, Purpose::Init))
}

pub fn grad_l2_norm<T: Scalar>(g: &Gradient<T>) -> T {
    g.l2_norm()
}

// Checkpoint layout, all integers and floats little-endian:
//   bytes 0..8   magic "FAIRFED1"
//   u64          number of dims D
//   D x u64      layer dims, input first, output (1) last
//   u64          parameter count P
//   P x f64      parameters in flat layout order
const MAGIC: &[u8; 8] = b"FAIRFED1";

pub fn write_checkpoint<T: Scalar, W: Write>(m: &ModelParams<T>, mut w: W) -> Result<()> {
    let io = |e| Error::Checkpoint(format!("write failed: {e}"));
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(m.layout.dims.len() as u64).to_le_bytes()).map_err(io)?;
    for &d in &m.layout.dims {
        w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
    }
    w.write_all(&(m.values.len() as u64).to_le_bytes()).map_err(io)?;
    for v in &m.values {
        w.write_all(&v.as_f64().to_le_bytes()).map_err(io)?;
    }
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<ModelParams<T>> {
    let mut word = [0u8; 8];
    let mut next = |r: &mut R| -> Result<[u8; 8]> {
        r.read_exact(&mut word)
            .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
        Ok(word)
    };
    if &next(&mut r)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let n_dims = u64::from_le_bytes(next(&mut r)?) as usize;
    if n_dims > 1024 {
        return Err(Error::Checkpoint(format!("implausible dim count {n_dims}")));
    }
    let mut dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        dims.push(u64::from_le_bytes(next(&mut r)?) as usize);
    }
    let layout = Layout::new(&dims).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let count = u64::from_le_bytes(next(&mut r)?) as usize;
    if count != layout.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count {count} does not match dims {dims:?}"
        )));
    }
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(T::lit(f64::from_le_bytes(next(&mut r)?)));
    }
    ModelParams::from_values(&layout, values)
}

pub fn save_checkpoint<T: Scalar>(m: &ModelParams<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(m, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelParams<T>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}
