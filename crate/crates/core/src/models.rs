//! The three desk-scale classifiers used as surrogates and transfer targets,
//! their mini-batch SGD trainer, and the `UAPW` weight file.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Padding, Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHT_MAGIC: &[u8; 4] = b"UAPW";
pub const WEIGHT_VERSION: u32 = 1;

const MLP_HIDDEN: usize = 256;

/// Samples per independent forward/backward pass inside a training batch.
/// Fixed so gradients do not depend on the worker count.
const TRAIN_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    /// flatten → dense 256 → relu → dense
    Mlp2,
    /// conv3×3×16 → pool → conv3×3×32 → pool → dense
    CnnSmall,
    /// cnn-small with doubled channel widths
    CnnWide,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::Mlp2, Architecture::CnnSmall, Architecture::CnnWide];

    pub fn id(self) -> &'static str {
        match self {
            Architecture::Mlp2 => "mlp-2",
            Architecture::CnnSmall => "cnn-small",
            Architecture::CnnWide => "cnn-wide",
        }
    }

    fn conv_widths(self) -> Option<(usize, usize)> {
        match self {
            Architecture::Mlp2 => None,
            Architecture::CnnSmall => Some((16, 32)),
            Architecture::CnnWide => Some((32, 64)),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}`")))
    }
}

/// `(channels, height, width)`
pub type InputShape = [usize; 3];

/// A classifier: fixed layer stack per [`Architecture`] plus its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    arch: Architecture,
    input_shape: InputShape,
    num_classes: usize,
    weights: Vec<Tensor>,
}

/// Weight tensor shapes, in storage order.
pub fn weight_shapes(arch: Architecture, input: InputShape, classes: usize) -> Vec<Vec<usize>> {
    let [c, h, w] = input;
    match arch.conv_widths() {
        None => vec![
            vec![c * h * w, MLP_HIDDEN],
            vec![MLP_HIDDEN],
            vec![MLP_HIDDEN, classes],
            vec![classes],
        ],
        Some((c1, c2)) => vec![
            vec![c1, c, 3, 3],
            vec![c1],
            vec![c2, c1, 3, 3],
            vec![c2],
            vec![c2 * (h / 2 / 2) * (w / 2 / 2), classes],
            vec![classes],
        ],
    }
}

fn fan_in(shape: &[usize]) -> usize {
    match shape.len() {
        2 => shape[0],
        4 => shape[1] * shape[2] * shape[3],
        _ => 1,
    }
}

/// Logits and weight handles produced by [`Network::trace`].
pub struct Traced {
    pub logits: Var,
    pub weights: Vec<Var>,
}

impl Network {
    /// Builds a network with weights drawn uniformly from ±√(6/fan_in) and
    /// zero biases.
    pub fn build(arch: Architecture, input_shape: InputShape, num_classes: usize, seed: u64) -> Result<Self> {
        if input_shape.contains(&0) || num_classes == 0 {
            return Err(Error::Config(format!(
                "network dimensions must be positive: input {input_shape:?}, classes {num_classes}"
            )));
        }
        if arch.conv_widths().is_some() && (input_shape[1] < 4 || input_shape[2] < 4) {
            return Err(Error::Config(format!(
                "{arch} needs spatial size at least 4×4, got {input_shape:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = weight_shapes(arch, input_shape, num_classes)
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else {
                    let bound = (6.0 / fan_in(&shape) as f32).sqrt();
                    Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound))
                }
            })
            .collect();
        Ok(Self {
            arch,
            input_shape,
            num_classes,
            weights,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn input_shape(&self) -> InputShape {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }

    /// Replaces the weights; shapes must match the architecture.
    pub fn set_weights(&mut self, weights: Vec<Tensor>) -> Result<()> {
        let expected = weight_shapes(self.arch, self.input_shape, self.num_classes);
        if weights.len() != expected.len() {
            return Err(Error::shape("set_weights", &[expected.len()], &[weights.len()]));
        }
        for (w, e) in weights.iter().zip(&expected) {
            if w.shape() != e.as_slice() {
                return Err(Error::shape("set_weights", e, w.shape()));
            }
        }
        self.weights = weights;
        Ok(())
    }

    pub(crate) fn check_input(&self, inputs: &Tensor) -> Result<()> {
        let s = inputs.shape();
        if s.len() != 4 || s[1..] != self.input_shape {
            let mut expected = vec![s.first().copied().unwrap_or(0)];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::shape("network input", &expected, s));
        }
        Ok(())
    }

    /// Records the forward pass of `input` (shape `(n, c, h, w)`) on `tape`.
    /// Weights are borrowed into the tape; `trainable` tags them
    /// differentiable.
    pub fn trace<'a>(&'a self, tape: &mut Tape<'a>, input: Var, trainable: bool) -> Result<Traced> {
        let w: Vec<Var> = self.weights.iter().map(|t| tape.leaf_ref(t, trainable)).collect();
        let logits = match self.arch {
            Architecture::Mlp2 => {
                let x = tape.flatten(input)?;
                let h = tape.matmul(x, w[0])?;
                let h = tape.add_broadcast(h, w[1])?;
                let h = tape.relu(h);
                let z = tape.matmul(h, w[2])?;
                tape.add_broadcast(z, w[3])?
            }
            Architecture::CnnSmall | Architecture::CnnWide => {
                let h = tape.conv2d(input, w[0], w[1], Padding::Same)?;
                let h = tape.relu(h);
                let h = tape.max_pool2(h)?;
                let h = tape.conv2d(h, w[2], w[3], Padding::Same)?;
                let h = tape.relu(h);
                let h = tape.max_pool2(h)?;
                let h = tape.flatten(h)?;
                let z = tape.matmul(h, w[4])?;
                tape.add_broadcast(z, w[5])?
            }
        };
        Ok(Traced { logits, weights: w })
    }

    /// Logits for a batch `(n, c, h, w)`; rows are computed independently.
    pub fn logits(&self, inputs: &Tensor) -> Result<Tensor> {
        self.check_input(inputs)?;
        let n = inputs.rows();
        let chunks: Vec<Vec<usize>> = (0..n).collect::<Vec<_>>().chunks(64).map(<[usize]>::to_vec).collect();
        let parts = chunks
            .par_iter()
            .map(|idx| -> Result<Vec<f32>> {
                let x = inputs.select_rows(idx)?;
                let mut tape = Tape::new();
                let xv = tape.leaf(x, false);
                let t = self.trace(&mut tape, xv, false)?;
                Ok(tape.value(t.logits).data().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(vec![n, self.num_classes], parts.concat())
    }

    pub fn predict_labels(&self, inputs: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(inputs)?.argmax_rows())
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f32> {
        if data.is_empty() {
            return Err(Error::Data("accuracy of an empty dataset".into()));
        }
        let pred = self.predict_labels(data.images())?;
        let hits = pred.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
        Ok(hits as f32 / data.len() as f32)
    }

    /// Mean cross-entropy and its weight gradients over `indices`.
    fn batch_gradient(&self, data: &Dataset, indices: &[usize]) -> Result<(f32, Vec<Tensor>)> {
        let total = indices.len() as f32;
        let parts = indices
            .chunks(TRAIN_CHUNK)
            .collect::<Vec<_>>()
            .par_iter()
            .map(|chunk| -> Result<(f32, Vec<Tensor>)> {
                let x = data.images().select_rows(chunk)?;
                let labels: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
                let mut tape = Tape::new();
                let xv = tape.leaf(x, false);
                let t = self.trace(&mut tape, xv, true)?;
                let loss = tape.softmax_cross_entropy(t.logits, &labels)?;
                let weight = chunk.len() as f32 / total;
                let value = tape.value(loss).data()[0] * weight;
                let mut g = tape.backward(loss, &Tensor::full(&[], weight))?;
                let grads = t
                    .weights
                    .iter()
                    .map(|&v| g.take(v).expect("trainable weight has a gradient"))
                    .collect();
                Ok((value, grads))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut iter = parts.into_iter();
        let (mut loss, mut grads) = iter.next().ok_or_else(|| Error::Usage("empty batch".into()))?;
        for (l, g) in iter {
            loss += l;
            for (acc, gi) in grads.iter_mut().zip(&g) {
                acc.add_assign(gi)?;
            }
        }
        Ok((loss, grads))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 3,
            learning_rate: 0.05,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_train_accuracy: f32,
    pub final_eval_accuracy: f32,
    pub final_loss: f32,
    pub seed: u64,
}

/// Plain mini-batch gradient descent on softmax cross-entropy. Accuracy on
/// `eval` (or on the training set when `eval` is `None`) goes into the report.
pub fn train(net: &mut Network, data: &Dataset, eval: Option<&Dataset>, opts: &TrainOptions) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if let Some(&bad) = data.labels().iter().find(|&&y| y >= net.num_classes) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {} classes",
            net.num_classes
        )));
    }
    net.check_input(data.images())?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut final_loss = f32::NAN;
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(opts.batch_size) {
            let (loss, grads) = net.batch_gradient(data, batch)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("training loss became {loss}")));
            }
            for (w, g) in net.weights.iter_mut().zip(&grads) {
                w.add_scaled(g, -opts.learning_rate)?;
            }
            epoch_loss += loss;
            batches += 1;
        }
        final_loss = epoch_loss / batches as f32;
    }

    let final_train_accuracy = net.accuracy(data)?;
    let final_eval_accuracy = match eval {
        Some(e) => net.accuracy(e)?,
        None => final_train_accuracy,
    };
    Ok(TrainReport {
        epochs_run: opts.epochs,
        final_train_accuracy,
        final_eval_accuracy,
        final_loss,
        seed: opts.seed,
    })
}

/// Serializes to the `UAPW` layout:
/// magic, version u32, id length u32, id bytes, c/h/w/classes u32,
/// tensor count u32, then per tensor rank u32, dims u32…, f32 payload.
/// All integers and floats little-endian.
pub fn to_bytes(net: &Network) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * net.num_parameters());
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    let id = net.arch.id().as_bytes();
    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
    out.extend_from_slice(id);
    for d in net.input_shape.iter().chain([&net.num_classes]) {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(net.weights.len() as u32).to_le_bytes());
    for w in &net.weights {
        out.extend_from_slice(&(w.rank() as u32).to_le_bytes());
        for d in w.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in w.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, to_bytes(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Network> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

pub(crate) struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
    path: &'b Path,
}

impl<'b> Reader<'b> {
    pub(crate) fn new(bytes: &'b [u8], path: &'b Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    pub(crate) fn error(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(
                self.pos,
                format!("truncated: need {n} bytes for {what}, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.error(self.pos, "size overflow"))?, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.error(self.pos, format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Network> {
    let mut r = Reader::new(bytes, path);
    if r.take(4, "magic")? != WEIGHT_MAGIC {
        return Err(r.error(0, "bad magic, expected UAPW"));
    }
    let version_at = r.offset();
    let version = r.u32("version")?;
    if version != WEIGHT_VERSION {
        return Err(r.error(version_at, format!("unsupported version {version}")));
    }
    let id_at = r.offset();
    let id_len = r.u32("architecture id length")? as usize;
    let id = std::str::from_utf8(r.take(id_len, "architecture id")?)
        .map_err(|_| r.error(id_at + 4, "architecture id is not UTF-8"))?;
    let arch: Architecture = id
        .parse()
        .map_err(|_| r.error(id_at + 4, format!("unknown architecture `{id}`")))?;
    let dims_at = r.offset();
    let c = r.u32("channels")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let classes = r.u32("class count")? as usize;
    let mut net = Network::build(arch, [c, h, w], classes, 0)
        .map_err(|e| r.error(dims_at, e.to_string()))?;
    let expected = weight_shapes(arch, [c, h, w], classes);

    let count_at = r.offset();
    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(r.error(
            count_at,
            format!("{arch} has {} weight tensors, header declares {count}", expected.len()),
        ));
    }
    let mut weights = Vec::with_capacity(count);
    for (i, shape) in expected.iter().enumerate() {
        let at = r.offset();
        let rank = r.u32("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("tensor dim")? as usize);
        }
        if &dims != shape {
            return Err(r.error(at, format!("tensor {i} has shape {dims:?}, expected {shape:?}")));
        }
        let data = r.f32s(shape.iter().product(), "tensor payload")?;
        weights.push(Tensor::new(dims, data)?);
    }
    r.finish()?;
    net.weights = weights;
    Ok(net)
}
