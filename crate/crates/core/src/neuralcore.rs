//! Minimal differentiable numeric core: dense layers, the undirected GIN
//! message-passing layer, multi-layer mean readout, an MLP scoring head,
//! manual reverse-mode gradients, SGD/Adam, and a finite-difference
//! checker. No tape, no broadcasting — just the fixed computation graphs
//! this pipeline needs, written out layer by layer.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cellgraph::{CellGraph, MatrixEncoding};
use crate::scalar::Scalar;

/// Graph embedding: per-layer mean node features, concatenated. Length is
/// `|vocabulary| + layer_count * hidden`.
pub type Embedding<F> = Vec<F>;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch { context: &'static str, expected: usize, got: usize },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Graph(#[from] crate::cellgraph::GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Errors out if any value in `values` is NaN or infinite; `block` names
/// the parameter or gradient block for the message.
pub fn ensure_finite<F: Scalar>(block: &str, values: &[F]) -> Result<(), NetError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(NetError::NonFinite(block.to_string()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Matrices

/// Dense row-major matrix. Small sizes only (node counts and layer widths),
/// so multiplies are plain loops ordered for cache locality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "F: Serialize", deserialize = "F: DeserializeOwned"))]
pub struct Mat<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Mat<F> {
        Mat { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Mat<F> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: F) {
        self.data[i * self.cols + j] = v;
    }

    fn is_consistent(&self) -> bool {
        self.data.len() == self.rows * self.cols
    }

    /// self · other
    pub fn matmul(&self, other: &Mat<F>) -> Mat<F> {
        assert_eq!(self.cols, other.rows, "matmul inner dims");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                let src = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * *s;
                }
            }
        }
        out
    }

    /// selfᵀ · other — used for weight gradients (Xᵀ·dY).
    pub fn matmul_at(&self, other: &Mat<F>) -> Mat<F> {
        assert_eq!(self.rows, other.rows, "matmul_at outer dims");
        let mut out = Mat::zeros(self.cols, other.cols);
        for n in 0..self.rows {
            for p in 0..self.cols {
                let a = self.data[n * self.cols + p];
                let src = &other.data[n * other.cols..(n + 1) * other.cols];
                let dst = &mut out.data[p * other.cols..(p + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * *s;
                }
            }
        }
        out
    }

    /// self · otherᵀ — used for input gradients (dY·Wᵀ).
    pub fn matmul_bt(&self, other: &Mat<F>) -> Mat<F> {
        assert_eq!(self.cols, other.cols, "matmul_bt inner dims");
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                let a = &self.data[i * self.cols..(i + 1) * self.cols];
                let b = &other.data[j * other.cols..(j + 1) * other.cols];
                let mut acc = F::zero();
                for (x, y) in a.iter().zip(b) {
                    acc += *x * *y;
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat<F>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d += *s;
        }
    }
}

// ---------------------------------------------------------------------------
// Layers

fn relu<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        x
    } else {
        F::zero()
    }
}

/// Negative slope of the head's LeakyReLU.
pub const LEAKY_SLOPE: f64 = 0.02;

fn leaky<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        x
    } else {
        F::c(LEAKY_SLOPE) * x
    }
}

/// Fully connected layer, `y = x·W + b`, weights stored input-major
/// (`in_width` rows × `out_width` cols).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "F: Serialize", deserialize = "F: DeserializeOwned"))]
pub struct Dense<F> {
    pub weight: Mat<F>,
    pub bias: Vec<F>,
}

impl<F: Scalar> Dense<F> {
    /// Kaiming-uniform fan-in init: weights uniform in ±sqrt(6/fan_in),
    /// biases zero.
    pub fn kaiming(in_width: usize, out_width: usize, rng: &mut impl Rng) -> Dense<F> {
        let bound = (6.0 / in_width as f64).sqrt();
        let weight = Mat::from_fn(in_width, out_width, |_, _| {
            F::c(rng.gen_range(-bound..bound))
        });
        Dense { weight, bias: vec![F::zero(); out_width] }
    }

    pub fn zeros_like(&self) -> Dense<F> {
        Dense {
            weight: Mat::zeros(self.weight.rows, self.weight.cols),
            bias: vec![F::zero(); self.bias.len()],
        }
    }

    pub fn in_width(&self) -> usize {
        self.weight.rows
    }

    pub fn out_width(&self) -> usize {
        self.weight.cols
    }

    pub fn forward(&self, x: &Mat<F>) -> Mat<F> {
        let mut y = x.matmul(&self.weight);
        for i in 0..y.rows {
            for (v, b) in y.data[i * y.cols..(i + 1) * y.cols].iter_mut().zip(&self.bias) {
                *v += *b;
            }
        }
        y
    }

    /// Given the forward input and dL/dy, accumulates dW/db into `grad`
    /// and returns dL/dx.
    pub fn backward(&self, x: &Mat<F>, dy: &Mat<F>, grad: &mut Dense<F>) -> Mat<F> {
        grad.weight.add_assign(&x.matmul_at(dy));
        for i in 0..dy.rows {
            for (g, d) in grad.bias.iter_mut().zip(dy.row(i)) {
                *g += *d;
            }
        }
        dy.matmul_bt(&self.weight)
    }

    fn flatten_into(&self, out: &mut Vec<F>) {
        out.extend_from_slice(&self.weight.data);
        out.extend_from_slice(&self.bias);
    }

    fn assign_from(&mut self, src: &[F], cursor: &mut usize) {
        let w = self.weight.data.len();
        self.weight.data.copy_from_slice(&src[*cursor..*cursor + w]);
        *cursor += w;
        let b = self.bias.len();
        self.bias.copy_from_slice(&src[*cursor..*cursor + b]);
        *cursor += b;
    }

    fn param_count(&self) -> usize {
        self.weight.data.len() + self.bias.len()
    }


    fn is_consistent(&self) -> bool {
        self.weight.is_consistent() && self.bias.len() == self.weight.cols
    }
}

/// One GIN propagation layer: node features are summed with both in- and
/// out-neighbours (plus self), then passed through a two-layer MLP with a
/// ReLU between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "F: Serialize", deserialize = "F: DeserializeOwned"))]
pub struct GinLayer<F> {
    pub lin1: Dense<F>,
    pub lin2: Dense<F>,
}

/// Intermediate activations one GIN layer needs for its backward pass.
struct GinCache<F> {
    /// Aggregated input S·H (post-aggregation, pre-MLP).
    x: Mat<F>,
    z1: Mat<F>,
    a1: Mat<F>,
}

impl<F: Scalar> GinLayer<F> {
    fn kaiming(in_width: usize, hidden: usize, rng: &mut impl Rng) -> GinLayer<F> {
        GinLayer {
            lin1: Dense::kaiming(in_width, hidden, rng),
            lin2: Dense::kaiming(hidden, hidden, rng),
        }
    }

    fn zeros_like(&self) -> GinLayer<F> {
        GinLayer { lin1: self.lin1.zeros_like(), lin2: self.lin2.zeros_like() }
    }

    /// `x` is the aggregated feature matrix S·H_{k-1}.
    fn forward(&self, x: Mat<F>) -> (Mat<F>, GinCache<F>) {
        let z1 = self.lin1.forward(&x);
        let mut a1 = z1.clone();
        for v in &mut a1.data {
            *v = relu(*v);
        }
        let h = self.lin2.forward(&a1);
        (h, GinCache { x, z1, a1 })
    }

    /// Returns dL/dx (gradient w.r.t. the aggregated input).
    fn backward(&self, cache: &GinCache<F>, dh: &Mat<F>, grad: &mut GinLayer<F>) -> Mat<F> {
        let mut da1 = self.lin2.backward(&cache.a1, dh, &mut grad.lin2);
        for (d, z) in da1.data.iter_mut().zip(&cache.z1.data) {
            if *z <= F::zero() {
                *d = F::zero();
            }
        }
        self.lin1.backward(&cache.x, &da1, &mut grad.lin1)
    }
}

// ---------------------------------------------------------------------------
// Encoder

const ENCODER_KIND: &str = "dclp-encoder";
pub(crate) const CHECKPOINT_VERSION: u32 = 1;

/// GIN encoder over OON cells: one-hot op features, `layers.len()` rounds
/// of undirected sum aggregation + MLP, mean-pooled per layer and
/// concatenated into the embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "F: Serialize", deserialize = "F: DeserializeOwned"))]
pub struct Encoder<F> {
    pub vocabulary: Vec<String>,
    pub hidden: usize,
    pub layers: Vec<GinLayer<F>>,
}

/// Everything the encoder backward pass needs from one graph's forward.
pub struct EncoderCache<F> {
    agg: Mat<F>,
    h0: Mat<F>,
    per_layer: Vec<GinCache<F>>,
}

impl<F: Scalar> Encoder<F> {
    pub fn new(
        vocabulary: Vec<String>,
        hidden: usize,
        layer_count: usize,
        rng: &mut impl Rng,
    ) -> Encoder<F> {
        assert!(hidden > 0 && layer_count > 0 && !vocabulary.is_empty());
        let mut layers = Vec::with_capacity(layer_count);
        let mut in_width = vocabulary.len();
        for _ in 0..layer_count {
            layers.push(GinLayer::kaiming(in_width, hidden, rng));
            in_width = hidden;
        }
        Encoder { vocabulary, hidden, layers }
    }

    /// Embedding length: the layer-0 readout is the one-hot mean (vocab
    /// width), each GIN layer contributes `hidden` more.
    pub fn embed_width(&self) -> usize {
        self.vocabulary.len() + self.layers.len() * self.hidden
    }

    /// Undirected aggregation matrix S = I + A + Aᵀ.
    fn aggregation(enc: &MatrixEncoding) -> Mat<F> {
        let n = enc.node_count();
        Mat::from_fn(n, n, |i, j| {
            let mut v = if i == j { 1u8 } else { 0 };
            v += enc.adjacency[i][j] + enc.adjacency[j][i];
            F::from_count(v as usize)
        })
    }

    fn one_hot(&self, enc: &MatrixEncoding) -> Result<Mat<F>, NetError> {
        let width = self.vocabulary.len();
        let n = enc.node_count();
        if enc.attributes.iter().any(|row| row.len() != width) {
            return Err(NetError::ShapeMismatch {
                context: "one-hot attribute width vs encoder vocabulary",
                expected: width,
                got: enc.attributes.first().map_or(0, |r| r.len()),
            });
        }
        Ok(Mat::from_fn(n, width, |i, j| F::from_count(enc.attributes[i][j] as usize)))
    }

    /// Forward pass keeping the activations needed for backward.
    pub fn forward_cache(
        &self,
        enc: &MatrixEncoding,
    ) -> Result<(Embedding<F>, EncoderCache<F>), NetError> {
        let h0 = self.one_hot(enc)?;
        let agg = Self::aggregation(enc);
        let n = enc.node_count();
        let inv_n = F::one() / F::from_count(n);

        let mut embedding = Vec::with_capacity(self.embed_width());
        let mean_into = |h: &Mat<F>, out: &mut Vec<F>| {
            for j in 0..h.cols {
                let mut acc = F::zero();
                for i in 0..h.rows {
                    acc += h.get(i, j);
                }
                out.push(acc * inv_n);
            }
        };
        mean_into(&h0, &mut embedding);

        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut h = h0.clone();
        for layer in &self.layers {
            let x = agg.matmul(&h);
            let (next, cache) = layer.forward(x);
            mean_into(&next, &mut embedding);
            per_layer.push(cache);
            h = next;
        }
        Ok((embedding, EncoderCache { agg, h0, per_layer }))
    }

    /// Forward without keeping activations.
    pub fn forward(&self, enc: &MatrixEncoding) -> Result<Embedding<F>, NetError> {
        self.forward_cache(enc).map(|(e, _)| e)
    }

    /// Embeds a cell directly (OOE cells go through their OON view).
    pub fn embed(&self, g: &CellGraph) -> Result<Embedding<F>, NetError> {
        let oon = g.oon_view()?;
        let enc = oon.encode_matrices(&self.vocabulary)?;
        self.forward(&enc)
    }

    /// Accumulates parameter gradients for one graph into `grad`, given
    /// dL/d(embedding).
    pub fn backward(
        &self,
        cache: &EncoderCache<F>,
        d_embedding: &[F],
        grad: &mut Encoder<F>,
    ) -> Result<(), NetError> {
        if d_embedding.len() != self.embed_width() {
            return Err(NetError::ShapeMismatch {
                context: "embedding gradient length",
                expected: self.embed_width(),
                got: d_embedding.len(),
            });
        }
        let n = cache.h0.rows;
        let inv_n = F::one() / F::from_count(n);
        // Mean-readout backward: every node row receives the layer's slice
        // of the embedding gradient, scaled by 1/n.
        let broadcast = |slice: &[F]| {
            Mat::from_fn(n, slice.len(), |_, j| slice[j] * inv_n)
        };

        let vocab = self.vocabulary.len();
        // dL/dH_K starts from the readout of the last layer.
        let offset = vocab + (self.layers.len() - 1) * self.hidden;
        let mut dh = broadcast(&d_embedding[offset..offset + self.hidden]);
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let dx = layer.backward(&cache.per_layer[k], &dh, &mut grad.layers[k]);
            // Through the aggregation: dH_{k-1} += Sᵀ·dX, and S is
            // symmetric by construction.
            let mut dprev = cache.agg.matmul(&dx);
            if k > 0 {
                let offset = vocab + (k - 1) * self.hidden;
                dprev.add_assign(&broadcast(&d_embedding[offset..offset + self.hidden]));
                dh = dprev;
            }
            // k == 0: gradient w.r.t. the one-hot inputs is discarded.
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Encoder<F> {
        Encoder {
            vocabulary: self.vocabulary.clone(),
            hidden: self.hidden,
            layers: self.layers.iter().map(GinLayer::zeros_like).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.lin1.param_count() + l.lin2.param_count()).sum()
    }

    /// Parameters as one flat vector: layers in order, each as w1, b1, w2,
    /// b2, matrices row-major.
    pub fn flatten(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            layer.lin1.flatten_into(&mut out);
            layer.lin2.flatten_into(&mut out);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[F]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length");
        let mut cursor = 0;
        for layer in &mut self.layers {
            layer.lin1.assign_from(flat, &mut cursor);
            layer.lin2.assign_from(flat, &mut cursor);
        }
    }

    fn validate_shapes(&self) -> Result<(), NetError> {
        let mut in_width = self.vocabulary.len();
        for layer in &self.layers {
            let ok = layer.lin1.is_consistent()
                && layer.lin2.is_consistent()
                && layer.lin1.in_width() == in_width
                && layer.lin1.out_width() == self.hidden
                && layer.lin2.in_width() == self.hidden
                && layer.lin2.out_width() == self.hidden;
            if !ok {
                return Err(NetError::BadCheckpoint("inconsistent layer shapes".into()));
            }
            in_width = self.hidden;
        }
        if self.layers.is_empty() || self.vocabulary.is_empty() || self.hidden == 0 {
            return Err(NetError::BadCheckpoint("empty encoder".into()));
        }
        ensure_finite("encoder parameters", &self.flatten())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetError>
    where
        F: Serialize,
    {
        let file = Checkpoint { kind: ENCODER_KIND.into(), version: CHECKPOINT_VERSION, payload: self };
        fs::write(path, serde_json::to_string(&file).expect("encoder serializes"))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Encoder<F>, NetError>
    where
        F: DeserializeOwned,
    {
        let text = fs::read_to_string(path)?;
        let file: Checkpoint<Encoder<F>> = serde_json::from_str(&text)
            .map_err(|e| NetError::BadCheckpoint(e.to_string()))?;
        file.check_kind(ENCODER_KIND)?;
        file.payload.validate_shapes()?;
        Ok(file.payload)
    }
}

/// Versioned checkpoint envelope shared by every on-disk artifact.
#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: DeserializeOwned"))]
pub struct Checkpoint<T> {
    pub kind: String,
    pub version: u32,
    pub payload: T,
}

impl<T> Checkpoint<T> {
    pub fn check_kind(&self, expected: &str) -> Result<(), NetError> {
        if self.kind != expected {
            return Err(NetError::BadCheckpoint(format!(
                "kind '{}' where '{expected}' was expected",
                self.kind
            )));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(NetError::BadCheckpoint(format!(
                "unsupported version {} (supported: {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Scoring head

const HEAD_WIDTHS: [usize; 2] = [128, 64];

/// Three dense layers with LeakyReLU between, scalar output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "F: Serialize", deserialize = "F: DeserializeOwned"))]
pub struct MlpHead<F> {
    pub layers: Vec<Dense<F>>,
}

pub struct HeadCache<F> {
    /// Input and post-activation outputs feeding each layer.
    inputs: Vec<Mat<F>>,
    /// Pre-activation outputs of the first two layers.
    zs: Vec<Mat<F>>,
}

impl<F: Scalar> MlpHead<F> {
    pub fn new(in_width: usize, rng: &mut impl Rng) -> MlpHead<F> {
        let mut layers = Vec::with_capacity(HEAD_WIDTHS.len() + 1);
        let mut width = in_width;
        for w in HEAD_WIDTHS {
            layers.push(Dense::kaiming(width, w, rng));
            width = w;
        }
        layers.push(Dense::kaiming(width, 1, rng));
        MlpHead { layers }
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].in_width()
    }

    /// Scores a batch of embeddings (one row each).
    pub fn forward_cache(&self, x: Mat<F>) -> (Vec<F>, HeadCache<F>) {
        let mut inputs = vec![x];
        let mut zs = Vec::with_capacity(self.layers.len() - 1);
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(inputs.last().expect("non-empty"));
            if i + 1 == self.layers.len() {
                let scores = (0..z.rows).map(|r| z.get(r, 0)).collect();
                return (scores, HeadCache { inputs, zs });
            }
            let mut a = z.clone();
            for v in &mut a.data {
                *v = leaky(*v);
            }
            zs.push(z);
            inputs.push(a);
        }
        unreachable!("head always has at least one layer")
    }

    pub fn forward(&self, x: Mat<F>) -> Vec<F> {
        self.forward_cache(x).0
    }

    /// Backward from per-row score gradients; returns dL/d(input rows).
    pub fn backward(
        &self,
        cache: &HeadCache<F>,
        d_scores: &[F],
        grad: &mut MlpHead<F>,
    ) -> Mat<F> {
        let rows = cache.inputs[0].rows;
        assert_eq!(d_scores.len(), rows, "one score gradient per row");
        let mut dy = Mat::from_fn(rows, 1, |i, _| d_scores[i]);
        let slope = F::c(LEAKY_SLOPE);
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let mut dx = layer.backward(&cache.inputs[i], &dy, &mut grad.layers[i]);
            if i > 0 {
                for (d, z) in dx.data.iter_mut().zip(&cache.zs[i - 1].data) {
                    if *z <= F::zero() {
                        *d = *d * slope;
                    }
                }
            }
            dy = dx;
        }
        dy
    }

    pub fn zeros_like(&self) -> MlpHead<F> {
        MlpHead { layers: self.layers.iter().map(Dense::zeros_like).collect() }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn flatten(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            layer.flatten_into(&mut out);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[F]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length");
        let mut cursor = 0;
        for layer in &mut self.layers {
            layer.assign_from(flat, &mut cursor);
        }
    }

    pub fn validate_shapes(&self) -> Result<(), NetError> {
        let widths: Vec<usize> = self.layers.iter().map(Dense::out_width).collect();
        let expected: Vec<usize> = HEAD_WIDTHS.iter().copied().chain([1]).collect();
        if widths != expected || self.layers.iter().any(|l| !l.is_consistent()) {
            return Err(NetError::BadCheckpoint("head layer shapes".into()));
        }
        for pair in self.layers.windows(2) {
            if pair[0].out_width() != pair[1].in_width() {
                return Err(NetError::BadCheckpoint("head layer chaining".into()));
            }
        }
        ensure_finite("head parameters", &self.flatten())
    }
}

/// Stacks embeddings as rows of a matrix for the head.
pub fn stack_rows<F: Scalar>(embeddings: &[Embedding<F>]) -> Mat<F> {
    assert!(!embeddings.is_empty());
    let cols = embeddings[0].len();
    Mat::from_fn(embeddings.len(), cols, |i, j| embeddings[i][j])
}

// ---------------------------------------------------------------------------
// Optimizers

/// SGD with classical momentum: v ← μv + g, p ← p − lr·v.
#[derive(Debug, Clone)]
pub struct Sgd<F> {
    pub lr: F,
    pub momentum: F,
    velocity: Vec<F>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(lr: F, momentum: F, param_count: usize) -> Sgd<F> {
        Sgd { lr, momentum, velocity: vec![F::zero(); param_count] }
    }

    pub fn step(&mut self, params: &mut [F], grads: &[F]) {
        assert_eq!(params.len(), self.velocity.len());
        assert_eq!(params.len(), grads.len());
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            *v = self.momentum * *v + *g;
            *p -= self.lr * *v;
        }
    }
}

/// Adam with bias correction, defaults β₁=0.9, β₂=0.999, ε=1e-8.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    t: u32,
    m: Vec<F>,
    v: Vec<F>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: F, param_count: usize) -> Adam<F> {
        Adam {
            lr,
            beta1: F::c(0.9),
            beta2: F::c(0.999),
            eps: F::c(1e-8),
            t: 0,
            m: vec![F::zero(); param_count],
            v: vec![F::zero(); param_count],
        }
    }

    pub fn step(&mut self, params: &mut [F], grads: &[F]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = F::one() - self.beta1.powi(self.t as i32);
        let bc2 = F::one() - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.m[i] = self.beta1 * self.m[i] + (F::one() - self.beta1) * *g;
            self.v[i] = self.beta2 * self.v[i] + (F::one() - self.beta2) * *g * *g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Finite differences

/// Central-difference check of an analytic gradient on a random coordinate
/// subsample (all coordinates when there are at most `max_coords`).
/// Returns the worst relative error, with |fd| + |analytic| floored to
/// avoid inflating noise on near-zero entries.
pub fn finite_difference_check<F: Scalar>(
    mut loss: impl FnMut(&[F]) -> F,
    params: &[F],
    analytic: &[F],
    eps: F,
    max_coords: usize,
    rng: &mut impl Rng,
) -> F {
    assert_eq!(params.len(), analytic.len());
    let picked: Vec<usize> = if params.len() <= max_coords {
        (0..params.len()).collect()
    } else {
        rand::seq::index::sample(rng, params.len(), max_coords).into_vec()
    };
    let mut scratch = params.to_vec();
    let floor = F::c(1e-6);
    let mut worst = F::zero();
    for i in picked {
        let orig = scratch[i];
        scratch[i] = orig + eps;
        let up = loss(&scratch);
        scratch[i] = orig - eps;
        let down = loss(&scratch);
        scratch[i] = orig;
        let fd = (up - down) / (F::c(2.0) * eps);
        let denom = fd.abs().max(analytic[i].abs()).max(floor);
        worst = worst.max((fd - analytic[i]).abs() / denom);
    }
    worst
}
