//! A small trainable embedding network with L2-normalized output, a softmax
//! classifier head, hand-derived gradients, and a Nesterov (NAG) optimizer.
//!
//! The network is a chain of dense layers with tanh on hidden layers; the
//! final layer's activation is L2-normalized to produce the embedding.
//! Gradients are exact analytic derivatives (finite-difference verified by
//! [`grad_check`]); there is no autodiff here.

use crate::embedding::{l2_norm, sq_dist, Embedding};
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_REVISION: AtomicU64 = AtomicU64::new(1);

fn fresh_revision() -> u64 {
    NEXT_REVISION.fetch_add(1, Ordering::Relaxed)
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// y = W·x
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for (r, yr) in y.iter_mut().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            *yr = row.iter().zip(x).map(|(w, v)| w * v).sum();
        }
        y
    }

    /// x = Wᵀ·y
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut x = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (xc, w) in x.iter_mut().zip(row) {
                *xc += w * yr;
            }
        }
        x
    }

    /// self += scale · y ⊗ x
    pub fn add_outer(&mut self, y: &[f64], x: &[f64], scale: f64) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            let s = scale * yr;
            for (w, &xv) in row.iter_mut().zip(x) {
                *w += s * xv;
            }
        }
    }
}

/// One dense layer. Also reused as the gradient / velocity container of the
/// same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Layer {
        Layer {
            weight: Matrix::zeros(self.weight.rows, self.weight.cols),
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn axpy(&mut self, scale: f64, other: &Layer) {
        for (a, b) in self.weight.data.iter_mut().zip(&other.weight.data) {
            *a += scale * b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += scale * b;
        }
    }

    fn scale(&mut self, s: f64) {
        for a in &mut self.weight.data {
            *a *= s;
        }
        for a in &mut self.bias {
            *a *= s;
        }
    }

    fn is_finite(&self) -> bool {
        self.weight.data.iter().all(|x| x.is_finite()) && self.bias.iter().all(|x| x.is_finite())
    }
}

/// Embedding network parameters: dense layers with tanh hidden activations
/// and an L2-normalized final output of dimension `d_out`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
    pub d_in: usize,
    pub d_out: usize,
    revision: u64,
}

impl ModelParams {
    /// Builds a seeded model with hidden widths `hidden` (empty → linear).
    /// Weights are uniform(−1/√fan_in, +1/√fan_in).
    pub fn new_seeded(d_in: usize, hidden: &[usize], d_out: usize, seed: u64) -> Result<Self> {
        if d_in == 0 || d_out == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![d_in];
        dims.extend_from_slice(hidden);
        dims.push(d_out);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                Layer {
                    weight: Matrix::from_fn(fan_out, fan_in, |_, _| {
                        rng.random_range(-bound..=bound)
                    }),
                    bias: (0..fan_out).map(|_| rng.random_range(-bound..=bound)).collect(),
                }
            })
            .collect();
        Ok(Self {
            layers,
            d_in,
            d_out,
            revision: fresh_revision(),
        })
    }

    pub fn from_layers(layers: Vec<Layer>, d_in: usize, d_out: usize) -> Result<Self> {
        let mut prev = d_in;
        for l in &layers {
            if l.weight.cols != prev || l.bias.len() != l.weight.rows {
                return Err(Error::Dimension {
                    expected: prev,
                    got: l.weight.cols,
                });
            }
            prev = l.weight.rows;
        }
        if prev != d_out || layers.is_empty() {
            return Err(Error::Config("layer shapes do not chain d_in → d_out".into()));
        }
        Ok(Self {
            layers,
            d_in,
            d_out,
            revision: fresh_revision(),
        })
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.weight.rows)
            .collect()
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Forward pass. The trace retains every activation needed for exact
    /// backprop through the normalization.
    pub fn forward(&self, x: &[f64]) -> Result<(Embedding, ForwardTrace)> {
        if x.len() != self.d_in {
            return Err(Error::Dimension {
                expected: self.d_in,
                got: x.len(),
            });
        }
        // activations[i] is the input to layer i; last entry is the pre-norm input
        let mut activations = Vec::with_capacity(self.layers.len());
        activations.push(x.to_vec());
        for layer in &self.layers[..self.layers.len() - 1] {
            let mut z = layer.weight.matvec(activations.last().unwrap());
            for (zv, b) in z.iter_mut().zip(&layer.bias) {
                *zv = (*zv + b).tanh();
            }
            activations.push(z);
        }
        let last = self.layers.last().unwrap();
        let mut pre_norm = last.weight.matvec(activations.last().unwrap());
        for (u, b) in pre_norm.iter_mut().zip(&last.bias) {
            *u += b;
        }
        if pre_norm.iter().any(|u| !u.is_finite()) {
            return Err(Error::Numerical("non-finite pre-norm activation".into()));
        }
        let norm = l2_norm(&pre_norm);
        if norm == 0.0 {
            return Err(Error::Numerical("zero pre-norm activation cannot normalize".into()));
        }
        let values: Vec<f64> = pre_norm.iter().map(|u| u / norm).collect();
        let embedding = Embedding::from_unit(values.clone())?;
        Ok((
            embedding,
            ForwardTrace {
                activations,
                norm,
                normalized: values,
                revision: self.revision,
            },
        ))
    }

    /// Forward pass without keeping the trace.
    pub fn embed(&self, x: &[f64]) -> Result<Embedding> {
        self.forward(x).map(|(e, _)| e)
    }

    /// Accumulates into `grads` the gradient of a loss w.r.t. all parameters,
    /// given `grad_embedding` = ∂loss/∂e at this trace, scaled by `scale`.
    pub fn backprop_embedding(
        &self,
        trace: &ForwardTrace,
        grad_embedding: &[f64],
        scale: f64,
        grads: &mut Vec<Layer>,
    ) -> Result<()> {
        if trace.revision != self.revision {
            return Err(Error::StaleTrace);
        }
        debug_assert_eq!(grads.len(), self.layers.len());
        // through e = u/‖u‖:  g_u = (g_e − (g_e·e)·e)/‖u‖
        let e = &trace.normalized;
        let dot: f64 = grad_embedding.iter().zip(e).map(|(g, ev)| g * ev).sum();
        let mut g: Vec<f64> = grad_embedding
            .iter()
            .zip(e)
            .map(|(gv, ev)| (gv - dot * ev) / trace.norm)
            .collect();
        // output layer is linear
        for i in (0..self.layers.len()).rev() {
            let input = &trace.activations[i];
            grads[i].weight.add_outer(&g, input, scale);
            for (gb, gv) in grads[i].bias.iter_mut().zip(&g) {
                *gb += scale * gv;
            }
            if i == 0 {
                break;
            }
            let mut upstream = self.layers[i].weight.matvec_t(&g);
            // through tanh: h = tanh(z) ⇒ dz = dh·(1 − h²)
            for (u, h) in upstream.iter_mut().zip(&trace.activations[i]) {
                *u *= 1.0 - h * h;
            }
            g = upstream;
        }
        Ok(())
    }

    fn bump_revision(&mut self) {
        self.revision = fresh_revision();
    }

    fn is_finite(&self) -> bool {
        self.layers.iter().all(Layer::is_finite)
    }
}

/// Retained activations of one forward pass, tied to the parameter revision
/// that produced them.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    activations: Vec<Vec<f64>>,
    norm: f64,
    normalized: Vec<f64>,
    revision: u64,
}

impl ForwardTrace {
    pub fn embedding_values(&self) -> &[f64] {
        &self.normalized
    }
}

/// Softmax classifier head over embeddings: logits = W·e + b.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxHead {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl SoftmaxHead {
    pub fn new_seeded(num_classes: u32, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dim as f64).sqrt();
        SoftmaxHead {
            weight: Matrix::from_fn(num_classes as usize, dim, |_, _| {
                rng.random_range(-bound..=bound)
            }),
            bias: (0..num_classes).map(|_| rng.random_range(-bound..=bound)).collect(),
        }
    }

    pub fn num_classes(&self) -> u32 {
        self.weight.rows as u32
    }

    pub fn logits(&self, e: &[f64]) -> Vec<f64> {
        let mut l = self.weight.matvec(e);
        for (lv, b) in l.iter_mut().zip(&self.bias) {
            *lv += b;
        }
        l
    }

    /// Softmax probabilities with log-sum-exp stabilization.
    pub fn probabilities(&self, e: &[f64]) -> Vec<f64> {
        let logits = self.logits(e);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = p.iter().sum();
        for v in &mut p {
            *v /= sum;
        }
        p
    }

    /// Argmax class, ties broken by lowest class index.
    pub fn predict(&self, e: &[f64]) -> u32 {
        let logits = self.logits(e);
        let mut best = 0usize;
        for (i, l) in logits.iter().enumerate().skip(1) {
            if *l > logits[best] {
                best = i;
            }
        }
        best as u32
    }

    fn as_layer(&self) -> Layer {
        Layer {
            weight: self.weight.clone(),
            bias: self.bias.clone(),
        }
    }
}

/// A trained embedding model plus its classifier head.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub model: ModelParams,
    pub head: SoftmaxHead,
}

impl Classifier {
    /// Predicted class for raw features, ties broken by lowest class index.
    pub fn predict(&self, features: &[f64]) -> Result<u32> {
        let e = self.model.embed(features)?;
        Ok(self.head.predict(e.values()))
    }

    /// Softmax probability of `label` for raw features.
    pub fn confidence_in(&self, features: &[f64], label: u32) -> Result<f64> {
        if label >= self.head.num_classes() {
            return Err(Error::Label {
                label,
                num_classes: self.head.num_classes(),
            });
        }
        let e = self.model.embed(features)?;
        Ok(self.head.probabilities(e.values())[label as usize])
    }
}

/// The full trainable parameter set: embedding model plus optional head.
#[derive(Debug, Clone)]
pub struct TrainableParams {
    pub model: ModelParams,
    pub head: Option<SoftmaxHead>,
}

/// Gradients (or velocities) mirroring the shapes of a [`TrainableParams`].
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub layers: Vec<Layer>,
    pub head: Option<Layer>,
}

impl GradientSet {
    pub fn zeros_like(params: &TrainableParams) -> Self {
        Self {
            layers: params.model.layers.iter().map(Layer::zeros_like).collect(),
            head: params.head.as_ref().map(|h| h.as_layer().zeros_like()),
        }
    }

    pub fn axpy(&mut self, scale: f64, other: &GradientSet) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.axpy(scale, b);
        }
        if let (Some(a), Some(b)) = (self.head.as_mut(), other.head.as_ref()) {
            a.axpy(scale, b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.scale(s);
        }
        if let Some(h) = &mut self.head {
            h.scale(s);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weight.data);
            out.extend_from_slice(&l.bias);
        }
        if let Some(h) = &self.head {
            out.extend_from_slice(&h.weight.data);
            out.extend_from_slice(&h.bias);
        }
        out
    }
}

impl TrainableParams {
    pub fn model_only(model: ModelParams) -> Self {
        Self { model, head: None }
    }

    pub fn with_head(model: ModelParams, head: SoftmaxHead) -> Self {
        Self {
            model,
            head: Some(head),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.model.layers {
            out.extend_from_slice(&l.weight.data);
            out.extend_from_slice(&l.bias);
        }
        if let Some(h) = &self.head {
            out.extend_from_slice(&h.weight.data);
            out.extend_from_slice(&h.bias);
        }
        out
    }

    /// Rebuilds a parameter set of identical shape from a flat vector.
    pub fn from_flat(&self, flat: &[f64]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<Vec<f64>> {
            if pos + n > flat.len() {
                return Err(Error::Dimension {
                    expected: pos + n,
                    got: flat.len(),
                });
            }
            let v = flat[pos..pos + n].to_vec();
            pos += n;
            Ok(v)
        };
        let mut layers = Vec::with_capacity(self.model.layers.len());
        for l in &self.model.layers {
            let (r, c) = (l.weight.rows, l.weight.cols);
            layers.push(Layer {
                weight: Matrix {
                    rows: r,
                    cols: c,
                    data: take(r * c)?,
                },
                bias: take(l.bias.len())?,
            });
        }
        let head = match &self.head {
            Some(h) => {
                let (r, c) = (h.weight.rows, h.weight.cols);
                Some(SoftmaxHead {
                    weight: Matrix {
                        rows: r,
                        cols: c,
                        data: take(r * c)?,
                    },
                    bias: take(h.bias.len())?,
                })
            }
            None => None,
        };
        if pos != flat.len() {
            return Err(Error::Dimension {
                expected: pos,
                got: flat.len(),
            });
        }
        let model = ModelParams {
            layers,
            d_in: self.model.d_in,
            d_out: self.model.d_out,
            revision: fresh_revision(),
        };
        Ok(Self { model, head })
    }

    fn apply_velocity(&mut self, velocity: &GradientSet) -> Result<()> {
        for (l, v) in self.model.layers.iter_mut().zip(&velocity.layers) {
            l.axpy(1.0, v);
        }
        if let (Some(h), Some(v)) = (self.head.as_mut(), velocity.head.as_ref()) {
            for (a, b) in h.weight.data.iter_mut().zip(&v.weight.data) {
                *a += b;
            }
            for (a, b) in h.bias.iter_mut().zip(&v.bias) {
                *a += b;
            }
        }
        self.model.bump_revision();
        if !self.model.is_finite()
            || self
                .head
                .as_ref()
                .is_some_and(|h| h.weight.data.iter().chain(&h.bias).any(|x| !x.is_finite()))
        {
            return Err(Error::Numerical("non-finite parameter update".into()));
        }
        Ok(())
    }
}

/// Nesterov accelerated gradient state (lookahead-gradient formulation):
///
/// ```text
/// v ← μ·v − η·∇L(θ + μ·v)        θ ← θ + v
/// ```
///
/// The caller evaluates gradients at the lookahead point provided by
/// [`NagState::lookahead`]; [`NagState::step`] then applies the update.
/// With μ = 0 this reduces to plain SGD.
#[derive(Debug, Clone)]
pub struct NagState {
    velocity: GradientSet,
    pub momentum: f64,
    pub learning_rate: f64,
}

impl NagState {
    pub fn new(params: &TrainableParams, momentum: f64, learning_rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} not in [0,1)")));
        }
        if learning_rate <= 0.0 {
            return Err(Error::Config(format!("learning rate {learning_rate} must be > 0")));
        }
        Ok(Self {
            velocity: GradientSet::zeros_like(params),
            momentum,
            learning_rate,
        })
    }

    /// θ + μ·v, the point where the caller must evaluate gradients.
    pub fn lookahead(&self, params: &TrainableParams) -> TrainableParams {
        let mut ahead = params.clone();
        let mut scaled = self.velocity.clone();
        scaled.scale(self.momentum);
        // infallible: velocity mirrors params and is finite by construction
        ahead
            .apply_velocity(&scaled)
            .expect("lookahead produced non-finite parameters");
        ahead
    }

    /// Applies v ← μ·v − η·g; θ ← θ + v.
    pub fn step(&mut self, params: &mut TrainableParams, grads: &GradientSet) -> Result<()> {
        self.velocity.scale(self.momentum);
        self.velocity.axpy(-self.learning_rate, grads);
        params.apply_velocity(&self.velocity)
    }
}

/// Hinge triplet loss max(0, ‖a−p‖² − ‖a−n‖² + α).
pub fn triplet_loss(a: &Embedding, p: &Embedding, n: &Embedding, margin: f64) -> Result<f64> {
    if a.dim() != p.dim() || a.dim() != n.dim() {
        return Err(Error::Dimension {
            expected: a.dim(),
            got: p.dim().max(n.dim()),
        });
    }
    let d_ap = sq_dist(a.values(), p.values());
    let d_an = sq_dist(a.values(), n.values());
    Ok((d_ap - d_an + margin).max(0.0))
}

/// Exact gradient of the hinge triplet loss through all three traces,
/// accumulated into `grads` with weight `scale`. Returns the loss value.
/// Inactive triplets (violation ≤ 0, including the boundary) contribute
/// nothing: the subgradient 0 is used at the hinge.
pub fn triplet_backward(
    params: &ModelParams,
    trace_a: &ForwardTrace,
    trace_p: &ForwardTrace,
    trace_n: &ForwardTrace,
    margin: f64,
    scale: f64,
    grads: &mut Vec<Layer>,
) -> Result<f64> {
    let (ea, ep, en) = (
        trace_a.embedding_values(),
        trace_p.embedding_values(),
        trace_n.embedding_values(),
    );
    let d_ap = sq_dist(ea, ep);
    let d_an = sq_dist(ea, en);
    let violation = d_ap - d_an + margin;
    if violation <= 0.0 {
        // still validate trace freshness so staleness never goes unnoticed
        if trace_a.revision != params.revision()
            || trace_p.revision != params.revision()
            || trace_n.revision != params.revision()
        {
            return Err(Error::StaleTrace);
        }
        return Ok(0.0);
    }
    let dim = ea.len();
    let mut ga = vec![0.0; dim];
    let mut gp = vec![0.0; dim];
    let mut gn = vec![0.0; dim];
    for i in 0..dim {
        ga[i] = 2.0 * (en[i] - ep[i]);
        gp[i] = -2.0 * (ea[i] - ep[i]);
        gn[i] = 2.0 * (ea[i] - en[i]);
    }
    params.backprop_embedding(trace_a, &ga, scale, grads)?;
    params.backprop_embedding(trace_p, &gp, scale, grads)?;
    params.backprop_embedding(trace_n, &gn, scale, grads)?;
    Ok(violation)
}

/// Cross-entropy of the softmax head, log-sum-exp stabilized.
pub fn softmax_loss(head: &SoftmaxHead, e: &[f64], label: u32) -> Result<f64> {
    if label >= head.num_classes() {
        return Err(Error::Label {
            label,
            num_classes: head.num_classes(),
        });
    }
    let logits = head.logits(e);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label as usize])
}

/// Gradient of [`softmax_loss`] w.r.t. the head (accumulated into
/// `head_grads` with weight `scale`) and w.r.t. the embedding (returned).
pub fn softmax_backward(
    head: &SoftmaxHead,
    e: &[f64],
    label: u32,
    scale: f64,
    head_grads: &mut Layer,
) -> Result<Vec<f64>> {
    if label >= head.num_classes() {
        return Err(Error::Label {
            label,
            num_classes: head.num_classes(),
        });
    }
    let mut dlogits = head.probabilities(e);
    dlogits[label as usize] -= 1.0;
    head_grads.weight.add_outer(&dlogits, e, scale);
    for (gb, d) in head_grads.bias.iter_mut().zip(&dlogits) {
        *gb += scale * d;
    }
    let mut de = head.weight.matvec_t(&dlogits);
    for v in &mut de {
        *v *= scale;
    }
    Ok(de)
}

/// Mean triplet loss plus λ times mean softmax loss; an empty term list
/// contributes 0.
pub fn joint_loss(triplet_terms: &[f64], softmax_terms: &[f64], lambda: f64) -> f64 {
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    mean(triplet_terms) + lambda * mean(softmax_terms)
}

/// Per-step training diagnostics.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossReport {
    pub triplet_loss: f64,
    pub softmax_loss: f64,
    pub active_triplets: usize,
    pub batch_size: usize,
}

/// Raw inputs of one triplet (anchor, positive, negative feature vectors).
#[derive(Debug, Clone)]
pub struct TripletInput {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// A joint-loss batch: triplets plus labeled samples with their weighting.
#[derive(Debug, Clone)]
pub struct JointBatch {
    pub triplets: Vec<TripletInput>,
    pub labeled: Vec<(Vec<f64>, u32)>,
    pub margin: f64,
    pub lambda: f64,
}

/// Evaluation of a joint batch.
#[derive(Debug, Clone, Copy)]
pub struct JointEval {
    pub loss: f64,
    pub triplet_mean: f64,
    pub softmax_mean: f64,
    pub active_triplets: usize,
}

/// Loss and exact gradients of the joint objective at `params`.
pub fn joint_loss_and_grads(
    params: &TrainableParams,
    batch: &JointBatch,
) -> Result<(JointEval, GradientSet)> {
    if !batch.labeled.is_empty() && params.head.is_none() {
        return Err(Error::Config("labeled terms require a softmax head".into()));
    }
    let mut grads = GradientSet::zeros_like(params);
    let mut triplet_terms = Vec::with_capacity(batch.triplets.len());
    let mut active = 0usize;
    let t_scale = if batch.triplets.is_empty() {
        0.0
    } else {
        1.0 / batch.triplets.len() as f64
    };
    for t in &batch.triplets {
        let (_, ta) = params.model.forward(&t.anchor)?;
        let (_, tp) = params.model.forward(&t.positive)?;
        let (_, tn) = params.model.forward(&t.negative)?;
        let loss = triplet_backward(
            &params.model,
            &ta,
            &tp,
            &tn,
            batch.margin,
            t_scale,
            &mut grads.layers,
        )?;
        if loss > 0.0 {
            active += 1;
        }
        triplet_terms.push(loss);
    }
    let mut softmax_terms = Vec::with_capacity(batch.labeled.len());
    if !batch.labeled.is_empty() {
        let head = params.head.as_ref().unwrap();
        let head_grads = grads.head.as_mut().unwrap();
        let s_scale = batch.lambda / batch.labeled.len() as f64;
        for (x, label) in &batch.labeled {
            let (e, trace) = params.model.forward(x)?;
            softmax_terms.push(softmax_loss(head, e.values(), *label)?);
            let de = softmax_backward(head, e.values(), *label, s_scale, head_grads)?;
            params
                .model
                .backprop_embedding(&trace, &de, 1.0, &mut grads.layers)?;
        }
    }
    let eval = JointEval {
        loss: joint_loss(&triplet_terms, &softmax_terms, batch.lambda),
        triplet_mean: if triplet_terms.is_empty() {
            0.0
        } else {
            triplet_terms.iter().sum::<f64>() / triplet_terms.len() as f64
        },
        softmax_mean: if softmax_terms.is_empty() {
            0.0
        } else {
            softmax_terms.iter().sum::<f64>() / softmax_terms.len() as f64
        },
        active_triplets: active,
    };
    Ok((eval, grads))
}

fn joint_loss_only(params: &TrainableParams, batch: &JointBatch) -> Result<f64> {
    let mut triplet_terms = Vec::with_capacity(batch.triplets.len());
    for t in &batch.triplets {
        let a = params.model.embed(&t.anchor)?;
        let p = params.model.embed(&t.positive)?;
        let n = params.model.embed(&t.negative)?;
        triplet_terms.push(triplet_loss(&a, &p, &n, batch.margin)?);
    }
    let mut softmax_terms = Vec::with_capacity(batch.labeled.len());
    if !batch.labeled.is_empty() {
        let head = params
            .head
            .as_ref()
            .ok_or_else(|| Error::Config("labeled terms require a softmax head".into()))?;
        for (x, label) in &batch.labeled {
            let e = params.model.embed(x)?;
            softmax_terms.push(softmax_loss(head, e.values(), *label)?);
        }
    }
    Ok(joint_loss(&triplet_terms, &softmax_terms, batch.lambda))
}

/// Relative error with a floor, so near-zero coordinates compare absolutely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Central finite differences over every parameter of the joint loss versus
/// the analytic gradient. Returns the max per-coordinate relative error.
pub fn grad_check(params: &TrainableParams, batch: &JointBatch, h: f64) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::Config("finite-difference step must be > 0".into()));
    }
    let (_, grads) = joint_loss_and_grads(params, batch)?;
    let analytic = grads.flatten();
    let flat = params.flatten();
    let mut worst = 0.0f64;
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += h;
        let mut minus = flat.clone();
        minus[i] -= h;
        let lp = joint_loss_only(&params.from_flat(&plus)?, batch)?;
        let lm = joint_loss_only(&params.from_flat(&minus)?, batch)?;
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i], fd));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::l2_normalize;

    fn identity_params(d: usize) -> ModelParams {
        let layers = vec![Layer {
            weight: Matrix::from_fn(d, d, |r, c| if r == c { 1.0 } else { 0.0 }),
            bias: vec![0.0; d],
        }];
        ModelParams::from_layers(layers, d, d).unwrap()
    }

    #[test]
    fn forward_identity_model_normalizes() {
        let params = identity_params(4);
        let (e, _) = params.forward(&[3.0, 4.0, 0.0, 0.0]).unwrap();
        assert!((e.values()[0] - 0.6).abs() < 1e-15);
        assert!((e.values()[1] - 0.8).abs() < 1e-15);
        assert_eq!(e.values()[2], 0.0);
    }

    #[test]
    fn forward_zero_preactivation_fails() {
        let params = identity_params(3);
        assert!(matches!(
            params.forward(&[0.0, 0.0, 0.0]),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn forward_matches_straight_line_reimplementation() {
        let params = ModelParams::new_seeded(5, &[7], 3, 99).unwrap();
        let x = [0.3, -1.2, 0.8, 0.05, 2.0];
        let (e, _) = params.forward(&x).unwrap();

        // independent naive pass
        let l0 = &params.layers[0];
        let mut h = vec![0.0; 7];
        for r in 0..7 {
            let mut z = l0.bias[r];
            for c in 0..5 {
                z += l0.weight.get(r, c) * x[c];
            }
            h[r] = z.tanh();
        }
        let l1 = &params.layers[1];
        let mut u = vec![0.0; 3];
        for r in 0..3 {
            let mut z = l1.bias[r];
            for c in 0..7 {
                z += l1.weight.get(r, c) * h[c];
            }
            u[r] = z;
        }
        let norm = l2_norm(&u);
        for (got, want) in e.values().iter().zip(u.iter().map(|v| v / norm)) {
            assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn triplet_loss_examples() {
        let a = l2_normalize(&[1.0, 0.0]).unwrap();
        let p = l2_normalize(&[0.0, 1.0]).unwrap();
        let n = l2_normalize(&[-1.0, 0.0]).unwrap();
        // easy triplet: a=p, d_an=2
        assert_eq!(triplet_loss(&a, &a, &p, 0.4).unwrap(), 0.0);
        // degenerate triplet returns the margin
        assert_eq!(triplet_loss(&a, &a, &a, 0.4).unwrap(), 0.4);
        // max(0, 2−4+0.4) = 0
        assert_eq!(triplet_loss(&a, &p, &n, 0.4).unwrap(), 0.0);
    }

    #[test]
    fn hinge_inactive_gradient_is_zero() {
        let params = ModelParams::new_seeded(4, &[], 3, 7).unwrap();
        let (_, ta) = params.forward(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let (_, tp) = params.forward(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let (_, tn) = params.forward(&[-1.0, 0.2, 0.1, 0.0]).unwrap();
        let tp_params = TrainableParams::model_only(params.clone());
        let mut grads = GradientSet::zeros_like(&tp_params);
        // a == p makes d_ap = 0; with a far negative the hinge is inactive
        let loss = triplet_backward(&params, &ta, &tp, &tn, 0.4, 1.0, &mut grads.layers).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn stale_trace_is_rejected() {
        let params = ModelParams::new_seeded(4, &[], 3, 7).unwrap();
        let (_, trace) = params.forward(&[1.0, 0.5, 0.0, 0.0]).unwrap();
        let mut tp = TrainableParams::model_only(params);
        let mut nag = NagState::new(&tp, 0.0, 0.1).unwrap();
        let grads = GradientSet::zeros_like(&tp);
        nag.step(&mut tp, &grads).unwrap();
        let mut sink = GradientSet::zeros_like(&tp);
        let err = tp
            .model
            .backprop_embedding(&trace, &[1.0, 0.0, 0.0], 1.0, &mut sink.layers);
        assert!(matches!(err, Err(Error::StaleTrace)));
    }

    #[test]
    fn softmax_uniform_logits_is_ln2() {
        let head = SoftmaxHead {
            weight: Matrix::zeros(2, 3),
            bias: vec![0.0, 0.0],
        };
        let loss = softmax_loss(&head, &[1.0, 0.0, 0.0], 0).unwrap();
        assert!((loss - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_margin_loss_vanishes() {
        let head = SoftmaxHead {
            weight: Matrix::from_fn(2, 1, |r, _| if r == 0 { 20.0 } else { -20.0 }),
            bias: vec![0.0, 0.0],
        };
        let loss = softmax_loss(&head, &[1.0], 0).unwrap();
        assert!(loss < 1e-8);
    }

    #[test]
    fn softmax_label_out_of_range() {
        let head = SoftmaxHead::new_seeded(3, 2, 1);
        assert!(matches!(
            softmax_loss(&head, &[1.0, 0.0], 3),
            Err(Error::Label { label: 3, .. })
        ));
    }

    #[test]
    fn joint_loss_combines_means() {
        assert_eq!(joint_loss(&[1.0, 3.0], &[], 0.0), 2.0);
        assert_eq!(joint_loss(&[0.5], &[0.5], 1.0), 1.0);
        assert_eq!(joint_loss(&[], &[], 1.0), 0.0);
    }

    #[test]
    fn nag_zero_momentum_is_sgd() {
        let params = ModelParams::new_seeded(3, &[], 2, 5).unwrap();
        let mut tp = TrainableParams::model_only(params);
        let before = tp.flatten();
        let mut nag = NagState::new(&tp, 0.0, 0.1).unwrap();
        let mut grads = GradientSet::zeros_like(&tp);
        for g in &mut grads.layers[0].weight.data {
            *g = 1.0;
        }
        nag.step(&mut tp, &grads).unwrap();
        let after = tp.flatten();
        let n = grads.layers[0].weight.data.len();
        for i in 0..n {
            assert_eq!(after[i], before[i] - 0.1);
        }
        for i in n..after.len() {
            assert_eq!(after[i], before[i]); // bias grads were zero
        }
    }

    #[test]
    fn nag_hand_computed_first_step_on_quadratic() {
        // f(θ) = θ²/2, ∇f = θ, η = 0.1, μ = 0.9, θ₀ = 1, v₀ = 0
        let params = ModelParams::from_layers(
            vec![Layer {
                weight: Matrix {
                    rows: 1,
                    cols: 1,
                    data: vec![1.0],
                },
                bias: vec![0.0],
            }],
            1,
            1,
        )
        .unwrap();
        let mut tp = TrainableParams::model_only(params);
        let mut nag = NagState::new(&tp, 0.9, 0.1).unwrap();
        let ahead = nag.lookahead(&tp);
        assert_eq!(ahead.flatten()[0], 1.0); // v₀ = 0 ⇒ lookahead = θ
        let mut grads = GradientSet::zeros_like(&tp);
        grads.layers[0].weight.data[0] = ahead.flatten()[0]; // ∇f(θ+μv) = 1
        nag.step(&mut tp, &grads).unwrap();
        assert!((tp.flatten()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn nag_converges_on_random_convex_quadratic() {
        // minimize Σ cᵢ·θᵢ²/2 over a 6-dim parameter vector
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let coeffs: Vec<f64> = (0..6).map(|_| rng.random_range(0.5..2.0)).collect();
        let params = ModelParams::from_layers(
            vec![Layer {
                weight: Matrix {
                    rows: 1,
                    cols: 5,
                    data: (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
                },
                bias: vec![rng.random_range(-1.0..1.0)],
            }],
            5,
            1,
        )
        .unwrap();
        let mut tp = TrainableParams::model_only(params);
        let loss_of = |flat: &[f64]| -> f64 {
            flat.iter()
                .zip(&coeffs)
                .map(|(t, c)| 0.5 * c * t * t)
                .sum()
        };
        let initial = loss_of(&tp.flatten());
        // overdamped regime so the trajectory settles into monotone decay
        let mut nag = NagState::new(&tp, 0.5, 0.05).unwrap();
        let mut losses = Vec::new();
        for _ in 0..200 {
            let ahead = nag.lookahead(&tp);
            let flat_ahead = ahead.flatten();
            let mut grads = GradientSet::zeros_like(&tp);
            let gw: Vec<f64> = flat_ahead
                .iter()
                .zip(&coeffs)
                .map(|(t, c)| c * t)
                .collect();
            grads.layers[0].weight.data.copy_from_slice(&gw[..5]);
            grads.layers[0].bias[0] = gw[5];
            nag.step(&mut tp, &grads).unwrap();
            losses.push(loss_of(&tp.flatten()));
        }
        for w in losses[10..].windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        assert!(losses.last().unwrap() / initial < 1e-6);
    }

    #[test]
    fn grad_check_linear_model_joint() {
        let model = ModelParams::new_seeded(4, &[], 3, 11).unwrap();
        let head = SoftmaxHead::new_seeded(4, 3, 12);
        let params = TrainableParams::with_head(model, head);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let vec4 = |r: &mut ChaCha8Rng| (0..4).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let batch = JointBatch {
            triplets: (0..2)
                .map(|_| TripletInput {
                    anchor: vec4(&mut rng),
                    positive: vec4(&mut rng),
                    negative: vec4(&mut rng),
                })
                .collect(),
            labeled: (0..3).map(|i| (vec4(&mut rng), i as u32)).collect(),
            margin: 0.4,
            lambda: 1.0,
        };
        let err = grad_check(&params, &batch, 1e-5).unwrap();
        assert!(err <= 1e-5, "max rel err {err}");
    }

    #[test]
    fn grad_check_hinge_inactive_batch() {
        let model = ModelParams::new_seeded(3, &[], 2, 21).unwrap();
        let params = TrainableParams::model_only(model);
        // anchor == positive and a far negative: hinge inactive, margin tiny
        let batch = JointBatch {
            triplets: vec![TripletInput {
                anchor: vec![1.0, 0.0, 0.0],
                positive: vec![1.0, 0.0, 0.0],
                negative: vec![-1.0, 0.3, 0.0],
            }],
            labeled: vec![],
            margin: 0.01,
            lambda: 0.0,
        };
        let (eval, grads) = joint_loss_and_grads(&params, &batch).unwrap();
        assert_eq!(eval.loss, 0.0);
        assert!(grads.flatten().iter().all(|&g| g == 0.0));
        let err = grad_check(&params, &batch, 1e-5).unwrap();
        assert!(err <= 1e-9, "inactive batch FD err {err}");
    }

    #[test]
    fn grad_check_tanh_hidden_layer() {
        let model = ModelParams::new_seeded(4, &[8], 3, 31).unwrap();
        let head = SoftmaxHead::new_seeded(5, 3, 32);
        let params = TrainableParams::with_head(model, head);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let vec4 = |r: &mut ChaCha8Rng| (0..4).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let batch = JointBatch {
            triplets: (0..3)
                .map(|_| TripletInput {
                    anchor: vec4(&mut rng),
                    positive: vec4(&mut rng),
                    negative: vec4(&mut rng),
                })
                .collect(),
            labeled: (0..4).map(|i| (vec4(&mut rng), i as u32)).collect(),
            margin: 0.4,
            lambda: 0.7,
        };
        let err = grad_check(&params, &batch, 1e-5).unwrap();
        assert!(err <= 1e-4, "max rel err {err}");
    }

    #[test]
    fn batch_gradient_is_sum_of_per_triplet_gradients() {
        let model = ModelParams::new_seeded(4, &[6], 3, 41).unwrap();
        let params = TrainableParams::model_only(model);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let vec4 = |r: &mut ChaCha8Rng| (0..4).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let triplets: Vec<TripletInput> = (0..4)
            .map(|_| TripletInput {
                anchor: vec4(&mut rng),
                positive: vec4(&mut rng),
                negative: vec4(&mut rng),
            })
            .collect();
        let mut summed = GradientSet::zeros_like(&params);
        for t in &triplets {
            let batch = JointBatch {
                triplets: vec![t.clone()],
                labeled: vec![],
                margin: 0.4,
                lambda: 0.0,
            };
            let (_, g) = joint_loss_and_grads(&params, &batch).unwrap();
            summed.axpy(0.25, &g); // each single-triplet mean = the triplet itself
        }
        let batch = JointBatch {
            triplets,
            labeled: vec![],
            margin: 0.4,
            lambda: 0.0,
        };
        let (_, whole) = joint_loss_and_grads(&params, &batch).unwrap();
        for (a, b) in whole.flatten().iter().zip(summed.flatten()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }
}
