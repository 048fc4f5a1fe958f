//! Fully connected layers that evaluate only a hash-sampled subset of their
//! neurons, and a feedforward network built from them.
//!
//! A layer with sparsity `s < 1` keeps a [`NeuronIndex`] over its weight rows.
//! Each forward pass queries the index with the layer input and computes
//! `a_i = f(w_i . x + b_i)` only for the returned neurons (the active set).
//! Backward passes touch only those rows and only the input coordinates that
//! were present in `x`.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autotune::{autotune, AutotuneConfig, AutotunePlan};
use crate::error::{Error, Result};
use crate::lsh::{read_u32, read_u64, splitmix64, NeuronIndex, QueryScratch};
use crate::sparse::{densify, sparsify, DenseVector, SparseVector};

const MODEL_MAGIC: &[u8; 4] = b"BLTM";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    /// Softmax normalized over the active set only.
    Softmax,
    Identity,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Softmax => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Softmax),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Softmax => "softmax",
            Activation::Identity => "identity",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "softmax" => Ok(Activation::Softmax),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }
}

/// Why a neuron is in the active set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Sampled,
    LabelForced,
    Padded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSet {
    ids: Vec<u32>,
    origins: Vec<Origin>,
    codes: Option<Vec<u32>>,
}

impl ActiveSet {
    /// Every neuron of a `dim`-wide layer.
    pub fn full(dim: usize) -> Self {
        Self {
            ids: (0..dim as u32).collect(),
            origins: vec![Origin::Sampled; dim],
            codes: None,
        }
    }

    /// Active set with the given ids, all marked as sampled.
    pub fn from_ids(mut ids: Vec<u32>) -> Result<Self> {
        ids.sort_unstable();
        if ids.is_empty() || ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract("active ids must be nonempty and distinct".into()));
        }
        let n = ids.len();
        Ok(Self {
            ids,
            origins: vec![Origin::Sampled; n],
            codes: None,
        })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn origins(&self) -> &[Origin] {
        &self.origins
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: u32) -> bool {
        self.ids.binary_search(&id).is_ok()
    }

    /// Bucket codes selected by the query that produced this set.
    pub fn codes(&self) -> Option<&[u32]> {
        self.codes.as_deref()
    }

    /// Ids that had to be added because sampling missed them.
    pub fn forced_labels(&self) -> Vec<u32> {
        self.ids
            .iter()
            .zip(&self.origins)
            .filter(|(_, &o)| o == Origin::LabelForced)
            .map(|(&id, _)| id)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForwardMode<'a> {
    /// Sample with the index at the layer's own sparsity and force `labels`
    /// into the active set. Hidden layers pass an empty label slice.
    Train { labels: &'a [u32] },
    /// Sample with the index at the given sparsity.
    SparseInfer { sparsity: f64 },
    DenseInfer,
}

/// Gradients of one sample through one layer.
///
/// The weight gradient of row `ids[k]` is `deltas[k] * input`, restricted to
/// the stored entries of `input`; it is kept in that factored form rather
/// than materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub ids: Vec<u32>,
    /// Gradient w.r.t. the pre-activation of each active neuron, which is also
    /// its bias gradient.
    pub deltas: Vec<f64>,
    pub input: SparseVector,
    /// Gradient w.r.t. the stored entries of `input`, exact zeros dropped.
    pub input_grad: Option<SparseVector>,
}

impl LayerGradients {
    pub fn bias_grads(&self) -> &[f64] {
        &self.deltas
    }

    /// Nonzero-support weight gradient of active row `k` as `(column, value)`.
    pub fn weight_row(&self, k: usize) -> impl Iterator<Item = (u32, f64)> + '_ {
        let delta = self.deltas[k];
        self.input.iter().map(move |(c, x)| (c, delta * x))
    }

    /// Weight gradient of active row `k` as a dense row.
    pub fn weight_row_dense(&self, k: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.input.dim()];
        for (c, g) in self.weight_row(k) {
            row[c as usize] = g;
        }
        row
    }
}

/// Softmax cross-entropy over the active set against a target spread
/// uniformly over `labels`. Returns the loss and `softmax(logits) - target`.
pub fn loss_grad_softmax_ce(logits: &[f64], active_ids: &[u32], labels: &[u32]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != active_ids.len() {
        return Err(Error::Dimension {
            expected: active_ids.len(),
            got: logits.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Contract("softmax cross-entropy needs at least one label".into()));
    }
    let mut positions = Vec::with_capacity(labels.len());
    for &l in labels {
        match active_ids.binary_search(&l) {
            Ok(p) => positions.push(p),
            Err(_) => return Err(Error::Contract(format!("label {l} is not in the active set"))),
        }
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut grad: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = grad.iter().sum();
    let log_sum = max + sum.ln();
    grad.iter_mut().for_each(|g| *g /= sum);
    let t = 1.0 / labels.len() as f64;
    let mut loss = 0.0;
    for p in positions {
        grad[p] -= t;
        loss += t * (log_sum - logits[p]);
    }
    Ok((loss, grad))
}

fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    values.iter_mut().for_each(|v| *v /= sum);
}

/// Full output of a layer's forward pass.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub active: ActiveSet,
    /// `w_i . x + b_i` for each active id, aligned with `active.ids()`.
    pub pre_activations: Vec<f64>,
    pub activations: SparseVector,
}

#[derive(Debug, Clone)]
pub struct SparseLayer {
    dim: usize,
    prev_dim: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
    sparsity: f64,
    activation: Activation,
    plan: Option<AutotunePlan>,
    index: Option<NeuronIndex>,
    index_seed: u64,
}

/// Uniform initialization in `+-sqrt(6 / (fan_in + fan_out))`.
pub fn init_weights(dim: usize, prev_dim: usize, seed: u64) -> Vec<f64> {
    let bound = (6.0 / (prev_dim + dim) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim * prev_dim).map(|_| rng.random_range(-bound..bound)).collect()
}

impl SparseLayer {
    /// Fresh layer. For `sparsity < 1` the hash parameters are autotuned from
    /// the layer shape.
    pub fn new(
        dim: usize,
        prev_dim: usize,
        activation: Activation,
        sparsity: f64,
        tune: &AutotuneConfig,
        seed: u64,
    ) -> Result<Self> {
        let plan = if sparsity < 1.0 {
            Some(autotune(dim, prev_dim, sparsity, tune)?)
        } else {
            None
        };
        Self::with_plan(dim, prev_dim, activation, sparsity, plan, seed)
    }

    /// Fresh layer with an explicit hash plan (`None` for a dense layer).
    pub fn with_plan(
        dim: usize,
        prev_dim: usize,
        activation: Activation,
        sparsity: f64,
        plan: Option<AutotunePlan>,
        seed: u64,
    ) -> Result<Self> {
        let weights = init_weights(dim, prev_dim, seed);
        Self::from_parameters(weights, vec![0.0; dim], prev_dim, activation, sparsity, plan, splitmix64(seed))
    }

    /// Layer with given parameters; `weights` is row-major `dim x prev_dim`.
    pub fn from_parameters(
        weights: Vec<f64>,
        biases: Vec<f64>,
        prev_dim: usize,
        activation: Activation,
        sparsity: f64,
        plan: Option<AutotunePlan>,
        index_seed: u64,
    ) -> Result<Self> {
        let dim = biases.len();
        if dim == 0 || prev_dim == 0 {
            return Err(Error::InvalidArgument("layer dims must be positive".into()));
        }
        if weights.len() != dim * prev_dim {
            return Err(Error::Dimension {
                expected: dim * prev_dim,
                got: weights.len(),
            });
        }
        if !(sparsity > 0.0 && sparsity <= 1.0) {
            return Err(Error::InvalidArgument(format!("sparsity must lie in (0, 1], got {sparsity}")));
        }
        match (&plan, sparsity < 1.0) {
            (None, true) => {
                return Err(Error::InvalidArgument("a sparse layer needs a hash plan".into()));
            }
            (Some(_), false) => {
                return Err(Error::InvalidArgument("a dense layer takes no hash plan".into()));
            }
            (Some(p), true) if p.layer_dim != dim || p.prev_dim != prev_dim => {
                return Err(Error::InvalidArgument(format!(
                    "plan is for a {}x{} layer, layer is {dim}x{prev_dim}",
                    p.layer_dim, p.prev_dim
                )));
            }
            _ => {}
        }
        let index = match &plan {
            Some(p) => Some(NeuronIndex::build(&weights, p, index_seed)?),
            None => None,
        };
        Ok(Self {
            dim,
            prev_dim,
            weights,
            biases,
            sparsity,
            activation,
            plan,
            index,
            index_seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prev_dim(&self) -> usize {
        self.prev_dim
    }

    pub fn sparsity(&self) -> f64 {
        self.sparsity
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn plan(&self) -> Option<&AutotunePlan> {
        self.plan.as_ref()
    }

    pub fn index(&self) -> Option<&NeuronIndex> {
        self.index.as_ref()
    }

    pub fn index_mut(&mut self) -> Option<&mut NeuronIndex> {
        self.index.as_mut()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.prev_dim..(i + 1) * self.prev_dim]
    }

    /// Mutable parameters. Call [`SparseLayer::rebuild_index`] afterwards to
    /// re-hash the rows.
    pub fn parameters_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.weights, &mut self.biases)
    }

    pub fn rebuild_index(&mut self) -> Result<()> {
        if let Some(ix) = &mut self.index {
            ix.rebuild(&self.weights)?;
        }
        Ok(())
    }

    /// Number of neurons to request for a sparsity level.
    pub fn min_count(&self, sparsity: f64) -> usize {
        ((sparsity * self.dim as f64).ceil() as usize).clamp(1, self.dim)
    }

    fn check_input(&self, input: &SparseVector) -> Result<()> {
        if input.dim() != self.prev_dim {
            return Err(Error::Dimension {
                expected: self.prev_dim,
                got: input.dim(),
            });
        }
        Ok(())
    }

    /// Chooses the active set for `input`.
    pub fn select(&self, input: &SparseVector, mode: ForwardMode<'_>, scratch: &mut QueryScratch) -> Result<ActiveSet> {
        self.check_input(input)?;
        let (sparsity, labels) = match mode {
            ForwardMode::Train { labels } => (self.sparsity, labels),
            ForwardMode::SparseInfer { sparsity } => {
                if !(sparsity > 0.0) {
                    return Err(Error::InvalidArgument(format!("inference sparsity must be > 0, got {sparsity}")));
                }
                (sparsity, &[][..])
            }
            ForwardMode::DenseInfer => (1.0, &[][..]),
        };
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= self.dim) {
            return Err(Error::Contract(format!("label {bad} out of range for {} outputs", self.dim)));
        }
        let index = match &self.index {
            Some(ix) if sparsity < 1.0 => ix,
            _ => return Ok(ActiveSet::full(self.dim)),
        };
        let q = index.query_with(input, self.min_count(sparsity), scratch)?;

        let mut entries: Vec<(u32, Origin)> = Vec::with_capacity(q.len() + labels.len());
        entries.extend(q.sampled.iter().map(|&id| (id, Origin::Sampled)));
        entries.extend(q.padded.iter().map(|&id| (id, Origin::Padded)));
        entries.sort_unstable_by_key(|&(id, _)| id);
        let mut forced = Vec::new();
        for &l in labels {
            match entries.binary_search_by_key(&l, |&(id, _)| id) {
                Ok(p) if entries[p].1 == Origin::Padded => entries[p].1 = Origin::LabelForced,
                Ok(_) => {}
                Err(_) => forced.push((l, Origin::LabelForced)),
            }
        }
        if !forced.is_empty() {
            forced.sort_unstable_by_key(|&(id, _)| id);
            forced.dedup_by_key(|&mut (id, _)| id);
            entries.extend(forced);
            entries.sort_unstable_by_key(|&(id, _)| id);
        }
        let (ids, origins) = entries.into_iter().unzip();
        Ok(ActiveSet {
            ids,
            origins,
            codes: Some(q.codes),
        })
    }

    /// Evaluates the neurons of `active` on `input`.
    pub fn evaluate(&self, input: &SparseVector, active: ActiveSet) -> Result<LayerOutput> {
        self.check_input(input)?;
        if let Some(&last) = active.ids.last() {
            if last as usize >= self.dim {
                return Err(Error::Contract(format!("active id {last} out of range")));
            }
        }
        let pre: Vec<f64> = active
            .ids
            .iter()
            .map(|&i| input.dot_unchecked(self.row(i as usize)) + self.biases[i as usize])
            .collect();
        let mut act = pre.clone();
        match self.activation {
            Activation::Relu => act.iter_mut().for_each(|a| *a = a.max(0.0)),
            Activation::Identity => {}
            Activation::Softmax => softmax_in_place(&mut act),
        }
        let activations = SparseVector::from_parts_unchecked(self.dim, active.ids.clone(), act);
        Ok(LayerOutput {
            active,
            pre_activations: pre,
            activations,
        })
    }

    pub fn forward_full(&self, input: &SparseVector, mode: ForwardMode<'_>, scratch: &mut QueryScratch) -> Result<LayerOutput> {
        let active = self.select(input, mode, scratch)?;
        self.evaluate(input, active)
    }

    pub fn forward(&self, input: &SparseVector, mode: ForwardMode<'_>) -> Result<(SparseVector, ActiveSet)> {
        let out = self.forward_full(input, mode, &mut QueryScratch::new())?;
        Ok((out.activations, out.active))
    }

    /// Backward pass from `upstream = dL/da`, whose support must lie in the active set.
    pub fn backward(
        &self,
        input: &SparseVector,
        activations: &SparseVector,
        active: &ActiveSet,
        upstream: &SparseVector,
    ) -> Result<LayerGradients> {
        self.backward_with(input, activations, active, upstream, true)
    }

    /// [`SparseLayer::backward`], optionally skipping the input gradient.
    pub fn backward_with(
        &self,
        input: &SparseVector,
        activations: &SparseVector,
        active: &ActiveSet,
        upstream: &SparseVector,
        with_input_grad: bool,
    ) -> Result<LayerGradients> {
        self.check_input(input)?;
        if upstream.dim() != self.dim || activations.dim() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: upstream.dim().min(activations.dim()),
            });
        }
        if activations.indices() != active.ids() {
            return Err(Error::Contract("activations do not match the active set".into()));
        }
        let mut u = vec![0.0; active.len()];
        for (id, g) in upstream.iter() {
            match active.ids.binary_search(&id) {
                Ok(p) => u[p] = g,
                Err(_) => {
                    return Err(Error::Contract(format!("upstream gradient at inactive neuron {id}")));
                }
            }
        }
        let a = activations.values();
        let deltas: Vec<f64> = match self.activation {
            Activation::Relu => u.iter().zip(a).map(|(&g, &a)| if a > 0.0 { g } else { 0.0 }).collect(),
            Activation::Identity => u,
            Activation::Softmax => {
                let dot: f64 = u.iter().zip(a).map(|(g, a)| g * a).sum();
                u.iter().zip(a).map(|(&g, &a)| a * (g - dot)).collect()
            }
        };
        Ok(self.backward_from_deltas(input, active.ids(), deltas, with_input_grad))
    }

    /// Backward pass from gradients w.r.t. the pre-activations of `ids`.
    pub fn backward_from_deltas(&self, input: &SparseVector, ids: &[u32], deltas: Vec<f64>, with_input_grad: bool) -> LayerGradients {
        debug_assert_eq!(ids.len(), deltas.len());
        let input_grad = with_input_grad.then(|| {
            let mut g = vec![0.0; input.nnz()];
            for (&i, &delta) in ids.iter().zip(&deltas) {
                if delta == 0.0 {
                    continue;
                }
                let row = self.row(i as usize);
                for (gc, &c) in g.iter_mut().zip(input.indices()) {
                    *gc += delta * row[c as usize];
                }
            }
            let (idx, vals): (Vec<u32>, Vec<f64>) = input
                .indices()
                .iter()
                .copied()
                .zip(g)
                .filter(|&(_, v)| v != 0.0)
                .unzip();
            SparseVector::from_parts_unchecked(self.prev_dim, idx, vals)
        });
        LayerGradients {
            ids: ids.to_vec(),
            deltas,
            input: input.clone(),
            input_grad,
        }
    }
}

/// Dense forward over all neurons, computed from the densified input.
pub fn dense_reference_forward(layer: &SparseLayer, input: &SparseVector) -> Result<DenseVector> {
    layer.check_input(input)?;
    let x = densify(input);
    let mut out: Vec<f64> = (0..layer.dim)
        .map(|i| {
            let mut z = 0.0;
            for (w, xc) in layer.row(i).iter().zip(x.iter()) {
                z += w * xc;
            }
            z + layer.biases[i]
        })
        .collect();
    match layer.activation {
        Activation::Relu => out.iter_mut().for_each(|a| *a = a.max(0.0)),
        Activation::Identity => {}
        Activation::Softmax => softmax_in_place(&mut out),
    }
    Ok(DenseVector::new(out))
}

/// Dense gradients of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGradients {
    /// Row-major `dim x prev_dim`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub input: Vec<f64>,
}

fn dense_from_deltas(layer: &SparseLayer, x: &[f64], deltas: Vec<f64>) -> DenseGradients {
    let mut weights = vec![0.0; layer.dim * layer.prev_dim];
    let mut input = vec![0.0; layer.prev_dim];
    for (i, &delta) in deltas.iter().enumerate() {
        let row = layer.row(i);
        let grow = &mut weights[i * layer.prev_dim..(i + 1) * layer.prev_dim];
        for c in 0..layer.prev_dim {
            grow[c] = delta * x[c];
            input[c] += delta * row[c];
        }
    }
    DenseGradients {
        weights,
        biases: deltas,
        input,
    }
}

/// Dense backward from `upstream = dL/da` over all neurons.
pub fn dense_reference_backward(layer: &SparseLayer, input: &SparseVector, upstream: &[f64]) -> Result<DenseGradients> {
    if upstream.len() != layer.dim {
        return Err(Error::Dimension {
            expected: layer.dim,
            got: upstream.len(),
        });
    }
    let a = dense_reference_forward(layer, input)?;
    let deltas: Vec<f64> = match layer.activation {
        Activation::Relu => upstream.iter().zip(a.iter()).map(|(&g, &a)| if a > 0.0 { g } else { 0.0 }).collect(),
        Activation::Identity => upstream.to_vec(),
        Activation::Softmax => {
            let dot: f64 = upstream.iter().zip(a.iter()).map(|(g, a)| g * a).sum();
            upstream.iter().zip(a.iter()).map(|(&g, &a)| a * (g - dot)).collect()
        }
    };
    Ok(dense_from_deltas(layer, &densify(input), deltas))
}

/// Dense softmax cross-entropy loss and gradients over all neurons.
pub fn dense_reference_loss_grad(layer: &SparseLayer, input: &SparseVector, labels: &[u32]) -> Result<(f64, DenseGradients)> {
    layer.check_input(input)?;
    let x = densify(input);
    let logits: Vec<f64> = (0..layer.dim)
        .map(|i| {
            let mut z = 0.0;
            for (w, xc) in layer.row(i).iter().zip(x.iter()) {
                z += w * xc;
            }
            z + layer.biases[i]
        })
        .collect();
    let ids: Vec<u32> = (0..layer.dim as u32).collect();
    let (loss, deltas) = loss_grad_softmax_ce(&logits, &ids, labels)?;
    Ok((loss, dense_from_deltas(layer, &x, deltas)))
}

/// Shape of one layer in a [`Network`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub dim: usize,
    pub activation: Activation,
    pub sparsity: f64,
    /// Hash parameters to use instead of autotuning.
    pub plan: Option<AutotunePlan>,
}

impl LayerSpec {
    pub fn new(dim: usize, activation: Activation, sparsity: f64) -> Self {
        Self {
            dim,
            activation,
            sparsity,
            plan: None,
        }
    }
}

/// Per-worker scratch buffers for forward passes.
#[derive(Debug, Default)]
pub struct NetworkScratch {
    queries: Vec<QueryScratch>,
}

impl NetworkScratch {
    pub fn new(num_layers: usize) -> Self {
        Self {
            queries: vec![QueryScratch::new(); num_layers],
        }
    }
}

/// Feedforward stack; each layer's sparse activation vector is the next layer's input.
#[derive(Debug, Clone)]
pub struct Network {
    input_dim: usize,
    layers: Vec<SparseLayer>,
}

impl Network {
    pub fn new(input_dim: usize, specs: &[LayerSpec], tune: &AutotuneConfig, seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        if input_dim == 0 {
            return Err(Error::InvalidArgument("input dim must be positive".into()));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut prev = input_dim;
        for (i, spec) in specs.iter().enumerate() {
            if spec.activation == Activation::Softmax && i + 1 != specs.len() {
                return Err(Error::InvalidArgument("softmax is only supported on the output layer".into()));
            }
            let layer_seed = splitmix64(seed.wrapping_add(i as u64));
            let layer = match spec.plan {
                Some(plan) => SparseLayer::with_plan(spec.dim, prev, spec.activation, spec.sparsity, Some(plan), layer_seed)?,
                None => SparseLayer::new(spec.dim, prev, spec.activation, spec.sparsity, tune, layer_seed)?,
            };
            prev = spec.dim;
            layers.push(layer);
        }
        Ok(Self { input_dim, layers })
    }

    pub fn from_layers(layers: Vec<SparseLayer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidArgument("network needs at least one layer".into()))?;
        let input_dim = first.prev_dim;
        for w in layers.windows(2) {
            if w[0].dim != w[1].prev_dim {
                return Err(Error::Dimension {
                    expected: w[0].dim,
                    got: w[1].prev_dim,
                });
            }
        }
        Ok(Self { input_dim, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.dim)
    }

    pub fn layers(&self) -> &[SparseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [SparseLayer] {
        &mut self.layers
    }

    pub fn scratch(&self) -> NetworkScratch {
        NetworkScratch::new(self.layers.len())
    }

    /// Runs every layer. The output layer gets `mode` as is; hidden layers
    /// sample at their own sparsity without labels.
    pub fn forward(&self, input: &SparseVector, mode: ForwardMode<'_>, scratch: &mut NetworkScratch) -> Result<Vec<LayerOutput>> {
        if scratch.queries.len() != self.layers.len() {
            *scratch = self.scratch();
        }
        let last = self.layers.len() - 1;
        let mut outputs: Vec<LayerOutput> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let layer_mode = match mode {
                ForwardMode::Train { .. } if i != last => ForwardMode::Train { labels: &[] },
                ForwardMode::SparseInfer { .. } if i != last => ForwardMode::SparseInfer {
                    sparsity: layer.sparsity,
                },
                m => m,
            };
            let x = match outputs.last() {
                Some(o) => &o.activations,
                None => input,
            };
            let out = layer.forward_full(x, layer_mode, &mut scratch.queries[i])?;
            outputs.push(out);
        }
        Ok(outputs)
    }

    /// Output activations over the whole output layer, densely.
    pub fn dense_reference_forward(&self, input: &SparseVector) -> Result<DenseVector> {
        let mut x = input.clone();
        let mut out = None;
        for layer in &self.layers {
            let a = dense_reference_forward(layer, &x)?;
            x = SparseVector::from_parts_unchecked(layer.dim, (0..layer.dim as u32).collect(), a.to_vec());
            out = Some(a);
        }
        Ok(out.expect("network has layers"))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for layer in &self.layers {
            w.write_all(&(layer.dim as u32).to_le_bytes())?;
            w.write_all(&(layer.prev_dim as u32).to_le_bytes())?;
            w.write_all(&layer.sparsity.to_le_bytes())?;
            w.write_all(&[layer.activation.tag()])?;
            match &layer.plan {
                None => w.write_all(&[0])?,
                Some(p) => {
                    w.write_all(&[1])?;
                    for v in [p.k_bits, p.num_tables, p.bucket_cap, p.config.l_max] {
                        w.write_all(&v.to_le_bytes())?;
                    }
                    for v in [p.config.c1, p.config.c2, p.sparsity] {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
            w.write_all(&layer.index_seed.to_le_bytes())?;
            for v in &layer.weights {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in &layer.biases {
                w.write_all(&v.to_le_bytes())?;
            }
            if let Some(ix) = &layer.index {
                ix.write_to(w)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format("bad model magic".into()));
        }
        let version = read_u32(r)?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let count = read_u32(r)? as usize;
        if count == 0 {
            return Err(Error::Format("model has no layers".into()));
        }
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let dim = read_u32(r)? as usize;
            let prev_dim = read_u32(r)? as usize;
            let sparsity = read_f64(r)?;
            let activation = Activation::from_tag(read_u8(r)?).ok_or_else(|| Error::Format("bad activation tag".into()))?;
            let plan = match read_u8(r)? {
                0 => None,
                1 => {
                    let k_bits = read_u32(r)?;
                    let num_tables = read_u32(r)?;
                    let bucket_cap = read_u32(r)?;
                    let l_max = read_u32(r)?;
                    let c1 = read_f64(r)?;
                    let c2 = read_f64(r)?;
                    let plan_sparsity = read_f64(r)?;
                    Some(AutotunePlan {
                        k_bits,
                        num_tables,
                        bucket_cap,
                        config: AutotuneConfig { c1, c2, l_max },
                        layer_dim: dim,
                        prev_dim,
                        sparsity: plan_sparsity,
                    })
                }
                t => return Err(Error::Format(format!("bad plan flag {t}"))),
            };
            let index_seed = read_u64(r)?;
            if dim == 0 || prev_dim == 0 || dim.checked_mul(prev_dim).is_none_or(|n| n > (1 << 34)) {
                return Err(Error::Format(format!("implausible layer shape {dim}x{prev_dim}")));
            }
            let weights = read_f64s(r, dim * prev_dim)?;
            let biases = read_f64s(r, dim)?;
            let index = match &plan {
                Some(_) => {
                    let ix = NeuronIndex::read_from(r)?;
                    if ix.num_neurons() != dim || ix.input_dim() != prev_dim {
                        return Err(Error::Format("index shape does not match layer".into()));
                    }
                    Some(ix)
                }
                None => None,
            };
            if !(sparsity > 0.0 && sparsity <= 1.0) || plan.is_some() != (sparsity < 1.0) {
                return Err(Error::Format("inconsistent layer sparsity".into()));
            }
            layers.push(SparseLayer {
                dim,
                prev_dim,
                weights,
                biases,
                sparsity,
                activation,
                plan,
                index,
                index_seed,
            });
        }
        Network::from_layers(layers).map_err(|e| Error::Format(e.to_string()))
    }
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
        .collect())
}

/// Output-layer activations ranked descending, ties by ascending id.
pub fn rank(activations: &SparseVector) -> Vec<u32> {
    let mut pairs: Vec<(u32, f64)> = activations.iter().collect();
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    pairs.into_iter().map(|(id, _)| id).collect()
}

/// The `k` best ids of `activations` in ranked order, without sorting everything.
pub fn top_k(activations: &SparseVector, k: usize) -> Vec<u32> {
    let mut pairs: Vec<(u32, f64)> = activations.iter().collect();
    let cmp = |a: &(u32, f64), b: &(u32, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if k < pairs.len() {
        pairs.select_nth_unstable_by(k, cmp);
        pairs.truncate(k);
    }
    pairs.sort_by(cmp);
    pairs.into_iter().map(|(id, _)| id).collect()
}

/// Drops exact zeros from an activation vector.
pub fn compact(activations: &SparseVector) -> SparseVector {
    sparsify(&densify(activations))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn hand_layer(activation: Activation) -> SparseLayer {
        SparseLayer::from_parameters(
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0],
            vec![0.0; 3],
            2,
            activation,
            1.0,
            None,
            0,
        )
        .unwrap()
    }

    fn x21() -> SparseVector {
        SparseVector::new(2, vec![0, 1], vec![2.0, -1.0]).unwrap()
    }

    #[test]
    fn hand_forward_on_chosen_active_set() {
        let layer = hand_layer(Activation::Relu);
        let out = layer.evaluate(&x21(), ActiveSet::from_ids(vec![0, 2]).unwrap()).unwrap();
        assert_eq!(out.activations, SparseVector::new(3, vec![0, 2], vec![2.0, 1.0]).unwrap());
    }

    #[test]
    fn hand_dense_forward() {
        let layer = hand_layer(Activation::Relu);
        let dense = dense_reference_forward(&layer, &x21()).unwrap();
        assert_eq!(&*dense, &[2.0, 0.0, 1.0]);
        assert_eq!(sparsify(&dense), SparseVector::new(3, vec![0, 2], vec![2.0, 1.0]).unwrap());
        let (act, active) = layer.forward(&x21(), ForwardMode::DenseInfer).unwrap();
        assert_eq!(active.len(), 3);
        assert_eq!(act.values(), &[2.0, 0.0, 1.0]);
        assert_eq!(rank(&act), vec![0, 2, 1]);
        assert_eq!(compact(&act).nnz(), 2);
    }

    #[test]
    fn empty_input_gives_bias_activations() {
        let layer = SparseLayer::from_parameters(vec![1.0; 6], vec![0.5, -0.5, 2.0], 2, Activation::Relu, 1.0, None, 0).unwrap();
        let (act, _) = layer.forward(&SparseVector::zeros(2), ForwardMode::DenseInfer).unwrap();
        assert_eq!(act.values(), &[0.5, 0.0, 2.0]);
    }

    #[test]
    fn forward_checks_dimensions() {
        let layer = hand_layer(Activation::Relu);
        assert!(matches!(
            layer.forward(&SparseVector::zeros(3), ForwardMode::DenseInfer),
            Err(Error::Dimension { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn softmax_equal_logits() {
        let layer = SparseLayer::from_parameters(vec![1.0; 4], vec![0.0; 2], 2, Activation::Softmax, 1.0, None, 0).unwrap();
        let (act, _) = layer.forward(&x21(), ForwardMode::DenseInfer).unwrap();
        assert_eq!(act.values(), &[0.5, 0.5]);
    }

    #[test]
    fn ce_examples() {
        let (loss, d) = loss_grad_softmax_ce(&[0.3, 0.3], &[4, 9], &[4]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(d, vec![-0.5, 0.5]);
        let (loss, d) = loss_grad_softmax_ce(&[1.7], &[3], &[3]).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(d, vec![0.0]);
        assert!(matches!(loss_grad_softmax_ce(&[1.0, 2.0], &[0, 1], &[5]), Err(Error::Contract(_))));
        assert!(loss_grad_softmax_ce(&[1.0, 2.0], &[0, 1], &[]).is_err());
    }

    #[test]
    fn ce_random_logits_against_log_sum_exp() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..5).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let ids = [2u32, 3, 5, 8, 13];
            let labels = [3u32, 13];
            let (loss, d) = loss_grad_softmax_ce(&logits, &ids, &labels).unwrap();
            assert!(d.iter().sum::<f64>().abs() < 1e-12);
            let lse = logits.iter().map(|z| z.exp()).sum::<f64>().ln();
            let brute = 0.5 * (lse - logits[1]) + 0.5 * (lse - logits[4]);
            assert!((loss - brute).abs() < 1e-12 * brute.abs().max(1.0));
        }
    }

    #[test]
    fn dead_relu_has_no_gradient() {
        let layer = SparseLayer::from_parameters(vec![-1.0, 0.0], vec![0.0], 2, Activation::Relu, 1.0, None, 0).unwrap();
        let x = SparseVector::new(2, vec![0], vec![1.0]).unwrap();
        let (act, active) = layer.forward(&x, ForwardMode::DenseInfer).unwrap();
        let up = SparseVector::new(1, vec![0], vec![1.0]).unwrap();
        let g = layer.backward(&x, &act, &active, &up).unwrap();
        assert_eq!(g.deltas, vec![0.0]);
        assert_eq!(g.weight_row_dense(0), vec![0.0, 0.0]);
        assert_eq!(g.input_grad.unwrap().nnz(), 0);
    }

    #[test]
    fn identity_single_neuron_gradients() {
        let layer = SparseLayer::from_parameters(vec![0.7, -0.3], vec![0.1], 2, Activation::Identity, 1.0, None, 0).unwrap();
        let (act, active) = layer.forward(&x21(), ForwardMode::DenseInfer).unwrap();
        let up = SparseVector::new(1, vec![0], vec![1.0]).unwrap();
        let g = layer.backward(&x21(), &act, &active, &up).unwrap();
        assert_eq!(g.weight_row_dense(0), vec![2.0, -1.0]);
        assert_eq!(g.bias_grads(), &[1.0]);
        assert_eq!(g.input_grad.unwrap(), SparseVector::new(2, vec![0, 1], vec![0.7, -0.3]).unwrap());
    }

    #[test]
    fn backward_rejects_upstream_outside_active_set() {
        let layer = hand_layer(Activation::Identity);
        let out = layer.evaluate(&x21(), ActiveSet::from_ids(vec![0, 2]).unwrap()).unwrap();
        let up = SparseVector::new(3, vec![1], vec![1.0]).unwrap();
        assert!(matches!(
            layer.backward(&x21(), &out.activations, &out.active, &up),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn full_active_set_matches_dense_reference_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for act in [Activation::Relu, Activation::Identity, Activation::Softmax] {
            let layer = SparseLayer::with_plan(40, 30, act, 1.0, None, 3).unwrap();
            let x: Vec<f64> = (0..30).map(|_| if rng.random_bool(0.5) { rng.sample(StandardNormal) } else { 0.0 }).collect();
            let x = sparsify(&x);
            let (a, _) = layer.forward(&x, ForwardMode::DenseInfer).unwrap();
            let dense = dense_reference_forward(&layer, &x).unwrap();
            assert_eq!(a.values(), &dense[..]);
        }
    }

    #[test]
    fn train_mode_forces_labels() {
        let layer = SparseLayer::new(2000, 16, Activation::Softmax, 0.01, &AutotuneConfig::default(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut scratch = QueryScratch::new();
        for _ in 0..50 {
            let x: Vec<f64> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
            let x = sparsify(&x);
            let labels = [rng.random_range(0..2000u32), 1999];
            let mut labels = labels.to_vec();
            labels.sort_unstable();
            labels.dedup();
            let out = layer.forward_full(&x, ForwardMode::Train { labels: &labels }, &mut scratch).unwrap();
            for &l in &labels {
                let p = out.active.ids().binary_search(&l).expect("label present");
                assert!(matches!(out.active.origins()[p], Origin::Sampled | Origin::LabelForced));
            }
            assert!(out.active.len() >= layer.min_count(0.01));
            let s: f64 = out.activations.values().iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert_eq!(out.active.codes().unwrap().len(), layer.plan().unwrap().num_tables as usize);
        }
        assert!(layer.forward(&SparseVector::zeros(16), ForwardMode::Train { labels: &[2000] }).is_err());
    }

    #[test]
    fn model_round_trip() {
        let specs = [
            LayerSpec::new(24, Activation::Relu, 1.0),
            LayerSpec::new(3000, Activation::Softmax, 0.02),
        ];
        let net = Network::new(50, &specs, &AutotuneConfig::default(), 4).unwrap();
        let bytes = net.to_bytes();
        assert_eq!(&bytes[..4], b"BLTM");
        let back = Network::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.layers()[1].plan(), net.layers()[1].plan());
        assert!(Network::read_from(&mut &bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn softmax_only_on_output() {
        let specs = [
            LayerSpec::new(8, Activation::Softmax, 1.0),
            LayerSpec::new(4, Activation::Softmax, 1.0),
        ];
        assert!(Network::new(3, &specs, &AutotuneConfig::default(), 0).is_err());
    }

    #[test]
    fn top_k_agrees_with_rank() {
        let v = SparseVector::new(10, vec![0, 2, 3, 5, 9], vec![0.5, 0.9, 0.5, -1.0, 0.9]).unwrap();
        assert_eq!(rank(&v), vec![2, 9, 0, 3, 5]);
        for k in 1..=5 {
            assert_eq!(top_k(&v, k), rank(&v)[..k].to_vec());
        }
        assert_eq!(top_k(&v, 9), rank(&v));
    }
}
