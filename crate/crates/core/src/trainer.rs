//! Mini-batch training with row-lazy Adam, label insertion into hash buckets,
//! periodic index rebuilds, and sparse or dense inference.
//!
//! Each batch runs in three phases: a parallel forward/backward over the
//! samples, an exclusive update phase (gradient reduction, Adam on the touched
//! rows, queued label inserts), and an optional exclusive index rebuild.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::XcDataset;
use crate::error::{DataError, Error, Result};
use crate::nn::{loss_grad_softmax_ce, top_k, Activation, ForwardMode, LayerGradients, Network, NetworkScratch};
use crate::sparse::SparseVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam step on a parameter slice at global step `t`, bias-corrected with
/// `t` regardless of how many steps the slice skipped.
#[inline]
pub fn adam_step(hp: &AdamParams, t: u64, params: &mut [f64], m: &mut [f64], v: &mut [f64], grad: impl Iterator<Item = f64>) {
    let c1 = 1.0 - hp.beta1.powi(t as i32);
    let c2 = 1.0 - hp.beta2.powi(t as i32);
    for (((p, m), v), g) in params.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad) {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

/// Adam moments for one layer, advanced row by row.
///
/// A row that sits out some batches is not decayed for them: when it is next
/// touched at step `t` it takes a single ordinary step with bias correction
/// for `t`.
#[derive(Debug, Clone)]
pub struct SparseAdamState {
    pub params: AdamParams,
    row_len: usize,
    m_w: Vec<f64>,
    v_w: Vec<f64>,
    m_b: Vec<f64>,
    v_b: Vec<f64>,
    last_step: Vec<u64>,
    step: u64,
}

impl SparseAdamState {
    pub fn new(rows: usize, row_len: usize, params: AdamParams) -> Self {
        Self {
            params,
            row_len,
            m_w: vec![0.0; rows * row_len],
            v_w: vec![0.0; rows * row_len],
            m_b: vec![0.0; rows],
            v_b: vec![0.0; rows],
            last_step: vec![0; rows],
            step: 0,
        }
    }

    /// Global step of the latest update.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn last_step(&self, row: usize) -> u64 {
        self.last_step[row]
    }

    pub fn moments(&self, row: usize) -> (&[f64], &[f64]) {
        let r = row * self.row_len..(row + 1) * self.row_len;
        (&self.m_w[r.clone()], &self.v_w[r])
    }

    /// Applies one step at global step `t` to `row` (weights and bias).
    pub fn update_row(&mut self, row: usize, t: u64, grad_w: &[f64], grad_b: f64, weights: &mut [f64], bias: &mut f64) {
        assert!(t >= 1, "steps count from 1");
        assert_eq!(grad_w.len(), self.row_len);
        assert_eq!(weights.len(), self.row_len);
        let r = row * self.row_len..(row + 1) * self.row_len;
        adam_step(&self.params, t, weights, &mut self.m_w[r.clone()], &mut self.v_w[r], grad_w.iter().copied());
        adam_step(
            &self.params,
            t,
            std::slice::from_mut(bias),
            std::slice::from_mut(&mut self.m_b[row]),
            std::slice::from_mut(&mut self.v_b[row]),
            std::iter::once(grad_b),
        );
        self.last_step[row] = t;
        self.step = self.step.max(t);
    }
}

/// Per-batch gradient sums for one layer. Stored as `f64` bit patterns in
/// atomics so the racy mode can add from several workers at once.
struct GradBuffer {
    row_len: usize,
    weights: Vec<AtomicU64>,
    biases: Vec<AtomicU64>,
    touched: Vec<AtomicBool>,
}

#[inline]
fn load(a: &AtomicU64) -> f64 {
    f64::from_bits(a.load(Ordering::Relaxed))
}

#[inline]
fn add_exclusive(a: &AtomicU64, x: f64) {
    a.store((load(a) + x).to_bits(), Ordering::Relaxed);
}

#[inline]
fn add_racy(a: &AtomicU64, x: f64) {
    let mut cur = a.load(Ordering::Relaxed);
    loop {
        let new = (f64::from_bits(cur) + x).to_bits();
        match a.compare_exchange_weak(cur, new, Ordering::Relaxed, Ordering::Relaxed) {
            Ok(_) => break,
            Err(seen) => cur = seen,
        }
    }
}

impl GradBuffer {
    fn new(rows: usize, row_len: usize) -> Self {
        Self {
            row_len,
            weights: (0..rows * row_len).map(|_| AtomicU64::new(0)).collect(),
            biases: (0..rows).map(|_| AtomicU64::new(0)).collect(),
            touched: (0..rows).map(|_| AtomicBool::new(false)).collect(),
        }
    }

    fn rows(&self) -> usize {
        self.biases.len()
    }

    fn add_sample(&self, g: &LayerGradients, add: fn(&AtomicU64, f64), rows: std::ops::Range<u32>) {
        let lo = g.ids.partition_point(|&id| id < rows.start);
        let hi = g.ids.partition_point(|&id| id < rows.end);
        for k in lo..hi {
            let id = g.ids[k] as usize;
            let delta = g.deltas[k];
            self.touched[id].store(true, Ordering::Relaxed);
            add(&self.biases[id], delta);
            let row = &self.weights[id * self.row_len..(id + 1) * self.row_len];
            for (c, x) in g.input.iter() {
                add(&row[c as usize], delta * x);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Batches between index rebuilds.
    pub rebuild_interval: usize,
    /// Insert missed labels into the buckets their sample selected.
    pub aln_enabled: bool,
    /// Output-layer sparsity for sparse inference; `None` uses the training sparsity.
    pub inference_sparsity: Option<f64>,
    pub seed: u64,
    /// Fixed reduction order, so results do not depend on scheduling.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 5,
            lr: 1e-3,
            rebuild_interval: 50,
            aln_enabled: true,
            inference_sparsity: None,
            seed: 0,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if self.rebuild_interval == 0 {
            return Err(Error::InvalidArgument("rebuild_interval must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if let Some(s) = self.inference_sparsity {
            if !(s > 0.0 && s <= 1.0) {
                return Err(Error::InvalidArgument(format!("inference sparsity must lie in (0, 1], got {s}")));
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub p_at_1: f64,
    pub seconds: f64,
}

impl BatchRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Precision@1 of the training-mode predictions over the epoch.
    pub p_at_1: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub batches: Vec<BatchRecord>,
}

struct SampleResult {
    grads: Vec<LayerGradients>,
    loss: f64,
    hit: bool,
    aln: Option<(Vec<u32>, Vec<u32>)>,
}

/// Summary of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    pub hits: usize,
    pub samples: usize,
}

fn check_output(net: &Network) -> Result<()> {
    let out = net.layers().last().expect("network has layers");
    if out.activation() != Activation::Softmax {
        return Err(Error::InvalidArgument("training needs a softmax output layer".into()));
    }
    Ok(())
}

/// Owns a network together with its optimizer state.
pub struct Trainer {
    net: Network,
    cfg: TrainConfig,
    adam: Vec<SparseAdamState>,
    grads: Vec<GradBuffer>,
    step: u64,
    since_rebuild: usize,
    batches_run: usize,
    /// Codes selected by each label's latest training sample, replayed into the output index
    /// after every rebuild so inserted labels survive it.
    anchors: Vec<Option<Vec<u32>>>,
}

impl Trainer {
    pub fn new(net: Network, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        check_output(&net)?;
        let hp = AdamParams::with_lr(cfg.lr);
        let adam = net
            .layers()
            .iter()
            .map(|l| SparseAdamState::new(l.dim(), l.prev_dim(), hp))
            .collect();
        let grads = net.layers().iter().map(|l| GradBuffer::new(l.dim(), l.prev_dim())).collect();
        Ok(Self {
            net,
            cfg,
            adam,
            grads,
            step: 0,
            since_rebuild: 0,
            batches_run: 0,
            anchors: Vec::new(),
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn adam_state(&self, layer: usize) -> &SparseAdamState {
        &self.adam[layer]
    }

    /// Number of optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    fn check_dataset(&self, data: &XcDataset) -> Result<()> {
        if data.num_features != self.net.input_dim() {
            return Err(Error::Dimension {
                expected: self.net.input_dim(),
                got: data.num_features,
            });
        }
        let out = self.net.output_dim();
        for (line, ex) in data.examples.iter().enumerate() {
            if ex.labels.is_empty() {
                return Err(DataError::EmptyLabelSet { line: line + 2 }.into());
            }
            if let Some(&l) = ex.labels.iter().find(|&&l| l as usize >= out) {
                return Err(DataError::LabelOutOfRange {
                    line: line + 2,
                    label: l as u64,
                    num_labels: out,
                }
                .into());
            }
        }
        Ok(())
    }

    fn sample_pass(&self, x: &SparseVector, labels: &[u32], scratch: &mut NetworkScratch) -> Result<SampleResult> {
        let outs = self.net.forward(x, ForwardMode::Train { labels }, scratch)?;
        let layers = self.net.layers();
        let last = layers.len() - 1;
        let out = &outs[last];
        let (loss, deltas) = loss_grad_softmax_ce(&out.pre_activations, out.active.ids(), labels)?;
        let hit = top_k(&out.activations, 1).first().is_some_and(|p| labels.binary_search(p).is_ok());
        let aln = if self.cfg.aln_enabled {
            let missed = out.active.forced_labels();
            out.active.codes().map(|codes| (missed, codes.to_vec()))
        } else {
            None
        };

        let mut grads: Vec<LayerGradients> = Vec::with_capacity(layers.len());
        let input_of = |i: usize| if i == 0 { x } else { &outs[i - 1].activations };
        let top = layers[last].backward_from_deltas(input_of(last), out.active.ids(), deltas, last > 0);
        grads.push(top);
        for i in (0..last).rev() {
            let upstream = grads.last().and_then(|g| g.input_grad.as_ref()).expect("input gradient requested");
            let g = layers[i].backward_with(input_of(i), &outs[i].activations, &outs[i].active, upstream, i > 0)?;
            grads.push(g);
        }
        grads.reverse();
        Ok(SampleResult { grads, loss, hit, aln })
    }

    /// Runs one optimizer step on the given examples.
    pub fn train_batch(&mut self, data: &XcDataset, batch: &[usize]) -> Result<BatchStats> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let results: Vec<SampleResult> = {
            let this = &*self;
            batch
                .par_iter()
                .map_init(
                    || this.net.scratch(),
                    |scratch, &i| {
                        let ex = &data.examples[i];
                        this.sample_pass(&ex.features, &ex.labels, scratch)
                    },
                )
                .collect::<Result<_>>()?
        };

        self.reduce(&results);
        self.step += 1;
        self.apply_updates();

        if self.cfg.aln_enabled {
            let out = self.net.layers_mut().last_mut().expect("network has layers");
            if let Some(ix) = out.index_mut() {
                if self.anchors.is_empty() {
                    self.anchors = vec![None; ix.num_neurons()];
                }
                for (r, &i) in results.iter().zip(batch) {
                    let Some((missed, codes)) = &r.aln else { continue };
                    if !missed.is_empty() {
                        ix.insert_labels(missed, codes)?;
                    }
                    for &l in &data.examples[i].labels {
                        self.anchors[l as usize] = Some(codes.clone());
                    }
                }
            }
        }

        self.since_rebuild += 1;
        self.batches_run += 1;
        if self.since_rebuild >= self.cfg.rebuild_interval {
            self.rebuild()?;
        }

        let loss = results.iter().map(|r| r.loss).sum::<f64>();
        let hits = results.iter().filter(|r| r.hit).count();
        Ok(BatchStats {
            loss,
            hits,
            samples: results.len(),
        })
    }

    /// Re-hashes every sparse layer from its current weights.
    pub fn rebuild(&mut self) -> Result<()> {
        for layer in self.net.layers_mut() {
            layer.rebuild_index()?;
        }
        if let Some(ix) = self.net.layers_mut().last_mut().and_then(|l| l.index_mut()) {
            for (label, codes) in self.anchors.iter().enumerate() {
                if let Some(codes) = codes {
                    ix.insert_labels(&[label as u32], codes)?;
                }
            }
        }
        self.since_rebuild = 0;
        Ok(())
    }

    fn reduce(&self, results: &[SampleResult]) {
        for (li, buf) in self.grads.iter().enumerate() {
            if self.cfg.deterministic {
                // Each worker owns a block of rows and adds the samples into it
                // in batch order, so every row sees the same summation order.
                let rows = buf.rows();
                let shards = (rayon::current_num_threads() * 4).clamp(1, rows);
                let per = rows.div_ceil(shards);
                (0..shards).into_par_iter().for_each(|s| {
                    let lo = (s * per).min(rows) as u32;
                    let hi = ((s + 1) * per).min(rows) as u32;
                    for r in results {
                        buf.add_sample(&r.grads[li], add_exclusive, lo..hi);
                    }
                });
            } else {
                results
                    .par_iter()
                    .for_each(|r| buf.add_sample(&r.grads[li], add_racy, 0..buf.rows() as u32));
            }
        }
    }

    fn apply_updates(&mut self) {
        let t = self.step;
        for ((layer, adam), buf) in self.net.layers_mut().iter_mut().zip(&mut self.adam).zip(&self.grads) {
            let row_len = layer.prev_dim();
            let hp = adam.params;
            let (weights, biases) = layer.parameters_mut();
            weights
                .par_chunks_mut(row_len)
                .zip(biases.par_iter_mut())
                .zip(adam.m_w.par_chunks_mut(row_len))
                .zip(adam.v_w.par_chunks_mut(row_len))
                .zip(adam.m_b.par_iter_mut().zip(adam.v_b.par_iter_mut()))
                .zip(adam.last_step.par_iter_mut())
                .enumerate()
                .for_each(|(row, (((((w, b), m), v), (mb, vb)), last))| {
                    if !buf.touched[row].swap(false, Ordering::Relaxed) {
                        return;
                    }
                    let g = &buf.weights[row * row_len..(row + 1) * row_len];
                    adam_step(&hp, t, w, m, v, g.iter().map(load));
                    let gb = load(&buf.biases[row]);
                    adam_step(&hp, t, std::slice::from_mut(b), std::slice::from_mut(mb), std::slice::from_mut(vb), std::iter::once(gb));
                    *last = t;
                    g.iter().for_each(|a| a.store(0, Ordering::Relaxed));
                    buf.biases[row].store(0, Ordering::Relaxed);
                });
            adam.step = t;
        }
    }

    /// Trains for one epoch, calling `on_batch` after every batch.
    pub fn train_epoch(
        &mut self,
        data: &XcDataset,
        epoch: usize,
        clock: &Instant,
        mut on_batch: impl FnMut(&BatchRecord, &Self) -> Result<()>,
    ) -> Result<EpochRecord> {
        self.check_dataset(data)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        let mut hits = 0;
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let stats = self.train_batch(data, chunk)?;
            loss += stats.loss;
            hits += stats.hits;
            let rec = BatchRecord {
                epoch,
                batch: b,
                loss: stats.loss / stats.samples as f64,
                p_at_1: stats.hits as f64 / stats.samples as f64,
                seconds: clock.elapsed().as_secs_f64(),
            };
            on_batch(&rec, self)?;
        }
        let n = data.len().max(1) as f64;
        Ok(EpochRecord {
            epoch,
            loss: loss / n,
            p_at_1: hits as f64 / n,
            seconds: clock.elapsed().as_secs_f64(),
        })
    }

    /// Full training run; `on_batch` sees every batch record as it is produced.
    pub fn train_with(
        &mut self,
        data: &XcDataset,
        mut on_batch: impl FnMut(&BatchRecord, &Self) -> Result<()>,
    ) -> Result<TrainReport> {
        self.check_dataset(data)?;
        let clock = Instant::now();
        let mut report = TrainReport::default();
        for epoch in 0..self.cfg.epochs {
            let rec = self.train_epoch(data, epoch, &clock, |r, t| {
                report.batches.push(r.clone());
                on_batch(r, t)
            })?;
            report.epochs.push(rec);
        }
        Ok(report)
    }
}

/// Trains `model` in place on `data`. On error the model keeps whatever
/// updates were applied before the failure.
pub fn train(model: &mut Network, data: &XcDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_output(model)?;
    let net = std::mem::replace(model, placeholder_network());
    let mut trainer = Trainer::new(net, cfg.clone()).expect("checked above");
    let result = trainer.train_with(data, |_, _| Ok(()));
    *model = trainer.into_network();
    result
}

fn placeholder_network() -> Network {
    use crate::nn::SparseLayer;
    let layer = SparseLayer::from_parameters(vec![0.0], vec![0.0], 1, Activation::Identity, 1.0, None, 0)
        .expect("valid placeholder");
    Network::from_layers(vec![layer]).expect("valid placeholder")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InferenceMode {
    Dense,
    /// Query the output index for `ceil(sparsity * d)` neurons.
    Sparse { sparsity: f64 },
}

impl InferenceMode {
    pub fn name(&self) -> &'static str {
        match self {
            InferenceMode::Dense => "dense",
            InferenceMode::Sparse { .. } => "sparse",
        }
    }

    fn forward_mode(&self) -> ForwardMode<'static> {
        match *self {
            InferenceMode::Dense => ForwardMode::DenseInfer,
            InferenceMode::Sparse { sparsity } => ForwardMode::SparseInfer { sparsity },
        }
    }

    /// Sparse inference at the output layer's training sparsity, or the given override.
    pub fn sparse_for(model: &Network, sparsity: Option<f64>) -> Self {
        let s = sparsity.unwrap_or_else(|| model.layers().last().map_or(1.0, |l| l.sparsity()));
        InferenceMode::Sparse { sparsity: s }
    }
}

fn output_activations(model: &Network, input: &SparseVector, mode: InferenceMode, scratch: &mut NetworkScratch) -> Result<SparseVector> {
    let mut outs = model.forward(input, mode.forward_mode(), scratch)?;
    Ok(outs.pop().expect("network has layers").activations)
}

/// Evaluated output neurons ranked by activation, highest first, ties by id.
pub fn predict(model: &Network, input: &SparseVector, mode: InferenceMode) -> Result<Vec<u32>> {
    let act = output_activations(model, input, mode, &mut model.scratch())?;
    Ok(crate::nn::rank(&act))
}

/// The `k` best-ranked output neurons.
pub fn predict_top_k(model: &Network, input: &SparseVector, k: usize, mode: InferenceMode, scratch: &mut NetworkScratch) -> Result<Vec<u32>> {
    let act = output_activations(model, input, mode, scratch)?;
    Ok(top_k(&act, k))
}

/// `|top-k ∩ labels| / k`; `labels` must be sorted.
pub fn precision_at_k(ranking: &[u32], labels: &[u32], k: usize) -> f64 {
    assert!(k >= 1, "k must be at least 1");
    let hits = ranking.iter().take(k).filter(|p| labels.binary_search(p).is_ok()).count();
    hits as f64 / k as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub precision: f64,
    pub mean_latency_ms: f64,
    pub mode: InferenceMode,
}

/// Number of single-sample predictions timed by [`evaluate`].
pub const LATENCY_SAMPLES: usize = 1000;

/// Mean precision@k over `data`, plus mean single-sample latency over the
/// first `min(1000, n)` examples.
pub fn evaluate(model: &Network, data: &XcDataset, k: usize, mode: InferenceMode) -> Result<EvalReport> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if data.num_features != model.input_dim() {
        return Err(Error::Dimension {
            expected: model.input_dim(),
            got: data.num_features,
        });
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let precision_sum: f64 = data
        .examples
        .par_iter()
        .map_init(
            || model.scratch(),
            |scratch, ex| predict_top_k(model, &ex.features, k, mode, scratch).map(|top| precision_at_k(&top, &ex.labels, k)),
        )
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum();

    let n_timed = data.len().min(LATENCY_SAMPLES);
    let mut scratch = model.scratch();
    // Warm the scratch buffers so the first timed call does not pay for allocation.
    predict_top_k(model, &data.examples[0].features, k, mode, &mut scratch)?;
    let start = Instant::now();
    for ex in &data.examples[..n_timed] {
        std::hint::black_box(predict_top_k(model, &ex.features, k, mode, &mut scratch)?);
    }
    let mean_latency_ms = start.elapsed().as_secs_f64() * 1e3 / n_timed as f64;
    Ok(EvalReport {
        k,
        precision: precision_sum / data.len() as f64,
        mean_latency_ms,
        mode,
    })
}
