//! Desk-scale EvoRNN: GRU cells whose hidden size follows a [`CellSchedule`],
//! boundary projections between segments, a stacked model with decoder and
//! (sampled-)softmax scoring, hand-derived reverse-mode gradients and a toy
//! SGD training loop on a lag-recall task.
//!
//! All tensors are `f64`. Gradients are stored in a [`ModelParams`] of the
//! same shape as the model they belong to.

use std::io::{Read, Write};
use std::time::Instant;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Zip};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{EmbeddingError, EmbeddingTable};
use crate::evo_schedule::{lookup_cell, CellSchedule, ScheduleError};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const TOY_EMBED_DIM: usize = 32;
pub const TOY_OUTPUT_DIM: usize = 32;
pub const DEFAULT_TAIL_EXPONENT: f64 = 2.0;

#[derive(Debug, Error)]
pub enum EvoRnnError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("{what}: expected dimension {expected}, found {found}")]
    Dim {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("sequence of length {len} is shorter than the schedule span {span}")]
    SequenceTooShort { len: usize, span: usize },
    #[error("symbol id {id} is outside the vocabulary of size {vocab}")]
    SymbolOutOfRange { id: usize, vocab: usize },
    #[error("expected {expected} labels (horizon + 1), found {found}")]
    LabelCount { expected: usize, found: usize },
    #[error("invalid negative sample {id} for label {label}")]
    BadNegative { id: usize, label: usize },
    #[error("layer {0} does not share the segment boundaries of layer 0")]
    Misaligned(usize),
    #[error("model needs at least one layer")]
    NoLayers,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("training diverged at step {step} (non-finite loss or gradient)")]
    Divergence { step: usize },
    #[error("invalid configuration: {0}")]
    Config(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

type Result<T> = std::result::Result<T, EvoRnnError>;

fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(EvoRnnError::Dim {
            what,
            expected,
            found,
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn uniform_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-scale..=scale))
}

fn uniform_vector<R: Rng>(len: usize, scale: f64, rng: &mut R) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || rng.random_range(-scale..=scale))
}

/// `dst += a ⊗ b`.
fn add_outer(mut dst: ArrayViewMut2<f64>, a: &Array1<f64>, b: ArrayView1<f64>) {
    Zip::from(dst.rows_mut())
        .and(a)
        .for_each(|mut row, &ai| row.scaled_add(ai, &b));
}

/// Hidden-to-hidden product, counted.
fn hidden_matvec(w: ArrayView2<f64>, v: ArrayView1<f64>, counter: &mut u64) -> Array1<f64> {
    *counter += (w.nrows() * w.ncols()) as u64;
    w.dot(&v)
}

/// GRU cell. Each gate matrix is `n × (m + n)` and acts on `[x; h]`
/// (the candidate acts on `[x; r ⊙ h]`).
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub wz: Array2<f64>,
    pub wr: Array2<f64>,
    pub wc: Array2<f64>,
    pub bz: Array1<f64>,
    pub br: Array1<f64>,
    pub bc: Array1<f64>,
}

impl GruCell {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let w = Array2::zeros((hidden_dim, input_dim + hidden_dim));
        let b = Array1::zeros(hidden_dim);
        GruCell {
            wz: w.clone(),
            wr: w.clone(),
            wc: w,
            bz: b.clone(),
            br: b.clone(),
            bc: b,
        }
    }

    /// Uniform in `±1/√(m+n)`.
    pub fn random<R: Rng>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let a = 1.0 / ((input_dim + hidden_dim) as f64).sqrt();
        let cols = input_dim + hidden_dim;
        GruCell {
            wz: uniform_matrix(hidden_dim, cols, a, rng),
            wr: uniform_matrix(hidden_dim, cols, a, rng),
            wc: uniform_matrix(hidden_dim, cols, a, rng),
            bz: uniform_vector(hidden_dim, a, rng),
            br: uniform_vector(hidden_dim, a, rng),
            bc: uniform_vector(hidden_dim, a, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.wz.ncols() - self.wz.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.wz.nrows()
    }
}

struct StepCache {
    x: Array1<f64>,
    h: Array1<f64>,
    z: Array1<f64>,
    r: Array1<f64>,
    c: Array1<f64>,
}

fn step_forward(
    cell: &GruCell,
    x: &Array1<f64>,
    h: &Array1<f64>,
    counter: &mut u64,
) -> (Array1<f64>, StepCache) {
    let m = cell.input_dim();
    let gate = |w: &Array2<f64>, b: &Array1<f64>, hv: ArrayView1<f64>, counter: &mut u64| {
        w.slice(s![.., ..m]).dot(x) + hidden_matvec(w.slice(s![.., m..]), hv, counter) + b
    };
    let z = gate(&cell.wz, &cell.bz, h.view(), counter).mapv(sigmoid);
    let r = gate(&cell.wr, &cell.br, h.view(), counter).mapv(sigmoid);
    let rh = &r * h;
    let c = gate(&cell.wc, &cell.bc, rh.view(), counter).mapv(f64::tanh);
    let h_new = Zip::from(&z)
        .and(h)
        .and(&c)
        .map_collect(|&z, &h, &c| (1.0 - z) * h + z * c);
    let cache = StepCache {
        x: x.clone(),
        h: h.clone(),
        z,
        r,
        c,
    };
    (h_new, cache)
}

/// Returns `(dx, dh)` and accumulates parameter gradients into `grad`.
fn step_backward(
    cell: &GruCell,
    cache: &StepCache,
    dh_new: &Array1<f64>,
    grad: &mut GruCell,
) -> (Array1<f64>, Array1<f64>) {
    let m = cell.input_dim();
    let StepCache { x, h, z, r, c } = cache;

    let dz = dh_new * &(c - h);
    let mut dh = dh_new * &z.mapv(|z| 1.0 - z);

    let dac = Zip::from(dh_new)
        .and(z)
        .and(c)
        .map_collect(|&g, &z, &c| g * z * (1.0 - c * c));
    let rh = r * h;
    add_outer(grad.wc.slice_mut(s![.., ..m]), &dac, x.view());
    add_outer(grad.wc.slice_mut(s![.., m..]), &dac, rh.view());
    grad.bc += &dac;
    let mut dx = cell.wc.slice(s![.., ..m]).t().dot(&dac);
    let drh = cell.wc.slice(s![.., m..]).t().dot(&dac);
    dh += &(&drh * r);

    let dar = Zip::from(&drh)
        .and(h)
        .and(r)
        .map_collect(|&g, &h, &r| g * h * r * (1.0 - r));
    add_outer(grad.wr.slice_mut(s![.., ..m]), &dar, x.view());
    add_outer(grad.wr.slice_mut(s![.., m..]), &dar, h.view());
    grad.br += &dar;
    dx += &cell.wr.slice(s![.., ..m]).t().dot(&dar);
    dh += &cell.wr.slice(s![.., m..]).t().dot(&dar);

    let daz = Zip::from(&dz)
        .and(z)
        .map_collect(|&g, &z| g * z * (1.0 - z));
    add_outer(grad.wz.slice_mut(s![.., ..m]), &daz, x.view());
    add_outer(grad.wz.slice_mut(s![.., m..]), &daz, h.view());
    grad.bz += &daz;
    dx += &cell.wz.slice(s![.., ..m]).t().dot(&daz);
    dh += &cell.wz.slice(s![.., m..]).t().dot(&daz);

    (dx, dh)
}

/// One GRU step. The output equals the new state.
pub fn gru_step(
    cell: &GruCell,
    x: ArrayView1<f64>,
    h: ArrayView1<f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    check_dim("gru input", cell.input_dim(), x.len())?;
    check_dim("gru state", cell.hidden_dim(), h.len())?;
    let (h_new, _) = step_forward(cell, &x.to_owned(), &h.to_owned(), &mut 0);
    Ok((h_new.clone(), h_new))
}

/// One recurrent layer driven by a schedule. `projections[b]` maps the state
/// from segment `b` into segment `b + 1` and is `None` when both share a size.
#[derive(Debug, Clone, PartialEq)]
pub struct EvoRnnLayer {
    schedule: CellSchedule,
    pub cells: Vec<GruCell>,
    pub projections: Vec<Option<Array2<f64>>>,
    pub init_state: Array1<f64>,
    pub learn_init: bool,
}

impl EvoRnnLayer {
    /// Random cells, copy-overlap projections and a zero initial state.
    /// `input_dims` gives the input size of each segment's cell.
    pub fn new<R: Rng>(
        schedule: CellSchedule,
        input_dims: &[usize],
        learn_init: bool,
        rng: &mut R,
    ) -> Result<Self> {
        check_dim("per-segment input dims", schedule.len(), input_dims.len())?;
        let segs = schedule.segments();
        let cells = segs
            .iter()
            .zip(input_dims)
            .map(|(seg, &m)| GruCell::random(m, seg.hidden, rng))
            .collect();
        let projections = segs
            .windows(2)
            .map(|w| {
                (w[0].hidden != w[1].hidden).then(|| {
                    Array2::eye(w[1].hidden.max(w[0].hidden))
                        .slice(s![..w[1].hidden, ..w[0].hidden])
                        .to_owned()
                })
            })
            .collect();
        Ok(EvoRnnLayer {
            init_state: Array1::zeros(schedule.first_hidden()),
            schedule,
            cells,
            projections,
            learn_init,
        })
    }

    pub fn zeros_like(&self) -> Self {
        EvoRnnLayer {
            schedule: self.schedule.clone(),
            cells: self
                .cells
                .iter()
                .map(|c| GruCell::zeros(c.input_dim(), c.hidden_dim()))
                .collect(),
            projections: self
                .projections
                .iter()
                .map(|p| p.as_ref().map(|p| Array2::zeros(p.raw_dim())))
                .collect(),
            init_state: Array1::zeros(self.init_state.len()),
            learn_init: self.learn_init,
        }
    }

    pub fn schedule(&self) -> &CellSchedule {
        &self.schedule
    }

    pub fn output_dim(&self, segment: usize) -> usize {
        self.cells[segment].hidden_dim()
    }

    /// Segment used at step `t` of a sequence with prefix length `len`;
    /// unfolded steps (`t ≥ len`) stay in the last segment.
    fn segment_for(&self, t: usize, len: usize) -> usize {
        if t >= len {
            self.cells.len() - 1
        } else {
            lookup_cell(t, len, &self.schedule)
                .expect("t < len")
                .segment
        }
    }
}

struct LayerTrace {
    steps: Vec<StepCache>,
    segments: Vec<usize>,
    /// Raw carried state at steps where a projection was applied.
    pre_projection: Vec<Option<Array1<f64>>>,
    outputs: Vec<Array1<f64>>,
}

fn layer_forward(
    layer: &EvoRnnLayer,
    inputs: &[Array1<f64>],
    len: usize,
    counter: &mut u64,
) -> Result<LayerTrace> {
    let span = layer.schedule.total_length();
    if len < span || inputs.len() < len {
        return Err(EvoRnnError::SequenceTooShort {
            len: len.min(inputs.len()),
            span,
        });
    }
    let mut trace = LayerTrace {
        steps: Vec::with_capacity(inputs.len()),
        segments: Vec::with_capacity(inputs.len()),
        pre_projection: Vec::with_capacity(inputs.len()),
        outputs: Vec::with_capacity(inputs.len()),
    };
    let mut h = layer.init_state.clone();
    let mut prev = 0;
    for (t, x) in inputs.iter().enumerate() {
        let seg = layer.segment_for(t, len);
        let cell = &layer.cells[seg];
        check_dim("layer input", cell.input_dim(), x.len())?;
        let mut raw = None;
        if seg != prev {
            if let Some(p) = &layer.projections[prev] {
                let projected = p.dot(&h);
                raw = Some(std::mem::replace(&mut h, projected));
            }
            prev = seg;
        }
        let (h_new, cache) = step_forward(cell, x, &h, counter);
        trace.steps.push(cache);
        trace.segments.push(seg);
        trace.pre_projection.push(raw);
        trace.outputs.push(h_new.clone());
        h = h_new;
    }
    Ok(trace)
}

/// Backpropagates `d_out` (gradient per step output) and returns the
/// gradient for each step's input.
fn layer_backward(
    layer: &EvoRnnLayer,
    trace: &LayerTrace,
    d_out: &[Option<Array1<f64>>],
    grad: &mut EvoRnnLayer,
) -> Vec<Array1<f64>> {
    let steps = trace.steps.len();
    let mut dx_all = vec![Array1::zeros(0); steps];
    let mut carry: Array1<f64> = Array1::zeros(trace.outputs[steps - 1].len());
    for t in (0..steps).rev() {
        let seg = trace.segments[t];
        if let Some(d) = &d_out[t] {
            carry += d;
        }
        let (dx, dh) = step_backward(
            &layer.cells[seg],
            &trace.steps[t],
            &carry,
            &mut grad.cells[seg],
        );
        dx_all[t] = dx;
        carry = match &trace.pre_projection[t] {
            Some(raw) => {
                let b = seg - 1;
                let p = layer.projections[b].as_ref().expect("projection recorded");
                add_outer(
                    grad.projections[b].as_mut().expect("same shape").view_mut(),
                    &dh,
                    raw.view(),
                );
                p.t().dot(&dh)
            }
            None => dh,
        };
    }
    grad.init_state += &carry;
    dx_all
}

/// Runs one layer over `inputs`; steps at and beyond `len` use the last
/// segment. Returns per-step outputs and the final state.
pub fn evo_forward(
    layer: &EvoRnnLayer,
    inputs: &[Array1<f64>],
    len: usize,
) -> Result<(Vec<Array1<f64>>, Array1<f64>)> {
    if inputs.is_empty() {
        return Err(EvoRnnError::SequenceTooShort {
            len: 0,
            span: layer.schedule.total_length(),
        });
    }
    let trace = layer_forward(layer, inputs, len, &mut 0)?;
    let last = trace.outputs[trace.outputs.len() - 1].clone();
    Ok((trace.outputs, last))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    /// `d_O × d_D`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Shape of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub vocab: usize,
    pub embed_dim: usize,
    pub output_dim: usize,
    /// One schedule per layer, bottom first; boundaries must coincide.
    pub schedules: Vec<CellSchedule>,
    pub horizon: usize,
    pub learn_init: bool,
}

impl ModelSpec {
    /// Single-layer model used for the lag-recall toy.
    pub fn toy(vocab: usize, schedule: CellSchedule) -> Self {
        ModelSpec {
            vocab,
            embed_dim: TOY_EMBED_DIM,
            output_dim: TOY_OUTPUT_DIM,
            schedules: vec![schedule],
            horizon: 0,
            learn_init: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedules.is_empty() {
            return Err(EvoRnnError::NoLayers);
        }
        if self.vocab == 0 || self.embed_dim == 0 || self.output_dim == 0 {
            return Err(EvoRnnError::Config(
                "vocabulary and dimensions must be positive",
            ));
        }
        if let Some(i) = self
            .schedules
            .iter()
            .position(|s| !s.same_boundaries(&self.schedules[0]))
        {
            return Err(EvoRnnError::Misaligned(i));
        }
        Ok(())
    }

    fn input_dims(&self, layer: usize) -> Vec<usize> {
        if layer == 0 {
            vec![self.embed_dim; self.schedules[0].len()]
        } else {
            self.schedules[layer - 1]
                .segments()
                .iter()
                .map(|s| s.hidden)
                .collect()
        }
    }

    fn top_dim(&self) -> usize {
        self.schedules[self.schedules.len() - 1].last_hidden()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `V × p`.
    pub input_embeddings: Array2<f64>,
    pub layers: Vec<EvoRnnLayer>,
    pub decoder: Decoder,
    /// `V × d_O`.
    pub output_embeddings: Array2<f64>,
    pub horizon: usize,
}

impl ModelParams {
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input_embeddings = uniform_matrix(spec.vocab, spec.embed_dim, 1.0, &mut rng);
        let layers = spec
            .schedules
            .iter()
            .enumerate()
            .map(|(i, s)| {
                EvoRnnLayer::new(s.clone(), &spec.input_dims(i), spec.learn_init, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let d = spec.top_dim();
        let a = 1.0 / (d as f64).sqrt();
        let decoder = Decoder {
            weight: uniform_matrix(spec.output_dim, d, a, &mut rng),
            bias: Array1::zeros(spec.output_dim),
        };
        let output_embeddings = uniform_matrix(
            spec.vocab,
            spec.output_dim,
            1.0 / (spec.output_dim as f64).sqrt(),
            &mut rng,
        );
        Ok(ModelParams {
            input_embeddings,
            layers,
            decoder,
            output_embeddings,
            horizon: spec.horizon,
        })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            input_embeddings: Array2::zeros(self.input_embeddings.raw_dim()),
            layers: self.layers.iter().map(EvoRnnLayer::zeros_like).collect(),
            decoder: Decoder {
                weight: Array2::zeros(self.decoder.weight.raw_dim()),
                bias: Array1::zeros(self.decoder.bias.len()),
            },
            output_embeddings: Array2::zeros(self.output_embeddings.raw_dim()),
            horizon: self.horizon,
        }
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            vocab: self.vocab(),
            embed_dim: self.input_embeddings.ncols(),
            output_dim: self.output_embeddings.ncols(),
            schedules: self.layers.iter().map(|l| l.schedule.clone()).collect(),
            horizon: self.horizon,
            learn_init: self.layers.iter().any(|l| l.learn_init),
        }
    }

    pub fn vocab(&self) -> usize {
        self.input_embeddings.nrows()
    }

    pub fn input_table(&self) -> Result<EmbeddingTable> {
        Ok(EmbeddingTable::from_matrix(self.input_embeddings.clone())?)
    }

    pub fn output_table(&self) -> Result<EmbeddingTable> {
        Ok(EmbeddingTable::from_matrix(self.output_embeddings.clone())?)
    }

    /// Named flat views of every tensor with their shapes.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        fn flat<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        let mut out = vec![(
            "input_embeddings".to_owned(),
            self.input_embeddings.shape().to_vec(),
            flat(&self.input_embeddings),
        )];
        for (i, layer) in self.layers.iter().enumerate() {
            for (s, c) in layer.cells.iter().enumerate() {
                for (name, w) in [("wz", &c.wz), ("wr", &c.wr), ("wc", &c.wc)] {
                    out.push((
                        format!("layer{i}.cell{s}.{name}"),
                        w.shape().to_vec(),
                        flat(w),
                    ));
                }
                for (name, b) in [("bz", &c.bz), ("br", &c.br), ("bc", &c.bc)] {
                    out.push((
                        format!("layer{i}.cell{s}.{name}"),
                        b.shape().to_vec(),
                        flat(b),
                    ));
                }
            }
            for (b, p) in layer.projections.iter().enumerate() {
                if let Some(p) = p {
                    out.push((format!("layer{i}.proj{b}"), p.shape().to_vec(), flat(p)));
                }
            }
            out.push((
                format!("layer{i}.init"),
                layer.init_state.shape().to_vec(),
                flat(&layer.init_state),
            ));
        }
        out.push((
            "decoder.weight".to_owned(),
            self.decoder.weight.shape().to_vec(),
            flat(&self.decoder.weight),
        ));
        out.push((
            "decoder.bias".to_owned(),
            self.decoder.bias.shape().to_vec(),
            flat(&self.decoder.bias),
        ));
        out.push((
            "output_embeddings".to_owned(),
            self.output_embeddings.shape().to_vec(),
            flat(&self.output_embeddings),
        ));
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        fn flat<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        let mut out = vec![(
            "input_embeddings".to_owned(),
            flat(&mut self.input_embeddings),
        )];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (s, c) in layer.cells.iter_mut().enumerate() {
                out.push((format!("layer{i}.cell{s}.wz"), flat(&mut c.wz)));
                out.push((format!("layer{i}.cell{s}.wr"), flat(&mut c.wr)));
                out.push((format!("layer{i}.cell{s}.wc"), flat(&mut c.wc)));
                out.push((format!("layer{i}.cell{s}.bz"), flat(&mut c.bz)));
                out.push((format!("layer{i}.cell{s}.br"), flat(&mut c.br)));
                out.push((format!("layer{i}.cell{s}.bc"), flat(&mut c.bc)));
            }
            for (b, p) in layer.projections.iter_mut().enumerate() {
                if let Some(p) = p {
                    out.push((format!("layer{i}.proj{b}"), flat(p)));
                }
            }
            out.push((format!("layer{i}.init"), flat(&mut layer.init_state)));
        }
        out.push(("decoder.weight".to_owned(), flat(&mut self.decoder.weight)));
        out.push(("decoder.bias".to_owned(), flat(&mut self.decoder.bias)));
        out.push((
            "output_embeddings".to_owned(),
            flat(&mut self.output_embeddings),
        ));
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, _, t)| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, a: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= a);
        }
    }

    /// `self += a · other`; shapes must match.
    pub fn add_scaled(&mut self, a: f64, other: &ModelParams) {
        for ((_, dst), (_, _, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            assert_eq!(dst.len(), src.len(), "tensor shapes differ");
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += a * s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Hidden-to-hidden multiply-adds of one forward pass with prefix `len`.
    pub fn forward_multiply_adds(&self, len: usize) -> u64 {
        let steps = len + self.horizon;
        self.layers
            .iter()
            .map(|l| {
                (0..steps)
                    .map(|t| {
                        let n = l.output_dim(l.segment_for(t, len)) as u64;
                        3 * n * n
                    })
                    .sum::<u64>()
            })
            .sum()
    }
}

/// An input prefix and the `H + 1` labels that follow it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub inputs: Vec<usize>,
    pub labels: Vec<usize>,
}

struct ModelTrace {
    ids: Vec<usize>,
    layers: Vec<LayerTrace>,
    top: Vec<Array1<f64>>,
    ys: Vec<Array1<f64>>,
}

fn model_forward(model: &ModelParams, ex: &Example, counter: &mut u64) -> Result<ModelTrace> {
    let h = model.horizon;
    let len = ex.inputs.len();
    if ex.labels.len() != h + 1 {
        return Err(EvoRnnError::LabelCount {
            expected: h + 1,
            found: ex.labels.len(),
        });
    }
    let vocab = model.vocab();
    if let Some(&id) = ex.inputs.iter().chain(&ex.labels).find(|&&id| id >= vocab) {
        return Err(EvoRnnError::SymbolOutOfRange { id, vocab });
    }
    if len == 0 {
        return Err(EvoRnnError::SequenceTooShort {
            len,
            span: model.layers[0].schedule.total_length(),
        });
    }
    // Teacher forcing: unfolded steps read the preceding labels.
    let ids: Vec<usize> = ex.inputs.iter().chain(&ex.labels[..h]).copied().collect();
    let mut xs: Vec<Array1<f64>> = ids
        .iter()
        .map(|&id| model.input_embeddings.row(id).to_owned())
        .collect();
    let mut layers = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let trace = layer_forward(layer, &xs, len, counter)?;
        xs = trace.outputs.clone();
        layers.push(trace);
    }
    check_dim(
        "decoder input",
        model.decoder.weight.ncols(),
        xs[len - 1].len(),
    )?;
    let ys = (0..=h)
        .map(|j| model.decoder.weight.dot(&xs[len - 1 + j]) + &model.decoder.bias)
        .collect();
    Ok(ModelTrace {
        ids,
        layers,
        top: xs,
        ys,
    })
}

/// Decoded outputs `y_L … y_{L+H}` for one example.
pub fn stacked_forward(model: &ModelParams, ex: &Example) -> Result<Vec<Array1<f64>>> {
    Ok(model_forward(model, ex, &mut 0)?.ys)
}

/// Log-softmax of the label over its candidate set, and `∂(−score)/∂logit`
/// per candidate.
fn position_score(
    y: &Array1<f64>,
    label: usize,
    output: &Array2<f64>,
    negatives: Option<&[usize]>,
) -> Result<(f64, Vec<(usize, f64)>)> {
    let vocab = output.nrows();
    if label >= vocab {
        return Err(EvoRnnError::SymbolOutOfRange { id: label, vocab });
    }
    check_dim("output vector", output.ncols(), y.len())?;
    let candidates: Vec<usize> = match negatives {
        None => (0..vocab).collect(),
        Some(neg) => {
            if let Some(&id) = neg.iter().find(|&&id| id == label || id >= vocab) {
                return Err(EvoRnnError::BadNegative { id, label });
            }
            std::iter::once(label).chain(neg.iter().copied()).collect()
        }
    };
    let logits: Vec<f64> = candidates.iter().map(|&k| output.row(k).dot(y)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    let label_logit = output.row(label).dot(y);
    let dlogits = candidates
        .iter()
        .zip(&logits)
        .map(|(&k, &l)| (k, (l - lse).exp() - if k == label { 1.0 } else { 0.0 }))
        .collect();
    Ok((label_logit - lse, dlogits))
}

/// `Σ_j ⟨y_j, e_{s_j}⟩ − log Σ_k exp⟨y_j, e_k⟩`, over the full vocabulary or
/// over `{label} ∪ negatives[j]`.
pub fn score_log_prob(
    ys: &[Array1<f64>],
    labels: &[usize],
    output: &Array2<f64>,
    negatives: Option<&[Vec<usize>]>,
) -> Result<f64> {
    check_dim("labels", ys.len(), labels.len())?;
    if let Some(neg) = negatives {
        check_dim("negative sets", ys.len(), neg.len())?;
    }
    let mut total = 0.0;
    for (j, (y, &label)) in ys.iter().zip(labels).enumerate() {
        let neg = negatives.map(|n| n[j].as_slice());
        total += position_score(y, label, output, neg)?.0;
    }
    Ok(total)
}

/// Normalization used for the softmax denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    Full,
    /// `negatives` ids drawn uniformly without replacement, excluding the
    /// label; example `i` draws from stream `i` of `seed`.
    Sampled {
        negatives: usize,
        seed: u64,
    },
}

pub fn sample_negatives<R: Rng>(
    label: usize,
    vocab: usize,
    count: usize,
    rng: &mut R,
) -> Vec<usize> {
    rand::seq::index::sample(rng, vocab - 1, count)
        .into_iter()
        .map(|i| if i >= label { i + 1 } else { i })
        .collect()
}

fn negatives_for(
    ex: &Example,
    vocab: usize,
    sampling: Sampling,
    index: usize,
) -> Result<Option<Vec<Vec<usize>>>> {
    match sampling {
        Sampling::Full => Ok(None),
        Sampling::Sampled { negatives, seed } => {
            if negatives == 0 || negatives >= vocab {
                return Err(EvoRnnError::Config("negatives must satisfy 0 < N < V"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64);
            Ok(Some(
                ex.labels
                    .iter()
                    .map(|&l| sample_negatives(l.min(vocab - 1), vocab, negatives, &mut rng))
                    .collect(),
            ))
        }
    }
}

/// Negative score of one example; gradients are added into `grads`.
fn example_backward(
    model: &ModelParams,
    ex: &Example,
    negatives: Option<&[Vec<usize>]>,
    grads: &mut ModelParams,
    counter: &mut u64,
) -> Result<f64> {
    let trace = model_forward(model, ex, counter)?;
    let len = ex.inputs.len();
    let steps = trace.ids.len();
    let mut loss = 0.0;
    let mut d_out: Vec<Option<Array1<f64>>> = vec![None; steps];
    for (j, y) in trace.ys.iter().enumerate() {
        let neg = negatives.map(|n| n[j].as_slice());
        let (score, dlogits) = position_score(y, ex.labels[j], &model.output_embeddings, neg)?;
        loss -= score;
        let mut dy = Array1::zeros(y.len());
        for (k, g) in dlogits {
            dy.scaled_add(g, &model.output_embeddings.row(k));
            grads.output_embeddings.row_mut(k).scaled_add(g, y);
        }
        let t = len - 1 + j;
        add_outer(grads.decoder.weight.view_mut(), &dy, trace.top[t].view());
        grads.decoder.bias += &dy;
        d_out[t] = Some(model.decoder.weight.t().dot(&dy));
    }
    for (i, layer) in model.layers.iter().enumerate().rev() {
        let dx = layer_backward(layer, &trace.layers[i], &d_out, &mut grads.layers[i]);
        d_out = dx.into_iter().map(Some).collect();
    }
    for (&id, dx) in trace.ids.iter().zip(d_out) {
        grads
            .input_embeddings
            .row_mut(id)
            .scaled_add(1.0, &dx.expect("every step has an input gradient"));
    }
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct BatchGradients {
    /// Summed over the batch.
    pub grads: ModelParams,
    /// Summed negative score.
    pub loss: f64,
    /// Hidden-to-hidden multiply-adds of the forward passes.
    pub multiply_adds: u64,
}

/// Exact gradients of the summed negative score. Examples run in parallel
/// and are reduced in index order.
pub fn compute_gradients(
    model: &ModelParams,
    batch: &[Example],
    sampling: Sampling,
) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(EvoRnnError::EmptyBatch);
    }
    let vocab = model.vocab();
    let per_example: Vec<Result<(ModelParams, f64, u64)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let neg = negatives_for(ex, vocab, sampling, i)?;
            let mut g = model.zeros_like();
            let mut counter = 0;
            let loss = example_backward(model, ex, neg.as_deref(), &mut g, &mut counter)?;
            Ok((g, loss, counter))
        })
        .collect();
    let mut out = BatchGradients {
        grads: model.zeros_like(),
        loss: 0.0,
        multiply_adds: 0,
    };
    for r in per_example {
        let (g, loss, count) = r?;
        out.grads.add_scaled(1.0, &g);
        out.loss += loss;
        out.multiply_adds += count;
    }
    Ok(out)
}

/// Summed negative score, with the same negatives as [`compute_gradients`].
pub fn batch_loss(model: &ModelParams, batch: &[Example], sampling: Sampling) -> Result<f64> {
    let vocab = model.vocab();
    let losses: Vec<Result<f64>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let neg = negatives_for(ex, vocab, sampling, i)?;
            let ys = stacked_forward(model, ex)?;
            Ok(-score_log_prob(
                &ys,
                &ex.labels,
                &model.output_embeddings,
                neg.as_deref(),
            )?)
        })
        .collect();
    losses.into_iter().sum()
}

/// Mean full-softmax cross-entropy per label, in nats.
pub fn cross_entropy(model: &ModelParams, batch: &[Example]) -> Result<f64> {
    if batch.is_empty() {
        return Err(EvoRnnError::EmptyBatch);
    }
    let labels: usize = batch.iter().map(|e| e.labels.len()).sum();
    Ok(batch_loss(model, batch, Sampling::Full)? / labels as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientCheck {
    pub tensor: String,
    pub max_rel_error: f64,
    pub entries: usize,
}

/// Central finite differences of [`batch_loss`] for every parameter entry.
/// Relative error is `|a − n| / max(|a|, |n|, floor)`.
pub fn gradient_check(
    model: &ModelParams,
    batch: &[Example],
    sampling: Sampling,
    eps: f64,
    floor: f64,
) -> Result<Vec<GradientCheck>> {
    let analytic = compute_gradients(model, batch, sampling)?.grads;
    let analytic: Vec<(String, Vec<f64>)> = analytic
        .tensors()
        .into_iter()
        .map(|(n, _, t)| (n, t.to_vec()))
        .collect();
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(analytic.len());
    for (ti, (name, grad)) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for (k, &a) in grad.iter().enumerate() {
            let orig = probe.tensors_mut()[ti].1[k];
            probe.tensors_mut()[ti].1[k] = orig + eps;
            let plus = batch_loss(&probe, batch, sampling)?;
            probe.tensors_mut()[ti].1[k] = orig - eps;
            let minus = batch_loss(&probe, batch, sampling)?;
            probe.tensors_mut()[ti].1[k] = orig;
            let n = (plus - minus) / (2.0 * eps);
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(floor));
        }
        out.push(GradientCheck {
            tensor: name.clone(),
            max_rel_error: worst,
            entries: grad.len(),
        });
    }
    Ok(out)
}

/// Rescales `grads` so its global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Truncated power law `P(τ) ∝ τ^(−α)` on `1..=max_lag`.
#[derive(Debug, Clone)]
pub struct LagDistribution {
    probs: Vec<f64>,
    index: WeightedIndex<f64>,
}

impl LagDistribution {
    pub fn new(max_lag: usize, exponent: f64) -> Result<Self> {
        if max_lag == 0 {
            return Err(EvoRnnError::Config("max lag must be at least 1"));
        }
        if exponent.is_nan() || exponent < 0.0 {
            return Err(EvoRnnError::Config("tail exponent must be non-negative"));
        }
        let weights: Vec<f64> = (1..=max_lag).map(|t| (t as f64).powf(-exponent)).collect();
        let total: f64 = weights.iter().sum();
        let index = WeightedIndex::new(&weights)
            .map_err(|_| EvoRnnError::Config("degenerate lag weights"))?;
        Ok(LagDistribution {
            probs: weights.iter().map(|w| w / total).collect(),
            index,
        })
    }

    pub fn max_lag(&self) -> usize {
        self.probs.len()
    }

    pub fn probability(&self, lag: usize) -> f64 {
        if lag == 0 {
            0.0
        } else {
            self.probs.get(lag - 1).copied().unwrap_or(0.0)
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.index.sample(rng) + 1
    }
}

/// Uniform symbols; each label copies the symbol `τ` positions back, with
/// `τ` drawn from a truncated power law over `[1, L − 1]`.
#[derive(Debug, Clone)]
pub struct LagRecallTask {
    vocab: usize,
    seq_len: usize,
    horizon: usize,
    lags: LagDistribution,
}

impl LagRecallTask {
    pub fn new(vocab: usize, seq_len: usize, horizon: usize, tail_exponent: f64) -> Result<Self> {
        if vocab < 2 || seq_len < 2 {
            return Err(EvoRnnError::Config("lag recall needs V ≥ 2 and L ≥ 2"));
        }
        Ok(LagRecallTask {
            vocab,
            seq_len,
            horizon,
            lags: LagDistribution::new(seq_len - 1, tail_exponent)?,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn lags(&self) -> &LagDistribution {
        &self.lags
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Example {
        let (len, h) = (self.seq_len, self.horizon);
        let mut tokens: Vec<usize> = (0..len + h + 1)
            .map(|_| rng.random_range(0..self.vocab))
            .collect();
        for j in 0..=h {
            let lag = self.lags.sample(rng);
            tokens[len + j] = tokens[len + j - lag];
        }
        let labels = tokens.split_off(len);
        Example {
            inputs: tokens,
            labels,
        }
    }

    pub fn batch<R: Rng + ?Sized>(&self, rng: &mut R, size: usize) -> Vec<Example> {
        (0..size).map(|_| self.sample(rng)).collect()
    }

    /// Endless deterministic stream of examples.
    pub fn stream(&self, seed: u64) -> impl Iterator<Item = Example> + '_ {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        std::iter::repeat_with(move || self.sample(&mut rng))
    }
}

/// Single-label lag-recall stream.
pub fn task_lag_recall(
    vocab: usize,
    seq_len: usize,
    tail_exponent: f64,
    seed: u64,
) -> Result<impl Iterator<Item = Example>> {
    let task = LagRecallTask::new(vocab, seq_len, 0, tail_exponent)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(std::iter::repeat_with(move || task.sample(&mut rng)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub clip_norm: f64,
    /// `None` trains with the full softmax.
    pub negatives: Option<usize>,
    pub steps: usize,
    pub batch_size: usize,
    /// Size of the fixed held-out batch the recorded loss is measured on.
    pub eval_batch_size: usize,
    pub seed: u64,
    /// When false, `wall_ms` is recorded as 0 so metrics are reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            clip_norm: 5.0,
            negatives: None,
            steps: 5000,
            batch_size: 64,
            eval_batch_size: 64,
            seed: 0,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(EvoRnnError::Config(
                "learning rate must be finite and non-negative",
            ));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(EvoRnnError::Config("clip norm must be positive"));
        }
        if matches!(self.negatives, Some(n) if n == 0 || n >= vocab) {
            return Err(EvoRnnError::Config("negatives must satisfy 0 < N < V"));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(EvoRnnError::Config("batch sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Mean full-softmax cross-entropy on the held-out batch after this step.
    pub loss: f64,
    /// Hidden-to-hidden multiply-adds of this step's training forward passes.
    pub multiply_adds: u64,
    pub wall_ms: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,loss,multiply_adds,wall_ms";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:e},{},{:.3}",
            self.step, self.loss, self.multiply_adds, self.wall_ms
        )
    }
}

/// SGD with global-norm clipping on the mean batch gradient. Row 0 of the
/// history is the loss before any update.
pub fn train_toy(
    model: &mut ModelParams,
    task: &LagRecallTask,
    config: &TrainConfig,
    mut observer: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    config.validate(model.vocab())?;
    if task.vocab() != model.vocab() || task.horizon() != model.horizon {
        return Err(EvoRnnError::Config(
            "task vocabulary and horizon must match the model",
        ));
    }
    let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed);
    eval_rng.set_stream(0);
    let eval = task.batch(&mut eval_rng, config.eval_batch_size);
    let mut train_rng = ChaCha8Rng::seed_from_u64(config.seed);
    train_rng.set_stream(1);
    let mut neg_rng = ChaCha8Rng::seed_from_u64(config.seed);
    neg_rng.set_stream(2);

    let mut history = Vec::with_capacity(config.steps + 1);
    let initial = StepMetrics {
        step: 0,
        loss: cross_entropy(model, &eval)?,
        multiply_adds: 0,
        wall_ms: 0.0,
    };
    if !initial.loss.is_finite() {
        return Err(EvoRnnError::Divergence { step: 0 });
    }
    observer(&initial);
    history.push(initial);

    for step in 1..=config.steps {
        let started = Instant::now();
        let batch = task.batch(&mut train_rng, config.batch_size);
        let sampling = match config.negatives {
            None => Sampling::Full,
            Some(negatives) => Sampling::Sampled {
                negatives,
                seed: neg_rng.next_u64(),
            },
        };
        let BatchGradients {
            mut grads,
            multiply_adds,
            ..
        } = compute_gradients(model, &batch, sampling)?;
        grads.scale(1.0 / config.batch_size as f64);
        for layer in grads.layers.iter_mut().filter(|l| !l.learn_init) {
            layer.init_state.fill(0.0);
        }
        if !grads.is_finite() {
            return Err(EvoRnnError::Divergence { step });
        }
        clip_global_norm(&mut grads, config.clip_norm);
        model.add_scaled(-config.learning_rate, &grads);
        let loss = cross_entropy(model, &eval)?;
        if !loss.is_finite() {
            return Err(EvoRnnError::Divergence { step });
        }
        let metrics = StepMetrics {
            step,
            loss,
            multiply_adds,
            wall_ms: if config.record_wall_time {
                started.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
        };
        observer(&metrics);
        history.push(metrics);
    }
    Ok(history)
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    spec: ModelSpec,
    tensors: Vec<TensorRecord>,
}

/// JSON checkpoint with a shape header per tensor.
pub fn save_checkpoint<W: Write>(model: &ModelParams, writer: W) -> Result<()> {
    let ckpt = Checkpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        spec: model.spec(),
        tensors: model
            .tensors()
            .into_iter()
            .map(|(name, shape, data)| TensorRecord {
                name,
                shape,
                data: data.to_vec(),
            })
            .collect(),
    };
    serde_json::to_writer(writer, &ckpt).map_err(|e| EvoRnnError::Checkpoint(e.to_string()))
}

pub fn load_checkpoint<R: Read>(reader: R) -> Result<ModelParams> {
    let ckpt: Checkpoint =
        serde_json::from_reader(reader).map_err(|e| EvoRnnError::Checkpoint(e.to_string()))?;
    if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(EvoRnnError::Checkpoint(format!(
            "unsupported format version {}",
            ckpt.format_version
        )));
    }
    let mut model = ModelParams::init(&ckpt.spec, 0)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    if expected.len() != ckpt.tensors.len() {
        return Err(EvoRnnError::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            ckpt.tensors.len()
        )));
    }
    for ((name, shape), ((_, dst), rec)) in expected
        .iter()
        .zip(model.tensors_mut().into_iter().zip(&ckpt.tensors))
    {
        if &rec.name != name || &rec.shape != shape || rec.data.len() != dst.len() {
            return Err(EvoRnnError::Checkpoint(format!(
                "tensor {} {:?} does not match {} {:?}",
                rec.name, rec.shape, name, shape
            )));
        }
        dst.copy_from_slice(&rec.data);
    }
    Ok(model)
}
