//! Model definitions and forward passes: the supervised classifier
//! (recurrent cell + fully-connected head + softmax), the unsupervised
//! next-step predictor, and the semi-supervised stack that feeds the
//! predictor's hidden states into a classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{init_params, step_cached, CellKind, CellParams, CellState, StepCache};
use crate::error::{Error, Result};
use crate::linalg::{softmax, Matrix, Vector};
use crate::sequence::{select_final_states, SequenceBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub w: Matrix,
    pub b: Vector,
}

impl DenseLayer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        DenseLayer {
            w: Matrix::zeros(out_dim, in_dim),
            b: Vector::zeros(out_dim),
        }
    }

    fn glorot(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize) -> Self {
        let bound = (6.0 / (out_dim + in_dim) as f64).sqrt();
        DenseLayer {
            w: Matrix::from_vec(
                out_dim,
                in_dim,
                (0..out_dim * in_dim).map(|_| rng.gen_range(-bound..bound)).collect(),
            ),
            b: Vector::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &Vector) -> Result<Vector> {
        let mut y = self.w.matvec(x)?;
        y.add_assign(&self.b);
        Ok(y)
    }
}

/// Architecture of the supervised classifier. `head` lists the widths of
/// the hidden fully-connected layers (the final layer to `num_classes` is
/// implicit); `dropout` gives one rate per hidden head layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub cell: CellKind,
    pub input_dim: usize,
    pub hidden: usize,
    #[serde(default)]
    pub head: Vec<usize>,
    #[serde(default)]
    pub dropout: Vec<f64>,
    pub num_classes: usize,
    #[serde(default = "default_true")]
    pub use_biases: bool,
}

pub(crate) fn default_true() -> bool {
    true
}

impl ClassifierArch {
    pub fn plain(cell: CellKind, input_dim: usize, hidden: usize, num_classes: usize) -> Self {
        ClassifierArch {
            cell,
            input_dim,
            hidden,
            head: Vec::new(),
            dropout: Vec::new(),
            num_classes,
            use_biases: true,
        }
    }

    /// The RNNs+FCL variant: default head widths [128] with dropout 0.5.
    pub fn with_fcl(cell: CellKind, input_dim: usize, hidden: usize, num_classes: usize) -> Self {
        ClassifierArch {
            cell,
            input_dim,
            hidden,
            head: vec![128],
            dropout: vec![0.5],
            num_classes,
            use_biases: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head.len() != self.dropout.len() {
            return Err(Error::argument(format!(
                "head has {} layers but {} dropout rates",
                self.head.len(),
                self.dropout.len()
            )));
        }
        if self.dropout.iter().any(|&p| !(0.0..1.0).contains(&p)) {
            return Err(Error::argument("dropout rates must be in [0,1)".to_string()));
        }
        if self.num_classes < 2 {
            return Err(Error::argument("num_classes must be >= 2".to_string()));
        }
        Ok(())
    }

    pub fn build(&self, seed: u64) -> Result<ClassifierModel> {
        self.validate()?;
        let cell = init_params(self.cell, self.input_dim, self.hidden, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e3779b97f4a7c15));
        let mut layers = Vec::new();
        let mut in_dim = self.hidden;
        for &width in &self.head {
            layers.push(DenseLayer::glorot(&mut rng, width, in_dim));
            in_dim = width;
        }
        layers.push(DenseLayer::glorot(&mut rng, self.num_classes, in_dim));
        Ok(ClassifierModel {
            arch: self.clone(),
            cell,
            head: layers,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub arch: ClassifierArch,
    pub cell: CellParams,
    pub head: Vec<DenseLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorArch {
    pub cell: CellKind,
    pub input_dim: usize,
    pub hidden: usize,
    #[serde(default = "default_true")]
    pub use_biases: bool,
}

impl PredictorArch {
    pub fn build(&self, seed: u64) -> Result<PredictorModel> {
        let cell = init_params(self.cell, self.input_dim, self.hidden, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x517cc1b727220a95));
        let readout = DenseLayer::glorot(&mut rng, self.input_dim, self.hidden);
        Ok(PredictorModel {
            arch: self.clone(),
            cell,
            readout,
        })
    }
}

/// Next-step predictor: recurrent cell plus an affine readout back to the
/// input channel dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorModel {
    pub arch: PredictorArch,
    pub cell: CellParams,
    pub readout: DenseLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiSupervisedModel {
    pub predictor: PredictorModel,
    pub classifier: ClassifierModel,
    pub freeze_predictor: bool,
}

#[derive(Debug, Clone, Copy)]
pub enum ForwardMode {
    Eval,
    /// Dropout active, masks drawn from a stream seeded per call.
    Train { dropout_seed: u64 },
}

impl ForwardMode {
    pub fn is_train(&self) -> bool {
        matches!(self, ForwardMode::Train { .. })
    }
}

/// Unrolled cell states for one batch: per-sample step caches plus a
/// padded T_max x H matrix of hidden states (zero past each length).
#[derive(Debug)]
pub struct CellRun {
    pub caches: Vec<Vec<StepCache>>,
    pub states: Vec<Matrix>,
}

/// Unroll a cell over the valid steps of every sample in the batch.
pub fn run_cell(params: &CellParams, batch: &SequenceBatch) -> Result<CellRun> {
    if batch.channels() != params.input_dim() {
        return Err(Error::shape(format!(
            "cell expects input dim {}, batch has {}",
            params.input_dim(),
            batch.channels()
        )));
    }
    let hidden = params.hidden();
    let kind = params.kind();
    let mut caches = Vec::with_capacity(batch.size());
    let mut states = Vec::with_capacity(batch.size());
    for b in 0..batch.size() {
        let len = batch.lengths[b];
        let mut state = CellState::zeros(kind, hidden);
        let mut sample_caches = Vec::with_capacity(len);
        let mut hs = Matrix::zeros(batch.t_max, hidden);
        for t in 0..len {
            let x = batch.input_at(b, t);
            let (next, cache) = step_cached(params, &x, &state)?;
            hs.row_mut(t).copy_from_slice(next.h.as_slice());
            sample_caches.push(cache);
            state = next;
        }
        caches.push(sample_caches);
        states.push(hs);
    }
    Ok(CellRun { caches, states })
}

/// Unroll a cell over an externally supplied hidden-state sequence (used
/// when the classifier consumes predictor hidden states).
pub fn run_cell_on_states(
    params: &CellParams,
    inputs: &[Matrix],
    lengths: &[usize],
) -> Result<CellRun> {
    let hidden = params.hidden();
    let kind = params.kind();
    let mut caches = Vec::with_capacity(inputs.len());
    let mut states = Vec::with_capacity(inputs.len());
    for (b, (seq, &len)) in inputs.iter().zip(lengths).enumerate() {
        if seq.cols() != params.input_dim() {
            return Err(Error::shape(format!(
                "sample {b}: cell expects input dim {}, sequence has {}",
                params.input_dim(),
                seq.cols()
            )));
        }
        let mut state = CellState::zeros(kind, hidden);
        let mut sample_caches = Vec::with_capacity(len);
        let mut hs = Matrix::zeros(seq.rows(), hidden);
        for t in 0..len {
            let x = Vector::from_slice(seq.row(t));
            let (next, cache) = step_cached(params, &x, &state)?;
            hs.row_mut(t).copy_from_slice(next.h.as_slice());
            sample_caches.push(cache);
            state = next;
        }
        caches.push(sample_caches);
        states.push(hs);
    }
    Ok(CellRun { caches, states })
}

/// Per-sample record of one head forward pass.
pub struct HeadCache {
    /// Input activation to each layer (post-relu, post-dropout).
    pub inputs: Vec<Vector>,
    /// Relu pass-through masks for each hidden layer.
    pub relu_mask: Vec<Vec<bool>>,
    /// Inverted-dropout scale per unit (0 where dropped, 1/(1-p) where kept).
    pub dropout_scale: Vec<Vec<f64>>,
    pub logits: Vector,
    pub probs: Vector,
}

/// Hidden head layers use relu; the final layer emits logits.
pub fn head_forward(
    layers: &[DenseLayer],
    dropout: &[f64],
    input: &Vector,
    mode: ForwardMode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<HeadCache> {
    let n_hidden = layers.len() - 1;
    let mut inputs = Vec::with_capacity(layers.len());
    let mut relu_mask = Vec::with_capacity(n_hidden);
    let mut dropout_scale = Vec::with_capacity(n_hidden);
    let mut a = input.clone();
    let mut local_rng = rng;
    for (l, layer) in layers.iter().enumerate() {
        inputs.push(a.clone());
        let mut z = layer.forward(&a)?;
        if l < n_hidden {
            let mask: Vec<bool> = z.as_slice().iter().map(|&v| v > 0.0).collect();
            for (v, &keep) in z.as_mut_slice().iter_mut().zip(&mask) {
                if !keep {
                    *v = 0.0;
                }
            }
            relu_mask.push(mask);
            let p = dropout[l];
            let scale: Vec<f64> = if mode.is_train() && p > 0.0 {
                let rng = local_rng
                    .as_deref_mut()
                    .expect("train mode with dropout requires an rng");
                z.as_slice()
                    .iter()
                    .map(|_| {
                        if rng.gen::<f64>() < p {
                            0.0
                        } else {
                            1.0 / (1.0 - p)
                        }
                    })
                    .collect()
            } else {
                vec![1.0; z.dim()]
            };
            for (v, s) in z.as_mut_slice().iter_mut().zip(&scale) {
                *v *= s;
            }
            dropout_scale.push(scale);
        }
        a = z;
    }
    let probs = softmax(&a);
    Ok(HeadCache {
        inputs,
        relu_mask,
        dropout_scale,
        logits: a,
        probs,
    })
}

pub struct ClassifierCache {
    pub cell_run: CellRun,
    pub head: Vec<HeadCache>,
    pub final_states: Matrix,
}

pub fn classifier_forward_cached(
    m: &ClassifierModel,
    batch: &SequenceBatch,
    mode: ForwardMode,
) -> Result<(Matrix, ClassifierCache)> {
    let cell_run = run_cell(&m.cell, batch)?;
    classifier_head_over(m, batch, cell_run, mode)
}

fn classifier_head_over(
    m: &ClassifierModel,
    batch: &SequenceBatch,
    cell_run: CellRun,
    mode: ForwardMode,
) -> Result<(Matrix, ClassifierCache)> {
    let final_states = select_final_states(&cell_run.states, &batch.lengths)?;
    let mut rng = match mode {
        ForwardMode::Train { dropout_seed } => Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
        ForwardMode::Eval => None,
    };
    let mut probs = Matrix::zeros(batch.size(), m.arch.num_classes);
    let mut head_caches = Vec::with_capacity(batch.size());
    for b in 0..batch.size() {
        let input = Vector::from_slice(final_states.row(b));
        let cache = head_forward(&m.head, &m.arch.dropout, &input, mode, rng.as_mut())?;
        probs.row_mut(b).copy_from_slice(cache.probs.as_slice());
        head_caches.push(cache);
    }
    Ok((
        probs,
        ClassifierCache {
            cell_run,
            head: head_caches,
            final_states,
        },
    ))
}

/// B x C matrix of class distributions; dropout active only in train mode.
pub fn classifier_forward(m: &ClassifierModel, batch: &SequenceBatch, mode: ForwardMode) -> Result<Matrix> {
    classifier_forward_cached(m, batch, mode).map(|(p, _)| p)
}

#[derive(Debug)]
pub struct PredictorOutput {
    /// Per-sample padded T_max x H hidden states.
    pub hidden_states: Vec<Matrix>,
    /// Per-sample (len-1) x D next-step predictions; row t estimates the
    /// input at t+1.
    pub predictions: Vec<Matrix>,
    pub cell_run: CellRun,
}

pub fn predictor_forward(m: &PredictorModel, batch: &SequenceBatch) -> Result<PredictorOutput> {
    for (b, &len) in batch.lengths.iter().enumerate() {
        if len < 2 {
            return Err(Error::argument(format!(
                "predictor requires length >= 2, sample {b} has length {len}"
            )));
        }
    }
    let cell_run = run_cell(&m.cell, batch)?;
    let d = batch.channels();
    let mut predictions = Vec::with_capacity(batch.size());
    for (b, hs) in cell_run.states.iter().enumerate() {
        let len = batch.lengths[b];
        let mut preds = Matrix::zeros(len - 1, d);
        for t in 0..len - 1 {
            let h = Vector::from_slice(hs.row(t));
            let y = m.readout.forward(&h)?;
            preds.row_mut(t).copy_from_slice(y.as_slice());
        }
        predictions.push(preds);
    }
    let hidden_states = cell_run.states.clone();
    Ok(PredictorOutput {
        hidden_states,
        predictions,
        cell_run,
    })
}

/// Mean squared error of next-step predictions over valid positions and
/// channels only; padded positions contribute nothing.
pub fn predictor_loss(predictions: &[Matrix], batch: &SequenceBatch) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (b, preds) in predictions.iter().enumerate() {
        let len = batch.lengths[b];
        for t in 0..len - 1 {
            let target = batch.data[b].row(t + 1);
            for (p, y) in preds.row(t).iter().zip(target) {
                let diff = p - y;
                sum += diff * diff;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

pub struct SemiCache {
    pub predictor_run: CellRun,
    pub classifier: ClassifierCache,
}

/// The stacked model: the classifier consumes the predictor's per-step
/// hidden states as its input sequence.
pub fn semi_forward_cached(
    m: &SemiSupervisedModel,
    batch: &SequenceBatch,
    mode: ForwardMode,
) -> Result<(Matrix, SemiCache)> {
    let predictor_run = run_cell(&m.predictor.cell, batch)?;
    let classifier_run =
        run_cell_on_states(&m.classifier.cell, &predictor_run.states, &batch.lengths)?;
    let (probs, classifier) = classifier_head_over(&m.classifier, batch, classifier_run, mode)?;
    Ok((
        probs,
        SemiCache {
            predictor_run,
            classifier,
        },
    ))
}

pub fn semi_forward(m: &SemiSupervisedModel, batch: &SequenceBatch, mode: ForwardMode) -> Result<Matrix> {
    semi_forward_cached(m, batch, mode).map(|(p, _)| p)
}
