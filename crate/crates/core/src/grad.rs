//! Analytic reverse-mode gradients: through softmax and cross entropy, the
//! fully-connected head, final-state selection, and the full unrolled
//! recurrence. Padded timesteps are never executed, so their gradient
//! contribution is exactly zero.

use crate::cells::{step_backward, CellParams, StateGrad};
use crate::error::{Error, Result};
use crate::linalg::{cross_entropy, l2_penalty, one_hot, Matrix, Vector};
use crate::model::{
    classifier_forward_cached, predictor_forward, semi_forward_cached, ClassifierModel,
    DenseLayer, ForwardMode, HeadCache, PredictorModel, SemiSupervisedModel,
};
use crate::sequence::SequenceBatch;

#[derive(Debug, Clone)]
pub struct ClassifierGrads {
    pub cell: CellParams,
    pub head: Vec<DenseLayer>,
}

#[derive(Debug, Clone)]
pub struct PredictorGrads {
    pub cell: CellParams,
    pub readout: DenseLayer,
}

#[derive(Debug, Clone)]
pub struct SemiGrads {
    /// None when the predictor is frozen: its gradients are exactly zero.
    pub predictor: Option<PredictorGrads>,
    pub classifier: ClassifierGrads,
}

impl ClassifierGrads {
    pub fn zeros_like(m: &ClassifierModel) -> Self {
        ClassifierGrads {
            cell: m.cell.zeros_like(),
            head: m
                .head
                .iter()
                .map(|l| DenseLayer::zeros(l.w.rows(), l.w.cols()))
                .collect(),
        }
    }

    pub fn slices(&self, use_biases: bool) -> Vec<&[f64]> {
        let mut out = self.cell.param_slices(use_biases);
        for l in &self.head {
            out.push(l.w.as_slice());
            out.push(l.b.as_slice());
        }
        out
    }

    pub fn slices_mut(&mut self, use_biases: bool) -> Vec<&mut [f64]> {
        let mut out = self.cell.param_slices_mut(use_biases);
        for l in &mut self.head {
            out.push(l.w.as_mut_slice());
            out.push(l.b.as_mut_slice());
        }
        out
    }
}

impl PredictorGrads {
    pub fn zeros_like(m: &PredictorModel) -> Self {
        PredictorGrads {
            cell: m.cell.zeros_like(),
            readout: DenseLayer::zeros(m.readout.w.rows(), m.readout.w.cols()),
        }
    }

    pub fn slices(&self, use_biases: bool) -> Vec<&[f64]> {
        let mut out = self.cell.param_slices(use_biases);
        out.push(self.readout.w.as_slice());
        out.push(self.readout.b.as_slice());
        out
    }

    pub fn slices_mut(&mut self, use_biases: bool) -> Vec<&mut [f64]> {
        let mut out = self.cell.param_slices_mut(use_biases);
        out.push(self.readout.w.as_mut_slice());
        out.push(self.readout.b.as_mut_slice());
        out
    }
}

impl ClassifierModel {
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.cell.param_slices(self.arch.use_biases);
        for l in &self.head {
            out.push(l.w.as_slice());
            out.push(l.b.as_slice());
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let use_biases = self.arch.use_biases;
        let mut out = self.cell.param_slices_mut(use_biases);
        for l in &mut self.head {
            out.push(l.w.as_mut_slice());
            out.push(l.b.as_mut_slice());
        }
        out
    }
}

impl PredictorModel {
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.cell.param_slices(self.arch.use_biases);
        out.push(self.readout.w.as_slice());
        out.push(self.readout.b.as_slice());
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let use_biases = self.arch.use_biases;
        let mut out = self.cell.param_slices_mut(use_biases);
        out.push(self.readout.w.as_mut_slice());
        out.push(self.readout.b.as_mut_slice());
        out
    }
}

impl SemiSupervisedModel {
    /// Trainable slices only: the frozen predictor is excluded.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        if !self.freeze_predictor {
            out.extend(self.predictor.param_slices());
        }
        out.extend(self.classifier.param_slices());
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        if !self.freeze_predictor {
            out.extend(self.predictor.param_slices_mut());
        }
        out.extend(self.classifier.param_slices_mut());
        out
    }
}

impl SemiGrads {
    pub fn slices(&self, use_biases: bool) -> Vec<&[f64]> {
        let mut out = Vec::new();
        if let Some(p) = &self.predictor {
            out.extend(p.slices(use_biases));
        }
        out.extend(self.classifier.slices(use_biases));
        out
    }

    pub fn slices_mut(&mut self, use_biases: bool) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        if let Some(p) = &mut self.predictor {
            out.extend(p.slices_mut(use_biases));
        }
        out.extend(self.classifier.slices_mut(use_biases));
        out
    }
}

/// Backward through the head for one sample. Returns the gradient w.r.t.
/// the head input (the selected final hidden state).
fn head_backward(
    layers: &[DenseLayer],
    cache: &HeadCache,
    dlogits: &Vector,
    grads: &mut [DenseLayer],
) -> Vector {
    let mut d = dlogits.clone();
    for l in (0..layers.len()).rev() {
        grads[l].w.add_outer(d.as_slice(), cache.inputs[l].as_slice());
        for (g, v) in grads[l].b.as_mut_slice().iter_mut().zip(d.as_slice()) {
            *g += v;
        }
        let mut dprev = Vector::zeros(layers[l].w.cols());
        layers[l]
            .w
            .transpose_matvec_into(d.as_slice(), dprev.as_mut_slice());
        if l > 0 {
            let scale = &cache.dropout_scale[l - 1];
            let mask = &cache.relu_mask[l - 1];
            for j in 0..dprev.dim() {
                dprev[j] *= scale[j];
                if !mask[j] {
                    dprev[j] = 0.0;
                }
            }
        }
        d = dprev;
    }
    d
}

/// BPTT over one sample's valid steps. `inject` holds the gradient arriving
/// at h_t from outside the recurrence (loss terms, a stacked model above);
/// `dx` when present receives the gradient w.r.t. each step input.
fn backprop_sequence(
    params: &CellParams,
    caches: &[crate::cells::StepCache],
    inject: &Matrix,
    grads: &mut CellParams,
    mut dx: Option<&mut Matrix>,
) {
    let hidden = params.hidden();
    let mut up = StateGrad::zeros(params.kind(), hidden);
    for t in (0..caches.len()).rev() {
        for j in 0..hidden {
            up.dh[j] += inject.get(t, j);
        }
        let mut dxv = dx.as_ref().map(|_| Vector::zeros(params.input_dim()));
        up = step_backward(params, &caches[t], &up, grads, dxv.as_mut());
        if let (Some(m), Some(v)) = (dx.as_deref_mut(), dxv) {
            m.row_mut(t).copy_from_slice(v.as_slice());
        }
    }
}

fn mean_ce(probs: &Matrix, labels: &[usize], num_classes: usize) -> Result<f64> {
    let n = labels.len();
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let y = Vector::from_slice(probs.row(b));
        let loss = cross_entropy(&y, &one_hot(label, num_classes));
        if !loss.is_finite() {
            return Err(Error::numeric(format!("non-finite loss at batch index {b}")));
        }
        total += loss;
    }
    Ok(total / n as f64)
}

fn add_l2_grads(lambda: f64, params: &[&[f64]], grads: &mut [&mut [f64]]) {
    if lambda == 0.0 {
        return;
    }
    for (p, g) in params.iter().zip(grads.iter_mut()) {
        for (pv, gv) in p.iter().zip(g.iter_mut()) {
            *gv += 2.0 * lambda * pv;
        }
    }
}

/// Regularized classification loss without gradients.
pub fn classifier_loss(
    m: &ClassifierModel,
    batch: &SequenceBatch,
    mode: ForwardMode,
    lambda: f64,
) -> Result<f64> {
    let (probs, _) = classifier_forward_cached(m, batch, mode)?;
    Ok(mean_ce(&probs, &batch.labels, m.arch.num_classes)? + l2_penalty(&m.param_slices(), lambda))
}

/// Loss and exact gradients of the regularized classification loss.
pub fn classifier_backward(
    m: &ClassifierModel,
    batch: &SequenceBatch,
    mode: ForwardMode,
    lambda: f64,
) -> Result<(f64, ClassifierGrads, Matrix)> {
    let (probs, cache) = classifier_forward_cached(m, batch, mode)?;
    let loss = mean_ce(&probs, &batch.labels, m.arch.num_classes)?
        + l2_penalty(&m.param_slices(), lambda);
    let n = batch.size() as f64;
    let mut grads = ClassifierGrads::zeros_like(m);
    for b in 0..batch.size() {
        // d loss / d logits = (softmax - one_hot) / B
        let mut dlogits = Vector::from_slice(probs.row(b));
        dlogits[batch.labels[b]] -= 1.0;
        for v in dlogits.as_mut_slice() {
            *v /= n;
        }
        let dfinal = head_backward(&m.head, &cache.head[b], &dlogits, &mut grads.head);
        let len = batch.lengths[b];
        let mut inject = Matrix::zeros(len, m.arch.hidden);
        inject.row_mut(len - 1).copy_from_slice(dfinal.as_slice());
        backprop_sequence(&m.cell, &cache.cell_run.caches[b], &inject, &mut grads.cell, None);
    }
    add_l2_grads(
        lambda,
        &m.param_slices(),
        &mut grads.slices_mut(m.arch.use_biases),
    );
    Ok((loss, grads, probs))
}

pub fn predictor_loss_value(m: &PredictorModel, batch: &SequenceBatch, lambda: f64) -> Result<f64> {
    let out = predictor_forward(m, batch)?;
    Ok(crate::model::predictor_loss(&out.predictions, batch)
        + l2_penalty(&m.param_slices(), lambda))
}

/// Loss and gradients of the regularized next-step MSE.
pub fn predictor_backward(
    m: &PredictorModel,
    batch: &SequenceBatch,
    lambda: f64,
) -> Result<(f64, PredictorGrads)> {
    let out = predictor_forward(m, batch)?;
    let mse = crate::model::predictor_loss(&out.predictions, batch);
    if !mse.is_finite() {
        return Err(Error::numeric("non-finite predictor loss".to_string()));
    }
    let loss = mse + l2_penalty(&m.param_slices(), lambda);
    let count: usize = batch
        .lengths
        .iter()
        .map(|&len| (len - 1) * batch.channels())
        .sum();
    let mut grads = PredictorGrads::zeros_like(m);
    for b in 0..batch.size() {
        let len = batch.lengths[b];
        let hs = &out.cell_run.states[b];
        let mut inject = Matrix::zeros(len, m.arch.hidden);
        for t in 0..len - 1 {
            let target = batch.data[b].row(t + 1);
            let dpred: Vec<f64> = out.predictions[b]
                .row(t)
                .iter()
                .zip(target)
                .map(|(p, y)| 2.0 * (p - y) / count as f64)
                .collect();
            grads.readout.w.add_outer(&dpred, hs.row(t));
            for (g, v) in grads.readout.b.as_mut_slice().iter_mut().zip(&dpred) {
                *g += v;
            }
            m.readout
                .w
                .transpose_matvec_into(&dpred, inject.row_mut(t));
        }
        backprop_sequence(&m.cell, &out.cell_run.caches[b], &inject, &mut grads.cell, None);
    }
    add_l2_grads(
        lambda,
        &m.param_slices(),
        &mut grads.slices_mut(m.arch.use_biases),
    );
    Ok((loss, grads))
}

pub fn semi_loss(
    m: &SemiSupervisedModel,
    batch: &SequenceBatch,
    mode: ForwardMode,
    lambda: f64,
) -> Result<f64> {
    let (probs, _) = semi_forward_cached(m, batch, mode)?;
    Ok(mean_ce(&probs, &batch.labels, m.classifier.arch.num_classes)?
        + l2_penalty(&m.param_slices(), lambda))
}

/// Classification loss through the stacked model. When the predictor is
/// frozen its gradients are omitted (exactly zero); otherwise the gradient
/// flows from the classifier's input sequence into the predictor recurrence.
pub fn semi_backward(
    m: &SemiSupervisedModel,
    batch: &SequenceBatch,
    mode: ForwardMode,
    lambda: f64,
) -> Result<(f64, SemiGrads, Matrix)> {
    let (probs, cache) = semi_forward_cached(m, batch, mode)?;
    let num_classes = m.classifier.arch.num_classes;
    let loss =
        mean_ce(&probs, &batch.labels, num_classes)? + l2_penalty(&m.param_slices(), lambda);
    let n = batch.size() as f64;
    let use_biases = m.classifier.arch.use_biases;
    let mut grads = SemiGrads {
        predictor: if m.freeze_predictor {
            None
        } else {
            Some(PredictorGrads::zeros_like(&m.predictor))
        },
        classifier: ClassifierGrads::zeros_like(&m.classifier),
    };
    for b in 0..batch.size() {
        let mut dlogits = Vector::from_slice(probs.row(b));
        dlogits[batch.labels[b]] -= 1.0;
        for v in dlogits.as_mut_slice() {
            *v /= n;
        }
        let dfinal = head_backward(
            &m.classifier.head,
            &cache.classifier.head[b],
            &dlogits,
            &mut grads.classifier.head,
        );
        let len = batch.lengths[b];
        let mut inject = Matrix::zeros(len, m.classifier.arch.hidden);
        inject.row_mut(len - 1).copy_from_slice(dfinal.as_slice());
        // gradient w.r.t. the classifier's input sequence, i.e. the
        // predictor's hidden states
        let mut dstates = Matrix::zeros(len, m.predictor.arch.hidden);
        backprop_sequence(
            &m.classifier.cell,
            &cache.classifier.cell_run.caches[b],
            &inject,
            &mut grads.classifier.cell,
            Some(&mut dstates),
        );
        if let Some(pg) = grads.predictor.as_mut() {
            backprop_sequence(
                &m.predictor.cell,
                &cache.predictor_run.caches[b],
                &dstates,
                &mut pg.cell,
                None,
            );
        }
    }
    let params = m.param_slices();
    let mut grad_slices = Vec::new();
    if let Some(pg) = grads.predictor.as_mut() {
        grad_slices.extend(pg.slices_mut(m.predictor.arch.use_biases));
    }
    grad_slices.extend(grads.classifier.slices_mut(use_biases));
    add_l2_grads(lambda, &params, &mut grad_slices);
    Ok((loss, grads, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellKind;
    use crate::linalg::Matrix;
    use crate::model::{ClassifierArch, PredictorArch};
    use crate::sequence::{make_batch, SequenceSample};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(n: usize, d: usize, lens: &[usize], classes: usize, seed: u64) -> SequenceBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<SequenceSample> = (0..n)
            .map(|i| {
                let t = lens[i % lens.len()];
                let data =
                    Matrix::from_vec(t, d, (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
                SequenceSample::new(data, rng.gen_range(0..classes))
            })
            .collect();
        make_batch(&samples, 0.0).unwrap()
    }

    /// Central finite differences over every parameter entry.
    fn check_grads<M>(
        m: &mut M,
        analytic: &[Vec<f64>],
        get_slices: impl Fn(&mut M) -> Vec<&mut [f64]>,
        loss: impl Fn(&M) -> f64,
    ) {
        let step = 1e-5;
        for (si, a) in analytic.iter().enumerate() {
            for j in 0..a.len() {
                get_slices(m)[si][j] += step;
                let up = loss(m);
                get_slices(m)[si][j] -= 2.0 * step;
                let down = loss(m);
                get_slices(m)[si][j] += step;
                let fd = (up - down) / (2.0 * step);
                let g = a[j];
                let tol = (1e-4 * g.abs().max(fd.abs())).max(1e-6);
                assert!(
                    (g - fd).abs() <= tol,
                    "slice {si} entry {j}: analytic {g} vs fd {fd}"
                );
            }
        }
    }

    fn owned(slices: Vec<&[f64]>) -> Vec<Vec<f64>> {
        slices.into_iter().map(|s| s.to_vec()).collect()
    }

    #[test]
    fn classifier_gradcheck_all_cells() {
        for (kind, seed) in [
            (CellKind::Vanilla, 1u64),
            (CellKind::Gru, 2),
            (CellKind::Lstm, 3),
        ] {
            let mut arch = ClassifierArch::with_fcl(kind, 3, 4, 3);
            arch.head = vec![5];
            arch.dropout = vec![0.3];
            let mut m = arch.build(seed).unwrap();
            let batch = random_batch(3, 3, &[2, 5, 4], 3, seed + 10);
            let mode = ForwardMode::Train { dropout_seed: 77 };
            let lambda = 0.01;
            let (_, grads, _) = classifier_backward(&m, &batch, mode, lambda).unwrap();
            check_grads(
                &mut m,
                &owned(grads.slices(true)),
                |m| m.param_slices_mut(),
                |m| classifier_loss(m, &batch, mode, lambda).unwrap(),
            );
        }
    }

    #[test]
    fn predictor_gradcheck() {
        let arch = PredictorArch {
            cell: CellKind::Gru,
            input_dim: 2,
            hidden: 3,
            use_biases: true,
        };
        let mut m = arch.build(4).unwrap();
        let batch = random_batch(2, 2, &[4, 6], 2, 20);
        let lambda = 0.005;
        let (_, grads) = predictor_backward(&m, &batch, lambda).unwrap();
        check_grads(
            &mut m,
            &owned(grads.slices(true)),
            |m| m.param_slices_mut(),
            |m| predictor_loss_value(m, &batch, lambda).unwrap(),
        );
    }

    #[test]
    fn semi_gradcheck_unfrozen() {
        let parch = PredictorArch {
            cell: CellKind::Gru,
            input_dim: 2,
            hidden: 3,
            use_biases: true,
        };
        let carch = ClassifierArch::plain(CellKind::Gru, 3, 3, 2);
        let mut m = crate::model::SemiSupervisedModel {
            predictor: parch.build(5).unwrap(),
            classifier: carch.build(6).unwrap(),
            freeze_predictor: false,
        };
        let batch = random_batch(2, 2, &[3, 5], 2, 30);
        let mode = ForwardMode::Eval;
        let lambda = 0.01;
        let (_, grads, _) = semi_backward(&m, &batch, mode, lambda).unwrap();
        check_grads(
            &mut m,
            &owned(grads.slices(true)),
            |m| m.param_slices_mut(),
            |m| semi_loss(m, &batch, mode, lambda).unwrap(),
        );
    }

    #[test]
    fn frozen_predictor_gets_no_gradient() {
        let parch = PredictorArch {
            cell: CellKind::Gru,
            input_dim: 2,
            hidden: 3,
            use_biases: true,
        };
        let carch = ClassifierArch::plain(CellKind::Gru, 3, 3, 2);
        let m = crate::model::SemiSupervisedModel {
            predictor: parch.build(5).unwrap(),
            classifier: carch.build(6).unwrap(),
            freeze_predictor: true,
        };
        let batch = random_batch(2, 2, &[3, 5], 2, 31);
        let (_, grads, _) = semi_backward(&m, &batch, ForwardMode::Eval, 0.01).unwrap();
        assert!(grads.predictor.is_none());
    }

    #[test]
    fn logit_gradient_zero_at_perfect_prediction() {
        // loss gradient w.r.t. logits is softmax - one_hot; at a (near)
        // one-hot prediction it vanishes. Verified through the head on a
        // single-layer model with huge final bias.
        let arch = ClassifierArch::plain(CellKind::Gru, 2, 2, 3);
        let mut m = arch.build(8).unwrap();
        m.cell = m.cell.zeros_like();
        m.head[0] = DenseLayer::zeros(3, 2);
        m.head[0].b = Vector::from_vec(vec![200.0, 0.0, 0.0]);
        let s = SequenceSample::new(Matrix::from_rows(&[&[0.1, 0.2]]), 0);
        let batch = make_batch(&[s], 0.0).unwrap();
        let (loss, grads, _) = classifier_backward(&m, &batch, ForwardMode::Eval, 0.0).unwrap();
        assert!(loss.abs() < 1e-9);
        // head bias gradient equals dlogits directly
        for g in grads.head[0].b.as_slice() {
            assert!(g.abs() < 1e-12);
        }
    }

    #[test]
    fn l2_contributes_two_lambda_theta() {
        let arch = ClassifierArch::plain(CellKind::Gru, 2, 2, 2);
        let mut m = arch.build(9).unwrap();
        // zero everything, set a single head weight to 3.0
        m.cell = m.cell.zeros_like();
        m.head[0] = DenseLayer::zeros(2, 2);
        m.head[0].w.set(0, 0, 3.0);
        let s = SequenceSample::new(Matrix::from_rows(&[&[0.0, 0.0]]), 0);
        let batch = make_batch(&[s], 0.0).unwrap();
        // with zero cell params the final hidden state is zero, so the data
        // term contributes nothing to this weight's gradient
        let (_, grads, _) = classifier_backward(&m, &batch, ForwardMode::Eval, 0.01).unwrap();
        assert_abs_diff_eq!(grads.head[0].w.get(0, 0), 0.06, epsilon = 1e-12);
    }

    #[test]
    fn gradients_pad_value_invariant() {
        let arch = ClassifierArch::with_fcl(CellKind::Gru, 3, 4, 3);
        let m = arch.build(12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let samples: Vec<SequenceSample> = (0..4)
            .map(|i| {
                let t = [3, 6, 2, 5][i];
                let data =
                    Matrix::from_vec(t, 3, (0..t * 3).map(|_| rng.gen_range(-1.0..1.0)).collect());
                SequenceSample::new(data, i % 3)
            })
            .collect();
        let b0 = make_batch(&samples, 0.0).unwrap();
        let b7 = make_batch(&samples, 7.0).unwrap();
        let mode = ForwardMode::Train { dropout_seed: 5 };
        let (l0, g0, _) = classifier_backward(&m, &b0, mode, 0.01).unwrap();
        let (l7, g7, _) = classifier_backward(&m, &b7, mode, 0.01).unwrap();
        assert_eq!(l0, l7);
        for (a, b) in g0.slices(true).iter().zip(g7.slices(true).iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn batch_vs_loop_equivalence() {
        let arch = ClassifierArch::plain(CellKind::Lstm, 2, 3, 2);
        let m = arch.build(13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let samples: Vec<SequenceSample> = (0..3)
            .map(|i| {
                let t = [4, 2, 6][i];
                let data =
                    Matrix::from_vec(t, 2, (0..t * 2).map(|_| rng.gen_range(-1.0..1.0)).collect());
                SequenceSample::new(data, i % 2)
            })
            .collect();
        let batch = make_batch(&samples, 0.0).unwrap();
        let probs = crate::model::classifier_forward(&m, &batch, ForwardMode::Eval).unwrap();
        for (b, s) in samples.iter().enumerate() {
            let single = make_batch(std::slice::from_ref(s), 0.0).unwrap();
            let p = crate::model::classifier_forward(&m, &single, ForwardMode::Eval).unwrap();
            for (x, y) in probs.row(b).iter().zip(p.row(0)) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-10);
            }
        }
    }
}
