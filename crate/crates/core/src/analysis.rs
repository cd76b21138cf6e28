//! Evaluation metrics, confusion matrices, and PCA projection of
//! hidden-state trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{
    classifier_forward, run_cell, semi_forward, ClassifierModel, ForwardMode, SemiSupervisedModel,
};
use crate::sequence::{make_batch, SequenceBatch, SequenceSample};

const EVAL_CHUNK: usize = 64;

pub trait SequenceClassifier {
    fn predict(&self, batch: &SequenceBatch) -> Result<Matrix>;
    fn num_classes(&self) -> usize;
}

impl SequenceClassifier for ClassifierModel {
    fn predict(&self, batch: &SequenceBatch) -> Result<Matrix> {
        classifier_forward(self, batch, ForwardMode::Eval)
    }

    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }
}

impl SequenceClassifier for SemiSupervisedModel {
    fn predict(&self, batch: &SequenceBatch) -> Result<Matrix> {
        semi_forward(self, batch, ForwardMode::Eval)
    }

    fn num_classes(&self) -> usize {
        self.classifier.arch.num_classes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// confusion[true_class][predicted_class] counts.
    pub confusion: Vec<Vec<usize>>,
    pub n: usize,
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax predictions vs labels over all samples, dropout disabled.
pub fn evaluate(model: &impl SequenceClassifier, samples: &[SequenceSample]) -> Result<EvalReport> {
    let c = model.num_classes();
    let mut confusion = vec![vec![0usize; c]; c];
    let mut correct = 0usize;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let batch = make_batch(chunk, 0.0)?;
        let probs = model.predict(&batch)?;
        for (b, s) in chunk.iter().enumerate() {
            let pred = argmax(probs.row(b));
            confusion[s.label][pred] += 1;
            if pred == s.label {
                correct += 1;
            }
        }
    }
    Ok(EvalReport {
        accuracy: correct as f64 / samples.len() as f64,
        confusion,
        n: samples.len(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaProjection {
    /// Two orthonormal directions in hidden space, PC1 first.
    pub components: [Vec<f64>; 2],
    pub explained_variance: [f64; 2],
    /// Per-sample 2-D coordinates.
    pub points: Vec<[f64; 2]>,
    pub time_fraction: f64,
    pub labels: Vec<usize>,
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
/// (eigenvalues, eigenvectors as columns).
fn jacobi_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m.get(i, j) * m.get(i, j);
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq.abs() < 1e-30 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let eigenvalues: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    (eigenvalues, v)
}

/// Top-2 PCA of an N x D point set. Points are mean-centered; each
/// component's sign is flipped so its largest-magnitude entry is positive.
pub fn pca_top2(points: &Matrix) -> Result<([Vec<f64>; 2], [f64; 2], Vec<[f64; 2]>)> {
    let n = points.rows();
    let d = points.cols();
    if n == 0 || d < 2 {
        return Err(Error::argument(format!(
            "pca needs at least one point of dim >= 2, got {n} x {d}"
        )));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(points.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut centered = points.clone();
    for i in 0..n {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let mut cov = Matrix::zeros(d, d);
    for i in 0..n {
        cov.add_outer(centered.row(i), centered.row(i));
    }
    for v in cov.as_mut_slice() {
        *v /= n as f64;
    }
    let (eigenvalues, vectors) = jacobi_eigen(&cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigenvalues[b].partial_cmp(&eigenvalues[a]).unwrap());
    let mut components: [Vec<f64>; 2] = [vec![0.0; d], vec![0.0; d]];
    let mut explained = [0.0; 2];
    for (slot, &idx) in order.iter().take(2).enumerate() {
        let mut comp: Vec<f64> = (0..d).map(|r| vectors.get(r, idx)).collect();
        let mut max_j = 0;
        for (j, v) in comp.iter().enumerate() {
            if v.abs() > comp[max_j].abs() {
                max_j = j;
            }
        }
        if comp[max_j] < 0.0 {
            for v in &mut comp {
                *v = -*v;
            }
        }
        components[slot] = comp;
        explained[slot] = eigenvalues[idx].max(0.0);
    }
    let mut coords = Vec::with_capacity(n);
    for i in 0..n {
        let row = centered.row(i);
        let p1: f64 = row.iter().zip(&components[0]).map(|(a, b)| a * b).sum();
        let p2: f64 = row.iter().zip(&components[1]).map(|(a, b)| a * b).sum();
        coords.push([p1, p2]);
    }
    Ok((components, explained, coords))
}

/// For each fraction f, collect each sample's hidden state at step
/// ceil(f*T/100) and project the collection onto its top-2 principal
/// directions.
pub fn pca_hidden_states(
    model: &ClassifierModel,
    samples: &[SequenceSample],
    fractions: &[f64],
) -> Result<Vec<PcaProjection>> {
    if samples.iter().any(|s| s.len() < 1) {
        return Err(Error::argument("pca requires samples of length >= 1".to_string()));
    }
    for &f in fractions {
        if !(f > 0.0 && f <= 100.0) {
            return Err(Error::argument(format!("fraction {f} outside (0, 100]")));
        }
    }
    let hidden = model.arch.hidden;
    // one unroll, reused for every fraction
    let mut all_states: Vec<Matrix> = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let batch = make_batch(chunk, 0.0)?;
        let run = run_cell(&model.cell, &batch)?;
        all_states.extend(run.states);
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let mut out = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let mut collected = Matrix::zeros(samples.len(), hidden);
        for (i, s) in samples.iter().enumerate() {
            let t = ((f * s.len() as f64 / 100.0).ceil() as usize).clamp(1, s.len());
            collected.row_mut(i).copy_from_slice(all_states[i].row(t - 1));
        }
        let (components, explained_variance, points) = pca_top2(&collected)?;
        out.push(PcaProjection {
            components,
            explained_variance,
            points,
            time_fraction: f,
            labels: labels.clone(),
        });
    }
    Ok(out)
}

/// Delimited-text export: one `label,time_fraction,pc1,pc2` line per point.
pub fn export_projections(projections: &[PcaProjection]) -> String {
    let mut out = String::from("label,time_fraction,pc1,pc2\n");
    for p in projections {
        for (label, point) in p.labels.iter().zip(&p.points) {
            out.push_str(&format!(
                "{},{},{},{}\n",
                label, p.time_fraction, point[0], point[1]
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellKind;
    use crate::model::ClassifierArch;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct ConstantModel {
        class: usize,
        classes: usize,
    }

    impl SequenceClassifier for ConstantModel {
        fn predict(&self, batch: &SequenceBatch) -> Result<Matrix> {
            let mut m = Matrix::zeros(batch.size(), self.classes);
            for b in 0..batch.size() {
                m.set(b, self.class, 1.0);
            }
            Ok(m)
        }

        fn num_classes(&self) -> usize {
            self.classes
        }
    }

    struct OracleModel {
        classes: usize,
    }

    impl SequenceClassifier for OracleModel {
        fn predict(&self, batch: &SequenceBatch) -> Result<Matrix> {
            let mut m = Matrix::zeros(batch.size(), self.classes);
            for b in 0..batch.size() {
                m.set(b, batch.labels[b], 1.0);
            }
            Ok(m)
        }

        fn num_classes(&self) -> usize {
            self.classes
        }
    }

    fn balanced_samples(per_class: usize, classes: usize) -> Vec<SequenceSample> {
        let mut out = Vec::new();
        for c in 0..classes {
            for i in 0..per_class {
                let t = 2 + (i % 3);
                out.push(SequenceSample::new(Matrix::zeros(t, 2), c));
            }
        }
        out
    }

    #[test]
    fn perfect_predictor_diagonal_confusion() {
        let samples = balanced_samples(4, 6);
        let report = evaluate(&OracleModel { classes: 6 }, &samples).unwrap();
        assert_eq!(report.accuracy, 1.0);
        for (i, row) in report.confusion.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, if i == j { 4 } else { 0 });
            }
        }
    }

    #[test]
    fn constant_predictor_on_balanced_data() {
        let samples = balanced_samples(5, 6);
        let report = evaluate(&ConstantModel { class: 2, classes: 6 }, &samples).unwrap();
        assert_abs_diff_eq!(report.accuracy, 1.0 / 6.0, epsilon = 1e-12);
        // confusion row sums equal per-class counts
        for row in &report.confusion {
            assert_eq!(row.iter().sum::<usize>(), 5);
        }
        assert_eq!(report.n, 30);
    }

    #[test]
    fn evaluate_order_independent() {
        let mut samples = balanced_samples(3, 4);
        let a = evaluate(&ConstantModel { class: 1, classes: 4 }, &samples).unwrap();
        samples.reverse();
        let b = evaluate(&ConstantModel { class: 1, classes: 4 }, &samples).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pca_recovers_axis_aligned_2d() {
        // points spread along x with slight y spread: PC1 ~ x axis
        let pts = Matrix::from_rows(&[
            &[10.0, 0.1],
            &[-10.0, -0.1],
            &[5.0, 0.05],
            &[-5.0, -0.02],
        ]);
        let (components, explained, coords) = pca_top2(&pts).unwrap();
        assert_abs_diff_eq!(components[0][0].abs(), 1.0, epsilon = 1e-3);
        assert!(explained[0] >= explained[1]);
        // projection recovers x coordinates up to sign
        for (c, p) in coords.iter().zip(pts.as_slice().chunks(2)) {
            assert_abs_diff_eq!(c[0].abs(), p[0].abs(), epsilon = 0.2);
        }
    }

    #[test]
    fn pca_projected_variance_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = Matrix::from_vec(40, 6, (0..240).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let (_, _, coords) = pca_top2(&pts).unwrap();
        let mean = [
            coords.iter().map(|c| c[0]).sum::<f64>() / 40.0,
            coords.iter().map(|c| c[1]).sum::<f64>() / 40.0,
        ];
        let proj_var: f64 = coords
            .iter()
            .map(|c| (c[0] - mean[0]).powi(2) + (c[1] - mean[1]).powi(2))
            .sum::<f64>()
            / 40.0;
        // total variance of centered inputs
        let mut col_mean = vec![0.0; 6];
        for i in 0..40 {
            for (m, v) in col_mean.iter_mut().zip(pts.row(i)) {
                *m += v / 40.0;
            }
        }
        let total_var: f64 = (0..40)
            .map(|i| {
                pts.row(i)
                    .iter()
                    .zip(&col_mean)
                    .map(|(v, m)| (v - m).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / 40.0;
        assert!(proj_var <= total_var + 1e-9);
    }

    #[test]
    fn pca_matches_nalgebra_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..10 {
            let n = 12 + trial;
            let d = 4;
            let pts =
                Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let (components, _, _) = pca_top2(&pts).unwrap();
            // independent route: nalgebra symmetric eigendecomposition of the
            // covariance matrix
            let mut mean = vec![0.0; d];
            for i in 0..n {
                for (m, v) in mean.iter_mut().zip(pts.row(i)) {
                    *m += v / n as f64;
                }
            }
            let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
            for i in 0..n {
                let c: Vec<f64> = pts.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect();
                for a in 0..d {
                    for b in 0..d {
                        cov[(a, b)] += c[a] * c[b] / n as f64;
                    }
                }
            }
            let eig = nalgebra::SymmetricEigen::new(cov);
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
            for slot in 0..2 {
                let col = eig.eigenvectors.column(order[slot]);
                // compare up to sign
                let dot: f64 = components[slot]
                    .iter()
                    .zip(col.iter())
                    .map(|(a, b)| a * b)
                    .sum();
                let sign = dot.signum();
                for (a, b) in components[slot].iter().zip(col.iter()) {
                    assert_abs_diff_eq!(*a, sign * b, epsilon = 1e-8);
                }
            }
        }
    }

    #[test]
    fn pca_components_orthonormal_and_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 30;
        let d = 5;
        let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pts = Matrix::from_vec(n, d, data.clone());
        let (c1, _, _) = pca_top2(&pts).unwrap();
        let dot: f64 = c1[0].iter().zip(&c1[1]).map(|(a, b)| a * b).sum();
        assert_abs_diff_eq!(dot, 0.0, epsilon = 1e-9);
        for comp in &c1 {
            let norm: f64 = comp.iter().map(|v| v * v).sum::<f64>();
            assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-9);
        }
        // reversed point order gives the same components (up to sign, fixed
        // by the sign convention)
        let mut rev_rows: Vec<&[f64]> = data.chunks(d).collect();
        rev_rows.reverse();
        let rev = Matrix::from_rows(&rev_rows);
        let (c2, _, _) = pca_top2(&rev).unwrap();
        for (a, b) in c1.iter().zip(&c2) {
            for (x, y) in a.iter().zip(b) {
                assert_abs_diff_eq!(*x, *y, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn pca_hidden_states_pipeline() {
        let arch = ClassifierArch::plain(CellKind::Gru, 3, 6, 4);
        let model = arch.build(31).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let samples: Vec<SequenceSample> = (0..20)
            .map(|i| {
                let t = rng.gen_range(5..15);
                SequenceSample::new(
                    Matrix::from_vec(t, 3, (0..t * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                    i % 4,
                )
            })
            .collect();
        let projections =
            pca_hidden_states(&model, &samples, &[10.0, 40.0, 70.0, 100.0]).unwrap();
        assert_eq!(projections.len(), 4);
        for p in &projections {
            assert_eq!(p.points.len(), 20);
            assert_eq!(p.labels.len(), 20);
        }
        let csv = export_projections(&projections);
        assert_eq!(csv.lines().count(), 1 + 4 * 20);
        assert!(pca_hidden_states(&model, &samples, &[0.0]).is_err());
    }
}
