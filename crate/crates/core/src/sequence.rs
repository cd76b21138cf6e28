//! Variable-length sample representation, per-channel normalization, and
//! padded batching with masks. Downstream code never reads a padded
//! position: the unroll stops at each sample's true length, which is what
//! keeps pad values out of every output and gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensors: Option<String>,
}

/// One labeled variable-length recording, T timesteps by D channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub data: Matrix,
    pub label: usize,
    pub meta: SampleMeta,
}

impl SequenceSample {
    pub fn new(data: Matrix, label: usize) -> Self {
        SequenceSample {
            data,
            label,
            meta: SampleMeta::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows() == 0
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }
}

/// Padded collection of samples with explicit lengths and mask.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    /// One padded T_max x D matrix per sample.
    pub data: Vec<Matrix>,
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
    pub mask: Vec<Vec<bool>>,
    pub t_max: usize,
}

impl SequenceBatch {
    pub fn size(&self) -> usize {
        self.data.len()
    }

    pub fn channels(&self) -> usize {
        self.data.first().map(|m| m.cols()).unwrap_or(0)
    }

    /// Input vector at (sample, step); caller must keep t < lengths[b].
    pub fn input_at(&self, b: usize, t: usize) -> Vector {
        debug_assert!(t < self.lengths[b]);
        Vector::from_slice(self.data[b].row(t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vector,
    pub std: Vector,
}

/// Per-channel mean and population std over all valid timesteps of the
/// given (training) samples, std floored at `STD_FLOOR`.
pub fn fit_normalizer(train_samples: &[SequenceSample]) -> Result<NormStats> {
    let first = train_samples
        .first()
        .ok_or_else(|| Error::argument("fit_normalizer: empty sample list"))?;
    let d = first.channels();
    let mut count = 0usize;
    let mut mean = vec![0.0; d];
    for s in train_samples {
        if s.channels() != d {
            return Err(Error::shape(format!(
                "fit_normalizer: expected {d} channels, got {}",
                s.channels()
            )));
        }
        for t in 0..s.len() {
            for (m, v) in mean.iter_mut().zip(s.data.row(t)) {
                *m += v;
            }
        }
        count += s.len();
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0; d];
    for s in train_samples {
        for t in 0..s.len() {
            for ((v, x), m) in var.iter_mut().zip(s.data.row(t)).zip(&mean) {
                let diff = x - m;
                *v += diff * diff;
            }
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| (v / count as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok(NormStats {
        mean: Vector::from_vec(mean),
        std: Vector::from_vec(std),
    })
}

/// (x - mean) / std per channel; length, label, and meta unchanged.
pub fn apply_normalizer(stats: &NormStats, s: &SequenceSample) -> Result<SequenceSample> {
    if s.channels() != stats.mean.dim() {
        return Err(Error::shape(format!(
            "apply_normalizer: sample has {} channels, stats have {}",
            s.channels(),
            stats.mean.dim()
        )));
    }
    let mut data = s.data.clone();
    for t in 0..data.rows() {
        let row = data.row_mut(t);
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - stats.mean[j]) / stats.std[j];
        }
    }
    Ok(SequenceSample {
        data,
        label: s.label,
        meta: s.meta.clone(),
    })
}

pub fn normalize_all(stats: &NormStats, samples: &[SequenceSample]) -> Result<Vec<SequenceSample>> {
    samples.iter().map(|s| apply_normalizer(stats, s)).collect()
}

/// Pad samples to the batch maximum length; mask\[b\]\[t\] is true iff t is a
/// real timestep. Sample order is preserved.
pub fn make_batch(samples: &[SequenceSample], pad_value: f64) -> Result<SequenceBatch> {
    let d = samples.first().map(|s| s.channels()).unwrap_or(0);
    let t_max = samples.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut data = Vec::with_capacity(samples.len());
    let mut lengths = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut mask = Vec::with_capacity(samples.len());
    for s in samples {
        if s.channels() != d {
            return Err(Error::shape(format!(
                "make_batch: mixed channel counts {d} and {}",
                s.channels()
            )));
        }
        let mut padded = Matrix::from_vec(t_max, d, vec![pad_value; t_max * d]);
        for t in 0..s.len() {
            padded.row_mut(t).copy_from_slice(s.data.row(t));
        }
        data.push(padded);
        lengths.push(s.len());
        labels.push(s.label);
        mask.push((0..t_max).map(|t| t < s.len()).collect());
    }
    Ok(SequenceBatch {
        data,
        lengths,
        labels,
        mask,
        t_max,
    })
}

/// Row b of the result is the hidden state at the sample's true final step
/// (t = lengths\[b\] - 1), never the padded tail.
pub fn select_final_states(states: &[Matrix], lengths: &[usize]) -> Result<Matrix> {
    let h = states.first().map(|m| m.cols()).unwrap_or(0);
    let mut out = Matrix::zeros(states.len(), h);
    for (b, (s, &len)) in states.iter().zip(lengths).enumerate() {
        if len == 0 || len > s.rows() {
            return Err(Error::argument(format!(
                "select_final_states: sample {b} has length {len}, valid range 1..={}",
                s.rows()
            )));
        }
        out.row_mut(b).copy_from_slice(s.row(len - 1));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sample(rows: &[&[f64]], label: usize) -> SequenceSample {
        SequenceSample::new(Matrix::from_rows(rows), label)
    }

    #[test]
    fn normalizer_constant_channel_floors_std() {
        let s = sample(&[&[5.0], &[5.0], &[5.0]], 0);
        let stats = fit_normalizer(&[s]).unwrap();
        assert_abs_diff_eq!(stats.mean[0], 5.0);
        assert_eq!(stats.std[0], STD_FLOOR);
    }

    #[test]
    fn normalizer_symmetric_values() {
        let s = sample(&[&[-1.0], &[1.0]], 0);
        let stats = fit_normalizer(&[s]).unwrap();
        assert_abs_diff_eq!(stats.mean[0], 0.0);
        assert_abs_diff_eq!(stats.std[0], 1.0);
    }

    #[test]
    fn normalizer_round_trip_zero_mean_unit_std() {
        let samples = vec![
            sample(&[&[1.0, 10.0], &[2.0, 20.0], &[3.0, 15.0]], 0),
            sample(&[&[4.0, 5.0], &[0.0, 30.0]], 1),
        ];
        let stats = fit_normalizer(&samples).unwrap();
        let normed = normalize_all(&stats, &samples).unwrap();
        let restats = fit_normalizer(&normed).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(restats.mean[j], 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(restats.std[j], 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn apply_normalizer_cases() {
        let stats = NormStats {
            mean: Vector::from_vec(vec![5.0]),
            std: Vector::from_vec(vec![2.0]),
        };
        let s = sample(&[&[7.0], &[5.0]], 3);
        let n = apply_normalizer(&stats, &s).unwrap();
        assert_abs_diff_eq!(n.data.get(0, 0), 1.0);
        assert_abs_diff_eq!(n.data.get(1, 0), 0.0);
        assert_eq!(n.label, 3);
        assert_eq!(n.len(), 2);

        let ident = NormStats {
            mean: Vector::from_vec(vec![0.0]),
            std: Vector::from_vec(vec![1.0]),
        };
        assert_eq!(apply_normalizer(&ident, &s).unwrap().data, s.data);

        let bad = sample(&[&[1.0, 2.0]], 0);
        assert!(apply_normalizer(&stats, &bad).is_err());
    }

    #[test]
    fn make_batch_masks_and_lengths() {
        let samples = vec![
            sample(&[&[1.0], &[2.0], &[3.0]], 0),
            sample(&[&[4.0], &[5.0], &[6.0], &[7.0], &[8.0]], 1),
        ];
        let b = make_batch(&samples, 0.0).unwrap();
        assert_eq!(b.t_max, 5);
        assert_eq!(b.mask[0], vec![true, true, true, false, false]);
        assert_eq!(b.mask[1], vec![true, true, true, true, true]);
        assert_eq!(b.lengths, vec![3, 5]);
    }

    #[test]
    fn make_batch_single_sample_round_trip() {
        let s = sample(&[&[1.0, 2.0], &[3.0, 4.0]], 2);
        let b = make_batch(std::slice::from_ref(&s), 9.0).unwrap();
        assert_eq!(b.data[0], s.data);
        assert_eq!(b.labels[0], 2);
    }

    #[test]
    fn make_batch_rejects_mixed_channels() {
        let samples = vec![sample(&[&[1.0]], 0), sample(&[&[1.0, 2.0]], 0)];
        assert!(make_batch(&samples, 0.0).is_err());
    }

    #[test]
    fn select_final_states_picks_true_final_step() {
        // h_t = t * ones
        let states: Vec<Matrix> = (0..2)
            .map(|_| {
                Matrix::from_rows(&[&[0.0, 0.0], &[1.0, 1.0], &[2.0, 2.0], &[3.0, 3.0]])
            })
            .collect();
        let out = select_final_states(&states, &[2, 4]).unwrap();
        assert_eq!(out.row(0), &[1.0, 1.0]);
        assert_eq!(out.row(1), &[3.0, 3.0]);

        let first = select_final_states(&states[..1], &[1]).unwrap();
        assert_eq!(first.row(0), &[0.0, 0.0]);

        assert!(select_final_states(&states, &[0, 4]).is_err());
        assert!(select_final_states(&states, &[5, 4]).is_err());
    }
}
