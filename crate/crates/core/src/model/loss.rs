use alloc::vec::Vec;

use super::tape::{softmax_in_place, Tape};
use super::{Encoder, EncoderParams, ModelError};
use crate::signal::MelSpectrogram;
use crate::tensor::Matrix;

/// Masked cross-entropy over selected output windows.
#[derive(Debug, Clone, PartialEq)]
pub struct CeOutput {
    /// Mean over positions; 0 when `skipped`.
    pub loss: f64,
    pub sum: f64,
    pub count: usize,
    /// Whether the argmax logit equals the target, per position.
    pub correct: Vec<bool>,
    pub skipped: bool,
}

fn validate(logits: &Matrix, targets: &[u32], positions: &[usize]) -> Result<(), ModelError> {
    let windows = logits.rows();
    if targets.len() != windows {
        return Err(ModelError::TargetLength {
            targets: targets.len(),
            windows,
        });
    }
    for &p in positions {
        if p >= windows {
            return Err(ModelError::IndexOutOfRange {
                position: p,
                windows,
            });
        }
        if targets[p] as usize >= logits.cols() {
            return Err(ModelError::TargetOutOfVocab {
                token: targets[p],
                vocab: logits.cols(),
            });
        }
    }
    Ok(())
}

fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
    row[target] - lse
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn masked_ce_loss(
    logits: &Matrix,
    targets: &[u32],
    positions: &[usize],
) -> Result<CeOutput, ModelError> {
    validate(logits, targets, positions)?;
    let mut sum = 0.0;
    let mut correct = Vec::with_capacity(positions.len());
    for &p in positions {
        let row = logits.row(p);
        let t = targets[p] as usize;
        sum -= log_softmax_at(row, t);
        correct.push(argmax(row) == t);
    }
    let count = positions.len();
    Ok(CeOutput {
        loss: if count == 0 { 0.0 } else { sum / count as f64 },
        sum,
        count,
        correct,
        skipped: count == 0,
    })
}

/// `scale · (softmax − onehot)` on selected rows, zero elsewhere.
pub fn masked_ce_grad(
    logits: &Matrix,
    targets: &[u32],
    positions: &[usize],
    scale: f64,
) -> Result<Matrix, ModelError> {
    validate(logits, targets, positions)?;
    let mut g = Matrix::zeros(logits.rows(), logits.cols());
    for &p in positions {
        let mut row = logits.row(p).to_vec();
        softmax_in_place(&mut row);
        row[targets[p] as usize] -= 1.0;
        for (o, v) in g.row_mut(p).iter_mut().zip(row) {
            *o += scale * v;
        }
    }
    Ok(g)
}

/// One encoder input with its output-rate targets and loss positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: MelSpectrogram,
    pub targets: Vec<u32>,
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    /// Mean over every selected position in the batch.
    pub loss: f64,
    pub positions: usize,
    pub correct: usize,
    pub skipped: bool,
    /// Per-parameter gradients, empty when not requested or skipped.
    pub grads: Vec<Matrix>,
}

/// Batch loss and (optionally) its gradient. Each example runs on its own tape;
/// gradients are summed across examples.
pub fn batch_loss_and_grad(
    encoder: &Encoder,
    params: &EncoderParams,
    examples: &[Example],
    with_grad: bool,
) -> Result<BatchLoss, ModelError> {
    let total: usize = examples.iter().map(|e| e.positions.len()).sum();
    let mut grads: Vec<Matrix> = Vec::new();
    if with_grad && total > 0 {
        grads = params
            .values()
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect();
    }
    let mut sum = 0.0;
    let mut correct = 0;
    for ex in examples {
        let mut tape = Tape::new(params.values());
        let out = encoder.forward(&mut tape, &ex.input)?;
        let logits = tape.value(out);
        let ce = masked_ce_loss(logits, &ex.targets, &ex.positions)?;
        sum += ce.sum;
        correct += ce.correct.iter().filter(|&&c| c).count();
        if with_grad && !ex.positions.is_empty() {
            let seed = masked_ce_grad(logits, &ex.targets, &ex.positions, 1.0 / total as f64)?;
            for (acc, g) in grads.iter_mut().zip(tape.backward(out, seed).params) {
                acc.add_assign(&g);
            }
        }
    }
    Ok(BatchLoss {
        loss: if total == 0 { 0.0 } else { sum / total as f64 },
        positions: total,
        correct,
        skipped: total == 0,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Matrix::zeros(3, 8192);
        let out = masked_ce_loss(&logits, &[5, 0, 8191], &[0, 2]).unwrap();
        assert!((out.loss - libm::log(8192.0)).abs() < 1e-9);
        assert!((out.loss - 9.010_913).abs() < 1e-6);
    }

    #[test]
    fn closed_form_softmax() {
        let logits = Matrix::from_vec(1, 4, vec![0.0, 0.0, 0.0, libm::log(3.0)]);
        let out = masked_ce_loss(&logits, &[3], &[0]).unwrap();
        assert!((out.loss - core::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(out.correct, vec![true]);
    }

    #[test]
    fn large_margin_drives_loss_to_zero() {
        let logits = Matrix::from_vec(1, 3, vec![0.0, 200.0, 0.0]);
        let out = masked_ce_loss(&logits, &[1], &[0]).unwrap();
        assert!(out.loss < 1e-12 && out.loss >= 0.0);
    }

    #[test]
    fn raising_the_target_logit_lowers_loss() {
        let mut prev = f64::INFINITY;
        for step in 0..10 {
            let logits = Matrix::from_vec(1, 3, vec![1.0, step as f64 * 0.5, -0.5]);
            let l = masked_ce_loss(&logits, &[1], &[0]).unwrap().loss;
            assert!(l < prev && l >= 0.0);
            prev = l;
        }
    }

    #[test]
    fn empty_positions_skip() {
        let out = masked_ce_loss(&Matrix::zeros(2, 4), &[0, 1], &[]).unwrap();
        assert!(out.skipped);
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn contract_errors() {
        let logits = Matrix::zeros(2, 4);
        assert_eq!(
            masked_ce_loss(&logits, &[0, 1], &[2]),
            Err(ModelError::IndexOutOfRange {
                position: 2,
                windows: 2
            })
        );
        assert_eq!(
            masked_ce_loss(&logits, &[0], &[0]),
            Err(ModelError::TargetLength {
                targets: 1,
                windows: 2
            })
        );
        assert_eq!(
            masked_ce_loss(&logits, &[0, 9], &[1]),
            Err(ModelError::TargetOutOfVocab { token: 9, vocab: 4 })
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut row = vec![3.0, -1.0, 1000.0, 0.5];
        softmax_in_place(&mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
