use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{Real, Tape, Tensor, Var};

/// Distance used by the proposal matching loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchDistance {
    #[default]
    Squared,
    Absolute,
}

impl MatchDistance {
    fn apply(self, d: f64) -> f64 {
        match self {
            MatchDistance::Squared => d * d,
            MatchDistance::Absolute => d.abs(),
        }
    }
}

/// For each target, the index of the closest proposal (lowest index on ties).
pub fn greedy_assignment(targets: &[f64], proposals: &[f64]) -> Vec<usize> {
    targets
        .iter()
        .map(|&h| {
            let mut best = 0;
            for (j, &p) in proposals.iter().enumerate() {
                if (h - p).abs() < (h - proposals[best]).abs() {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Sum over targets of the distance to their greedily matched proposal.
pub fn greedy_match_loss(targets: &[f64], proposals: &[f64], distance: MatchDistance) -> Result<f64> {
    if targets.len() != proposals.len() || proposals.is_empty() {
        return Err(Error::shape(
            "greedy_match_loss",
            format!("{} targets, {} proposals", targets.len(), proposals.len()),
        ));
    }
    let j = greedy_assignment(targets, proposals);
    Ok(targets.iter().zip(j).map(|(&h, j)| distance.apply(h - proposals[j])).sum())
}

/// Batched [`greedy_match_loss`] on the tape, averaged over rays.
///
/// `targets` are constants `[B, n]`; `proposals` is `[B, n]`.
pub fn greedy_match_loss_var<T: Real>(
    tape: &mut Tape<T>,
    targets: &Tensor<T>,
    proposals: Var,
    distance: MatchDistance,
) -> Result<Var> {
    let shape = tape.shape(proposals).to_vec();
    if shape.len() != 2 || targets.shape() != shape.as_slice() || shape[1] == 0 {
        return Err(Error::shape(
            "greedy_match_loss",
            format!("targets {:?}, proposals {shape:?}", targets.shape()),
        ));
    }
    let (b, n) = (shape[0], shape[1]);
    let h = targets.to_f64();
    let p = tape.value(proposals).to_f64();
    let index = (0..b)
        .flat_map(|r| {
            greedy_assignment(&h[r * n..(r + 1) * n], &p[r * n..(r + 1) * n])
                .into_iter()
                .map(move |j| r * n + j)
        })
        .collect();
    let matched = tape.gather(proposals, index, &[b, n])?;
    let target = tape.constant(targets.clone())?;
    let diff = tape.sub(matched, target)?;
    let d = match distance {
        MatchDistance::Squared => tape.square(diff)?,
        MatchDistance::Absolute => tape.abs(diff)?,
    };
    let total = tape.sum(d, None)?;
    tape.scale(total, 1.0 / b as f64)
}

/// Balanced per-ray class weights: `0.5 / n_pos` for samples whose weight
/// exceeds `threshold`, `0.5 / n_neg` for the rest.
pub fn balanced_labels(weights: &[f64], n: usize, threshold: f64) -> (Vec<f64>, Vec<f64>) {
    let mut labels = Vec::with_capacity(weights.len());
    let mut scale = Vec::with_capacity(weights.len());
    for ray in weights.chunks(n) {
        let pos = ray.iter().filter(|&&w| w > threshold).count();
        let neg = ray.len() - pos;
        for &w in ray {
            if w > threshold {
                labels.push(1.0);
                scale.push(0.5 / pos as f64);
            } else {
                labels.push(0.0);
                scale.push(0.5 / neg as f64);
            }
        }
    }
    (labels, scale)
}

/// Balanced logistic loss of importance `logits` `[B, n]` against labels
/// `fine_weights > threshold`, averaged over rays. An empty class adds 0.
pub fn importance_loss_var<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    fine_weights: &[f64],
    threshold: f64,
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || fine_weights.len() != shape[0] * shape[1] || shape[1] == 0 {
        return Err(Error::shape(
            "importance_loss",
            format!("logits {shape:?}, {} weights", fine_weights.len()),
        ));
    }
    let (labels, scale) = balanced_labels(fine_weights, shape[1], threshold);
    let bce = tape.bce_with_logits(logits, &Tensor::from_f64(shape.clone(), &labels)?)?;
    let scale = tape.constant(Tensor::from_f64(shape.clone(), &scale)?)?;
    let weighted = tape.mul(bce, scale)?;
    let total = tape.sum(weighted, None)?;
    tape.scale(total, 1.0 / shape[0] as f64)
}

/// Value-level [`importance_loss_var`] for one ray.
pub fn importance_loss(logits: &[f64], fine_weights: &[f64], threshold: f64) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let n = logits.len();
    let z = tape.constant(Tensor::from_f64(vec![1, n], logits)?)?;
    let loss = importance_loss_var(&mut tape, z, fine_weights, threshold)?;
    Ok(tape.value(loss).data()[0])
}

/// Mean squared error between `[B, 3]` predictions and constant targets.
pub fn mse_var<T: Real>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    let t = tape.constant(target.clone())?;
    let d = tape.sub(pred, t)?;
    let sq = tape.square(d)?;
    tape.mean(sq, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bce(z: f64, y: f64) -> f64 {
        // Direct formula, no shared code with the tape path.
        let p = 1.0 / (1.0 + (-z).exp());
        -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
    }

    #[test]
    fn greedy_match_examples() {
        let sq = MatchDistance::Squared;
        assert_eq!(greedy_match_loss(&[0.3, 0.6], &[0.3, 0.6], sq).unwrap(), 0.0);
        let l = greedy_match_loss(&[0.2, 0.8], &[0.25, 0.9], sq).unwrap();
        assert!((l - (0.05f64.powi(2) + 0.1f64.powi(2))).abs() < 1e-15);
        assert!((l - 0.0125).abs() < 1e-12);
        assert_eq!(greedy_assignment(&[0.5, 0.5], &[0.4, 0.7]), vec![0, 0]);
        let l = greedy_match_loss(&[0.5, 0.5], &[0.4, 0.7], sq).unwrap();
        assert!((l - 0.02).abs() < 1e-12);
        let l = greedy_match_loss(&[0.2, 0.8], &[0.25, 0.9], MatchDistance::Absolute).unwrap();
        assert!((l - 0.15).abs() < 1e-12);
    }

    #[test]
    fn greedy_ties_pick_lowest_index() {
        assert_eq!(greedy_assignment(&[0.5], &[0.4, 0.6, 0.4]), vec![0]);
    }

    #[test]
    fn tape_match_loss_agrees_and_only_moves_matched_proposals() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::from_f64(vec![2, 2], &[0.4, 0.7, 0.25, 0.9]).unwrap()).unwrap();
        let h = Tensor::from_f64(vec![2, 2], &[0.5, 0.5, 0.2, 0.8]).unwrap();
        let loss = greedy_match_loss_var(&mut tape, &h, p, MatchDistance::Squared).unwrap();
        assert!((tape.value(loss).data()[0] - (0.02 + 0.0125) / 2.0).abs() < 1e-12);
        let g = tape.backward(loss).unwrap().wrt(&tape, p);
        // d/dp of 0.5 * [2 (0.4 - 0.5)^2] and 0.5 * [(0.25-0.2)^2 + (0.9-0.8)^2].
        let want = [-0.2, 0.0, 0.05, 0.1];
        for (a, b) in g.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn importance_loss_examples() {
        let l = importance_loss(&[2.0, -2.0, 0.0], &[0.5, 0.01, 0.2], 0.03).unwrap();
        let want = 0.5 * (bce(2.0, 1.0) + bce(0.0, 1.0)) / 2.0 + 0.5 * bce(-2.0, 0.0);
        assert!((l - want).abs() < 1e-12);

        let l = importance_loss(&[0.0; 4], &[0.5, 0.0, 0.2, 0.01], 0.03).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);

        let l = importance_loss(&[40.0, -40.0], &[0.9, 0.0], 0.03).unwrap();
        assert!(l < 1e-15);
    }

    #[test]
    fn empty_class_contributes_nothing() {
        let l = importance_loss(&[0.0, 0.0], &[0.0, 0.01], 0.03).unwrap();
        assert!((l - 0.5 * 2f64.ln()).abs() < 1e-12);
    }
}
