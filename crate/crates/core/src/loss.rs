//! Training losses: margin loss on capsule lengths against downsampled
//! labels, weighted cross-entropy on the decoder output, and masked
//! reconstruction error, combined as a weighted sum.
//!
//! Margin loss and cross-entropy are averaged per entry so their magnitude
//! does not depend on patch size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::faults::{self, Fault};
use crate::labels::LabelVolume;
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const POSITIVE_MARGIN: f64 = 0.9;
pub const NEGATIVE_MARGIN: f64 = 0.1;
pub const NEGATIVE_WEIGHT: f64 = 0.5;
pub const PROB_FLOOR: f64 = 1e-7;

/// Majority-vote downsampling of `labels` by `factor` into a one-hot
/// `[X/f, Y/f, Z/f, classes]` tensor. Ties go to the smaller class index.
pub fn downsample_labels<T: Scalar>(labels: &LabelVolume, factor: usize, classes: usize) -> Result<Tensor<T>> {
    let [x, y, z] = labels.shape();
    if factor == 0 || x % factor != 0 || y % factor != 0 || z % factor != 0 {
        return Err(Error::shape(format!(
            "label extents {:?} not divisible by {factor}",
            labels.shape()
        )));
    }
    if labels.max_class() as usize >= classes {
        return Err(Error::Invalid(format!(
            "label {} out of range for {classes} classes",
            labels.max_class()
        )));
    }
    let (cx, cy, cz) = (x / factor, y / factor, z / factor);
    let mut out = Tensor::zeros(&[cx, cy, cz, classes]);
    let mut hist = vec![0usize; classes];
    for bx in 0..cx {
        for by in 0..cy {
            for bz in 0..cz {
                hist.iter_mut().for_each(|h| *h = 0);
                for i in 0..factor {
                    for j in 0..factor {
                        for k in 0..factor {
                            let c = labels.get(bx * factor + i, by * factor + j, bz * factor + k);
                            hist[c as usize] += 1;
                        }
                    }
                }
                let mut best = 0;
                for c in 1..classes {
                    if hist[c] > hist[best] {
                        best = c;
                    }
                }
                out.set(&[bx, by, bz, best], T::one());
            }
        }
    }
    Ok(out)
}

/// Per-entry margin loss `y*·max(0, 0.9 − y)² + 0.5·(1 − y*)·max(0, y − 0.1)²`,
/// averaged over all (voxel, class) entries.
pub fn margin_loss<T: Scalar>(tape: &Tape<T>, lengths: Var, target: Var) -> Result<Var> {
    let drop_negative = faults::active(Fault::MarginLoss);
    let (pos, neg, half) = (T::lit(POSITIVE_MARGIN), T::lit(NEGATIVE_MARGIN), T::lit(NEGATIVE_WEIGHT));
    let neg_w = if drop_negative { T::zero() } else { half };
    let out = tape.with_values(&[lengths, target], |v| -> Result<_> {
        let (y, t) = (v[0], v[1]);
        if y.shape() != t.shape() {
            return Err(Error::shape(format!(
                "margin loss: lengths {:?} vs target {:?}",
                y.shape(),
                t.shape()
            )));
        }
        let total: T = y
            .data()
            .iter()
            .zip(t.data())
            .map(|(&y, &t)| {
                let up = (pos - y).max(T::zero());
                let down = (y - neg).max(T::zero());
                t * up * up + neg_w * (T::one() - t) * down * down
            })
            .sum();
        Ok(Tensor::scalar(total / T::lit(y.len() as f64)))
    })?;
    tape.push(
        "margin_loss",
        &[lengths, target],
        out,
        Box::new(move |ctx| {
            let (y, t) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let two = T::lit(2.0);
            let scale = ctx.grad[0] / T::lit(y.len() as f64);
            let gy = ctx.needs[0].then(|| {
                y.iter()
                    .zip(t)
                    .map(|(&y, &t)| {
                        let up = (pos - y).max(T::zero());
                        let down = (y - neg).max(T::zero());
                        scale * (-two * t * up + two * neg_w * (T::one() - t) * down)
                    })
                    .collect()
            });
            let gt = ctx.needs[1].then(|| {
                y.iter()
                    .map(|&y| {
                        let up = (pos - y).max(T::zero());
                        let down = (y - neg).max(T::zero());
                        scale * (up * up - neg_w * down * down)
                    })
                    .collect()
            });
            vec![gy, gt]
        }),
    )
}

fn check_seg_labels<T: Scalar>(seg: &Tensor<T>, labels: &LabelVolume) -> Result<usize> {
    let s = seg.shape();
    if s.len() != 4 || s[..3] != labels.shape() {
        return Err(Error::shape(format!(
            "prediction {s:?} does not cover labels {:?}",
            labels.shape()
        )));
    }
    let classes = s[3];
    if labels.max_class() as usize >= classes {
        return Err(Error::Invalid(format!(
            "label {} out of range for {classes} classes",
            labels.max_class()
        )));
    }
    Ok(classes)
}

/// `−mean_v w[label_v]·log(max(p_v[label_v], 1e-7))` over voxels.
pub fn weighted_ce<T: Scalar>(tape: &Tape<T>, seg: Var, labels: &LabelVolume, class_weights: &[f64]) -> Result<Var> {
    let classes = tape.with_values(&[seg], |v| check_seg_labels(v[0], labels))?;
    if class_weights.len() != classes {
        return Err(Error::shape(format!(
            "{} class weights for {classes} classes",
            class_weights.len()
        )));
    }
    if class_weights.iter().any(|&w| w <= 0.0 || !w.is_finite()) {
        return Err(Error::Invalid("class weights must be positive".into()));
    }
    let w: Vec<T> = class_weights.iter().map(|&x| T::lit(x)).collect();
    let lab: Vec<u8> = labels.data().to_vec();
    let floor = T::lit(PROB_FLOOR);
    let out = tape.with_values(&[seg], |v| {
        let p = v[0].data();
        let total: T = lab
            .iter()
            .enumerate()
            .map(|(i, &l)| w[l as usize] * p[i * classes + l as usize].max(floor).ln())
            .sum();
        Tensor::scalar(-total / T::lit(lab.len() as f64))
    });
    tape.push(
        "weighted_ce",
        &[seg],
        out,
        Box::new(move |ctx| {
            let p = ctx.inputs[0].data();
            let mut g = vec![T::zero(); p.len()];
            let scale = ctx.grad[0] / T::lit(lab.len() as f64);
            for (i, &l) in lab.iter().enumerate() {
                let j = i * classes + l as usize;
                if p[j] > floor {
                    g[j] = -scale * w[l as usize] / p[j];
                }
            }
            vec![Some(g)]
        }),
    )
}

/// Mean of `(recon − input)²` over foreground voxels (label > 0) and all
/// channels; 0 when there is no foreground.
pub fn masked_mse<T: Scalar>(tape: &Tape<T>, recon: Var, input: Var, labels: &LabelVolume) -> Result<Var> {
    let channels = tape.with_values(&[recon, input], |v| -> Result<usize> {
        if v[0].shape() != v[1].shape() {
            return Err(Error::shape(format!(
                "reconstruction {:?} vs input {:?}",
                v[0].shape(),
                v[1].shape()
            )));
        }
        let s = v[0].shape();
        if s.len() != 4 || s[..3] != labels.shape() {
            return Err(Error::shape(format!("reconstruction {s:?} vs labels {:?}", labels.shape())));
        }
        Ok(s[3])
    })?;
    let mask: Vec<bool> = labels.data().iter().map(|&l| l > 0).collect();
    let count = mask.iter().filter(|&&m| m).count() * channels;
    let out = tape.with_values(&[recon, input], |v| {
        let (r, x) = (v[0].data(), v[1].data());
        let mut total = T::zero();
        for (vi, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for c in 0..channels {
                let d = r[vi * channels + c] - x[vi * channels + c];
                total += d * d;
            }
        }
        Tensor::scalar(if count == 0 { T::zero() } else { total / T::lit(count as f64) })
    });
    tape.push(
        "masked_mse",
        &[recon, input],
        out,
        Box::new(move |ctx| {
            let (r, x) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut gr = vec![T::zero(); r.len()];
            if count > 0 {
                let scale = T::lit(2.0) * ctx.grad[0] / T::lit(count as f64);
                for (vi, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for c in 0..channels {
                        let j = vi * channels + c;
                        gr[j] = scale * (r[j] - x[j]);
                    }
                }
            }
            let gx = ctx.needs[1].then(|| gr.iter().map(|&g| -g).collect());
            vec![ctx.needs[0].then_some(gr), gx]
        }),
    )
}

/// Inverse relative class frequency, normalized to mean 1 over the classes
/// present. Absent classes get weight 1.
pub fn class_weights(labels: &[&LabelVolume], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for l in labels {
        for &c in l.data() {
            if (c as usize) < classes {
                counts[c as usize] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    let inv: Vec<Option<f64>> = counts
        .iter()
        .map(|&n| (n > 0).then(|| total as f64 / n as f64))
        .collect();
    let present: Vec<f64> = inv.iter().flatten().copied().collect();
    if present.is_empty() {
        return vec![1.0; classes];
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    inv.iter().map(|w| w.map_or(1.0, |w| w / mean)).collect()
}

/// Weights of the three loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub margin: f64,
    pub ce: f64,
    pub recon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            margin: 1.0,
            ce: 1.0,
            recon: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("margin", self.margin), ("ce", self.ce), ("recon", self.recon)] {
            if w < 0.0 || !w.is_finite() {
                return Err(Error::Config(format!("loss weight {name} = {w} must be non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub margin: f64,
    pub ce: f64,
    pub recon: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossReport {
    /// Weighted sum of already-evaluated components.
    pub fn compose(margin: f64, ce: f64, recon: f64, weights: LossWeights) -> Result<Self> {
        weights.validate()?;
        Ok(LossReport {
            margin,
            ce,
            recon,
            total: weights.margin * margin + weights.ce * ce + weights.recon * recon,
            weights,
        })
    }
}

/// Differentiable weighted sum of the three losses plus its report.
pub fn total_loss<T: Scalar>(
    tape: &Tape<T>,
    margin: Var,
    ce: Var,
    recon: Var,
    weights: LossWeights,
) -> Result<(Var, LossReport)> {
    weights.validate()?;
    let total = tape.linear_combination(&[(margin, weights.margin), (ce, weights.ce), (recon, weights.recon)])?;
    let item = |v: Var| tape.value(v).item().as_f64();
    let report = LossReport {
        margin: item(margin),
        ce: item(ce),
        recon: item(recon),
        total: item(total),
        weights,
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_loss(f: impl FnOnce(&Tape<f64>) -> Var) -> f64 {
        let tape = Tape::new();
        let v = f(&tape);
        let x = tape.value(v).item();
        x
    }

    #[test]
    fn margin_loss_examples() {
        let l = scalar_loss(|t| {
            let y = t.constant(Tensor::from_f64(&[1, 1, 1, 2], &[0.9, 0.1]).unwrap());
            let g = t.constant(Tensor::from_f64(&[1, 1, 1, 2], &[1.0, 0.0]).unwrap());
            margin_loss(t, y, g).unwrap()
        });
        assert_eq!(l, 0.0);

        let l = scalar_loss(|t| {
            let y = t.constant(Tensor::from_f64(&[1], &[0.5]).unwrap());
            let g = t.constant(Tensor::from_f64(&[1], &[1.0]).unwrap());
            margin_loss(t, y, g).unwrap()
        });
        assert!((l - 0.16).abs() < 1e-15);

        let l = scalar_loss(|t| {
            let y = t.constant(Tensor::from_f64(&[1], &[0.3]).unwrap());
            let g = t.constant(Tensor::from_f64(&[1], &[0.0]).unwrap());
            margin_loss(t, y, g).unwrap()
        });
        assert!((l - 0.02).abs() < 1e-15);
    }

    #[test]
    fn downsample_majority_and_ties() {
        let mut labels = LabelVolume::filled([8, 8, 16], 2);
        // second block: half 0, half 1
        for x in 0..8 {
            for y in 0..8 {
                for z in 8..16 {
                    labels.set(x, y, z, if x < 4 { 1 } else { 0 });
                }
            }
        }
        let d: Tensor<f64> = downsample_labels(&labels, 8, 3).unwrap();
        assert_eq!(d.shape(), &[1, 1, 2, 3]);
        assert_eq!(d.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(downsample_labels::<f64>(&LabelVolume::filled([8, 8, 12], 0), 8, 2).is_err());
    }

    #[test]
    fn weighted_ce_examples() {
        let labels = LabelVolume::new([1, 1, 2], vec![0, 0]).unwrap();
        let uniform = Tensor::<f64>::full(&[1, 1, 2, 4], 0.25);
        let l = scalar_loss(|t| weighted_ce(t, t.constant(uniform.clone()), &labels, &[1.0; 4]).unwrap());
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let l = scalar_loss(|t| weighted_ce(t, t.constant(uniform.clone()), &labels, &[2.0, 1.0, 1.0, 1.0]).unwrap());
        assert!((l - 2.0 * 4f64.ln()).abs() < 1e-12);

        let perfect = Tensor::<f64>::from_f64(&[1, 1, 2, 4], &[1., 0., 0., 0., 1., 0., 0., 0.]).unwrap();
        let l = scalar_loss(|t| weighted_ce(t, t.constant(perfect.clone()), &labels, &[3.0; 4]).unwrap());
        assert!(l <= 1e-6);

        let bad = LabelVolume::new([1, 1, 2], vec![0, 4]).unwrap();
        let tape = Tape::new();
        assert!(weighted_ce(&tape, tape.constant(uniform), &bad, &[1.0; 4]).is_err());
    }

    #[test]
    fn masked_mse_examples() {
        let labels = LabelVolume::new([1, 1, 2], vec![0, 1]).unwrap();
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 1], &[0.0, 1.0]).unwrap();
        let r = Tensor::<f64>::from_f64(&[1, 1, 2, 1], &[9.0, 1.5]).unwrap();
        let l = scalar_loss(|t| masked_mse(t, t.constant(r.clone()), t.constant(x.clone()), &labels).unwrap());
        assert_eq!(l, 0.25);
        let l = scalar_loss(|t| masked_mse(t, t.constant(x.clone()), t.constant(x.clone()), &labels).unwrap());
        assert_eq!(l, 0.0);
        let bg = LabelVolume::filled([1, 1, 2], 0);
        let l = scalar_loss(|t| masked_mse(t, t.constant(r.clone()), t.constant(x.clone()), &bg).unwrap());
        assert_eq!(l, 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let unit = LossWeights::default();
        let r = LossReport::compose(0.1, 0.2, 0.3, unit).unwrap();
        assert!((r.total - 0.6).abs() < 1e-15);
        assert_eq!(LossReport::compose(0.0, 0.0, 0.0, unit).unwrap().total, 0.0);
        let w = LossWeights {
            margin: 1.0,
            ce: 1.0,
            recon: 0.1,
        };
        assert!((LossReport::compose(1.0, 1.0, 1.0, w).unwrap().total - 2.1).abs() < 1e-15);
        let neg = LossWeights { margin: -1.0, ..unit };
        assert!(LossReport::compose(1.0, 1.0, 1.0, neg).is_err());
    }

    #[test]
    fn class_weights_inverse_frequency() {
        let l = LabelVolume::new([1, 1, 4], vec![0, 0, 0, 1]).unwrap();
        let w = class_weights(&[&l], 3);
        // inverse freqs 4/3 and 4, mean 8/3
        assert!((w[0] - 0.5).abs() < 1e-12);
        assert!((w[1] - 1.5).abs() < 1e-12);
        assert_eq!(w[2], 1.0);
    }
}
