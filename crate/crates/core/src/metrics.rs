//! Segmentation metrics: Dice, average surface distance, precision, recall.
//!
//! Surfaces are 6-connected boundaries: a voxel of the class is on the
//! surface when at least one face neighbour is outside the class or outside
//! the volume. Distances are between voxel centres, scaled by spacing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::faults::{self, Fault};
use crate::labels::LabelVolume;

pub const UNIT_SPACING: [f64; 3] = [1.0, 1.0, 1.0];

fn same_shape(t: &LabelVolume, p: &LabelVolume) -> Result<()> {
    if t.shape() != p.shape() {
        return Err(Error::shape(format!(
            "truth {:?} and prediction {:?} differ",
            t.shape(),
            p.shape()
        )));
    }
    Ok(())
}

struct Overlap {
    truth: usize,
    pred: usize,
    both: usize,
}

fn overlap(t: &LabelVolume, p: &LabelVolume, class: u8) -> Overlap {
    let mut o = Overlap { truth: 0, pred: 0, both: 0 };
    for (&a, &b) in t.data().iter().zip(p.data()) {
        let (ta, pb) = (a == class, b == class);
        o.truth += ta as usize;
        o.pred += pb as usize;
        o.both += (ta && pb) as usize;
    }
    o
}

/// `2|T ∩ P| / (|T| + |P|)` for one class; 1 when both masks are empty.
pub fn dsc(t: &LabelVolume, p: &LabelVolume, class: u8) -> Result<f64> {
    same_shape(t, p)?;
    let o = overlap(t, p, class);
    if o.truth + o.pred == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * o.both as f64 / (o.truth + o.pred) as f64)
}

/// `(|T ∩ P| / |P|, |T ∩ P| / |T|)`. An empty denominator gives 1 when both
/// masks are empty and 0 otherwise.
pub fn precision_recall(t: &LabelVolume, p: &LabelVolume, class: u8) -> Result<(f64, f64)> {
    same_shape(t, p)?;
    let o = overlap(t, p, class);
    let both_empty = o.truth == 0 && o.pred == 0;
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            if both_empty { 1.0 } else { 0.0 }
        } else {
            num as f64 / den as f64
        }
    };
    Ok((ratio(o.both, o.pred), ratio(o.both, o.truth)))
}

/// Boundary voxels of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceSet {
    pub voxels: Vec<[usize; 3]>,
    pub spacing: [f64; 3],
}

impl SurfaceSet {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    fn mean_nearest(&self, other: &SurfaceSet) -> f64 {
        let s = self.spacing;
        let total: f64 = self
            .voxels
            .iter()
            .map(|a| {
                other
                    .voxels
                    .iter()
                    .map(|b| {
                        let d = [0, 1, 2].map(|i| (a[i] as f64 - b[i] as f64) * s[i]);
                        d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .sum();
        total / self.voxels.len() as f64
    }
}

/// Voxels of `class` with a face neighbour outside the class (the volume
/// border counts as outside), in row-major order.
pub fn extract_surface(labels: &LabelVolume, class: u8, spacing: [f64; 3]) -> SurfaceSet {
    let border_outside = !faults::active(Fault::Surface);
    let [nx, ny, nz] = labels.shape();
    let mut voxels = Vec::new();
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                if labels.get(x, y, z) != class {
                    continue;
                }
                let p = [x, y, z];
                let ext = [nx, ny, nz];
                let mut boundary = false;
                for axis in 0..3 {
                    for step in [-1isize, 1] {
                        let q = p[axis] as isize + step;
                        if q < 0 || q >= ext[axis] as isize {
                            boundary |= border_outside;
                            continue;
                        }
                        let mut n = p;
                        n[axis] = q as usize;
                        boundary |= labels.get(n[0], n[1], n[2]) != class;
                    }
                }
                if boundary {
                    voxels.push(p);
                }
            }
        }
    }
    SurfaceSet { voxels, spacing }
}

/// Symmetric average surface distance in spacing units (mm).
pub fn asd(t: &LabelVolume, p: &LabelVolume, class: u8, spacing: [f64; 3]) -> Result<f64> {
    same_shape(t, p)?;
    let st = extract_surface(t, class, spacing);
    let sp = extract_surface(p, class, spacing);
    asd_between(&st, &sp)
}

/// Average surface distance between two explicit surfaces.
pub fn asd_between(truth: &SurfaceSet, pred: &SurfaceSet) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::UndefinedAsd("ground-truth"));
    }
    if pred.is_empty() {
        return Err(Error::UndefinedAsd("predicted"));
    }
    Ok(0.5 * (pred.mean_nearest(truth) + truth.mean_nearest(pred)))
}

/// Metrics of one class; `asd_mm` is `None` when a surface is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dsc: f64,
    pub asd_mm: Option<f64>,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Foreground classes in ascending order.
    pub classes: Vec<(u8, ClassMetrics)>,
    pub macro_avg: ClassMetrics,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut n, mut s) = (0usize, 0.0);
    for x in xs {
        n += 1;
        s += x;
    }
    (n > 0).then(|| s / n as f64)
}

impl MetricsReport {
    fn from_rows(classes: Vec<(u8, ClassMetrics)>) -> Self {
        let rows = || classes.iter().map(|(_, m)| m);
        let macro_avg = ClassMetrics {
            dsc: mean(rows().map(|m| m.dsc)).unwrap_or(1.0),
            asd_mm: mean(rows().filter_map(|m| m.asd_mm)),
            precision: mean(rows().map(|m| m.precision)).unwrap_or(1.0),
            recall: mean(rows().map(|m| m.recall)).unwrap_or(1.0),
        };
        MetricsReport { classes, macro_avg }
    }

    /// Per-class metrics for every foreground class `1..classes`.
    pub fn evaluate(t: &LabelVolume, p: &LabelVolume, classes: usize, spacing: [f64; 3]) -> Result<Self> {
        same_shape(t, p)?;
        let mut rows = Vec::with_capacity(classes.saturating_sub(1));
        for c in 1..classes {
            let class = c as u8;
            let (precision, recall) = precision_recall(t, p, class)?;
            let asd_mm = match asd(t, p, class, spacing) {
                Ok(d) => Some(d),
                Err(Error::UndefinedAsd(_)) => None,
                Err(e) => return Err(e),
            };
            rows.push((
                class,
                ClassMetrics {
                    dsc: dsc(t, p, class)?,
                    asd_mm,
                    precision,
                    recall,
                },
            ));
        }
        Ok(Self::from_rows(rows))
    }

    /// Per-class means over several reports of the same class layout.
    pub fn average(reports: &[MetricsReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Invalid("no reports to average".into()))?;
        let mut rows = Vec::with_capacity(first.classes.len());
        for (i, (class, _)) in first.classes.iter().enumerate() {
            let col = || reports.iter().map(move |r| &r.classes[i].1);
            if reports.iter().any(|r| r.classes.get(i).map(|c| c.0) != Some(*class)) {
                return Err(Error::Invalid("reports cover different classes".into()));
            }
            rows.push((
                *class,
                ClassMetrics {
                    dsc: mean(col().map(|m| m.dsc)).unwrap(),
                    asd_mm: mean(col().filter_map(|m| m.asd_mm)),
                    precision: mean(col().map(|m| m.precision)).unwrap(),
                    recall: mean(col().map(|m| m.recall)).unwrap(),
                },
            ));
        }
        Ok(Self::from_rows(rows))
    }

    /// `{"classes": {"1": {dsc, asd_mm, precision, recall}, ...}, "macro": {...}}`
    pub fn to_json(&self) -> Value {
        let row = |m: &ClassMetrics| {
            json!({
                "dsc": m.dsc,
                "asd_mm": m.asd_mm,
                "precision": m.precision,
                "recall": m.recall,
            })
        };
        let classes: BTreeMap<String, Value> = self
            .classes
            .iter()
            .map(|(c, m)| (c.to_string(), row(m)))
            .collect();
        json!({ "classes": classes, "macro": row(&self.macro_avg) })
    }
}
