//! Test-time metrics, significance tests and report output.

mod export;
mod report;
mod surface;
mod wilcoxon;

use crate::data::{build_groundtruth, LungMode, Sample, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::model::{ensemble_predict, Network};
use crate::tensor::Tensor;

pub(crate) use export::save_pgm;
pub use export::{overlay_image, write_mask_pgm, write_overlay_png};
pub use report::{
    record_classes, records_from_csv, records_to_csv, significance_matrix, ClassSummary, EvalRecord, ReportTable,
    SignificanceMatrix, RECORDS_HEADER,
};
pub use surface::surface_distance_symmetric;
pub use wilcoxon::{wilcoxon_signed_rank, wilcoxon_signed_rank_with, WilcoxonMethod, WilcoxonResult, EXACT_MAX_N};

pub const DEFAULT_EPSILON: f64 = 0.25;

/// Pixels with `|p - 1| < epsilon`.
pub fn certain_pixels(p: &[f64], height: usize, width: usize, epsilon: f64) -> Result<Mask> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Parameter(format!("epsilon {epsilon} must lie in (0, 1)")));
    }
    if p.len() != height * width {
        return Err(Error::dim(format!("probability map has {} values, expected {height}x{width}", p.len())));
    }
    Mask::from_bits(height, width, p.iter().map(|&v| (v - 1.0).abs() < epsilon).collect())
}

/// `2|P n G| / (|P| + |G|)`, 1 when both masks are empty.
pub fn dice(pred: &Mask, truth: &Mask) -> f64 {
    assert!(pred.same_dims(truth), "mask dimensions differ");
    let (p, g) = (pred.count(), truth.count());
    if p + g == 0 {
        return 1.0;
    }
    let both = pred.bits().iter().zip(truth.bits()).filter(|(a, b)| **a && **b).count();
    2.0 * both as f64 / (p + g) as f64
}

pub fn jaccard_from_dice(d: f64) -> f64 {
    d / (2.0 - d)
}

pub fn dice_from_jaccard(j: f64) -> f64 {
    2.0 * j / (1.0 + j)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub epsilon: f64,
    /// Pixel size multiplying surface distances.
    pub spacing: f64,
    pub surface_distance: bool,
    pub lung_mode: LungMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            spacing: 1.0,
            surface_distance: true,
            lung_mode: LungMode::AsStored,
        }
    }
}

/// Records of one image: D, J and optionally S_d for every organ class.
pub fn score_masks(id: &str, pred: &[Mask], truth: &[Mask], opts: &EvalOptions) -> Vec<EvalRecord> {
    pred.iter()
        .zip(truth)
        .zip(CLASS_NAMES)
        .map(|((p, t), class)| {
            let d = dice(p, t);
            EvalRecord {
                id: id.to_string(),
                class: class.to_string(),
                dice: d,
                jaccard: jaccard_from_dice(d),
                surface_distance: if opts.surface_distance {
                    surface_distance_symmetric(p, t, opts.spacing)
                } else {
                    None
                },
            }
        })
        .collect()
}

pub struct Evaluation {
    pub records: Vec<EvalRecord>,
    pub table: ReportTable,
    /// Predicted organ masks per sample, in sample order.
    pub predictions: Vec<(String, Vec<Mask>)>,
}

/// Scores a network (or the majority vote of several) on normalized test
/// samples, one image at a time.
pub fn evaluate(nets: &mut [Network<f32>], samples: &[Sample], label: &str, opts: &EvalOptions) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation needs at least one test sample".into()));
    }
    let encoding = nets
        .first()
        .ok_or_else(|| Error::Parameter("evaluation needs at least one network".into()))?
        .config()
        .head
        .encoding();
    let mut records = Vec::with_capacity(samples.len() * CLASS_NAMES.len());
    let mut predictions = Vec::with_capacity(samples.len());
    for s in samples {
        let batch = Tensor::stack_batch(&[s.image.clone().reshape(vec![1, 1, s.height(), s.width()])?])?;
        let masks = ensemble_predict(nets, &batch, opts.epsilon)?.remove(0);
        let gt = build_groundtruth(s, encoding, opts.lung_mode);
        records.extend(score_masks(&s.id, &masks, gt.organs(), opts));
        predictions.push((s.id.clone(), masks));
    }
    let table = ReportTable::from_records(label, &records);
    Ok(Evaluation {
        records,
        table,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn certain_pixel_boundary() {
        let m = certain_pixels(&[0.8, 0.75, 1.0, 0.0], 2, 2, 0.25).unwrap();
        assert_eq!(m.bits(), &[true, false, true, false]);
        assert!(certain_pixels(&[0.5], 1, 1, 0.0).is_err());
        assert!(certain_pixels(&[0.5], 1, 1, 1.0).is_err());
    }

    #[test]
    fn dice_examples() {
        let a = Mask::from_fn(10, 20, |_, x| x < 10);
        let b = Mask::from_fn(10, 20, |y, x| x < 5 || (x >= 10 && x < 15 && y < 10));
        assert_eq!(dice(&a, &a), 1.0);
        assert_eq!(dice(&a, &a.complement()), 0.0);
        assert_eq!(dice(&a, &b), 0.5);
        assert_eq!(dice(&Mask::empty(2, 2), &Mask::empty(2, 2)), 1.0);
    }

    #[test]
    fn jaccard_pairs() {
        assert!((jaccard_from_dice(0.974) - 0.9494).abs() < 1e-4);
        assert!((jaccard_from_dice(0.929) - 0.8674).abs() < 1e-4);
        assert_eq!(jaccard_from_dice(1.0), 1.0);
        assert_eq!(jaccard_from_dice(0.0), 0.0);
    }
}
