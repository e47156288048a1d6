//! Overlap metrics on binary masks and BraTS-style region composition.

use crate::error::{Error, Result};

fn check_dims(pred: &[bool], gt: &[bool], op: &'static str) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::shape(op, "voxels", gt.len(), pred.len()));
    }
    Ok(())
}

/// `(|P∩G|, |P|, |G|)`.
fn counts(pred: &[bool], gt: &[bool]) -> (usize, usize, usize) {
    pred.iter().zip(gt).fold((0, 0, 0), |(i, p, g), (&a, &b)| {
        (
            i + usize::from(a && b),
            p + usize::from(a),
            g + usize::from(b),
        )
    })
}

/// `2|P∩G| / (|P| + |G|)`, and 1 when both masks are empty.
pub fn dice_coefficient(pred: &[bool], gt: &[bool]) -> Result<f64> {
    check_dims(pred, gt, "dice_coefficient")?;
    let (i, p, g) = counts(pred, gt);
    Ok(if p + g == 0 {
        1.0
    } else {
        2.0 * i as f64 / (p + g) as f64
    })
}

/// `|P∩G| / |G|`, and 1 when the ground truth is empty.
pub fn pixel_recall(pred: &[bool], gt: &[bool]) -> Result<f64> {
    check_dims(pred, gt, "pixel_recall")?;
    let (i, _, g) = counts(pred, gt);
    Ok(if g == 0 { 1.0 } else { i as f64 / g as f64 })
}

/// Fraction of `region` voxels that `pred` marks; `None` if the region is
/// empty.
pub fn coverage(pred: &[bool], region: &[bool]) -> Result<Option<f64>> {
    check_dims(pred, region, "coverage")?;
    let (i, _, g) = counts(pred, region);
    Ok((g > 0).then(|| i as f64 / g as f64))
}

/// BraTS tumor sub-region labels.
pub mod brats {
    pub const BACKGROUND: u8 = 0;
    pub const NECROTIC: u8 = 1;
    pub const EDEMA: u8 = 2;
    pub const ENHANCING: u8 = 3;
}

/// Whole tumor, tumor core and enhancing tumor masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Regions {
    pub wt: Vec<bool>,
    pub tc: Vec<bool>,
    pub en: Vec<bool>,
}

/// EN = enhancing, TC = enhancing ∪ necrotic, WT = TC ∪ edema.
pub fn compose_regions(labels: &[u8]) -> Result<Regions> {
    use brats::*;
    let mut r = Regions {
        wt: Vec::with_capacity(labels.len()),
        tc: Vec::with_capacity(labels.len()),
        en: Vec::with_capacity(labels.len()),
    };
    for &l in labels {
        if l > ENHANCING {
            return Err(Error::LabelOutOfRange {
                label: l.into(),
                classes: 4,
            });
        }
        let en = l == ENHANCING;
        let tc = en || l == NECROTIC;
        r.en.push(en);
        r.tc.push(tc);
        r.wt.push(tc || l == EDEMA);
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> Vec<bool> {
        bits.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn dice_examples() {
        let a = mask(&[1, 1, 0, 0]);
        assert_eq!(dice_coefficient(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_coefficient(&a, &mask(&[0, 0, 1, 1])).unwrap(), 0.0);
        let p = mask(&[1, 1, 1, 1, 0, 0]);
        let g = mask(&[0, 0, 1, 1, 1, 1]);
        assert_eq!(dice_coefficient(&p, &g).unwrap(), 0.5);
        assert_eq!(dice_coefficient(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert!(dice_coefficient(&a, &[true]).is_err());
    }

    #[test]
    fn recall_examples() {
        let g = mask(&[0, 0, 1, 1, 1, 1]);
        assert_eq!(pixel_recall(&[true; 6], &g).unwrap(), 1.0);
        assert_eq!(pixel_recall(&[false; 6], &g).unwrap(), 0.0);
        assert_eq!(pixel_recall(&mask(&[1, 1, 1, 1, 0, 0]), &g).unwrap(), 0.5);
        assert_eq!(pixel_recall(&[true, false], &[false, false]).unwrap(), 1.0);
    }

    #[test]
    fn regions() {
        let r = compose_regions(&[0; 5]).unwrap();
        assert!(r.wt.iter().chain(&r.tc).chain(&r.en).all(|&b| !b));
        let r = compose_regions(&[0, brats::ENHANCING, 0]).unwrap();
        assert_eq!((r.en[1], r.tc[1], r.wt[1]), (true, true, true));
        let r = compose_regions(&[brats::NECROTIC, brats::EDEMA]).unwrap();
        assert_eq!(r.en, vec![false, false]);
        assert_eq!(r.tc, vec![true, false]);
        assert_eq!(r.wt, vec![true, true]);
        assert!(matches!(
            compose_regions(&[4]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }
}
