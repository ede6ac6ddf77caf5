//! Region (Jaccard) and boundary (F) accuracy for label maps.

use crate::error::{Error, Result};
use crate::label::{LabelMap, ObjectId};

fn check_dims(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::Input(format!(
            "prediction is {:?} but ground truth is {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

/// Intersection over union of the object's pixels; 1 when both are empty.
pub fn jaccard(pred: &LabelMap, gt: &LabelMap, object: ObjectId) -> Result<f64> {
    check_dims(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        let (p, g) = (p == object, g == object);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Pixels of `object` with at least one in-image 4-neighbor outside it.
pub fn boundary(map: &LabelMap, object: ObjectId) -> Vec<bool> {
    let (h, w) = map.dims();
    let inside = |y: usize, x: usize| map.get(y, x) == object;
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !inside(y, x) {
                continue;
            }
            out[y * w + x] = (y > 0 && !inside(y - 1, x))
                || (y + 1 < h && !inside(y + 1, x))
                || (x > 0 && !inside(y, x - 1))
                || (x + 1 < w && !inside(y, x + 1));
        }
    }
    out
}

/// Dilation by a disk of radius `tol` (Euclidean distance ≤ tol).
fn dilate(mask: &[bool], h: usize, w: usize, tol: usize) -> Vec<bool> {
    let r = tol as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    out[yy as usize * w + xx as usize] = true;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// Boundary precision, recall and F-measure with matches allowed within
/// `tol` pixels. Both boundaries empty scores 1, exactly one empty scores 0.
pub fn boundary_score(pred: &LabelMap, gt: &LabelMap, object: ObjectId, tol: usize) -> Result<BoundaryScore> {
    check_dims(pred, gt)?;
    let (h, w) = pred.dims();
    let pb = boundary(pred, object);
    let gb = boundary(gt, object);
    let (np, ng) = (count(&pb), count(&gb));
    match (np, ng) {
        (0, 0) => {
            return Ok(BoundaryScore {
                precision: 1.0,
                recall: 1.0,
                f: 1.0,
            })
        }
        (0, _) | (_, 0) => {
            return Ok(BoundaryScore {
                precision: if np == 0 { 1.0 } else { 0.0 },
                recall: if ng == 0 { 1.0 } else { 0.0 },
                f: 0.0,
            })
        }
        _ => {}
    }
    let gd = dilate(&gb, h, w, tol);
    let pd = dilate(&pb, h, w, tol);
    let matched_pred = pb.iter().zip(&gd).filter(|(&b, &d)| b && d).count();
    let matched_gt = gb.iter().zip(&pd).filter(|(&b, &d)| b && d).count();
    let precision = matched_pred as f64 / np as f64;
    let recall = matched_gt as f64 / ng as f64;
    let f = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(BoundaryScore { precision, recall, f })
}

pub fn boundary_f(pred: &LabelMap, gt: &LabelMap, object: ObjectId, tol: usize) -> Result<f64> {
    Ok(boundary_score(pred, gt, object, tol)?.f)
}

fn count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&b| b).count()
}

/// Default boundary tolerance: 0.8% of the image diagonal, rounded up.
pub fn default_tolerance(height: usize, width: usize) -> usize {
    (0.008 * ((height * height + width * width) as f64).sqrt()).ceil() as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> LabelMap {
        LabelMap::from_fn(h, w, |y, x| (y >= y0 && y < y1 && x >= x0 && x < x1) as u8)
    }

    #[test]
    fn jaccard_cases() {
        let a = rect(6, 6, 1, 4, 1, 4);
        assert_eq!(jaccard(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &rect(6, 6, 4, 6, 4, 6), 1).unwrap(), 0.0);
        assert_eq!(jaccard(&LabelMap::zeros(3, 3), &LabelMap::zeros(3, 3), 1).unwrap(), 1.0);
        // {a,b} vs {b,c}
        let p = LabelMap::new(1, 3, vec![1, 1, 0]).unwrap();
        let g = LabelMap::new(1, 3, vec![0, 1, 1]).unwrap();
        assert_eq!(jaccard(&p, &g, 1).unwrap(), 1.0 / 3.0);
        assert!(matches!(jaccard(&p, &LabelMap::zeros(3, 1), 1), Err(Error::Input(_))));
    }

    #[test]
    fn boundary_is_the_inner_ring() {
        let b = boundary(&rect(5, 5, 1, 4, 1, 4), 1);
        assert_eq!(count(&b), 8);
        assert!(!b[2 * 5 + 2]);
        // Image edges are not boundary.
        assert_eq!(count(&boundary(&rect(3, 3, 0, 3, 0, 3), 1)), 0);
    }

    #[test]
    fn shifted_square_within_tolerance() {
        let gt = rect(8, 8, 2, 6, 2, 6);
        let pred = rect(8, 8, 2, 6, 3, 7);
        assert_eq!(boundary_f(&pred, &gt, 1, 1).unwrap(), 1.0);
        let s = boundary_score(&pred, &gt, 1, 0).unwrap();
        // Only the top and bottom rows of overlap coincide: 6 of 12 pixels.
        assert_eq!((s.precision, s.recall, s.f), (0.5, 0.5, 0.5));
    }

    #[test]
    fn empty_cases() {
        let gt = rect(8, 8, 2, 6, 2, 6);
        let empty = LabelMap::zeros(8, 8);
        assert_eq!(boundary_f(&empty, &gt, 1, 3).unwrap(), 0.0);
        assert_eq!(boundary_f(&gt, &empty, 1, 3).unwrap(), 0.0);
        assert_eq!(boundary_f(&empty, &empty, 1, 3).unwrap(), 1.0);
    }

    #[test]
    fn symmetric_in_arguments() {
        let a = rect(10, 10, 1, 7, 2, 5);
        let b = rect(10, 10, 3, 9, 1, 8);
        for tol in 0..3 {
            assert_eq!(boundary_f(&a, &b, 1, tol).unwrap(), boundary_f(&b, &a, 1, tol).unwrap());
        }
        assert_eq!(jaccard(&a, &b, 1).unwrap(), jaccard(&b, &a, 1).unwrap());
    }

    #[test]
    fn tolerance_default() {
        assert_eq!(default_tolerance(480, 854), 8);
        assert_eq!(default_tolerance(128, 128), 2);
    }
}
