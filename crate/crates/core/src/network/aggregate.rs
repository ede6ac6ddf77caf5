use crate::error::{Error, Result};
use crate::label::{LabelMap, ObjectId};
use crate::tensor::Tensor;

/// Probabilities are kept inside `[CLAMP, 1 − CLAMP]` before aggregation.
pub const CLAMP: f64 = 1e-7;

/// Sums in ascending value order, so the result does not depend on the order
/// the terms were listed in.
pub(crate) fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// Merges independent per-object foreground probabilities (`H×W` each, any
/// rank, equal shapes) into one distribution per pixel over background and
/// the objects.
///
/// With `p_o` clamped to `(0, 1)` and `p_0 = Π_o (1 − p_o)`, each class gets
/// `odds_m / Σ odds` where `odds_m = p_m / (1 − p_m)`. Returns `O + 1` maps,
/// background first. Sums and products run in sorted order, so permuting the
/// objects permutes the outputs exactly.
pub fn soft_aggregate(probs: &[Tensor]) -> Result<Vec<Tensor>> {
    let first = probs
        .first()
        .ok_or_else(|| Error::Input("soft aggregation needs at least one object".into()))?;
    for p in probs {
        first.expect_same_shape(p)?;
    }
    let n = first.len();
    let objects = probs.len();
    let mut out: Vec<Vec<f32>> = vec![Vec::with_capacity(n); objects + 1];
    let mut p = vec![0.0f64; objects];
    let mut scratch = vec![0.0f64; objects + 1];
    let mut sorted = vec![0.0f64; objects + 1];
    for i in 0..n {
        for (pv, t) in p.iter_mut().zip(probs) {
            *pv = (t.data()[i] as f64).clamp(CLAMP, 1.0 - CLAMP);
        }
        scratch[..objects].iter_mut().zip(&p).for_each(|(s, v)| *s = 1.0 - v);
        scratch[..objects].sort_unstable_by(f64::total_cmp);
        let p0 = scratch[..objects].iter().product::<f64>().clamp(CLAMP, 1.0 - CLAMP);
        let odds = |v: f64| v / (1.0 - v);
        scratch[0] = odds(p0);
        for (s, &v) in scratch[1..].iter_mut().zip(&p) {
            *s = odds(v);
        }
        sorted.copy_from_slice(&scratch);
        let total = sorted_sum(&mut sorted);
        out[0].push((scratch[0] / total) as f32);
        for (m, &v) in p.iter().enumerate() {
            out[m + 1].push((odds(v) / total) as f32);
        }
    }
    out.into_iter()
        .map(|d| Tensor::new(first.shape().to_vec(), d))
        .collect()
}

/// Per-pixel argmax over `maps` (background first), labelled with `ids`
/// (`ids[0]` is the background label). Ties go to the earlier map.
pub fn argmax_labels(maps: &[Tensor], ids: &[ObjectId], height: usize, width: usize) -> Result<LabelMap> {
    if maps.len() != ids.len() || maps.is_empty() {
        return Err(Error::Input(format!("{} maps for {} labels", maps.len(), ids.len())));
    }
    for m in maps {
        if m.len() != height * width {
            return Err(Error::dim(format!("map {:?} for a {height}×{width} label map", m.shape())));
        }
    }
    let labels = (0..height * width)
        .map(|i| {
            let mut best = 0;
            for m in 1..maps.len() {
                if maps[m].data()[i] > maps[best].data()[i] {
                    best = m;
                }
            }
            ids[best]
        })
        .collect();
    LabelMap::new(height, width, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agg(ps: &[f32]) -> Vec<f32> {
        let t: Vec<Tensor> = ps.iter().map(|&p| Tensor::full([1, 1], p)).collect();
        soft_aggregate(&t).unwrap().iter().map(|m| m.data()[0]).collect()
    }

    #[test]
    fn single_object_at_half_is_balanced() {
        let out = agg(&[0.5]);
        assert!((out[0] - 0.5).abs() < 1e-6 && (out[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn saturated_object_dominates() {
        assert!(agg(&[1.0])[1] > 0.999);
        assert!(agg(&[0.0])[0] > 0.999);
    }

    #[test]
    fn equal_objects_get_equal_share() {
        let out = agg(&[0.7, 0.7, 0.2]);
        assert_eq!(out[1], out[2]);
        assert!(out[3] < out[1]);
    }

    #[test]
    fn distributions_sum_to_one() {
        for ps in [[0.1f32, 0.9, 0.5], [0.99, 0.98, 0.01], [0.3, 0.3, 0.3]] {
            let s: f32 = agg(&ps).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn permutation_is_exact() {
        let a = agg(&[0.13, 0.77, 0.41]);
        let b = agg(&[0.41, 0.13, 0.77]);
        assert_eq!(a[0], b[0]);
        assert_eq!((a[1], a[2], a[3]), (b[2], b[3], b[1]));
    }

    #[test]
    fn argmax_prefers_lower_index_on_ties() {
        let maps = vec![Tensor::full([2], 0.4f32), Tensor::full([2], 0.4), Tensor::new([2], vec![0.2, 0.5]).unwrap()];
        let labels = argmax_labels(&maps, &[0, 3, 7], 1, 2).unwrap();
        assert_eq!(labels.labels(), &[0, 7]);
    }
}
