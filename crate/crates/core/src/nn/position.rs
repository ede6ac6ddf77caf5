use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Fixed 2D sinusoidal embedding of an `H×W` grid as `HW×C` tokens.
///
/// Coordinates are normalized (`y/H`, `x/W`) so the same relative position
/// gets the same embedding at any resolution. Channels `[0, C/2)` encode `y`
/// and `[C/2, C)` encode `x`; within each half, even channels hold `sin` and
/// odd channels `cos` of `2π·coord·ω_j` with `ω_j = 10000^(−2j/(C/2))`.
pub fn sinusoidal_pe_2d<T: Element>(h: usize, w: usize, c: usize) -> Result<Tensor<T>> {
    if c == 0 || !c.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "positional embedding width {c} is not a positive multiple of 4"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::dim(format!("positional embedding over empty grid {h}×{w}")));
    }
    let half = c / 2;
    let freqs: Vec<f64> = (0..half / 2)
        .map(|j| 2.0 * PI / 10000f64.powf(2.0 * j as f64 / half as f64))
        .collect();
    let mut out = Tensor::zeros([h * w, c]);
    for y in 0..h {
        for x in 0..w {
            let row = out.row_mut(y * w + x);
            for (axis, coord) in [(0, y as f64 / h as f64), (1, x as f64 / w as f64)] {
                for (j, f) in freqs.iter().enumerate() {
                    let base = axis * half + 2 * j;
                    row[base] = T::from_f64((coord * f).sin());
                    row[base + 1] = T::from_f64((coord * f).cos());
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_has_zero_sin_and_unit_cos() {
        let pe = sinusoidal_pe_2d::<f32>(3, 5, 16).unwrap();
        for (ch, &v) in pe.row(0).iter().enumerate() {
            assert_eq!(v, if ch % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            sinusoidal_pe_2d::<f32>(6, 7, 32).unwrap(),
            sinusoidal_pe_2d::<f32>(6, 7, 32).unwrap()
        );
    }

    #[test]
    fn same_normalized_position_across_resolutions() {
        let a = sinusoidal_pe_2d::<f64>(4, 4, 32).unwrap();
        let b = sinusoidal_pe_2d::<f64>(8, 8, 32).unwrap();
        let ra = a.row(2 * 4 + 2);
        let rb = b.row(4 * 8 + 4);
        for (x, y) in ra.iter().zip(rb) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn sin_cos_pairs_have_unit_norm() {
        let pe = sinusoidal_pe_2d::<f32>(5, 9, 24).unwrap();
        for i in 0..45 {
            for pair in pe.row(i).chunks(2) {
                let n = (pair[0] as f64).powi(2) + (pair[1] as f64).powi(2);
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn width_must_be_multiple_of_four() {
        assert!(matches!(sinusoidal_pe_2d::<f32>(2, 2, 6), Err(Error::Config(_))));
    }
}
