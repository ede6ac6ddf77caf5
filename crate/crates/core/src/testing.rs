//! Seeded random inputs shared by unit tests, integration tests and benchmarks.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::object_transformer::CrossAttention;
use crate::tensor::{Element, Tensor};

pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn seeded(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.0.random_range(lo..hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn coin(&mut self) -> bool {
        self.0.random_bool(0.5)
    }
}

pub fn uniform<T: Element>(rng: &mut Rng, shape: impl Into<Vec<usize>>, lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.uniform(lo, hi)))
}

/// Step used by [`central_difference_check`].
pub const FD_STEP: f64 = 1e-5;

/// Compares [`CrossAttention::backward`] against central finite differences of
/// `Σ upstream ∘ forward(...)`, perturbing one scalar at a time in storage
/// order. Returns the relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` for every
/// input and parameter group. A group whose analytic and numeric gradients
/// are both below `1e-7` in norm (the key bias, whose effect cancels inside
/// the softmax) reports its absolute difference instead.
pub fn central_difference_check(
    layer: &CrossAttention<f64>,
    x: &Tensor<f64>,
    mem: &Tensor<f64>,
    x_pe: &Tensor<f64>,
    mem_pe: &Tensor<f64>,
    mask: Option<&Tensor<f64>>,
    upstream: &Tensor<f64>,
) -> Result<Vec<(&'static str, f64)>> {
    let (_, cache) = layer.forward_cached(x, mem, x_pe, mem_pe, mask)?;
    let analytic = layer.backward(&cache, upstream)?;

    let mut layer = layer.clone();
    let mut inputs = [x.clone(), mem.clone(), x_pe.clone(), mem_pe.clone()];
    let loss = |layer: &CrossAttention<f64>, inputs: &[Tensor<f64>; 4]| -> Result<f64> {
        let out = layer.forward(&inputs[0], &inputs[1], &inputs[2], &inputs[3], mask)?.output;
        Ok(out.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum())
    };

    let mut report = Vec::new();
    for (gi, (name, grad)) in analytic.groups().into_iter().enumerate() {
        let mut numeric = vec![0.0; grad.len()];
        for (idx, slot) in numeric.iter_mut().enumerate() {
            let orig = group(&mut layer, &mut inputs, gi).data()[idx];
            group(&mut layer, &mut inputs, gi).data_mut()[idx] = orig + FD_STEP;
            let plus = loss(&layer, &inputs)?;
            group(&mut layer, &mut inputs, gi).data_mut()[idx] = orig - FD_STEP;
            let minus = loss(&layer, &inputs)?;
            group(&mut layer, &mut inputs, gi).data_mut()[idx] = orig;
            *slot = (plus - minus) / (2.0 * FD_STEP);
        }
        let numeric = Tensor::new(grad.shape().to_vec(), numeric)?;
        let diff = grad.sub(&numeric)?.norm();
        let scale = grad.norm().max(numeric.norm());
        let err = if scale < 1e-7 { diff } else { diff / scale };
        report.push((name, err));
    }
    Ok(report)
}

/// Group `gi` in `CrossAttentionGrads::groups` order: four inputs, then parameters.
fn group<'a>(layer: &'a mut CrossAttention<f64>, inputs: &'a mut [Tensor<f64>; 4], gi: usize) -> &'a mut Tensor<f64> {
    if gi < 4 {
        &mut inputs[gi]
    } else {
        layer.params_mut().into_iter().nth(gi - 4).expect("ten parameter groups").1
    }
}

/// A reduced model shape for fast end-to-end tests.
pub fn small_model(n_blocks: usize) -> crate::config::ModelConfig {
    crate::config::ModelConfig {
        dim: 32,
        key_dim: 16,
        n_queries: 8,
        n_blocks,
        n_heads: 4,
        query_ffn_mult: 2,
        decoder_dim: 16,
        stem_channels: 8,
        backbone_channels: [16, 24, 32],
    }
}

const OBJECT_COLORS: [[u8; 3]; 6] = [
    [230, 40, 40],
    [40, 200, 60],
    [50, 70, 230],
    [230, 210, 40],
    [200, 60, 200],
    [40, 210, 210],
];

/// Frame `t` of a synthetic video: `n_objects` colored squares (ids
/// `1..=n_objects`) drifting over a textured background. Returns interleaved
/// 8-bit RGB and the ground-truth labels.
pub fn synthetic_video_frame(t: usize, height: usize, width: usize, n_objects: usize) -> (Vec<u8>, crate::LabelMap) {
    let side = (height.min(width) / 4).max(2);
    let boxes: Vec<(usize, usize)> = (0..n_objects)
        .map(|o| {
            let y = (height / 8 + o * side + t / 2) % (height - side);
            let x = (width / 8 + o * (side + side / 2) + t) % (width - side);
            (y, x)
        })
        .collect();
    let labels = crate::LabelMap::from_fn(height, width, |y, x| {
        // Later objects are drawn on top.
        boxes
            .iter()
            .enumerate()
            .rev()
            .find(|(_, &(by, bx))| y >= by && y < by + side && x >= bx && x < bx + side)
            .map_or(0, |(o, _)| o as u8 + 1)
    });
    let mut rgb = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            match labels.get(y, x) {
                0 => {
                    let v = ((x * 7 + y * 13 + (x * y) % 11) % 64) as u8 + 40;
                    rgb.extend([v, v / 2 + 30, 120 - v / 2]);
                }
                id => {
                    let [r, g, b] = OBJECT_COLORS[(id as usize - 1) % OBJECT_COLORS.len()];
                    let shade = ((x + 2 * y) % 5) as u8 * 3;
                    rgb.extend([r - shade, g - shade, b - shade]);
                }
            }
        }
    }
    (rgb, labels)
}

/// [`synthetic_video_frame`] as a standardized `3×H×W` tensor.
pub fn synthetic_video_tensor(t: usize, height: usize, width: usize, n_objects: usize) -> (Tensor, crate::LabelMap) {
    let (rgb, labels) = synthetic_video_frame(t, height, width, n_objects);
    let image = crate::io::FrameNormalization::default()
        .apply(&rgb, height, width)
        .expect("sizes agree");
    (image, labels)
}
