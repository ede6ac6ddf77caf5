//! Run-length encoding of label maps for progress previews.

use serde::{Deserialize, Serialize};

use qtvos_core::LabelMap;

/// Row-major runs of `[label, length]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RlePreview {
    pub height: usize,
    pub width: usize,
    pub runs: Vec<[u32; 2]>,
}

impl RlePreview {
    pub fn encode(map: &LabelMap) -> Self {
        let mut runs: Vec<[u32; 2]> = Vec::new();
        for &label in map.labels() {
            match runs.last_mut() {
                Some([l, n]) if *l == label as u32 => *n += 1,
                _ => runs.push([label as u32, 1]),
            }
        }
        Self {
            height: map.height(),
            width: map.width(),
            runs,
        }
    }

    pub fn decode(&self) -> Option<LabelMap> {
        let mut labels = Vec::with_capacity(self.height * self.width);
        for &[label, n] in &self.runs {
            let label = u8::try_from(label).ok()?;
            labels.extend(std::iter::repeat_n(label, n as usize));
        }
        LabelMap::new(self.height, self.width, labels).ok()
    }
}
