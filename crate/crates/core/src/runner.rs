//! Forward propagation over a frame sequence, shared by every front end.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::network::{Session, StepOutput};
use crate::tensor::Tensor;

/// A user-given mask for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub mask: LabelMap,
    pub permanent: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completion {
    Finished,
    Cancelled { at: usize },
}

/// Propagates masks forward from frame `from` through `n_frames - 1`.
///
/// `session` must be fresh. References on frames before `from` are loaded
/// first, in frame order, so the memory reflects exactly those references;
/// later references are added when their frame is reached and reported as
/// that frame's output. Frames before `from` produce no output.
/// `on_output` returns `false` to cancel after the frame it was given.
pub fn propagate<F, C>(
    session: &mut Session,
    n_frames: usize,
    references: &BTreeMap<usize, Reference>,
    from: usize,
    mut frame: F,
    mut on_output: C,
) -> Result<Completion>
where
    F: FnMut(usize) -> Result<Tensor>,
    C: FnMut(StepOutput) -> bool,
{
    if session.last_frame().is_some() {
        return Err(Error::State("propagation needs a fresh session".into()));
    }
    if from >= n_frames {
        return Err(Error::Input(format!("start frame {from} of {n_frames}")));
    }
    if let Some(&last) = references.keys().next_back() {
        if last >= n_frames {
            return Err(Error::Input(format!("reference on frame {last} of {n_frames}")));
        }
    }
    if references.range(..=from).next().is_none() {
        return Err(Error::State(format!("no reference mask at or before frame {from}")));
    }
    for (&index, r) in references.range(..from) {
        session.add_reference(index, &frame(index)?, &r.mask, r.permanent)?;
    }
    for index in from..n_frames {
        let image = frame(index)?;
        let out = match references.get(&index) {
            Some(r) => {
                session.add_reference(index, &image, &r.mask, r.permanent)?;
                StepOutput {
                    frame_index: index,
                    labels: r.mask.clone(),
                    memorized: true,
                    traces: Vec::new(),
                }
            }
            None => session.step(index, &image)?,
        };
        if !on_output(out) {
            return Ok(Completion::Cancelled { at: index });
        }
    }
    Ok(Completion::Finished)
}

const FRAME_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Image files directly inside `dir`, in lexicographic file-name order.
pub fn list_frames(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut frames = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_frame = path.is_file()
            && path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if is_frame {
            frames.push(path);
        }
    }
    frames.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{InferenceConfig, ModelConfig};
    use crate::network::Network;
    use std::sync::Arc;

    fn tiny() -> Arc<Network> {
        let cfg = ModelConfig {
            dim: 16,
            key_dim: 8,
            n_queries: 4,
            n_blocks: 1,
            n_heads: 2,
            query_ffn_mult: 2,
            decoder_dim: 8,
            stem_channels: 4,
            backbone_channels: [8, 8, 16],
        };
        Arc::new(Network::random(&cfg, 3).unwrap().1)
    }

    fn frame(i: usize) -> Result<Tensor> {
        Ok(Tensor::from_fn(vec![3, 32, 32], |j| ((j * 31 + i * 17) % 23) as f32 / 11.0 - 1.0))
    }

    fn reference(y: usize) -> Reference {
        Reference {
            mask: LabelMap::from_fn(32, 32, |yy, x| (yy >= y && yy < y + 8 && x < 12) as u8),
            permanent: false,
        }
    }

    fn run(refs: &BTreeMap<usize, Reference>, from: usize) -> Vec<StepOutput> {
        let mut s = Session::new(tiny(), InferenceConfig::default()).unwrap();
        let mut out = Vec::new();
        propagate(&mut s, 8, refs, from, frame, |o| {
            out.push(o);
            true
        })
        .unwrap();
        out
    }

    #[test]
    fn emits_reference_then_predictions() {
        let refs = BTreeMap::from([(0, reference(4))]);
        let out = run(&refs, 0);
        assert_eq!(out.iter().map(|o| o.frame_index).collect::<Vec<_>>(), (0..8).collect::<Vec<_>>());
        assert_eq!(out[0].labels, refs[&0].mask);
    }

    #[test]
    fn restart_only_sees_references_up_to_the_start() {
        let first = BTreeMap::from([(0, reference(4))]);
        let mut corrected = first.clone();
        corrected.insert(5, reference(20));
        let redo = run(&corrected, 5);
        assert_eq!(redo[0].frame_index, 5);
        assert_eq!(redo[0].labels, corrected[&5].mask);
        assert_eq!(redo.len(), 3);
        // A later reference does not leak into frames before it.
        let full = run(&first, 0);
        let prefix = run(&corrected, 0);
        for i in 0..5 {
            assert_eq!(prefix[i].labels, full[i].labels);
        }
        // Restarting is deterministic.
        let again = run(&corrected, 5);
        for (a, b) in redo.iter().zip(&again) {
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn cancel_and_errors() {
        let refs = BTreeMap::from([(2, reference(4))]);
        let mut s = Session::new(tiny(), InferenceConfig::default()).unwrap();
        let mut seen = 0;
        let done = propagate(&mut s, 8, &refs, 2, frame, |_| {
            seen += 1;
            seen < 3
        })
        .unwrap();
        assert_eq!(done, Completion::Cancelled { at: 4 });

        let mut s = Session::new(tiny(), InferenceConfig::default()).unwrap();
        assert!(matches!(propagate(&mut s, 8, &refs, 1, frame, |_| true), Err(Error::State(_))));
        let mut s = Session::new(tiny(), InferenceConfig::default()).unwrap();
        assert!(matches!(propagate(&mut s, 2, &refs, 0, frame, |_| true), Err(Error::Input(_))));
    }

    #[test]
    fn frames_are_listed_in_name_order() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.png", "a.jpg", "10.png", "2.png", "notes.txt"] {
            std::fs::write(dir.path().join(name), b"").unwrap();
        }
        std::fs::create_dir(dir.path().join("z.png")).unwrap();
        let names: Vec<_> = list_frames(dir.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["10.png", "2.png", "a.jpg", "b.png"]);
    }
}
