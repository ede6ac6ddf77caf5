use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::label::ObjectId;
use crate::tensor::{Element, Tensor};

/// One memory frame: shared keys and shrinkage plus one value map per object.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryFrame<T: Element = f32> {
    pub frame_index: usize,
    /// `HW×Ck`.
    pub key: Tensor<T>,
    /// `HW`, each `≥ 1`.
    pub shrinkage: Tensor<T>,
    /// `HW×C` per object.
    pub values: BTreeMap<ObjectId, Tensor<T>>,
    pub pinned: bool,
}

/// Keys and values gathered from every frame holding a given set of objects.
#[derive(Debug, Clone)]
pub struct MemoryLane<T: Element = f32> {
    pub objects: Vec<ObjectId>,
    /// `THW×Ck`.
    pub keys: Tensor<T>,
    /// `THW`.
    pub shrinkage: Tensor<T>,
    /// `THW×C` per object, in `objects` order.
    pub values: Vec<Tensor<T>>,
}

/// Pinned frames plus a FIFO of at most `t_max − 1` unpinned frames, so the
/// bank holds at most `t_max` frames when only the first frame is pinned.
/// The first frame ever inserted is pinned; later frames are pinned only when
/// inserted as permanent. Pinned frames are never evicted.
#[derive(Debug, Clone)]
pub struct PixelMemoryBank<T: Element = f32> {
    frames: Vec<MemoryFrame<T>>,
    t_max: usize,
    hidden: BTreeMap<ObjectId, Tensor<T>>,
    ever_inserted: bool,
}

impl<T: Element> PixelMemoryBank<T> {
    pub fn new(t_max: usize) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::Config(format!(
                "t_max {t_max} leaves no room beside the pinned first frame"
            )));
        }
        Ok(Self {
            frames: Vec::new(),
            t_max,
            hidden: BTreeMap::new(),
            ever_inserted: false,
        })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[MemoryFrame<T>] {
        &self.frames
    }

    /// `(frame_index, pinned)` for every stored frame, oldest first.
    pub fn entries(&self) -> Vec<(usize, bool)> {
        self.frames.iter().map(|f| (f.frame_index, f.pinned)).collect()
    }

    fn unpinned(&self) -> usize {
        self.frames.iter().filter(|f| !f.pinned).count()
    }

    /// Inserts `frame`, returning the frame index evicted to make room, if
    /// any. A frame with an index already in the bank replaces it in place
    /// and stays pinned if either version was.
    pub fn insert(&mut self, mut frame: MemoryFrame<T>) -> Result<Option<usize>> {
        let (hw, ck) = frame.key.dims2()?;
        if frame.shrinkage.len() != hw {
            return Err(Error::dim(format!(
                "{} shrinkage entries for {hw} keys",
                frame.shrinkage.len()
            )));
        }
        for v in frame.values.values() {
            if v.dims2()?.0 != hw {
                return Err(Error::dim(format!("value map {:?} for {hw} keys", v.shape())));
            }
        }
        if let Some(first) = self.frames.first() {
            if first.key.shape() != [hw, ck] {
                return Err(Error::dim(format!(
                    "memory frame keys {:?} differ from bank keys {:?}",
                    frame.key.shape(),
                    first.key.shape()
                )));
            }
        }
        if !self.ever_inserted {
            frame.pinned = true;
            self.ever_inserted = true;
        }
        if let Some(slot) = self.frames.iter_mut().find(|f| f.frame_index == frame.frame_index) {
            frame.pinned |= slot.pinned;
            *slot = frame;
            return Ok(None);
        }
        let mut evicted = None;
        if !frame.pinned && self.unpinned() >= self.t_max - 1 {
            let oldest = self
                .frames
                .iter()
                .position(|f| !f.pinned)
                .expect("unpinned count is positive");
            evicted = Some(self.frames.remove(oldest).frame_index);
        }
        self.frames.push(frame);
        Ok(evicted)
    }

    /// Drops every frame and hidden state, as if freshly created.
    pub fn clear(&mut self) {
        self.frames.clear();
        self.hidden.clear();
        self.ever_inserted = false;
    }

    pub fn hidden(&self, id: ObjectId) -> Option<&Tensor<T>> {
        self.hidden.get(&id)
    }

    pub fn set_hidden(&mut self, id: ObjectId, h: Tensor<T>) {
        self.hidden.insert(id, h);
    }

    /// Objects with at least one value map, ascending.
    pub fn objects(&self) -> Vec<ObjectId> {
        let mut ids: Vec<ObjectId> = self.frames.iter().flat_map(|f| f.values.keys().copied()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Groups `objects` by the set of frames that hold a value for them, so
    /// objects seeing the same frames can share one affinity.
    pub fn lanes(&self, objects: &[ObjectId]) -> Result<Vec<MemoryLane<T>>> {
        let mut groups: BTreeMap<Vec<usize>, Vec<ObjectId>> = BTreeMap::new();
        for &id in objects {
            let frames: Vec<usize> = (0..self.frames.len())
                .filter(|&i| self.frames[i].values.contains_key(&id))
                .collect();
            if frames.is_empty() {
                return Err(Error::State(format!("object {id} has no memory frame")));
            }
            groups.entry(frames).or_default().push(id);
        }
        groups
            .into_iter()
            .map(|(frames, objects)| {
                let keys: Vec<&Tensor<T>> = frames.iter().map(|&i| &self.frames[i].key).collect();
                let shrink: Vec<T> = frames
                    .iter()
                    .flat_map(|&i| self.frames[i].shrinkage.data().iter().copied())
                    .collect();
                let values = objects
                    .iter()
                    .map(|id| {
                        let parts: Vec<&Tensor<T>> = frames.iter().map(|&i| &self.frames[i].values[id]).collect();
                        Tensor::vstack(&parts)
                    })
                    .collect::<Result<_>>()?;
                Ok(MemoryLane {
                    keys: Tensor::vstack(&keys)?,
                    shrinkage: Tensor::new([shrink.len()], shrink)?,
                    values,
                    objects,
                })
            })
            .collect()
    }
}
