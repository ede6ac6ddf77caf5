use std::collections::BTreeMap;
use std::sync::Arc;

use super::aggregate::sorted_sum;
use super::{argmax_labels, network_dims, soft_aggregate, Network, QueryFeatures};
use crate::config::InferenceConfig;
use crate::error::{Error, Result};
use crate::label::{LabelMap, ObjectId};
use crate::nn::sinusoidal_pe_2d;
use crate::object_memory::ObjectMemory;
use crate::object_transformer::BlockTrace;
use crate::pixel_memory::{affinity, similarity, MemoryFrame, PixelMemoryBank};
use crate::tensor::{area_resize, bilinear_resize, chw_to_tokens, sigmoid, Tensor};

/// Streaming inference state for one video.
///
/// Frames are fed in order through [`step`](Self::step) once at least one
/// reference mask has been given with [`add_reference`](Self::add_reference).
/// Every object has its own value lane, hidden state and object memory; keys
/// and the pixel affinity are shared.
#[derive(Debug, Clone)]
pub struct Session {
    net: Arc<Network>,
    config: InferenceConfig,
    bank: PixelMemoryBank,
    objects: BTreeMap<ObjectId, ObjectMemory>,
    frame_dims: Option<(usize, usize)>,
    net_dims: (usize, usize),
    grid: (usize, usize),
    r_sin: Tensor,
    last_frame: Option<usize>,
    tracing: bool,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub frame_index: usize,
    pub labels: LabelMap,
    /// Whether this frame was written to memory.
    pub memorized: bool,
    /// Per-object intermediates, when tracing is enabled.
    pub traces: Vec<ObjectTrace>,
}

/// Intermediate results of one object's lane in one step.
#[derive(Debug, Clone)]
pub struct ObjectTrace {
    pub object: ObjectId,
    /// Memory readout `R_0` (`HW×C`).
    pub readout: Tensor,
    /// Object transformer output `R_L` (`HW×C`).
    pub refined: Tensor,
    pub blocks: Vec<BlockTrace>,
}

impl Session {
    pub fn new(net: Arc<Network>, config: InferenceConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            bank: PixelMemoryBank::new(config.t_max)?,
            net,
            config,
            objects: BTreeMap::new(),
            frame_dims: None,
            net_dims: (0, 0),
            grid: (0, 0),
            r_sin: Tensor::zeros([0]),
            last_frame: None,
            tracing: false,
        })
    }

    pub fn network(&self) -> &Arc<Network> {
        &self.net
    }

    pub fn config(&self) -> &InferenceConfig {
        &self.config
    }

    /// Record per-object intermediates in every [`StepOutput`].
    pub fn set_tracing(&mut self, on: bool) {
        self.tracing = on;
    }

    pub fn objects(&self) -> Vec<ObjectId> {
        self.objects.keys().copied().collect()
    }

    pub fn bank(&self) -> &PixelMemoryBank {
        &self.bank
    }

    pub fn object_memory(&self, id: ObjectId) -> Option<&ObjectMemory> {
        self.objects.get(&id)
    }

    /// Original frame size, fixed by the first reference.
    pub fn frame_dims(&self) -> Option<(usize, usize)> {
        self.frame_dims
    }

    pub fn net_dims(&self) -> (usize, usize) {
        self.net_dims
    }

    pub fn last_frame(&self) -> Option<usize> {
        self.last_frame
    }

    /// Resizes a normalized `3×H×W` frame to network resolution, fixing the
    /// session's frame size on first use.
    fn prepare(&mut self, image: &Tensor) -> Result<Tensor> {
        let (c, h, w) = image.dims3().map_err(|_| {
            Error::Input(format!("expected a 3×H×W image, got {:?}", image.shape()))
        })?;
        if c != 3 {
            return Err(Error::Input(format!("expected 3 color channels, got {c}")));
        }
        match self.frame_dims {
            Some(dims) if dims != (h, w) => {
                return Err(Error::Input(format!(
                    "frame is {h}×{w} but the session's frames are {}×{}",
                    dims.0, dims.1
                )))
            }
            Some(_) => {}
            None => {
                let net_dims = network_dims(h, w, self.config.max_short_edge)?;
                let grid = (net_dims.0 / 16, net_dims.1 / 16);
                self.r_sin = sinusoidal_pe_2d(grid.0, grid.1, self.net.config.dim)?;
                self.frame_dims = Some((h, w));
                self.net_dims = net_dims;
                self.grid = grid;
            }
        }
        bilinear_resize(image, self.net_dims.0, self.net_dims.1)
    }

    /// Registers a user-given mask for `frame_index`.
    ///
    /// The label map describes every object on that frame: objects it does not
    /// mention are recorded as absent, and new labels start new objects. The
    /// frame is written to memory and pinned if it is the first reference or
    /// `permanent` is set.
    pub fn add_reference(&mut self, frame_index: usize, image: &Tensor, mask: &LabelMap, permanent: bool) -> Result<()> {
        let (_, h, w) = image.dims3()?;
        if mask.dims() != (h, w) {
            return Err(Error::Input(format!(
                "mask is {}×{} but its frame is {h}×{w}",
                mask.height(),
                mask.width()
            )));
        }
        let image = self.prepare(image)?;
        let c = self.net.config.dim;
        for id in mask.object_ids() {
            if !self.objects.contains_key(&id) {
                self.objects.insert(id, ObjectMemory::new(self.net.config.n_queries, c));
                self.bank.set_hidden(id, Tensor::zeros([c, self.grid.0, self.grid.1]));
            }
        }
        if self.objects.is_empty() {
            return Err(Error::Input("reference mask contains no object".into()));
        }
        let masks = self
            .objects
            .keys()
            .map(|&id| Ok((id, bilinear_resize(&mask.indicator(id), self.net_dims.0, self.net_dims.1)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let query = self.net.query_encoder.forward(&image)?;
        self.memorize(frame_index, &image, &query, &masks, permanent)?;
        self.last_frame = Some(frame_index);
        Ok(())
    }

    /// Encodes every object's mask, writes the memory frame and updates the
    /// object memories. Returns each object's `C×H×W` value.
    fn memorize(
        &mut self,
        frame_index: usize,
        image: &Tensor,
        query: &QueryFeatures,
        masks: &BTreeMap<ObjectId, Tensor>,
        permanent: bool,
    ) -> Result<BTreeMap<ObjectId, Tensor>> {
        let net = Arc::clone(&self.net);
        let mut values = BTreeMap::new();
        let mut tokens = BTreeMap::new();
        let mut scratch = Vec::with_capacity(masks.len());
        for (&id, target) in masks {
            let others = Tensor::from_fn(target.shape().to_vec(), |i| {
                scratch.clear();
                scratch.extend(masks.iter().filter(|(o, _)| **o != id).map(|(_, m)| m.data()[i] as f64));
                sorted_sum(&mut scratch) as f32
            });
            let v = net.mask_encoder.forward(image, target, &others, &query.pyramid.f16)?;
            let f = chw_to_tokens(&v)?;

            let coarse = area_resize(target, self.grid.0, self.grid.1)?.reshape([self.grid.0 * self.grid.1])?;
            let u = net.object_memory.object_features(&f)?;
            let weights = net.object_memory.pooling_weights(&f, &coarse, &self.r_sin)?;
            self.objects
                .get_mut(&id)
                .ok_or_else(|| Error::State(format!("object {id} is not registered")))?
                .update(&u, &weights)?;
            tokens.insert(id, f);
            values.insert(id, v);
        }
        self.bank.insert(MemoryFrame {
            frame_index,
            key: query.key.clone(),
            shrinkage: query.shrinkage.clone(),
            values: tokens,
            pinned: permanent,
        })?;
        Ok(values)
    }

    /// Segments the next frame.
    pub fn step(&mut self, frame_index: usize, image: &Tensor) -> Result<StepOutput> {
        if self.bank.is_empty() {
            return Err(Error::State("step called before any reference mask".into()));
        }
        let image = self.prepare(image)?;
        let net = Arc::clone(&self.net);
        let query = net.query_encoder.forward(&image)?;
        let ids = self.objects();

        let mut reads = BTreeMap::new();
        for lane in self.bank.lanes(&ids)? {
            let logits = similarity(&query.key, &query.selection, &lane.keys, &lane.shrinkage)?;
            let aff = affinity(&logits, self.config.top_k)?;
            for (id, v) in lane.objects.iter().zip(&lane.values) {
                reads.insert(*id, aff.apply(v)?);
            }
        }

        let mut probs = Vec::with_capacity(ids.len());
        let mut traces = Vec::new();
        for &id in &ids {
            let hidden = self
                .bank
                .hidden(id)
                .ok_or_else(|| Error::State(format!("object {id} has no hidden state")))?
                .clone();
            let r0 = net.pixel_readout.forward(&reads[&id], &hidden)?;
            let summary = self.objects[&id].read::<f32>();
            let refined = net.object_transformer.forward(&r0, &self.r_sin, &summary, self.grid)?;
            let dec = net.decoder.forward(
                &refined.pixels,
                self.grid,
                &query.pyramid.f8,
                &query.pyramid.f4,
                self.net_dims,
            )?;
            let [g16, g8, g4] = &dec.features;
            self.bank.set_hidden(id, net.sensory_update.forward(&hidden, [g16, g8, g4])?);
            probs.push(dec.logits.map_f64(sigmoid));
            if self.tracing {
                traces.push(ObjectTrace {
                    object: id,
                    readout: r0,
                    refined: refined.pixels,
                    blocks: refined.blocks,
                });
            }
        }

        let dist = soft_aggregate(&probs)?;
        let (h, w) = self.frame_dims.expect("set by prepare");
        let full = dist
            .iter()
            .map(|m| bilinear_resize(m, h, w))
            .collect::<Result<Vec<_>>>()?;
        let mut labels_ids = vec![0];
        labels_ids.extend(&ids);
        let labels = argmax_labels(&full, &labels_ids, h, w)?;

        let memorized = frame_index.is_multiple_of(self.config.mem_interval);
        if memorized {
            let masks: BTreeMap<ObjectId, Tensor> = ids.iter().copied().zip(dist.into_iter().skip(1)).collect();
            let values = self.memorize(frame_index, &image, &query, &masks, false)?;
            for (id, v) in values {
                let h = self.bank.hidden(id).expect("every object has hidden state");
                let h = net.deep_update.forward(h, &v)?;
                self.bank.set_hidden(id, h);
            }
        }
        self.last_frame = Some(frame_index);
        Ok(StepOutput {
            frame_index,
            labels,
            memorized,
            traces,
        })
    }
}
