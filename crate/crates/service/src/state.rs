use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::Serialize;
use tokio::sync::broadcast;

use qtvos_core::runner::{propagate, Completion, Reference};
use qtvos_core::{InferenceConfig, LabelMap, ModelConfig, Network, Session, Tensor};

use crate::error::ApiError;
use crate::rle::RlePreview;

const EVENT_BUFFER: usize = 1024;

/// Server-wide state: the model and every open session.
pub struct AppState {
    model: ModelConfig,
    default_net: Arc<Network>,
    default_inference: InferenceConfig,
    seeded: Mutex<HashMap<u64, Arc<Network>>>,
    sessions: Mutex<HashMap<String, Arc<SessionHandle>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(model: ModelConfig, default_net: Arc<Network>, default_inference: InferenceConfig) -> Self {
        Self {
            model,
            default_net,
            default_inference,
            seeded: Mutex::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        }
    }

    pub fn default_inference(&self) -> &InferenceConfig {
        &self.default_inference
    }

    /// The randomly initialized network for `seed`, built once per seed.
    pub fn seeded_network(&self, seed: u64) -> Result<Arc<Network>, ApiError> {
        let mut nets = lock(&self.seeded);
        if let Some(net) = nets.get(&seed) {
            return Ok(Arc::clone(net));
        }
        let net = Arc::new(Network::random(&self.model, seed)?.1);
        nets.insert(seed, Arc::clone(&net));
        Ok(net)
    }

    pub fn create(&self, config: InferenceConfig, seed: Option<u64>) -> Result<Arc<SessionHandle>, ApiError> {
        config.validate()?;
        let net = match seed {
            Some(s) => self.seeded_network(s)?,
            None => Arc::clone(&self.default_net),
        };
        let id = format!("s{:08x}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let handle = Arc::new(SessionHandle {
            id: id.clone(),
            net,
            config,
            seed,
            data: Mutex::new(SessionData::default()),
            events: broadcast::channel(EVENT_BUFFER).0,
            cancel: AtomicBool::new(false),
        });
        lock(&self.sessions).insert(id, Arc::clone(&handle));
        Ok(handle)
    }

    pub fn get(&self, id: &str) -> Result<Arc<SessionHandle>, ApiError> {
        lock(&self.sessions)
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session `{id}`")))
    }

    pub fn remove(&self, id: &str) -> Result<Arc<SessionHandle>, ApiError> {
        let handle = lock(&self.sessions)
            .remove(id)
            .ok_or_else(|| ApiError::not_found(format!("no session `{id}`")))?;
        handle.cancel.store(true, Ordering::SeqCst);
        Ok(handle)
    }
}

pub(crate) fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    // A panic while holding the lock leaves plain data behind; keep serving.
    m.lock().unwrap_or_else(|p| p.into_inner())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    #[default]
    Idle,
    Propagating,
    Error,
}

pub struct Frame {
    pub bytes: Vec<u8>,
    pub tensor: Tensor,
}

#[derive(Default)]
pub struct SessionData {
    pub frames: Vec<Arc<Frame>>,
    pub dims: Option<(usize, usize)>,
    pub references: BTreeMap<usize, Reference>,
    pub masks: BTreeMap<usize, LabelMap>,
    pub status: Status,
    pub last_error: Option<String>,
    pub progress: usize,
    pub job: u64,
}

impl SessionData {
    pub fn ensure_idle(&self) -> Result<(), ApiError> {
        if self.status == Status::Propagating {
            Err(ApiError::busy())
        } else {
            Ok(())
        }
    }
}

/// Messages on a session's event channel.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Status {
        status: Status,
        job: u64,
        progress: usize,
    },
    Progress {
        job: u64,
        frame: usize,
        completed: usize,
        total: usize,
        preview: RlePreview,
    },
    Done {
        job: u64,
        cancelled: bool,
        completed: usize,
    },
    Failed {
        job: u64,
        message: String,
    },
}

pub struct SessionHandle {
    pub id: String,
    pub net: Arc<Network>,
    pub config: InferenceConfig,
    pub seed: Option<u64>,
    pub data: Mutex<SessionData>,
    pub events: broadcast::Sender<Event>,
    pub cancel: AtomicBool,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct JobInfo {
    pub job: u64,
    pub from: usize,
    pub total: usize,
}

impl SessionHandle {
    pub fn data(&self) -> MutexGuard<'_, SessionData> {
        lock(&self.data)
    }

    fn emit(&self, event: Event) {
        // Nobody listening is fine.
        let _ = self.events.send(event);
    }

    /// Validates and marks the session busy; the caller then runs
    /// [`run_job`](Self::run_job) off the request path.
    pub fn start_job(&self, from: usize) -> Result<JobInfo, ApiError> {
        let mut data = self.data();
        data.ensure_idle()?;
        let n = data.frames.len();
        if from >= n {
            return Err(ApiError::bad_request(format!("cannot start at frame {from} of {n}")));
        }
        if data.references.range(..=from).next().is_none() {
            return Err(ApiError::conflict(format!("no reference mask at or before frame {from}")));
        }
        data.status = Status::Propagating;
        data.last_error = None;
        data.progress = 0;
        data.job += 1;
        self.cancel.store(false, Ordering::SeqCst);
        let info = JobInfo {
            job: data.job,
            from,
            total: n - from,
        };
        self.emit(Event::Status {
            status: Status::Propagating,
            job: info.job,
            progress: 0,
        });
        Ok(info)
    }

    /// Runs a propagation started by [`start_job`](Self::start_job). Blocks.
    pub fn run_job(&self, info: JobInfo) {
        let (frames, references) = {
            let data = self.data();
            (data.frames.clone(), data.references.clone())
        };
        let mut completed = 0;
        let result = Session::new(Arc::clone(&self.net), self.config.clone()).and_then(|mut session| {
            propagate(
                &mut session,
                frames.len(),
                &references,
                info.from,
                |i| Ok(frames[i].tensor.clone()),
                |out| {
                    completed += 1;
                    let preview = RlePreview::encode(&out.labels);
                    {
                        let mut data = self.data();
                        data.masks.insert(out.frame_index, out.labels);
                        data.progress = completed;
                    }
                    self.emit(Event::Progress {
                        job: info.job,
                        frame: out.frame_index,
                        completed,
                        total: info.total,
                        preview,
                    });
                    !self.cancel.load(Ordering::SeqCst)
                },
            )
        });
        let mut data = self.data();
        match result {
            Ok(done) => {
                data.status = Status::Idle;
                self.emit(Event::Done {
                    job: info.job,
                    cancelled: matches!(done, Completion::Cancelled { .. }),
                    completed,
                });
            }
            Err(e) => {
                tracing::warn!(session = %self.id, error = %e, "propagation failed");
                data.status = Status::Error;
                data.last_error = Some(e.to_string());
                self.emit(Event::Failed {
                    job: info.job,
                    message: e.to_string(),
                });
            }
        }
    }

    pub fn request_cancel(&self) {
        self.cancel.store(true, Ordering::SeqCst);
    }

    pub fn status_event(&self) -> Event {
        let data = self.data();
        Event::Status {
            status: data.status,
            job: data.job,
            progress: data.progress,
        }
    }
}
