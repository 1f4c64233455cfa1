use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use base64::Engine;
use dragedit_core::guidance::GuidanceConfig;
use dragedit_core::image::RgbImage;
use dragedit_core::pipeline::Timings;
use dragedit_core::sampler::{RunObserver, StepRecord};
use dragedit_core::tasks::{EditRequest, EditSpec};
use dragedit_core::Error;
use serde::{Deserialize, Serialize};
use tokio::sync::watch;

use crate::store::Store;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Queued,
    Inverting,
    Sampling,
    Done,
    Failed,
    Cancelled,
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Done | Phase::Failed | Phase::Cancelled)
    }

    fn rank(self) -> u8 {
        match self {
            Phase::Queued => 0,
            Phase::Inverting => 1,
            Phase::Sampling => 2,
            Phase::Done | Phase::Failed | Phase::Cancelled => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobError {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub message: String,
}

impl From<&Error> for JobError {
    fn from(e: &Error) -> Self {
        JobError {
            field: e.field().map(str::to_string),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub result: Option<String>,
    pub previews: Vec<String>,
    pub step_log: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub v: u32,
    pub id: String,
    /// Submission order, for FIFO recovery after a restart.
    pub seq: u64,
    pub phase: Phase,
    pub bank: String,
    pub request: EditRequest,
    pub spec: EditSpec,
    pub config: GuidanceConfig,
    pub timings: Timings,
    pub steps_total: usize,
    pub steps_done: usize,
    /// Incremented when a restart finds the job mid-run and queues it again.
    pub attempt: u32,
    pub error: Option<JobError>,
    pub artifacts: Artifacts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum JobEvent {
    Phase { phase: Phase },
    Step { record: StepRecord },
    Preview { t: usize, url: String, png: String },
    Done { job: Box<Job> },
    Failed { job: Box<Job> },
    Cancelled { job: Box<Job> },
}

impl JobEvent {
    pub fn name(&self) -> &'static str {
        match self {
            JobEvent::Phase { .. } => "phase",
            JobEvent::Step { .. } => "step",
            JobEvent::Preview { .. } => "preview",
            JobEvent::Done { .. } => "done",
            JobEvent::Failed { .. } => "failed",
            JobEvent::Cancelled { .. } => "cancelled",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, JobEvent::Done { .. } | JobEvent::Failed { .. } | JobEvent::Cancelled { .. })
    }
}

/// Live state of one job. The worker running it is the only writer.
pub struct JobEntry {
    pub job: Mutex<Job>,
    pub events: Mutex<Vec<JobEvent>>,
    /// Number of events so far; subscribers wait on changes.
    pub tick: watch::Sender<usize>,
    pub cancel: AtomicBool,
}

impl JobEntry {
    pub fn new(job: Job, events: Vec<JobEvent>) -> Arc<Self> {
        let (tick, _) = watch::channel(events.len());
        Arc::new(JobEntry {
            job: Mutex::new(job),
            events: Mutex::new(events),
            tick,
            cancel: AtomicBool::new(false),
        })
    }

    pub fn snapshot(&self) -> Job {
        self.job.lock().unwrap().clone()
    }

    pub fn cancelled(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }

    pub fn emit(&self, store: &Store, event: JobEvent) {
        let id = self.job.lock().unwrap().id.clone();
        if let Err(e) = store.append_event(&id, &event) {
            log::error!("job {id}: cannot persist event: {e}");
        }
        let n = {
            let mut events = self.events.lock().unwrap();
            events.push(event);
            events.len()
        };
        self.tick.send_replace(n);
    }

    /// Moves the job forward and persists it. Backward moves are ignored.
    pub fn advance(&self, store: &Store, phase: Phase, update: impl FnOnce(&mut Job)) -> Option<Job> {
        let job = {
            let mut job = self.job.lock().unwrap();
            if job.phase.is_terminal() || phase.rank() < job.phase.rank() {
                return None;
            }
            job.phase = phase;
            update(&mut job);
            job.clone()
        };
        if let Err(e) = store.save_job(&job) {
            log::error!("job {}: cannot persist: {e}", job.id);
        }
        let event = match phase {
            Phase::Done => JobEvent::Done { job: Box::new(job.clone()) },
            Phase::Failed => JobEvent::Failed { job: Box::new(job.clone()) },
            Phase::Cancelled => JobEvent::Cancelled { job: Box::new(job.clone()) },
            p => JobEvent::Phase { phase: p },
        };
        self.emit(store, event);
        Some(job)
    }
}

/// Forwards sampler progress into the job's event log.
pub struct JobObserver<'a> {
    pub entry: &'a JobEntry,
    pub store: &'a Store,
    pub id: String,
}

impl RunObserver for JobObserver<'_> {
    fn on_step(&mut self, record: &StepRecord) {
        self.entry.job.lock().unwrap().steps_done += 1;
        self.entry.emit(self.store, JobEvent::Step { record: record.clone() });
    }

    fn on_preview(&mut self, t: usize, image: &RgbImage) {
        let png = match image.to_png() {
            Ok(p) => p,
            Err(e) => {
                log::warn!("job {}: preview at t={t} not encoded: {e}", self.id);
                return;
            }
        };
        if let Err(e) = crate::store::write_atomic(&self.store.preview_path(&self.id, t), &png) {
            log::warn!("job {}: preview at t={t} not stored: {e}", self.id);
        }
        let url = format!("/edits/{}/previews/{t}", self.id);
        self.entry.job.lock().unwrap().artifacts.previews.push(url.clone());
        self.entry.emit(
            self.store,
            JobEvent::Preview {
                t,
                url,
                png: base64::engine::general_purpose::STANDARD.encode(png),
            },
        );
    }

    fn wants_previews(&self) -> bool {
        true
    }

    fn should_cancel(&self) -> bool {
        self.entry.cancelled()
    }
}
