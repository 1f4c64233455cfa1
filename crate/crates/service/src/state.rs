use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use base64::Engine;
use dragedit_core::backend::{load_backend, BackendConfig, Denoiser};
use dragedit_core::bank::{read_bank, write_bank};
use dragedit_core::guidance::{GuidanceConfig, WeightOverrides};
use dragedit_core::image::RgbImage;
use dragedit_core::inversion::MemoryBank;
use dragedit_core::pipeline::{self, Timings};
use dragedit_core::tasks::EditRequest;
use dragedit_core::{Error, Result};
use tokio::sync::mpsc;

use crate::config::ServiceConfig;
use crate::jobs::{Artifacts, Job, JobEntry, JobError, JobEvent, JobObserver, Phase};
use crate::store::{content_id, BankInfo, Store};

pub const API_VERSION: u32 = 1;

pub struct AppState {
    pub config: ServiceConfig,
    pub backend: Arc<dyn Denoiser>,
    pub store: Store,
    jobs: RwLock<HashMap<String, Arc<JobEntry>>>,
    banks: Mutex<HashMap<String, Arc<MemoryBank>>>,
    queue: mpsc::UnboundedSender<String>,
    seq: AtomicU64,
}

/// Outcome of a submission: the job and whether it already existed.
pub struct Submitted {
    pub job: Job,
    pub existing: bool,
}

impl AppState {
    /// Opens the store, reloads persisted jobs and starts the worker pool.
    /// Must be called inside a Tokio runtime.
    pub fn start(config: ServiceConfig) -> Result<Arc<Self>> {
        config.validate()?;
        let backend = load_backend(&BackendConfig::resolve(&config.backend_profile)?)?;
        Self::start_with(config, backend)
    }

    pub fn start_with(config: ServiceConfig, backend: Arc<dyn Denoiser>) -> Result<Arc<Self>> {
        let store = Store::open(&config.storage_dir)?;
        let (tx, rx) = mpsc::unbounded_channel();
        let state = Arc::new(AppState {
            config,
            backend,
            store,
            jobs: RwLock::new(HashMap::new()),
            banks: Mutex::new(HashMap::new()),
            queue: tx,
            seq: AtomicU64::new(0),
        });
        state.recover()?;
        let rx = Arc::new(tokio::sync::Mutex::new(rx));
        for _ in 0..state.config.workers {
            let (state, rx) = (Arc::clone(&state), Arc::clone(&rx));
            tokio::spawn(async move {
                loop {
                    let Some(id) = rx.lock().await.recv().await else {
                        break;
                    };
                    let st = Arc::clone(&state);
                    if let Err(e) = tokio::task::spawn_blocking(move || st.execute(&id)).await {
                        log::error!("worker panicked: {e}");
                    }
                }
            });
        }
        Ok(state)
    }

    fn recover(&self) -> Result<()> {
        let mut max_seq = 0;
        for (mut job, mut events) in self.store.load_jobs()? {
            max_seq = max_seq.max(job.seq + 1);
            let requeue = !job.phase.is_terminal();
            if requeue && job.phase != Phase::Queued {
                job.phase = Phase::Queued;
                job.attempt += 1;
                job.steps_done = 0;
                job.artifacts = Artifacts::default();
                self.store.reset_events(&job.id)?;
                self.store.save_job(&job)?;
                events.clear();
            }
            let id = job.id.clone();
            self.jobs.write().unwrap().insert(id.clone(), JobEntry::new(job, events));
            if requeue {
                log::info!("requeueing job {id}");
                let _ = self.queue.send(id);
            }
        }
        self.seq.store(max_seq, Ordering::SeqCst);
        Ok(())
    }

    pub fn job(&self, id: &str) -> Option<Arc<JobEntry>> {
        self.jobs.read().unwrap().get(id).cloned()
    }

    pub fn put_image(&self, png: &[u8]) -> Result<(String, RgbImage)> {
        let image = RgbImage::from_png(png).map_err(|e| Error::contract("image", e.to_string()))?;
        let (h, w) = self.backend.profile().image_size();
        if (image.height, image.width) != (h, w) {
            return Err(Error::contract(
                "image",
                format!("{}x{} image, backend expects {h}x{w}", image.height, image.width),
            ));
        }
        Ok((self.store.put_image(png)?, image))
    }

    fn load_image(&self, id: &str, field: &str) -> Result<RgbImage> {
        let bytes = std::fs::read(self.store.image_path(id))
            .map_err(|_| Error::contract(field, format!("unknown image `{id}`")))?;
        RgbImage::from_png(&bytes)
    }

    /// Inverts an uploaded image unless an identical bank exists. Blocking.
    pub fn create_bank(
        &self,
        image: &str,
        reference: Option<&str>,
        prompt: &str,
        steps: Option<usize>,
    ) -> Result<(BankInfo, bool)> {
        let steps = steps.unwrap_or(self.config.steps);
        if steps == 0 {
            return Err(Error::contract("steps", "must be at least 1"));
        }
        let profile_hash = self.backend.profile().hash();
        let id = content_id(&[
            image.as_bytes(),
            reference.unwrap_or("").as_bytes(),
            prompt.as_bytes(),
            &steps.to_le_bytes(),
            profile_hash.as_bytes(),
        ]);
        if let Some(info) = self.store.bank_info(&id) {
            return Ok((info, true));
        }
        let img = self.load_image(image, "image")?;
        let reference_img = reference.map(|r| self.load_image(r, "reference")).transpose()?;
        let prepared = pipeline::prepare(self.backend.as_ref(), steps, &img, reference_img.as_ref(), prompt)?;
        write_bank(&prepared.bank, self.store.bank_dir(&id))?;
        let info = BankInfo {
            v: API_VERSION,
            id: id.clone(),
            image: image.into(),
            reference: reference.map(str::to_string),
            prompt: prompt.into(),
            steps,
            has_reference: prepared.bank.has_reference,
            profile_hash,
            preparing_seconds: prepared.preparing_seconds,
        };
        self.store.put_bank_info(&info)?;
        self.banks.lock().unwrap().insert(id, Arc::new(prepared.bank));
        Ok((info, false))
    }

    pub fn bank_info(&self, id: &str) -> Option<BankInfo> {
        self.store.bank_info(id)
    }

    fn bank(&self, id: &str) -> Result<Arc<MemoryBank>> {
        if let Some(b) = self.banks.lock().unwrap().get(id) {
            return Ok(Arc::clone(b));
        }
        let bank = Arc::new(read_bank(self.store.bank_dir(id))?);
        self.banks.lock().unwrap().insert(id.into(), Arc::clone(&bank));
        Ok(bank)
    }

    /// Validates and enqueues an edit; identical submissions share a job.
    pub fn submit(&self, bank: &str, request: EditRequest, overrides: &WeightOverrides) -> Result<Submitted> {
        let info = self
            .bank_info(bank)
            .ok_or_else(|| Error::contract("bank", format!("unknown bank `{bank}`")))?;
        let spec = request.build()?;
        if spec.uses_reference_image && !info.has_reference {
            return Err(Error::contract(
                "bank",
                format!("{:?} needs a bank built with a reference image", spec.kind),
            ));
        }
        let (h, w) = self.backend.profile().image_size();
        if spec.dims() != (h, w) {
            return Err(Error::contract(
                "masks",
                format!("masks are {:?}, images are {h}x{w}", spec.dims()),
            ));
        }
        let config = GuidanceConfig::resolve(&spec, overrides, &WeightOverrides::default())?;
        if config.n_gated > info.steps {
            return Err(Error::contract(
                "n_gated",
                format!("{} exceeds the bank's {} steps", config.n_gated, info.steps),
            ));
        }
        let id = content_id(&[
            bank.as_bytes(),
            &serde_json::to_vec(&request)?,
            &serde_json::to_vec(&config)?,
        ]);
        let mut jobs = self.jobs.write().unwrap();
        if let Some(entry) = jobs.get(&id) {
            return Ok(Submitted {
                job: entry.snapshot(),
                existing: true,
            });
        }
        let job = Job {
            v: API_VERSION,
            id: id.clone(),
            seq: self.seq.fetch_add(1, Ordering::SeqCst),
            phase: Phase::Queued,
            bank: bank.into(),
            request,
            spec,
            config,
            timings: Timings {
                preparing_seconds: info.preparing_seconds,
                inference_seconds: 0.0,
            },
            steps_total: info.steps,
            steps_done: 0,
            attempt: 0,
            error: None,
            artifacts: Artifacts::default(),
        };
        self.store.save_job(&job)?;
        jobs.insert(id.clone(), JobEntry::new(job.clone(), Vec::new()));
        drop(jobs);
        self.queue
            .send(id)
            .map_err(|_| Error::Unavailable("worker pool stopped".into()))?;
        Ok(Submitted { job, existing: false })
    }

    /// Requests cancellation. `Ok(None)` when the job already finished.
    pub fn cancel(&self, id: &str) -> Option<Option<Job>> {
        let entry = self.job(id)?;
        if entry.snapshot().phase.is_terminal() {
            return Some(None);
        }
        entry.cancel.store(true, Ordering::SeqCst);
        if entry.snapshot().phase == Phase::Queued {
            entry.advance(&self.store, Phase::Cancelled, |_| {});
        }
        Some(Some(entry.snapshot()))
    }

    /// Runs one job to a terminal phase. Blocking.
    fn execute(&self, id: &str) {
        let Some(entry) = self.job(id) else { return };
        if entry.snapshot().phase.is_terminal() {
            return;
        }
        if entry.cancelled() {
            entry.advance(&self.store, Phase::Cancelled, |_| {});
            return;
        }
        let outcome = self.run(id, &entry);
        match outcome {
            Ok(()) => {}
            Err(Error::Cancelled(t)) => {
                log::info!("job {id} cancelled at t={t}");
                entry.advance(&self.store, Phase::Cancelled, |_| {});
            }
            Err(e) => {
                log::warn!("job {id} failed: {e}");
                entry.advance(&self.store, Phase::Failed, |j| j.error = Some(JobError::from(&e)));
            }
        }
    }

    fn run(&self, id: &str, entry: &JobEntry) -> Result<()> {
        entry.advance(&self.store, Phase::Inverting, |_| {});
        let job = entry.snapshot();
        let bank = self.bank(&job.bank)?;
        entry.advance(&self.store, Phase::Sampling, |_| {});
        let mut observer = JobObserver {
            entry,
            store: &self.store,
            id: id.into(),
        };
        let edited = pipeline::edit(self.backend.as_ref(), &bank, &job.spec, &job.config, &mut observer)?;
        let png = edited.image.to_png()?;
        crate::store::write_atomic(&self.store.result_path(id), &png)?;
        crate::store::write_atomic(
            &self.store.job_dir(id).join("steps.jsonl"),
            edited.output.state.step_log_jsonl().as_bytes(),
        )?;
        // The final frame is the result itself.
        entry.emit(
            &self.store,
            JobEvent::Preview {
                t: 0,
                url: format!("/edits/{id}/result"),
                png: base64::engine::general_purpose::STANDARD.encode(&png),
            },
        );
        entry.advance(&self.store, Phase::Done, |j| {
            j.timings.inference_seconds = edited.inference_seconds;
            j.artifacts.result = Some(format!("/edits/{id}/result"));
            j.artifacts.step_log = Some(format!("/edits/{id}/steps"));
        });
        Ok(())
    }
}
