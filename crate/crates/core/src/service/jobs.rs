//! Job registry and the bounded sampling worker pool.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, Sender, TrySendError};
use serde::Serialize;

use crate::diffusion::{Model, Tensor};
use crate::features::build_feature_pyramid;
use crate::imageio::encode_png;
use crate::layout::{BinaryMask, Layout};
use crate::sampling::{inpaint, sample_one, GuidanceConfig, InpaintRequest, SamplerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Generate,
    Inpaint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Progress {
    pub completed: usize,
    pub total: usize,
}

/// Public view of a job.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Job {
    pub id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub progress: Progress,
    pub seed: u64,
    /// Paths of the result images, filled in when the job is done.
    pub results: Vec<String>,
    pub error: Option<String>,
}

impl Job {
    pub fn new(kind: JobKind, seed: u64, total_steps: usize) -> Self {
        let id = format!("job-{:016x}", rand::random::<u64>());
        Self {
            id,
            kind,
            status: JobStatus::Queued,
            progress: Progress { completed: 0, total: total_steps },
            seed,
            results: Vec::new(),
            error: None,
        }
    }
}

pub enum WorkItem {
    Generate { layout: Layout, guidance: GuidanceConfig, sampler: SamplerConfig, samples: usize },
    Inpaint { original: Tensor, mask: BinaryMask, layout: Layout, guidance: GuidanceConfig, sampler: SamplerConfig },
}

struct Entry {
    job: Job,
    images: Vec<Vec<u8>>,
    finished: Option<Instant>,
}

#[derive(Default)]
struct Table {
    entries: HashMap<String, Entry>,
    expired: HashSet<String>,
}

impl Table {
    fn sweep(&mut self, ttl: Duration) {
        let now = Instant::now();
        let stale: Vec<String> = self
            .entries
            .iter()
            .filter(|(_, e)| e.finished.is_some_and(|f| now.duration_since(f) >= ttl))
            .map(|(id, _)| id.clone())
            .collect();
        for id in stale {
            self.entries.remove(&id);
            self.expired.insert(id);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubmitError {
    QueueFull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LookupError {
    Malformed,
    Unknown,
    Expired,
}

pub struct JobRegistry {
    table: Arc<Mutex<Table>>,
    queue: Sender<(String, WorkItem)>,
    ttl: Duration,
}

fn well_formed(id: &str) -> bool {
    id.strip_prefix("job-").is_some_and(|h| h.len() == 16 && h.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()))
}

impl JobRegistry {
    pub(super) fn start(model: Option<Arc<Model>>, workers: usize, capacity: usize, ttl: Duration) -> Arc<Self> {
        let (tx, rx) = bounded(capacity.max(1));
        let table = Arc::new(Mutex::new(Table::default()));
        if let Some(model) = model {
            for n in 0..workers {
                let rx: Receiver<(String, WorkItem)> = rx.clone();
                let table = table.clone();
                let model = model.clone();
                std::thread::Builder::new()
                    .name(format!("sampler-{n}"))
                    .spawn(move || {
                        while let Ok((id, work)) = rx.recv() {
                            run_job(&model, &table, &id, work);
                        }
                    })
                    .expect("spawn sampling worker");
            }
        }
        Arc::new(Self { table, queue: tx, ttl })
    }

    pub fn submit(&self, job: Job, work: WorkItem) -> Result<(), SubmitError> {
        let id = job.id.clone();
        let mut table = self.table.lock().unwrap();
        table.sweep(self.ttl);
        table.entries.insert(id.clone(), Entry { job, images: Vec::new(), finished: None });
        match self.queue.try_send((id.clone(), work)) {
            Ok(()) => Ok(()),
            Err(TrySendError::Full(_)) | Err(TrySendError::Disconnected(_)) => {
                table.entries.remove(&id);
                Err(SubmitError::QueueFull)
            }
        }
    }

    pub fn get(&self, id: &str) -> Result<Job, LookupError> {
        self.with_entry(id, |e| e.job.clone())
    }

    pub fn result(&self, id: &str, k: usize) -> Result<Option<Vec<u8>>, LookupError> {
        self.with_entry(id, |e| e.images.get(k).cloned())
    }

    fn with_entry<T>(&self, id: &str, f: impl FnOnce(&Entry) -> T) -> Result<T, LookupError> {
        if !well_formed(id) {
            return Err(LookupError::Malformed);
        }
        let mut table = self.table.lock().unwrap();
        table.sweep(self.ttl);
        if table.expired.contains(id) {
            return Err(LookupError::Expired);
        }
        table.entries.get(id).map(f).ok_or(LookupError::Unknown)
    }
}

fn update(table: &Mutex<Table>, id: &str, f: impl FnOnce(&mut Entry)) {
    if let Some(e) = table.lock().unwrap().entries.get_mut(id) {
        f(e);
    }
}

fn run_job(model: &Model, table: &Mutex<Table>, id: &str, work: WorkItem) {
    update(table, id, |e| e.job.status = JobStatus::Running);
    let outcome = (|| -> crate::Result<Vec<Vec<u8>>> {
        match work {
            WorkItem::Generate { layout, guidance, sampler, samples } => {
                let pyramid = build_feature_pyramid(&layout, model.provider())?;
                let steps = sampler.steps as usize;
                let mut images = Vec::with_capacity(samples);
                for k in 0..samples {
                    let image = sample_one(model, &pyramid, &guidance, &sampler, k as u64, &mut |done, _| {
                        update(table, id, |e| e.job.progress.completed = e.job.progress.completed.max(k * steps + done))
                    })?;
                    images.push(encode_png(&image)?);
                }
                Ok(images)
            }
            WorkItem::Inpaint { original, mask, layout, guidance, sampler } => {
                let pyramid = build_feature_pyramid(&layout, model.provider())?;
                let request = InpaintRequest { original, mask, pyramid, guidance, sampler };
                let image = inpaint(model, &request, 0, &mut |done, _| {
                    update(table, id, |e| e.job.progress.completed = e.job.progress.completed.max(done))
                })?;
                Ok(vec![encode_png(&image)?])
            }
        }
    })();
    update(table, id, |e| {
        e.finished = Some(Instant::now());
        match outcome {
            Ok(images) => {
                e.job.results = (0..images.len()).map(|k| format!("/results/{id}/{k}")).collect();
                e.job.progress.completed = e.job.progress.total;
                e.job.status = JobStatus::Done;
                e.images = images;
            }
            Err(err) => {
                e.job.status = JobStatus::Failed;
                e.job.error = Some(err.to_string());
            }
        }
    });
}
