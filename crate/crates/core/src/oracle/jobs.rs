//! Persisted job queue between the oracle's monitor and its workers.
//!
//! `jobs.jsonl` holds one record per state change; on load the last record
//! per request id wins, so a job that was running when the process died
//! comes back runnable.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datastore::{append_jsonl, read_jsonl, DatastoreError};
use crate::ledger::{Address, MicroAlgo};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_final(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

/// Money movements attributed to one request.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Settlement {
    pub paid: MicroAlgo,
    pub fee: MicroAlgo,
    pub refunded: MicroAlgo,
    pub rewards: MicroAlgo,
    /// Rewards beyond `paid - fee`, covered from the oracle's own balance.
    pub shortfall: MicroAlgo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingJob {
    pub request_txn_id: String,
    pub op: String,
    pub args: BTreeMap<String, Value>,
    pub payer: Address,
    pub paid: MicroAlgo,
    pub round: u64,
    pub timestamp: i64,
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub settlement: Option<Settlement>,
}

struct Inner {
    jobs: Vec<PendingJob>,
    index: HashMap<String, usize>,
    claimed: HashSet<String>,
}

pub struct JobQueue {
    path: PathBuf,
    inner: Mutex<Inner>,
    ready: Condvar,
}

impl JobQueue {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, DatastoreError> {
        let path = path.into();
        let mut inner = Inner {
            jobs: Vec::new(),
            index: HashMap::new(),
            claimed: HashSet::new(),
        };
        for record in read_jsonl::<PendingJob>(&path)? {
            match inner.index.get(&record.request_txn_id) {
                Some(&i) => inner.jobs[i] = record,
                None => {
                    inner.index.insert(record.request_txn_id.clone(), inner.jobs.len());
                    inner.jobs.push(record);
                }
            }
        }
        Ok(Self {
            path,
            inner: Mutex::new(inner),
            ready: Condvar::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Adds a queued job unless one already exists for the request id.
    pub fn enqueue(&self, mut job: PendingJob) -> Result<bool, DatastoreError> {
        let mut guard = self.inner.lock().expect("job lock");
        let inner = &mut *guard;
        if inner.index.contains_key(&job.request_txn_id) {
            return Ok(false);
        }
        job.status = JobStatus::Queued;
        append_jsonl(&self.path, &job)?;
        inner.index.insert(job.request_txn_id.clone(), inner.jobs.len());
        inner.jobs.push(job);
        self.ready.notify_one();
        Ok(true)
    }

    /// Oldest unclaimed job that has not finished, marked running.
    pub fn claim(&self) -> Result<Option<PendingJob>, DatastoreError> {
        let mut guard = self.inner.lock().expect("job lock");
        let inner = &mut *guard;
        let Some(i) = inner
            .jobs
            .iter()
            .position(|j| !j.status.is_final() && !inner.claimed.contains(&j.request_txn_id))
        else {
            return Ok(None);
        };
        let mut job = inner.jobs[i].clone();
        if job.status != JobStatus::Running {
            job.status = JobStatus::Running;
            append_jsonl(&self.path, &job)?;
            inner.jobs[i] = job.clone();
        }
        inner.claimed.insert(job.request_txn_id.clone());
        Ok(Some(job))
    }

    /// Claims a job, waiting up to `timeout` for one to arrive.
    pub fn claim_wait(&self, timeout: Duration) -> Result<Option<PendingJob>, DatastoreError> {
        if let Some(job) = self.claim()? {
            return Ok(Some(job));
        }
        let guard = self.inner.lock().expect("job lock");
        let _unused = self.ready.wait_timeout(guard, timeout).expect("job lock");
        drop(_unused);
        self.claim()
    }

    /// Gives a claimed job back without changing its status.
    pub fn release(&self, id: &str) {
        self.inner.lock().expect("job lock").claimed.remove(id);
        self.ready.notify_one();
    }

    pub fn finish(
        &self,
        id: &str,
        status: JobStatus,
        error: Option<String>,
        settlement: Option<Settlement>,
    ) -> Result<(), DatastoreError> {
        let mut guard = self.inner.lock().expect("job lock");
        let inner = &mut *guard;
        let Some(&i) = inner.index.get(id) else {
            return Ok(());
        };
        let mut job = inner.jobs[i].clone();
        job.status = status;
        job.error = error;
        job.settlement = settlement;
        append_jsonl(&self.path, &job)?;
        inner.jobs[i] = job;
        inner.claimed.remove(id);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<PendingJob> {
        let inner = self.inner.lock().expect("job lock");
        inner.index.get(id).map(|&i| inner.jobs[i].clone())
    }

    pub fn list(&self) -> Vec<PendingJob> {
        self.inner.lock().expect("job lock").jobs.clone()
    }

    pub fn pending(&self) -> usize {
        self.inner
            .lock()
            .expect("job lock")
            .jobs
            .iter()
            .filter(|j| !j.status.is_final())
            .count()
    }

    /// Wakes every waiting worker (used on shutdown).
    pub fn notify_all(&self) {
        self.ready.notify_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn job(id: &str) -> PendingJob {
        PendingJob {
            request_txn_id: id.into(),
            op: "<UP_DATASET>".into(),
            args: BTreeMap::new(),
            payer: "P".into(),
            paid: 5,
            round: 1,
            timestamp: 0,
            status: JobStatus::Queued,
            error: None,
            settlement: None,
        }
    }

    #[test]
    fn one_job_per_request_id() {
        let dir = tempfile::tempdir().unwrap();
        let q = JobQueue::open(dir.path().join("jobs.jsonl")).unwrap();
        assert!(q.enqueue(job("a")).unwrap());
        assert!(!q.enqueue(job("a")).unwrap());
        assert_eq!(q.list().len(), 1);
    }

    #[test]
    fn claims_in_arrival_order_without_double_claiming() {
        let dir = tempfile::tempdir().unwrap();
        let q = JobQueue::open(dir.path().join("jobs.jsonl")).unwrap();
        for id in ["a", "b"] {
            q.enqueue(job(id)).unwrap();
        }
        let first = q.claim().unwrap().unwrap();
        assert_eq!(first.request_txn_id, "a");
        assert_eq!(first.status, JobStatus::Running);
        assert_eq!(q.claim().unwrap().unwrap().request_txn_id, "b");
        assert!(q.claim().unwrap().is_none());
        q.finish("a", JobStatus::Done, None, Some(Settlement::default()))
            .unwrap();
        q.release("b");
        assert_eq!(q.claim().unwrap().unwrap().request_txn_id, "b");
    }

    #[test]
    fn running_jobs_are_resumed_after_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("jobs.jsonl");
        {
            let q = JobQueue::open(&path).unwrap();
            for id in ["a", "b", "c"] {
                q.enqueue(job(id)).unwrap();
            }
            q.claim().unwrap();
            q.finish("a", JobStatus::Failed, Some("underpaid".into()), None)
                .unwrap();
            q.claim().unwrap();
        }
        let q = JobQueue::open(&path).unwrap();
        assert_eq!(q.get("a").unwrap().status, JobStatus::Failed);
        assert_eq!(q.get("b").unwrap().status, JobStatus::Running);
        assert_eq!(q.pending(), 2);
        assert_eq!(q.claim().unwrap().unwrap().request_txn_id, "b");
        assert!(!q.enqueue(job("a")).unwrap());
    }

    #[test]
    fn status_only_moves_forward_in_the_log() {
        assert!(JobStatus::Done.is_final() && JobStatus::Failed.is_final());
        assert!(!JobStatus::Running.is_final());
    }
}
