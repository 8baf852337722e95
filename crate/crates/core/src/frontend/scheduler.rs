//! Simulated batch scheduler: strict FIFO with head-of-line blocking and
//! no backfill, driven by a virtual clock.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::domain::{JobState, JobStatus};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunningJob {
    pub job_id: String,
    pub nodes: u32,
    pub end_time: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueuedJob {
    pub job_id: String,
    pub nodes: u32,
    pub walltime_s: u64,
}

/// A job starting or finishing at a virtual time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifecycleEvent {
    pub time: u64,
    pub job_id: String,
    pub state: JobState,
}

#[derive(Clone, Debug)]
pub struct Scheduler {
    capacity_nodes: u32,
    clock: u64,
    running: Vec<RunningJob>,
    queue: VecDeque<QueuedJob>,
    jobs: HashMap<String, JobStatus>,
}

impl Scheduler {
    pub fn new(capacity_nodes: u32) -> Self {
        assert!(capacity_nodes >= 1, "capacity must be positive");
        Scheduler {
            capacity_nodes,
            clock: 0,
            running: Vec::new(),
            queue: VecDeque::new(),
            jobs: HashMap::new(),
        }
    }

    pub fn capacity_nodes(&self) -> u32 {
        self.capacity_nodes
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn running(&self) -> &[RunningJob] {
        &self.running
    }

    pub fn queue(&self) -> impl Iterator<Item = &QueuedJob> {
        self.queue.iter()
    }

    pub fn busy_nodes(&self) -> u32 {
        self.running.iter().map(|r| r.nodes).sum()
    }

    pub fn contains(&self, job_id: &str) -> bool {
        self.jobs.contains_key(job_id)
    }

    pub fn status(&self, job_id: &str) -> Option<&JobStatus> {
        self.jobs.get(job_id)
    }

    /// Node-seconds still owed: remaining time of running jobs plus full
    /// walltime of queued ones.
    pub fn committed_node_seconds(&self) -> u128 {
        let running: u128 = self
            .running
            .iter()
            .map(|r| u128::from(r.nodes) * u128::from(r.end_time.saturating_sub(self.clock)))
            .sum();
        let queued: u128 = self
            .queue
            .iter()
            .map(|q| u128::from(q.nodes) * u128::from(q.walltime_s))
            .sum();
        running + queued
    }

    /// Appends a job to the queue. The caller guarantees `nodes` fits the
    /// cluster and that `job_id` is new.
    pub fn enqueue(&mut self, job_id: &str, nodes: u32, walltime_s: u64) -> JobStatus {
        assert!(nodes <= self.capacity_nodes, "job larger than cluster");
        assert!(!self.jobs.contains_key(job_id), "duplicate job {job_id}");
        let status = JobStatus::queued(self.clock);
        self.jobs.insert(job_id.to_owned(), status.clone());
        self.queue.push_back(QueuedJob {
            job_id: job_id.to_owned(),
            nodes,
            walltime_s,
        });
        status
    }

    /// Starts whatever can start now, then advances `dt` unit steps. Each
    /// step first completes jobs whose end time has arrived, then starts
    /// queued jobs from the head while they fit.
    pub fn tick(&mut self, dt: u64) -> Vec<LifecycleEvent> {
        let mut events = Vec::new();
        self.start_ready(&mut events);
        for _ in 0..dt {
            self.clock += 1;
            self.complete_due(&mut events);
            self.start_ready(&mut events);
        }
        events
    }

    fn complete_due(&mut self, events: &mut Vec<LifecycleEvent>) {
        let now = self.clock;
        let mut i = 0;
        while i < self.running.len() {
            if self.running[i].end_time <= now {
                let job = self.running.remove(i);
                self.transition(&job.job_id, JobState::Completed);
                events.push(LifecycleEvent {
                    time: now,
                    job_id: job.job_id,
                    state: JobState::Completed,
                });
            } else {
                i += 1;
            }
        }
    }

    fn start_ready(&mut self, events: &mut Vec<LifecycleEvent>) {
        let now = self.clock;
        while let Some(head) = self.queue.front() {
            if self.busy_nodes() + head.nodes > self.capacity_nodes {
                break;
            }
            let job = self.queue.pop_front().expect("head exists");
            self.transition(&job.job_id, JobState::Running);
            self.running.push(RunningJob {
                job_id: job.job_id.clone(),
                nodes: job.nodes,
                end_time: now + job.walltime_s,
            });
            events.push(LifecycleEvent {
                time: now,
                job_id: job.job_id,
                state: JobState::Running,
            });
        }
        assert!(
            self.busy_nodes() <= self.capacity_nodes,
            "capacity exceeded: {} > {}",
            self.busy_nodes(),
            self.capacity_nodes
        );
    }

    fn transition(&mut self, job_id: &str, to: JobState) {
        let now = self.clock;
        self.jobs
            .get_mut(job_id)
            .expect("scheduled job is tracked")
            .advance(to, now)
            .expect("scheduler only makes legal transitions");
    }
}
