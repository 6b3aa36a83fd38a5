//! Per-video review leases: one reviewer may edit a video at a time, and
//! a lease nobody renews runs out.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::Serialize;

pub const DEFAULT_TTL: Duration = Duration::from_secs(600);

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Lease {
    pub reviewer: String,
    /// Unix seconds.
    pub expires_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LeaseError {
    #[error("video is leased to {} until {}", .0.reviewer, .0.expires_at)]
    HeldByOther(Lease),
    #[error("no lease held on this video")]
    NotHeld,
}

fn unix(t: SystemTime) -> u64 {
    t.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Debug)]
pub struct Leases {
    ttl: Duration,
    held: Mutex<HashMap<String, (String, SystemTime)>>,
}

impl Leases {
    pub fn new(ttl: Duration) -> Self {
        Self { ttl, held: Mutex::new(HashMap::new()) }
    }

    fn live(&self, video: &str, now: SystemTime) -> Option<Lease> {
        let held = self.held.lock().unwrap();
        let (who, until) = held.get(video)?;
        (*until > now).then(|| Lease { reviewer: who.clone(), expires_at: unix(*until) })
    }

    /// Grants or renews the lease. An expired lease is free for anyone.
    pub fn acquire(&self, video: &str, reviewer: &str, now: SystemTime) -> Result<Lease, LeaseError> {
        if let Some(l) = self.live(video, now) {
            if l.reviewer != reviewer {
                return Err(LeaseError::HeldByOther(l));
            }
        }
        let until = now + self.ttl;
        self.held.lock().unwrap().insert(video.to_string(), (reviewer.to_string(), until));
        Ok(Lease { reviewer: reviewer.to_string(), expires_at: unix(until) })
    }

    /// Succeeds when `reviewer` holds a live lease on `video`.
    pub fn check(&self, video: &str, reviewer: &str, now: SystemTime) -> Result<(), LeaseError> {
        match self.live(video, now) {
            Some(l) if l.reviewer == reviewer => Ok(()),
            Some(l) => Err(LeaseError::HeldByOther(l)),
            None => Err(LeaseError::NotHeld),
        }
    }

    pub fn release(&self, video: &str, reviewer: &str, now: SystemTime) -> Result<(), LeaseError> {
        self.check(video, reviewer, now)?;
        self.held.lock().unwrap().remove(video);
        Ok(())
    }

    pub fn current(&self, video: &str, now: SystemTime) -> Option<Lease> {
        self.live(video, now)
    }
}
