use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};

use super::wal::{self, LogWriter, Record, ReplayError};
use super::{BrokerError, Delivery, QueueName, QueueStats};

/// Ready messages above which a warning is logged.
pub(crate) const HIGH_WATERMARK: usize = 1_000_000;
/// Compaction runs once more than half of the logged messages are acked.
const COMPACT_MIN_RECORDS: u64 = 64;

#[derive(Debug, Clone)]
pub(crate) struct Message {
    id: u64,
    enqueued_at: DateTime<Utc>,
    body: Arc<[u8]>,
}

impl Message {
    fn delivery(&self) -> Delivery {
        Delivery { message_id: self.id, enqueued_at: self.enqueued_at, body: self.body.to_vec() }
    }

    fn record(&self) -> Record {
        Record::Publish {
            id: self.id,
            enqueued_at_micros: self.enqueued_at.timestamp_micros(),
            body: self.body.to_vec(),
        }
    }
}

#[derive(Debug)]
struct State {
    log: Option<LogWriter>,
    next_id: u64,
    ready: VecDeque<Message>,
    unacked: BTreeMap<u64, Message>,
    /// Publish records currently in the log, and how many of them are acked.
    logged: u64,
    logged_acked: u64,
    published: u64,
    acked: u64,
    deleted: bool,
    over_watermark: bool,
}

#[derive(Debug)]
pub(crate) struct Queue {
    name: QueueName,
    durable: bool,
    state: Mutex<State>,
    arrivals: Condvar,
}

impl Queue {
    pub fn create(name: QueueName, durable: bool, log_path: Option<&Path>) -> Result<Self, BrokerError> {
        let log = match log_path {
            Some(path) => Some(LogWriter::create(path, Record::Meta { durable, next_id: 1 })?),
            None => None,
        };
        Ok(Self::with_state(name, durable, log, 1, VecDeque::new(), 0, 0))
    }

    /// Rebuilds a durable queue from its log. Messages that were delivered but
    /// not acked before the restart come back as ready.
    pub fn recover(name: QueueName, path: &Path) -> Result<Self, BrokerError> {
        let replay = wal::replay_file(path).map_err(|e| match e {
            ReplayError::Io(e) => BrokerError::Storage(e.to_string()),
            ReplayError::Corrupt { offset, detail } => {
                BrokerError::CorruptLog { queue: name.to_string(), offset, detail }
            }
        })?;
        let corrupt = |detail: String| BrokerError::CorruptLog { queue: name.to_string(), offset: 0, detail };

        let mut records = replay.records.into_iter();
        let (durable, mut next_id) = match records.next() {
            Some(Record::Meta { durable, next_id }) => (durable, next_id),
            // Creation writes the meta record atomically, so an empty or
            // meta-less file can only be damage.
            _ => return Err(corrupt("log does not start with a meta record".into())),
        };
        let mut live: BTreeMap<u64, Message> = BTreeMap::new();
        let mut logged = 0;
        let mut logged_acked = 0;
        let mut last_id = 0;
        for record in records {
            match record {
                Record::Publish { id, enqueued_at_micros, body } => {
                    if id <= last_id {
                        return Err(corrupt(format!("message id {id} follows {last_id}")));
                    }
                    last_id = id;
                    logged += 1;
                    let enqueued_at = DateTime::from_timestamp_micros(enqueued_at_micros).unwrap_or_default();
                    live.insert(id, Message { id, enqueued_at, body: body.into() });
                }
                Record::Ack { id } => {
                    if live.remove(&id).is_some() {
                        logged_acked += 1;
                    }
                }
                Record::Meta { .. } => return Err(corrupt("meta record after start of log".into())),
            }
        }
        next_id = next_id.max(last_id + 1);
        let log = LogWriter::open(path)?;
        let ready: VecDeque<Message> = live.into_values().collect();
        Ok(Self::with_state(name, durable, Some(log), next_id, ready, logged, logged_acked))
    }

    fn with_state(
        name: QueueName,
        durable: bool,
        log: Option<LogWriter>,
        next_id: u64,
        ready: VecDeque<Message>,
        logged: u64,
        logged_acked: u64,
    ) -> Self {
        let published = ready.len() as u64;
        Self {
            name,
            durable,
            state: Mutex::new(State {
                log,
                next_id,
                ready,
                unacked: BTreeMap::new(),
                logged,
                logged_acked,
                published,
                acked: 0,
                deleted: false,
                over_watermark: false,
            }),
            arrivals: Condvar::new(),
        }
    }

    pub fn durable(&self) -> bool {
        self.durable
    }

    fn lock(&self) -> Result<MutexGuard<'_, State>, BrokerError> {
        let state = self.state.lock().unwrap_or_else(|p| p.into_inner());
        if state.deleted {
            return Err(BrokerError::UnknownQueue(self.name.to_string()));
        }
        Ok(state)
    }

    pub fn publish(&self, body: &[u8]) -> Result<u64, BrokerError> {
        let mut st = self.lock()?;
        let msg = Message { id: st.next_id, enqueued_at: Utc::now(), body: body.into() };
        if let Some(log) = st.log.as_mut() {
            log.append(&[msg.record()])?;
            st.logged += 1;
        }
        st.next_id += 1;
        st.published += 1;
        let id = msg.id;
        st.ready.push_back(msg);
        if st.ready.len() >= HIGH_WATERMARK && !st.over_watermark {
            st.over_watermark = true;
            log::warn!("queue {} holds {} ready messages", self.name, st.ready.len());
        }
        drop(st);
        self.arrivals.notify_all();
        Ok(id)
    }

    /// Hands out up to `max` ready messages, waiting up to `wait` for the first.
    pub fn consume(&self, max: usize, wait: Duration) -> Result<Vec<Delivery>, BrokerError> {
        let deadline = Instant::now() + wait;
        let mut st = self.lock()?;
        loop {
            if !st.ready.is_empty() || max == 0 {
                let take = max.min(st.ready.len());
                let mut out = Vec::with_capacity(take);
                for msg in st.ready.drain(..take).collect::<Vec<_>>() {
                    out.push(msg.delivery());
                    st.unacked.insert(msg.id, msg);
                }
                if st.ready.len() < HIGH_WATERMARK {
                    st.over_watermark = false;
                }
                return Ok(out);
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(Vec::new());
            }
            st = self.arrivals.wait_timeout(st, deadline - now).unwrap_or_else(|p| p.into_inner()).0;
            if st.deleted {
                return Err(BrokerError::UnknownQueue(self.name.to_string()));
            }
        }
    }

    /// Acks all of `ids` or none of them. Ids that were already acked succeed
    /// again without effect.
    pub fn ack(&self, ids: &[u64]) -> Result<usize, BrokerError> {
        let mut st = self.lock()?;
        let mut fresh = Vec::new();
        for &id in ids {
            if st.unacked.contains_key(&id) {
                if !fresh.contains(&id) {
                    fresh.push(id);
                }
            } else if id == 0 || id >= st.next_id {
                return Err(BrokerError::UnknownMessage(id));
            } else if st.ready.binary_search_by_key(&id, |m| m.id).is_ok() {
                return Err(BrokerError::NotDelivered(id));
            }
        }
        if fresh.is_empty() {
            return Ok(0);
        }
        if let Some(log) = st.log.as_mut() {
            let records: Vec<Record> = fresh.iter().map(|&id| Record::Ack { id }).collect();
            log.append(&records)?;
        }
        for id in &fresh {
            st.unacked.remove(id);
        }
        st.acked += fresh.len() as u64;
        if st.log.is_some() {
            st.logged_acked += fresh.len() as u64;
            if st.logged >= COMPACT_MIN_RECORDS && st.logged_acked * 2 > st.logged {
                Self::compact(&mut st, self.durable)?;
            }
        }
        Ok(fresh.len())
    }

    /// Puts delivered-but-unacked messages back in line, keeping id order.
    /// Unknown or already-acked ids are skipped.
    pub fn release(&self, ids: &[u64]) -> Result<usize, BrokerError> {
        let mut st = self.lock()?;
        let mut back: Vec<Message> = ids.iter().filter_map(|id| st.unacked.remove(id)).collect();
        if back.is_empty() {
            return Ok(0);
        }
        let n = back.len();
        back.extend(st.ready.drain(..));
        back.sort_by_key(|m| m.id);
        st.ready = back.into();
        drop(st);
        self.arrivals.notify_all();
        Ok(n)
    }

    fn compact(st: &mut State, durable: bool) -> Result<(), BrokerError> {
        let mut live: Vec<&Message> = st.unacked.values().chain(st.ready.iter()).collect();
        live.sort_by_key(|m| m.id);
        let mut records = Vec::with_capacity(live.len() + 1);
        records.push(Record::Meta { durable, next_id: st.next_id });
        records.extend(live.iter().map(|m| m.record()));
        let kept = live.len() as u64;
        st.log.as_mut().expect("durable queue has a log").rewrite(&records)?;
        st.logged = kept;
        st.logged_acked = 0;
        Ok(())
    }

    /// Marks the queue dead and wakes any waiting consumers.
    pub fn mark_deleted(&self) {
        let mut st = self.state.lock().unwrap_or_else(|p| p.into_inner());
        st.deleted = true;
        st.ready.clear();
        st.unacked.clear();
        st.log = None;
        drop(st);
        self.arrivals.notify_all();
    }

    pub fn stats(&self) -> QueueStats {
        let st = self.state.lock().unwrap_or_else(|p| p.into_inner());
        QueueStats {
            depth: st.ready.len() as u64,
            unacked: st.unacked.len() as u64,
            published: st.published,
            acked: st.acked,
        }
    }

    #[cfg(test)]
    pub fn logged_counts(&self) -> (u64, u64) {
        let st = self.state.lock().unwrap();
        (st.logged, st.logged_acked)
    }
}
