//! Embedded durable message broker.
//!
//! Named FIFO queues backed by one write-ahead log each, broker users with a
//! producer/consumer role, and explicit acknowledgements. Delivery is
//! at-least-once: a message handed out but never acked becomes ready again
//! when the broker is reopened.
//!
//! Storage layout under the root directory:
//!
//! ```text
//! <root>/users.json
//! <root>/queues/<name>.log
//! ```
//!
//! Permissions: producers (and admins) may publish to any queue; a consumer
//! may only consume from and ack on the one queue bound to it; queue and user
//! management needs an admin or the in-process [`Actor::System`].

mod queue;
mod users;
pub(crate) mod wal;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::ServiceRole;
use crate::fault::{FaultInjector, FaultPoint};
use queue::Queue;
pub use users::BrokerUser;
use users::UserTable;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BrokerError {
    #[error("invalid queue name `{0}`")]
    InvalidQueueName(String),
    #[error("unknown queue `{0}`")]
    UnknownQueue(String),
    #[error("queue `{0}` exists with different settings")]
    QueueConflict(String),
    #[error("broker user `{0}` already exists")]
    UserConflict(String),
    #[error("unknown broker user `{0}`")]
    UnknownUser(String),
    #[error("invalid broker user: {0}")]
    InvalidUser(String),
    #[error("`{user}` may not {action}")]
    PermissionDenied { user: String, action: String },
    #[error("unknown message {0}")]
    UnknownMessage(u64),
    #[error("message {0} has not been delivered")]
    NotDelivered(u64),
    #[error("broker storage failure: {0}")]
    Storage(String),
    #[error("corrupt log for queue `{queue}` at byte {offset}: {detail}")]
    CorruptLog { queue: String, offset: u64, detail: String },
}

impl From<io::Error> for BrokerError {
    fn from(e: io::Error) -> Self {
        BrokerError::Storage(e.to_string())
    }
}

/// A validated queue name: `[a-z0-9][a-z0-9._-]{0,127}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct QueueName(String);

impl QueueName {
    pub fn new(name: impl Into<String>) -> Result<Self, BrokerError> {
        let name = name.into();
        let bytes = name.as_bytes();
        let ok = !bytes.is_empty()
            && bytes.len() <= 128
            && matches!(bytes[0], b'a'..=b'z' | b'0'..=b'9')
            && bytes.iter().all(|b| matches!(b, b'a'..=b'z' | b'0'..=b'9' | b'.' | b'_' | b'-'));
        if ok {
            Ok(Self(name))
        } else {
            Err(BrokerError::InvalidQueueName(name))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl<'de> Deserialize<'de> for QueueName {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        QueueName::new(raw).map_err(serde::de::Error::custom)
    }
}

impl std::borrow::Borrow<str> for QueueName {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for QueueName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Who is asking for a management operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Actor<'a> {
    /// In-process orchestration (the registry).
    System,
    User(&'a str),
}

/// One message handed to a consumer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub message_id: u64,
    pub enqueued_at: DateTime<Utc>,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct QueueStats {
    /// Ready messages.
    pub depth: u64,
    pub unacked: u64,
    pub published: u64,
    pub acked: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct BrokerStats {
    pub queues: BTreeMap<String, QueueStats>,
    pub total_published: u64,
    pub total_acked: u64,
}

pub struct Broker {
    root: PathBuf,
    queues: RwLock<HashMap<QueueName, Arc<Queue>>>,
    users: Mutex<UserTable>,
    faults: Option<Arc<FaultInjector>>,
    published: AtomicU64,
    acked: AtomicU64,
}

impl fmt::Debug for Broker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Broker").field("root", &self.root).finish_non_exhaustive()
    }
}

impl Broker {
    /// Opens (or initialises) the broker stored under `root`, replaying every
    /// queue log.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, BrokerError> {
        let root = root.as_ref().to_path_buf();
        let queue_dir = root.join("queues");
        fs::create_dir_all(&queue_dir)?;

        let users = UserTable::load(&root.join("users.json"))?;
        let mut queues = HashMap::new();
        let mut recovered = 0u64;
        let mut entries: Vec<PathBuf> =
            fs::read_dir(&queue_dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for path in entries {
            let Some(stem) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(".log")) else {
                // leftover *.tmp from an interrupted rewrite
                if path.extension().is_some_and(|e| e == "tmp") {
                    let _ = fs::remove_file(&path);
                }
                continue;
            };
            let name = QueueName::new(stem)?;
            let queue = Queue::recover(name.clone(), &path)?;
            recovered += queue.stats().depth;
            queues.insert(name, Arc::new(queue));
        }
        log::info!("broker opened at {} with {} queue(s), {recovered} ready message(s)", root.display(), queues.len());
        Ok(Self {
            root,
            queues: RwLock::new(queues),
            users: Mutex::new(users),
            faults: None,
            published: AtomicU64::new(recovered),
            acked: AtomicU64::new(0),
        })
    }

    /// Same as [`Broker::open`] but consults `faults` before queue and user creation.
    pub fn open_with_faults(root: impl AsRef<Path>, faults: Arc<FaultInjector>) -> Result<Self, BrokerError> {
        let mut broker = Self::open(root)?;
        broker.faults = Some(faults);
        Ok(broker)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn injected(&self, point: FaultPoint) -> Result<(), BrokerError> {
        if self.faults.as_ref().is_some_and(|f| f.trip(point)) {
            return Err(BrokerError::Storage(format!("injected fault at {point:?}")));
        }
        Ok(())
    }

    fn log_path(&self, name: &QueueName) -> PathBuf {
        self.root.join("queues").join(format!("{name}.log"))
    }

    fn require_admin(&self, actor: Actor<'_>, action: &str) -> Result<(), BrokerError> {
        match actor {
            Actor::System => Ok(()),
            Actor::User(name) => {
                let users = self.users.lock().unwrap();
                match users.get(name) {
                    Some(u) if u.admin => Ok(()),
                    _ => Err(BrokerError::PermissionDenied { user: name.to_owned(), action: action.to_owned() }),
                }
            }
        }
    }

    fn queue(&self, name: &str) -> Result<Arc<Queue>, BrokerError> {
        let queues = self.queues.read().unwrap();
        queues.get(name).map(Arc::clone).ok_or_else(|| BrokerError::UnknownQueue(name.to_owned()))
    }

    /// Creates an empty queue. Creating an identical queue again is a no-op.
    pub fn create_queue(&self, actor: Actor<'_>, name: &QueueName, durable: bool) -> Result<(), BrokerError> {
        self.require_admin(actor, "create queues")?;
        self.injected(FaultPoint::QueueCreate)?;
        let mut queues = self.queues.write().unwrap();
        if let Some(existing) = queues.get(name) {
            return if existing.durable() == durable {
                Ok(())
            } else {
                Err(BrokerError::QueueConflict(name.to_string()))
            };
        }
        let path = self.log_path(name);
        let queue = Queue::create(name.clone(), durable, durable.then_some(path.as_path()))?;
        queues.insert(name.clone(), Arc::new(queue));
        Ok(())
    }

    /// Removes a queue with all its messages. Consumers blocked on it wake
    /// with [`BrokerError::UnknownQueue`].
    pub fn delete_queue(&self, actor: Actor<'_>, name: &str) -> Result<(), BrokerError> {
        self.require_admin(actor, "delete queues")?;
        let mut queues = self.queues.write().unwrap();
        let (key, queue) = queues.remove_entry(name).ok_or_else(|| BrokerError::UnknownQueue(name.to_owned()))?;
        queue.mark_deleted();
        if queue.durable() {
            let path = self.log_path(&key);
            match fs::remove_file(&path) {
                Ok(()) => wal::sync_parent(&path)?,
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    pub fn queue_exists(&self, name: &str) -> bool {
        self.queue(name).is_ok()
    }

    pub fn queue_names(&self) -> Vec<QueueName> {
        let mut names: Vec<QueueName> = self.queues.read().unwrap().keys().cloned().collect();
        names.sort();
        names
    }

    pub fn create_user(&self, actor: Actor<'_>, user: BrokerUser, secret: &str) -> Result<(), BrokerError> {
        self.require_admin(actor, "create users")?;
        self.injected(FaultPoint::UserCreate)?;
        match (user.role, &user.readable_queue) {
            (ServiceRole::Producer, Some(_)) => {
                return Err(BrokerError::InvalidUser("producers cannot own a readable queue".into()))
            }
            (ServiceRole::Consumer, None) => {
                return Err(BrokerError::InvalidUser("consumers need a readable queue".into()))
            }
            (ServiceRole::Consumer, Some(q)) if !self.queue_exists(q.as_str()) => {
                return Err(BrokerError::UnknownQueue(q.to_string()))
            }
            _ => {}
        }
        let mut users = self.users.lock().unwrap();
        users.insert(user, secret)
    }

    pub fn delete_user(&self, actor: Actor<'_>, username: &str) -> Result<(), BrokerError> {
        self.require_admin(actor, "delete users")?;
        self.users.lock().unwrap().remove(username)
    }

    /// Renames a user and/or replaces its secret.
    pub fn update_user(
        &self,
        actor: Actor<'_>,
        username: &str,
        new_username: Option<&str>,
        new_secret: Option<&str>,
    ) -> Result<(), BrokerError> {
        self.require_admin(actor, "update users")?;
        self.users.lock().unwrap().update(username, new_username, new_secret)
    }

    pub fn user(&self, username: &str) -> Option<BrokerUser> {
        self.users.lock().unwrap().get(username).cloned()
    }

    pub fn users(&self) -> Vec<BrokerUser> {
        self.users.lock().unwrap().all()
    }

    pub fn authenticate(&self, username: &str, secret: &str) -> bool {
        self.users.lock().unwrap().verify(username, secret)
    }

    /// Appends `body` to `queue`; the message is on disk when this returns.
    pub fn publish(&self, as_user: &str, queue: &str, body: &[u8]) -> Result<u64, BrokerError> {
        let user = self.user(as_user).ok_or_else(|| BrokerError::UnknownUser(as_user.to_owned()))?;
        if user.role != ServiceRole::Producer && !user.admin {
            return Err(BrokerError::PermissionDenied { user: user.username, action: format!("publish to `{queue}`") });
        }
        let id = self.queue(queue)?.publish(body)?;
        self.published.fetch_add(1, Ordering::Relaxed);
        Ok(id)
    }

    fn readable(&self, as_user: &str, queue: &str, action: &str) -> Result<Arc<Queue>, BrokerError> {
        let user = self.user(as_user).ok_or_else(|| BrokerError::UnknownUser(as_user.to_owned()))?;
        if user.readable_queue.as_ref().map(QueueName::as_str) != Some(queue) {
            return Err(BrokerError::PermissionDenied { user: user.username, action: format!("{action} `{queue}`") });
        }
        self.queue(queue)
    }

    /// Takes up to `max` ready messages in FIFO order, blocking up to `wait`
    /// when the queue is empty.
    pub fn consume(
        &self,
        as_user: &str,
        queue: &str,
        max: usize,
        wait: Duration,
    ) -> Result<Vec<Delivery>, BrokerError> {
        self.readable(as_user, queue, "consume from")?.consume(max, wait)
    }

    pub fn ack(&self, as_user: &str, queue: &str, message_id: u64) -> Result<(), BrokerError> {
        self.ack_many(as_user, queue, &[message_id]).map(|_| ())
    }

    /// Acks a batch with a single log sync. All-or-nothing; returns how many
    /// messages changed state.
    pub fn ack_many(&self, as_user: &str, queue: &str, message_ids: &[u64]) -> Result<usize, BrokerError> {
        let n = self.readable(as_user, queue, "ack on")?.ack(message_ids)?;
        self.acked.fetch_add(n as u64, Ordering::Relaxed);
        Ok(n)
    }

    /// Returns delivered, unacked messages to the ready list so the next
    /// consume sees them again.
    pub fn release(&self, as_user: &str, queue: &str, message_ids: &[u64]) -> Result<usize, BrokerError> {
        self.readable(as_user, queue, "release on")?.release(message_ids)
    }

    pub fn stats(&self) -> BrokerStats {
        let queues = self.queues.read().unwrap();
        BrokerStats {
            queues: queues.iter().map(|(k, q)| (k.to_string(), q.stats())).collect(),
            total_published: self.published.load(Ordering::Relaxed),
            total_acked: self.acked.load(Ordering::Relaxed),
        }
    }

    pub fn queue_stats(&self, name: &str) -> Result<QueueStats, BrokerError> {
        Ok(self.queue(name)?.stats())
    }
}
