use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;

use super::wal::write_atomically;
use super::{BrokerError, QueueName};
use crate::domain::ServiceRole;

/// A broker principal.
///
/// Producers never own a readable queue; a consumer owns exactly one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BrokerUser {
    pub username: String,
    pub role: ServiceRole,
    pub readable_queue: Option<QueueName>,
    #[serde(default)]
    pub admin: bool,
}

impl BrokerUser {
    pub fn producer(username: impl Into<String>) -> Self {
        Self { username: username.into(), role: ServiceRole::Producer, readable_queue: None, admin: false }
    }

    pub fn consumer(username: impl Into<String>, queue: QueueName) -> Self {
        Self { username: username.into(), role: ServiceRole::Consumer, readable_queue: Some(queue), admin: false }
    }

    pub fn with_admin(mut self, admin: bool) -> Self {
        self.admin = admin;
        self
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredUser {
    #[serde(flatten)]
    user: BrokerUser,
    secret: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct UsersFile {
    users: Vec<StoredUser>,
}

// Broker secrets sit behind the registry's slow password hash, so a salted
// SHA-256 is enough here.
fn hash_secret(secret: &str, salt: &[u8]) -> String {
    let digest = Sha256::new().chain_update(salt).chain_update(secret.as_bytes()).finalize();
    format!("sha256${}${}", hex::encode(salt), hex::encode(digest))
}

fn new_secret(secret: &str) -> String {
    let mut salt = [0u8; 16];
    rand::thread_rng().fill_bytes(&mut salt);
    hash_secret(secret, &salt)
}

fn secret_matches(stored: &str, secret: &str) -> bool {
    let mut parts = stored.split('$');
    let (Some("sha256"), Some(salt), Some(_)) = (parts.next(), parts.next(), parts.next()) else {
        return false;
    };
    let Ok(salt) = hex::decode(salt) else { return false };
    hash_secret(secret, &salt).as_bytes().ct_eq(stored.as_bytes()).into()
}

#[derive(Debug)]
pub(super) struct UserTable {
    path: PathBuf,
    users: BTreeMap<String, StoredUser>,
}

impl UserTable {
    pub fn load(path: &Path) -> Result<Self, BrokerError> {
        let users = match fs::read(path) {
            Ok(bytes) => {
                let file: UsersFile = serde_json::from_slice(&bytes)
                    .map_err(|e| BrokerError::Storage(format!("{}: {e}", path.display())))?;
                file.users.into_iter().map(|u| (u.user.username.clone(), u)).collect()
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e.into()),
        };
        Ok(Self { path: path.to_path_buf(), users })
    }

    fn persist(&self) -> Result<(), BrokerError> {
        let file = UsersFile { users: self.users.values().cloned().collect() };
        let bytes = serde_json::to_vec(&file).expect("users serialize");
        write_atomically(&self.path, &bytes)?;
        Ok(())
    }

    // Mutations apply to a copy first so a failed write leaves memory and disk agreeing.
    fn commit(&mut self, next: BTreeMap<String, StoredUser>) -> Result<(), BrokerError> {
        let previous = std::mem::replace(&mut self.users, next);
        if let Err(e) = self.persist() {
            self.users = previous;
            return Err(e);
        }
        Ok(())
    }

    pub fn get(&self, username: &str) -> Option<&BrokerUser> {
        self.users.get(username).map(|s| &s.user)
    }

    pub fn all(&self) -> Vec<BrokerUser> {
        self.users.values().map(|s| s.user.clone()).collect()
    }

    pub fn verify(&self, username: &str, secret: &str) -> bool {
        self.users.get(username).is_some_and(|s| secret_matches(&s.secret, secret))
    }

    pub fn insert(&mut self, user: BrokerUser, secret: &str) -> Result<(), BrokerError> {
        if self.users.contains_key(&user.username) {
            return Err(BrokerError::UserConflict(user.username));
        }
        if let Some(q) = &user.readable_queue {
            if let Some(owner) = self.users.values().find(|s| s.user.readable_queue.as_ref() == Some(q)) {
                return Err(BrokerError::InvalidUser(format!(
                    "queue `{q}` already belongs to `{}`",
                    owner.user.username
                )));
            }
        }
        let mut next = self.users.clone();
        next.insert(user.username.clone(), StoredUser { secret: new_secret(secret), user });
        self.commit(next)
    }

    pub fn remove(&mut self, username: &str) -> Result<(), BrokerError> {
        if !self.users.contains_key(username) {
            return Err(BrokerError::UnknownUser(username.to_owned()));
        }
        let mut next = self.users.clone();
        next.remove(username);
        self.commit(next)
    }

    pub fn update(
        &mut self,
        username: &str,
        new_username: Option<&str>,
        secret: Option<&str>,
    ) -> Result<(), BrokerError> {
        let mut next = self.users.clone();
        let mut stored = next.remove(username).ok_or_else(|| BrokerError::UnknownUser(username.to_owned()))?;
        if let Some(name) = new_username {
            if name != username && next.contains_key(name) {
                return Err(BrokerError::UserConflict(name.to_owned()));
            }
            stored.user.username = name.to_owned();
        }
        if let Some(secret) = secret {
            stored.secret = new_secret(secret);
        }
        next.insert(stored.user.username.clone(), stored);
        self.commit(next)
    }
}
