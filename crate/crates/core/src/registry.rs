//! Producer and consumer service lifecycle.
//!
//! Registration of a consumer runs these steps, undoing earlier ones if a
//! later one fails:
//!
//! 1. create the broker queue `svc-<service_id>`
//! 2. create the broker user bound to that queue
//! 3. insert the `service` row
//! 4. hand the record back
//!
//! Producers skip step 1 and get a broker user without a readable queue.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, SubsecRound, Utc};
use rand::RngCore;
use rusqlite::{params, OptionalExtension, Row};
use serde::Serialize;
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;
use thiserror::Error;

use crate::broker::{Actor, Broker, BrokerError, BrokerUser, QueueName};
use crate::domain::{check_password, check_username, format_timestamp, CredentialsError, ServiceRole};
use crate::fault::{FaultInjector, FaultPoint};
use crate::password::{self, PasswordHash};
use crate::routing::Routing;
use crate::store::Store;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("username must be 1..=64 printable characters without ':'")]
    InvalidUsername,
    #[error("password must be at least 8 characters")]
    WeakPassword,
    #[error("username `{0}` is taken")]
    UsernameTaken(String),
    #[error("invalid credentials")]
    InvalidCredentials,
    #[error("unknown service {0}")]
    UnknownService(u64),
    #[error("permission denied: {0}")]
    PermissionDenied(String),
    #[error("nothing to update")]
    NothingToUpdate,
    #[error("broker unavailable: {0}")]
    BrokerUnavailable(String),
    #[error("registration aborted at {0:?}; all steps rolled back")]
    RegistrationAborted(FaultPoint),
    #[error("registry storage failure: {0}")]
    Storage(String),
}

impl From<rusqlite::Error> for RegistryError {
    fn from(e: rusqlite::Error) -> Self {
        RegistryError::Storage(e.to_string())
    }
}

impl From<CredentialsError> for RegistryError {
    fn from(e: CredentialsError) -> Self {
        match e {
            CredentialsError::BadUsername => RegistryError::InvalidUsername,
            CredentialsError::WeakPassword => RegistryError::WeakPassword,
        }
    }
}

fn broker_down(e: BrokerError) -> RegistryError {
    RegistryError::BrokerUnavailable(e.to_string())
}

/// A registered service as seen by callers. The password hash never leaves
/// the registry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Service {
    pub service_id: u64,
    pub username: String,
    pub role: ServiceRole,
    pub queue_name: Option<QueueName>,
    pub is_admin: bool,
    #[serde(serialize_with = "ser_ts")]
    pub created_at: DateTime<Utc>,
}

fn ser_ts<S: serde::Serializer>(ts: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format_timestamp(ts))
}

pub(crate) const SERVICE_COLUMNS: &str = "id, username, role, queue_name, is_admin, created_at";

pub(crate) fn service_from_row(row: &Row<'_>) -> rusqlite::Result<Service> {
    let role: String = row.get(2)?;
    let queue: Option<String> = row.get(3)?;
    let created: String = row.get(5)?;
    let bad =
        |i: usize, msg: String| rusqlite::Error::FromSqlConversionFailure(i, rusqlite::types::Type::Text, msg.into());
    Ok(Service {
        service_id: row.get::<_, i64>(0)? as u64,
        username: row.get(1)?,
        role: role.parse().map_err(|e| bad(2, e))?,
        queue_name: queue.map(QueueName::new).transpose().map_err(|e| bad(3, e.to_string()))?,
        is_admin: row.get(4)?,
        created_at: DateTime::parse_from_rfc3339(&created).map_err(|e| bad(5, e.to_string()))?.with_timezone(&Utc),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct RegistryConfig {
    pub hash_iterations: u32,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        Self { hash_iterations: password::DEFAULT_ITERATIONS }
    }
}

/// Successful logins, keyed by username. Holds a keyed SHA-256 of the
/// password so repeat requests skip the slow hash.
struct LoginCache {
    key: [u8; 32],
    entries: RwLock<HashMap<String, (Service, [u8; 32])>>,
}

const LOGIN_CACHE_CAP: usize = 100_000;

impl LoginCache {
    fn new() -> Self {
        let mut key = [0u8; 32];
        rand::thread_rng().fill_bytes(&mut key);
        Self { key, entries: RwLock::new(HashMap::new()) }
    }

    fn digest(&self, password: &str) -> [u8; 32] {
        Sha256::new().chain_update(self.key).chain_update(password.as_bytes()).finalize().into()
    }

    fn get(&self, username: &str, password: &str) -> Option<Service> {
        let entries = self.entries.read().unwrap();
        let (service, digest) = entries.get(username)?;
        bool::from(digest.ct_eq(&self.digest(password))).then(|| service.clone())
    }

    fn put(&self, service: Service, password: &str) {
        let digest = self.digest(password);
        let mut entries = self.entries.write().unwrap();
        if entries.len() >= LOGIN_CACHE_CAP {
            entries.clear();
        }
        entries.insert(service.username.clone(), (service, digest));
    }

    fn forget(&self, username: &str) {
        self.entries.write().unwrap().remove(username);
    }
}

pub struct Registry {
    store: Arc<Store>,
    broker: Arc<Broker>,
    faults: Option<Arc<FaultInjector>>,
    config: RegistryConfig,
    logins: LoginCache,
    // Serialises mutations that span the broker and the store.
    write: Mutex<()>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry").field("config", &self.config).finish_non_exhaustive()
    }
}

pub fn queue_for(service_id: u64) -> QueueName {
    QueueName::new(format!("svc-{service_id}")).expect("svc-<n> is a valid queue name")
}

impl Registry {
    /// Opens the registry database at `db_path` and reconciles it with the broker.
    pub fn open(db_path: &Path, broker: Arc<Broker>, config: RegistryConfig) -> Result<Self, RegistryError> {
        let registry = Self {
            store: Arc::new(Store::open(db_path)?),
            broker,
            faults: None,
            config,
            logins: LoginCache::new(),
            write: Mutex::new(()),
        };
        registry.reconcile()?;
        Ok(registry)
    }

    pub fn with_faults(mut self, faults: Arc<FaultInjector>) -> Self {
        self.faults = Some(faults);
        self
    }

    pub fn broker(&self) -> &Arc<Broker> {
        &self.broker
    }

    pub fn routing(&self) -> Routing {
        Routing::new(Arc::clone(&self.store))
    }

    fn tripped(&self, point: FaultPoint) -> bool {
        self.faults.as_ref().is_some_and(|f| f.trip(point))
    }

    /// Removes broker users and `svc-*` queues that no service record owns,
    /// and recreates broker objects a record expects but the broker lacks.
    /// Covers crashes between the steps of registration and deletion.
    pub fn reconcile(&self) -> Result<(), RegistryError> {
        let _guard = self.write.lock().unwrap();
        let services = self.all_services()?;
        let by_name: HashMap<&str, &Service> = services.iter().map(|s| (s.username.as_str(), s)).collect();

        for user in self.broker.users() {
            if !by_name.contains_key(user.username.as_str()) {
                log::warn!("removing orphan broker user {}", user.username);
                self.broker.delete_user(Actor::System, &user.username).map_err(broker_down)?;
            }
        }
        for queue in self.broker.queue_names() {
            let owned = services.iter().any(|s| s.queue_name.as_ref() == Some(&queue));
            if queue.as_str().starts_with("svc-") && !owned {
                log::warn!("removing orphan queue {queue}");
                self.broker.delete_queue(Actor::System, queue.as_str()).map_err(broker_down)?;
            }
        }
        for s in &services {
            if let Some(q) = &s.queue_name {
                if !self.broker.queue_exists(q.as_str()) {
                    log::warn!("recreating missing queue {q}");
                    self.broker.create_queue(Actor::System, q, true).map_err(broker_down)?;
                }
            }
            if self.broker.user(&s.username).is_none() {
                log::warn!("recreating missing broker user {}", s.username);
                let mut secret = [0u8; 24];
                rand::thread_rng().fill_bytes(&mut secret);
                self.broker
                    .create_user(Actor::System, broker_user_for(s), &hex::encode(secret))
                    .map_err(broker_down)?;
            }
        }
        Ok(())
    }

    /// Creates the admin account from configuration if it does not exist yet.
    pub fn ensure_bootstrap_admin(&self, username: &str, password: &str) -> Result<Service, RegistryError> {
        if let Some(existing) = self.find_by_username(username)? {
            return Ok(existing);
        }
        self.create(username, password, ServiceRole::Producer, true)
    }

    /// Registers a new service. `granted_by` must be an admin when `is_admin` is set.
    pub fn register_service(
        &self,
        granted_by: Option<&Service>,
        username: &str,
        password: &str,
        role: ServiceRole,
        is_admin: bool,
    ) -> Result<Service, RegistryError> {
        if is_admin && !granted_by.is_some_and(|s| s.is_admin) {
            return Err(RegistryError::PermissionDenied("only an admin may grant admin rights".into()));
        }
        self.create(username, password, role, is_admin)
    }

    fn create(
        &self,
        username: &str,
        password: &str,
        role: ServiceRole,
        is_admin: bool,
    ) -> Result<Service, RegistryError> {
        check_username(username)?;
        check_password(password)?;
        if self.find_by_username(username)?.is_some() {
            return Err(RegistryError::UsernameTaken(username.to_owned()));
        }
        let hash = PasswordHash::new(password, self.config.hash_iterations);

        let _guard = self.write.lock().unwrap();
        let service_id = self.store.next_id("service")?;
        let service = Service {
            service_id,
            username: username.to_owned(),
            role,
            queue_name: (role == ServiceRole::Consumer).then(|| queue_for(service_id)),
            is_admin,
            created_at: Utc::now().trunc_subsecs(6),
        };

        // Undo stack for the broker-side steps.
        let rollback = |queue_made: bool, user_made: bool| {
            if user_made {
                if let Err(e) = self.broker.delete_user(Actor::System, username) {
                    log::error!("rollback: cannot remove broker user {username}: {e}");
                }
            }
            if queue_made {
                if let Some(q) = &service.queue_name {
                    if let Err(e) = self.broker.delete_queue(Actor::System, q.as_str()) {
                        log::error!("rollback: cannot remove queue {q}: {e}");
                    }
                }
            }
        };

        if let Some(q) = &service.queue_name {
            self.broker.create_queue(Actor::System, q, true).map_err(broker_down)?;
        }
        let queue_made = service.queue_name.is_some();
        if let Err(e) = self.broker.create_user(Actor::System, broker_user_for(&service), password) {
            rollback(queue_made, false);
            return Err(match e {
                BrokerError::UserConflict(name) => RegistryError::UsernameTaken(name),
                other => broker_down(other),
            });
        }

        if let Err(e) = self.insert_record(&service, &hash) {
            rollback(queue_made, true);
            return Err(e);
        }

        if self.tripped(FaultPoint::Response) {
            if let Err(e) = self.delete_record(service_id) {
                log::error!("rollback: cannot remove service {service_id}: {e}");
            }
            rollback(queue_made, true);
            return Err(RegistrationAborted(FaultPoint::Response));
        }
        log::debug!("registered {} {} as service {service_id}", role, username);
        Ok(service)
    }

    fn insert_record(&self, service: &Service, hash: &PasswordHash) -> Result<(), RegistryError> {
        let mut conn = self.store.writer();
        let tx = conn.transaction()?;
        let inserted = tx.execute(
            "INSERT INTO service (id, username, password_hash, role, queue_name, is_admin, created_at)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
            params![
                service.service_id as i64,
                service.username,
                hash.encode(),
                service.role.as_str(),
                service.queue_name.as_ref().map(QueueName::as_str),
                service.is_admin,
                format_timestamp(&service.created_at),
            ],
        );
        match inserted {
            Ok(_) => {}
            Err(rusqlite::Error::SqliteFailure(e, _)) if e.code == rusqlite::ErrorCode::ConstraintViolation => {
                return Err(RegistryError::UsernameTaken(service.username.clone()));
            }
            Err(e) => return Err(e.into()),
        }
        if self.tripped(FaultPoint::RegistryInsert) {
            // dropping `tx` rolls the insert back
            return Err(RegistrationAborted(FaultPoint::RegistryInsert));
        }
        tx.commit()?;
        Ok(())
    }

    fn delete_record(&self, service_id: u64) -> Result<(), RegistryError> {
        let mut conn = self.store.writer();
        let tx = conn.transaction()?;
        let queue: Option<Option<String>> = tx
            .query_row("SELECT queue_name FROM service WHERE id = ?1", [service_id as i64], |r| r.get(0))
            .optional()?;
        tx.execute("DELETE FROM queue_mapping WHERE producer_id = ?1", [service_id as i64])?;
        if let Some(Some(q)) = queue {
            tx.execute("DELETE FROM queue_mapping WHERE consumer_queue = ?1", [q])?;
        }
        tx.execute("DELETE FROM service WHERE id = ?1", [service_id as i64])?;
        tx.commit()?;
        Ok(())
    }

    /// Checks a username/password pair. Unknown users and wrong passwords fail
    /// identically and cost the same hash work.
    pub fn login(&self, username: &str, password: &str) -> Result<Service, RegistryError> {
        if let Some(service) = self.logins.get(username, password) {
            return Ok(service);
        }
        let row: Option<(Service, String)> = {
            let conn = self.store.reader();
            conn.query_row(
                &format!("SELECT {SERVICE_COLUMNS}, password_hash FROM service WHERE username = ?1"),
                [username],
                |r| Ok((service_from_row(r)?, r.get(6)?)),
            )
            .optional()?
        };
        let Some((service, stored)) = row else {
            password::dummy_verify(password, self.config.hash_iterations);
            return Err(RegistryError::InvalidCredentials);
        };
        let ok = PasswordHash::decode(&stored).is_some_and(|h| h.verify(password));
        if !ok {
            return Err(RegistryError::InvalidCredentials);
        }
        self.logins.put(service.clone(), password);
        Ok(service)
    }

    fn authorize_self_or_admin(caller: &Service, service_id: u64, action: &str) -> Result<(), RegistryError> {
        if caller.service_id == service_id || caller.is_admin {
            Ok(())
        } else {
            Err(RegistryError::PermissionDenied(format!("{} may not {action} service {service_id}", caller.username)))
        }
    }

    /// Deletes a service together with its broker user, its queue (consumers)
    /// and every mapping that mentions it.
    pub fn delete_service(&self, caller: &Service, service_id: u64) -> Result<(), RegistryError> {
        Self::authorize_self_or_admin(caller, service_id, "delete")?;
        let _guard = self.write.lock().unwrap();
        let service = self.get(service_id)?.ok_or(RegistryError::UnknownService(service_id))?;
        self.delete_record(service_id)?;
        self.logins.forget(&service.username);

        // The record is gone; leftovers from a failure here are swept by reconcile().
        match self.broker.delete_user(Actor::System, &service.username) {
            Ok(()) | Err(BrokerError::UnknownUser(_)) => {}
            Err(e) => return Err(broker_down(e)),
        }
        if let Some(q) = &service.queue_name {
            match self.broker.delete_queue(Actor::System, q.as_str()) {
                Ok(()) | Err(BrokerError::UnknownQueue(_)) => {}
                Err(e) => return Err(broker_down(e)),
            }
        }
        Ok(())
    }

    pub fn find_service(&self, _caller: &Service, service_id: u64) -> Result<Service, RegistryError> {
        self.get(service_id)?.ok_or(RegistryError::UnknownService(service_id))
    }

    /// Every registered service; admins only.
    pub fn list_all_services(&self, caller: &Service) -> Result<Vec<Service>, RegistryError> {
        if !caller.is_admin {
            return Err(RegistryError::PermissionDenied("listing all services requires admin".into()));
        }
        self.all_services()
    }

    /// The caller's own record plus every service it shares a mapping with.
    pub fn list_services(&self, caller: &Service) -> Result<Vec<Service>, RegistryError> {
        let conn = self.store.reader();
        let mut stmt = conn.prepare_cached(&format!(
            "SELECT {SERVICE_COLUMNS} FROM service
             WHERE id = ?1
                OR queue_name IN (SELECT consumer_queue FROM queue_mapping WHERE producer_id = ?1)
                OR id IN (SELECT producer_id FROM queue_mapping WHERE consumer_queue = ?2)
             ORDER BY id"
        ))?;
        let queue = caller.queue_name.as_ref().map(QueueName::as_str);
        let rows = stmt.query_map(params![caller.service_id as i64, queue], service_from_row)?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    /// Changes the username and/or password, keeping the broker user in step.
    pub fn update_service(
        &self,
        caller: &Service,
        service_id: u64,
        new_username: Option<&str>,
        new_password: Option<&str>,
    ) -> Result<Service, RegistryError> {
        Self::authorize_self_or_admin(caller, service_id, "update")?;
        if new_username.is_none() && new_password.is_none() {
            return Err(RegistryError::NothingToUpdate);
        }
        if let Some(name) = new_username {
            check_username(name)?;
        }
        if let Some(pw) = new_password {
            check_password(pw)?;
        }
        let hash = new_password.map(|pw| PasswordHash::new(pw, self.config.hash_iterations));

        let _guard = self.write.lock().unwrap();
        let current = self.get(service_id)?.ok_or(RegistryError::UnknownService(service_id))?;
        let rename = new_username.filter(|n| *n != current.username);
        if let Some(name) = rename {
            if self.find_by_username(name)?.is_some() {
                return Err(RegistryError::UsernameTaken(name.to_owned()));
            }
        }

        let mut conn = self.store.writer();
        let tx = conn.transaction()?;
        if let Some(name) = rename {
            tx.execute("UPDATE service SET username = ?1 WHERE id = ?2", params![name, service_id as i64])?;
        }
        if let Some(hash) = &hash {
            tx.execute(
                "UPDATE service SET password_hash = ?1 WHERE id = ?2",
                params![hash.encode(), service_id as i64],
            )?;
        }
        self.broker.update_user(Actor::System, &current.username, rename, new_password).map_err(|e| match e {
            BrokerError::UserConflict(n) => RegistryError::UsernameTaken(n),
            other => broker_down(other),
        })?;
        if let Err(e) = tx.commit() {
            if let Some(name) = rename {
                let _ = self.broker.update_user(Actor::System, name, Some(&current.username), None);
            }
            return Err(e.into());
        }
        drop(conn);
        self.logins.forget(&current.username);
        Ok(Service { username: rename.unwrap_or(&current.username).to_owned(), ..current })
    }

    fn get(&self, service_id: u64) -> Result<Option<Service>, RegistryError> {
        let conn = self.store.reader();
        Ok(conn
            .query_row(
                &format!("SELECT {SERVICE_COLUMNS} FROM service WHERE id = ?1"),
                [service_id as i64],
                service_from_row,
            )
            .optional()?)
    }

    fn find_by_username(&self, username: &str) -> Result<Option<Service>, RegistryError> {
        let conn = self.store.reader();
        Ok(conn
            .query_row(
                &format!("SELECT {SERVICE_COLUMNS} FROM service WHERE username = ?1"),
                [username],
                service_from_row,
            )
            .optional()?)
    }

    fn all_services(&self) -> Result<Vec<Service>, RegistryError> {
        let conn = self.store.reader();
        let mut stmt = conn.prepare_cached(&format!("SELECT {SERVICE_COLUMNS} FROM service ORDER BY id"))?;
        let rows = stmt.query_map([], service_from_row)?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    pub fn service_count(&self) -> Result<usize, RegistryError> {
        let conn = self.store.reader();
        Ok(conn.query_row("SELECT COUNT(*) FROM service", [], |r| r.get::<_, i64>(0))? as usize)
    }
}

use RegistryError::RegistrationAborted;

fn broker_user_for(service: &Service) -> BrokerUser {
    let user = match &service.queue_name {
        Some(q) => BrokerUser::consumer(&service.username, q.clone()),
        None => BrokerUser::producer(&service.username),
    };
    user.with_admin(service.is_admin)
}
