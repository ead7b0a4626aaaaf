//! Producer-owned mappings from an event type to consumer queues.

use std::collections::BTreeSet;
use std::sync::Arc;

use rusqlite::{params, OptionalExtension, Transaction};
use serde::Serialize;
use thiserror::Error;

use crate::broker::QueueName;
use crate::domain::{EventType, ServiceRole};
use crate::registry::{queue_for, Service};
use crate::store::Store;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RoutingError {
    #[error("only live producers own queue mappings")]
    NotAProducer,
    #[error("service {0} is not a registered consumer")]
    UnknownConsumer(u64),
    #[error("routing storage failure: {0}")]
    Storage(String),
}

impl From<rusqlite::Error> for RoutingError {
    fn from(e: rusqlite::Error) -> Self {
        RoutingError::Storage(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct QueueMapping {
    pub mapping_id: u64,
    pub producer_id: u64,
    pub event_type: EventType,
    pub consumer_queue: QueueName,
}

fn mapping_from_row(row: &rusqlite::Row<'_>) -> rusqlite::Result<QueueMapping> {
    let bad =
        |i: usize, msg: String| rusqlite::Error::FromSqlConversionFailure(i, rusqlite::types::Type::Text, msg.into());
    Ok(QueueMapping {
        mapping_id: row.get::<_, i64>(0)? as u64,
        producer_id: row.get::<_, i64>(1)? as u64,
        event_type: EventType::new(row.get::<_, String>(2)?).map_err(|e| bad(2, e.to_string()))?,
        consumer_queue: QueueName::new(row.get::<_, String>(3)?).map_err(|e| bad(3, e.to_string()))?,
    })
}

const MAPPING_COLUMNS: &str = "id, producer_id, event_type, consumer_queue";

/// Handle on the mapping table. Obtained from [`crate::Registry::routing`].
#[derive(Debug, Clone)]
pub struct Routing {
    store: Arc<Store>,
}

impl Routing {
    pub(crate) fn new(store: Arc<Store>) -> Self {
        Self { store }
    }

    /// Checks inside the transaction that the caller still exists as a producer
    /// and turns consumer ids into queue names. Any bad id fails the whole call.
    fn prepare(tx: &Transaction<'_>, caller: &Service, consumer_ids: &[u64]) -> Result<Vec<QueueName>, RoutingError> {
        let role: Option<String> = tx
            .query_row("SELECT role FROM service WHERE id = ?1", [caller.service_id as i64], |r| r.get(0))
            .optional()?;
        if role.as_deref() != Some(ServiceRole::Producer.as_str()) {
            return Err(RoutingError::NotAProducer);
        }
        let mut queues = Vec::with_capacity(consumer_ids.len());
        for &id in consumer_ids {
            let queue: Option<Option<String>> =
                tx.query_row("SELECT queue_name FROM service WHERE id = ?1", [id as i64], |r| r.get(0)).optional()?;
            match queue {
                Some(Some(q)) => queues.push(QueueName::new(q).map_err(|e| RoutingError::Storage(e.to_string()))?),
                _ => return Err(RoutingError::UnknownConsumer(id)),
            }
        }
        Ok(queues)
    }

    fn insert_missing(
        tx: &Transaction<'_>,
        producer_id: u64,
        event_type: &EventType,
        queues: &[QueueName],
    ) -> Result<Vec<QueueMapping>, RoutingError> {
        let mut insert = tx.prepare_cached(
            "INSERT INTO queue_mapping (producer_id, event_type, consumer_queue) VALUES (?1, ?2, ?3)
             ON CONFLICT (producer_id, event_type, consumer_queue) DO NOTHING",
        )?;
        let mut select = tx.prepare_cached(&format!(
            "SELECT {MAPPING_COLUMNS} FROM queue_mapping
             WHERE producer_id = ?1 AND event_type = ?2 AND consumer_queue = ?3"
        ))?;
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for q in queues {
            if !seen.insert(q.as_str()) {
                continue;
            }
            let key = params![producer_id as i64, event_type.as_str(), q.as_str()];
            insert.execute(key)?;
            out.push(select.query_row(key, mapping_from_row)?);
        }
        Ok(out)
    }

    /// Maps `event_type` to the queues of `consumer_ids`. Existing pairs are
    /// kept as they are, so repeating a call changes nothing.
    pub fn set_queue_mapping(
        &self,
        caller: &Service,
        event_type: &EventType,
        consumer_ids: &[u64],
    ) -> Result<Vec<QueueMapping>, RoutingError> {
        let mut conn = self.store.writer();
        let tx = conn.transaction()?;
        let queues = Self::prepare(&tx, caller, consumer_ids)?;
        let out = Self::insert_missing(&tx, caller.service_id, event_type, &queues)?;
        tx.commit()?;
        Ok(out)
    }

    /// Makes `consumer_ids` the complete target set for `event_type`. Pairs in
    /// both the old and new set keep their mapping ids.
    pub fn update_queue_mapping(
        &self,
        caller: &Service,
        event_type: &EventType,
        consumer_ids: &[u64],
    ) -> Result<Vec<QueueMapping>, RoutingError> {
        let mut conn = self.store.writer();
        let tx = conn.transaction()?;
        let queues = Self::prepare(&tx, caller, consumer_ids)?;
        let existing: Vec<QueueMapping> = {
            let mut stmt = tx.prepare_cached(&format!(
                "SELECT {MAPPING_COLUMNS} FROM queue_mapping WHERE producer_id = ?1 AND event_type = ?2"
            ))?;
            let rows = stmt.query_map(params![caller.service_id as i64, event_type.as_str()], mapping_from_row)?;
            rows.collect::<Result<_, _>>()?
        };
        for m in existing.iter().filter(|m| !queues.contains(&m.consumer_queue)) {
            tx.execute("DELETE FROM queue_mapping WHERE id = ?1", [m.mapping_id as i64])?;
        }
        let out = Self::insert_missing(&tx, caller.service_id, event_type, &queues)?;
        tx.commit()?;
        Ok(out)
    }

    /// Mappings visible to the caller: a producer sees its own, a consumer
    /// sees those targeting its queue, an admin sees all.
    pub fn get_queue_mapping(&self, caller: &Service) -> Result<Vec<QueueMapping>, RoutingError> {
        let conn = self.store.reader();
        let rows = if caller.is_admin {
            let mut stmt = conn.prepare_cached(&format!("SELECT {MAPPING_COLUMNS} FROM queue_mapping ORDER BY id"))?;
            let rows = stmt.query_map([], mapping_from_row)?;
            rows.collect::<Result<_, _>>()?
        } else if let Some(q) = &caller.queue_name {
            let mut stmt = conn.prepare_cached(&format!(
                "SELECT {MAPPING_COLUMNS} FROM queue_mapping WHERE consumer_queue = ?1 ORDER BY id"
            ))?;
            let rows = stmt.query_map([q.as_str()], mapping_from_row)?;
            rows.collect::<Result<_, _>>()?
        } else {
            let mut stmt = conn.prepare_cached(&format!(
                "SELECT {MAPPING_COLUMNS} FROM queue_mapping WHERE producer_id = ?1 ORDER BY id"
            ))?;
            let rows = stmt.query_map([caller.service_id as i64], mapping_from_row)?;
            rows.collect::<Result<_, _>>()?
        };
        Ok(rows)
    }

    /// Deletes the caller's mappings, all of them or those for one event type.
    /// Returns how many rows went away.
    pub fn delete_queue_mapping(
        &self,
        caller: &Service,
        event_type: Option<&EventType>,
    ) -> Result<usize, RoutingError> {
        if caller.role != ServiceRole::Producer {
            return Err(RoutingError::NotAProducer);
        }
        let conn = self.store.writer();
        let n = match event_type {
            Some(et) => conn.execute(
                "DELETE FROM queue_mapping WHERE producer_id = ?1 AND event_type = ?2",
                params![caller.service_id as i64, et.as_str()],
            )?,
            None => conn.execute("DELETE FROM queue_mapping WHERE producer_id = ?1", [caller.service_id as i64])?,
        };
        Ok(n)
    }

    /// Target queues for one publish, sorted by name.
    pub fn resolve(&self, producer_id: u64, event_type: &EventType) -> Result<Vec<QueueName>, RoutingError> {
        let conn = self.store.reader();
        let mut stmt = conn.prepare_cached(
            "SELECT consumer_queue FROM queue_mapping WHERE producer_id = ?1 AND event_type = ?2 ORDER BY consumer_queue",
        )?;
        let rows = stmt.query_map(params![producer_id as i64, event_type.as_str()], |r| r.get::<_, String>(0))?;
        rows.map(|r| {
            let name = r?;
            QueueName::new(name).map_err(|e| RoutingError::Storage(e.to_string()))
        })
        .collect()
    }

    /// Queue name a consumer id maps to, if it is a live consumer.
    pub fn consumer_queue(&self, consumer_id: u64) -> Result<Option<QueueName>, RoutingError> {
        let conn = self.store.reader();
        let q: Option<Option<String>> = conn
            .query_row("SELECT queue_name FROM service WHERE id = ?1", [consumer_id as i64], |r| r.get(0))
            .optional()?;
        Ok(q.flatten().map(|_| queue_for(consumer_id)))
    }
}
