//! SQLite-backed tables for services and queue mappings.
//!
//! One writer connection serialises every mutation; reads go through a second
//! connection and see the last committed state (WAL journal).

use std::path::Path;
use std::sync::{Mutex, MutexGuard};

use rusqlite::{Connection, OpenFlags};

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS service (
    id            INTEGER PRIMARY KEY,
    username      TEXT    NOT NULL UNIQUE,
    password_hash TEXT    NOT NULL,
    role          TEXT    NOT NULL CHECK (role IN ('producer', 'consumer')),
    queue_name    TEXT    UNIQUE,
    is_admin      INTEGER NOT NULL DEFAULT 0,
    created_at    TEXT    NOT NULL,
    CHECK ((role = 'consumer') = (queue_name IS NOT NULL))
);
CREATE TABLE IF NOT EXISTS queue_mapping (
    id             INTEGER PRIMARY KEY AUTOINCREMENT,
    producer_id    INTEGER NOT NULL REFERENCES service (id) ON DELETE CASCADE,
    event_type     TEXT    NOT NULL,
    consumer_queue TEXT    NOT NULL REFERENCES service (queue_name) ON DELETE CASCADE,
    UNIQUE (producer_id, event_type, consumer_queue)
);
CREATE INDEX IF NOT EXISTS queue_mapping_consumer ON queue_mapping (consumer_queue);
CREATE TABLE IF NOT EXISTS counter (
    name  TEXT PRIMARY KEY,
    value INTEGER NOT NULL
);
";

#[derive(Debug)]
pub(crate) struct Store {
    writer: Mutex<Connection>,
    reader: Mutex<Connection>,
}

impl Store {
    pub fn open(path: &Path) -> rusqlite::Result<Self> {
        let writer = Connection::open(path)?;
        writer.pragma_update(None, "journal_mode", "WAL")?;
        writer.pragma_update(None, "synchronous", "FULL")?;
        writer.pragma_update(None, "foreign_keys", "ON")?;
        writer.execute_batch(SCHEMA)?;
        let reader = Connection::open_with_flags(
            path,
            OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX | OpenFlags::SQLITE_OPEN_URI,
        )?;
        Ok(Self { writer: Mutex::new(writer), reader: Mutex::new(reader) })
    }

    pub fn writer(&self) -> MutexGuard<'_, Connection> {
        self.writer.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn reader(&self) -> MutexGuard<'_, Connection> {
        self.reader.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Next value of a persisted monotonic counter. Values are never reused,
    /// even when the transaction that drew one later rolls back.
    pub fn next_id(&self, name: &str) -> rusqlite::Result<u64> {
        let conn = self.writer();
        conn.query_row(
            "INSERT INTO counter (name, value) VALUES (?1, 1)
             ON CONFLICT (name) DO UPDATE SET value = value + 1
             RETURNING value",
            [name],
            |row| row.get::<_, i64>(0),
        )
        .map(|v| v as u64)
    }
}
