//! Core of the livestock event information sharing broker.
//!
//! The crate is organised the way requests flow through the system:
//!
//! * [`domain`] holds the event envelope and the shared value types.
//! * [`schema`] validates event payloads against per-event-type LEI schemas.
//! * [`broker`] is the embedded durable queue broker (write-ahead log per queue).
//! * [`registry`] manages producer/consumer services and keeps the broker in step.
//! * [`routing`] holds producer-owned event → consumer-queue mappings.
//!
//! The HTTP surface lives in the `leisa-gateway` crate.

pub mod broker;
pub mod domain;
pub mod fault;
pub mod password;
pub mod registry;
pub mod routing;
pub mod schema;
mod store;

pub use broker::{Broker, BrokerError};
pub use domain::{EventEnvelope, EventType, ServiceRole};
pub use registry::{Registry, RegistryError, Service};
pub use routing::{QueueMapping, Routing, RoutingError};
pub use schema::{SchemaRegistry, ValidationResult, Violation};
