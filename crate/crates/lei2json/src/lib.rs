//! CSV livestock records to event envelopes.
//!
//! [`convert`] reads a CSV file with a header row and turns each data row
//! into an envelope for one event type, using a [`ColumnMapping`] (the
//! identity mapping over the schema's field names by default). Rows that do
//! not coerce or do not validate are reported by line and skipped.
//! [`convert_and_publish`] sends the rows through a running gateway.

pub mod convert;
pub mod mapping;
pub mod publish;

use std::io::{self, Write};

pub use convert::{coerce, convert, convert_reader, convert_rows, Conversion, ConvertError, ConvertedRow, RowError};
pub use mapping::{ColumnMapping, ColumnSpec, FieldType, MappingError};
pub use publish::{convert_and_publish, PublishError, PublishSummary, RowOutcome, RowReport, Target, MAX_IN_FLIGHT};

/// One envelope per line, in wire form.
pub fn write_jsonl(rows: &[ConvertedRow], out: &mut impl Write) -> io::Result<()> {
    for r in rows {
        out.write_all(&leisa_core::domain::serialize_envelope(&r.envelope))?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
