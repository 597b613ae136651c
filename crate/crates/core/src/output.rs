//! Plain-text output helpers shared by the CSV writers.

use std::io::Write;

use crate::error::{Error, Result};

/// Formats with 17 significant digits, enough to round-trip any `f64`.
pub fn fmt17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

pub(crate) fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().from_writer(w)
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("{other:?}")),
    }
}

/// Writes one CSV record of mixed labels and numbers.
pub(crate) fn write_row<W: Write>(w: &mut csv::Writer<W>, fields: &[String]) -> Result<()> {
    w.write_record(fields).map_err(csv_err)
}
