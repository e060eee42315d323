//! The `.fwb` XML policy language: parsing, serialization, semantic
//! validation and address-table files.

mod parse;
mod serialize;
mod table;
mod validate;

pub use parse::{parse, parse_with_diagnostics};
pub use serialize::serialize;
pub use table::{load_address_table, load_tables, parse_address_table, TableError};
pub use validate::validate_schema;

use crate::model::ObjectId;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("malformed XML: {0}")]
    Xml(String),
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("{path}: duplicate id {id:?}")]
    DuplicateId { id: ObjectId, path: String },
    #[error("{path}: reference to unknown id {id:?}")]
    DanglingRef { id: ObjectId, path: String },
}
