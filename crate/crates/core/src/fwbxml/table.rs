use crate::model::{AddressSet, Cidr, ObjectDatabase, ObjectId};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("cannot read address table {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("address table {id:?} ({path}): {source}")]
    InTable {
        id: ObjectId,
        path: PathBuf,
        #[source]
        source: Box<TableError>,
    },
}

/// Parses address-table text: one address or CIDR block per line, `#`
/// starts a comment, blank lines are ignored.
pub fn parse_address_table(text: &str) -> Result<AddressSet, TableError> {
    let mut set = AddressSet::empty();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let c: Cidr = line.parse().map_err(|message| TableError::Parse { line: i + 1, message })?;
        set = set.union(&AddressSet::cidr(c));
    }
    Ok(set)
}

pub fn load_address_table(path: &Path) -> Result<AddressSet, TableError> {
    let text = std::fs::read_to_string(path).map_err(|source| TableError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_address_table(&text)
}

/// Loads every compile-time table of `db`. Relative paths are resolved
/// against `base`.
pub fn load_tables(db: &ObjectDatabase, base: &Path) -> Result<ObjectDatabase, TableError> {
    db.with_loaded_tables(|o, p| {
        let path = base.join(p);
        load_address_table(&path).map_err(|e| TableError::InTable {
            id: o.id.clone(),
            path,
            source: Box::new(e),
        })
    })
}
