//! CSV export of per-sample features.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::train::trainer::EmbeddingRow;

/// Header `index,label,z_long_0..,z_trans_0..,z_f_0..`.
pub fn embeddings_csv(rows: &[EmbeddingRow]) -> String {
    let mut out = String::from("index,label");
    if let Some(first) = rows.first() {
        for (prefix, n) in [("z_long", first.z_long.len()), ("z_trans", first.z_trans.len()), ("z_f", first.z_f.len())] {
            for i in 0..n {
                write!(out, ",{prefix}_{i}").unwrap();
            }
        }
    }
    out.push('\n');
    for r in rows {
        write!(out, "{},{}", r.index, r.label).unwrap();
        for v in r.z_long.iter().chain(&r.z_trans).chain(&r.z_f) {
            write!(out, ",{v:.6}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_embeddings(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    std::fs::write(path, embeddings_csv(rows)).map_err(|e| Error::io(path, e))
}
