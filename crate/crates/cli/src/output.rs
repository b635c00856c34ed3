//! CSV and JSON writers. Floats carry 17 significant digits so that a value
//! read back is bit-identical to the one written.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use fsmp_core::DMatrix;
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn csv(&self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<()> {
        let path = self.path(name);
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(header).map_err(|e| CliError::io(&path, e))?;
        for row in rows {
            w.write_record(&row).map_err(|e| CliError::io(&path, e))?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))
    }

    pub fn json(&self, name: &str, value: &impl Serialize) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
        text.push('\n');
        self.text(name, &text)
    }

    pub fn text(&self, name: &str, text: &str) -> CliResult<()> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

/// `n,k,value` rows for the nonzero entries of a square matrix.
pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for n in 0..m.nrows() {
        for k in 0..m.ncols() {
            let v = m[(n, k)];
            if v != 0.0 {
                rows.push(vec![n.to_string(), k.to_string(), num(v)]);
            }
        }
    }
    rows
}
