//! CSV and JSON emission of metric tables.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use noisybp::{MetricRecord, MetricsTable};

use crate::CliError;

pub const CSV_HEADER: [&str; 9] = [
    "experiment",
    "recipe",
    "variant",
    "node",
    "x",
    "metric",
    "value",
    "trials",
    "seed",
];

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

/// Writes the table in long format. An empty table yields the header only.
pub fn write_csv<W: Write>(table: &MetricsTable, out: W) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in table.records() {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn read_csv<R: Read>(input: R) -> Result<MetricsTable, CliError> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(CliError::Config(format!(
            "unexpected CSV header {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut table = MetricsTable::new();
    for row in r.deserialize::<MetricRecord>() {
        table.push(row?).map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(table)
}

pub fn emit_csv(table: &MetricsTable, path: &Path) -> Result<(), CliError> {
    write_csv(table, create(path)?)
}

pub fn load_csv(path: &Path) -> Result<MetricsTable, CliError> {
    read_csv(open(path)?)
}

pub fn emit_json(table: &MetricsTable, path: &Path) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, table).map_err(|e| CliError::Runtime(e.to_string()))?;
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn load_json(path: &Path) -> Result<MetricsTable, CliError> {
    serde_json::from_reader(open(path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}
