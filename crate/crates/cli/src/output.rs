use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::CliError;

/// Provenance written as the first line of every CSV.
#[derive(Debug, Clone)]
pub struct Stamp {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub deterministic: bool,
}

impl Stamp {
    pub fn comment(&self) -> String {
        let mut line = format!("# command={} config_sha256={} seed={}", self.command, self.config_hash, self.seed);
        if !self.deterministic {
            let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
            line.push_str(&format!(" generated_unix={secs}"));
        }
        line
    }
}

/// Numeric field with 17 significant digits.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// A CSV file with a comment line and a header row.
pub struct Table {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
}

impl Table {
    pub fn create(dir: &Path, name: &str, stamp: &Stamp, header: &[&str]) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(name);
        let mut file = BufWriter::new(File::create(&path).map_err(|e| io_err(&path, e))?);
        writeln!(file, "{}", stamp.comment()).map_err(|e| io_err(&path, e))?;
        let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file);
        writer.write_record(header).map_err(|e| csv_err(&path, e))?;
        Ok(Table { path, writer })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields).map_err(|e| csv_err(&self.path, e))
    }

    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        self.writer.flush().map_err(|e| io_err(&self.path, e))?;
        Ok(self.path)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Config(format!("cannot write {}: {e}", path.display()))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::Config(format!("cannot write {}: {e}", path.display()))
}
