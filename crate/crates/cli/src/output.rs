use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use tempfile::NamedTempFile;

use crate::error::{CliError, CliResult};

/// Output directory of one command.
#[derive(Debug, Clone)]
pub struct OutDir(PathBuf);

impl OutDir {
    pub fn create(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
        Ok(OutDir(dir.to_path_buf()))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    pub fn sub(&self, name: &str) -> CliResult<Self> {
        OutDir::create(&self.0.join(name))
    }

    /// Writes through a temporary file in the same directory, then renames.
    pub fn write(&self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.path(name);
        let fail = |e: std::io::Error| CliError::Input(format!("{}: {e}", path.display()));
        let mut tmp = NamedTempFile::new_in(&self.0).map_err(fail)?;
        tmp.write_all(bytes).map_err(fail)?;
        tmp.as_file().sync_all().map_err(fail)?;
        tmp.persist(&path).map_err(|e| fail(e.error))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<PathBuf> {
        let mut bytes =
            serde_json::to_vec_pretty(value).map_err(|e| CliError::Numeric(e.to_string()))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    /// Wall-clock seconds go to their own file, outside the reproducible
    /// outputs.
    pub fn write_timing(&self, command: &str, elapsed: Duration) -> CliResult<()> {
        #[derive(Serialize)]
        struct Timing<'a> {
            command: &'a str,
            wall_clock_seconds: f64,
        }
        self.write_json(
            "timing.json",
            &Timing {
                command,
                wall_clock_seconds: elapsed.as_secs_f64(),
            },
        )?;
        Ok(())
    }
}

/// CSV text whose first line is a `# config_hash: …` comment.
pub fn csv_with_hash<R: Serialize>(hash: &str, rows: &[R]) -> CliResult<Vec<u8>> {
    let mut out = format!("# config_hash: {hash}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for r in rows {
            w.serialize(r).map_err(|e| CliError::Input(e.to_string()))?;
        }
        w.flush()?;
    }
    Ok(out)
}
