//! Append-only CSV metrics for training runs.
//!
//! Metrics are best-effort: an unwritable file downgrades to a warning and
//! the run keeps going.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const HEADER: &str =
    "wall_time,env_steps,episodes,loss,epsilon,train_return_mean,eval_pol,eval_return_mean";

/// One metrics row; optional columns render as empty cells.
#[derive(Clone, Debug, Default)]
pub struct MetricsRow {
    pub env_steps: u64,
    pub episodes: u64,
    pub loss: Option<f64>,
    pub epsilon: f64,
    pub train_return_mean: Option<f64>,
    pub eval_pol: Option<f64>,
    pub eval_return_mean: Option<f64>,
}

/// CSV writer anchored to its creation instant for wall_time.
///
/// In deterministic mode wall_time is left blank so byte-identical reruns
/// produce byte-identical files.
pub struct MetricsWriter {
    out: Option<BufWriter<File>>,
    path: PathBuf,
    start: Instant,
    deterministic: bool,
    last_env_steps: Option<u64>,
}

impl MetricsWriter {
    pub fn create(path: &Path, deterministic: bool) -> Self {
        let out = match File::create(path) {
            Ok(file) => {
                let mut w = BufWriter::new(file);
                match writeln!(w, "{HEADER}") {
                    Ok(()) => Some(w),
                    Err(err) => {
                        eprintln!("warning: metrics disabled, cannot write {}: {err}", path.display());
                        None
                    }
                }
            }
            Err(err) => {
                eprintln!("warning: metrics disabled, cannot create {}: {err}", path.display());
                None
            }
        };
        MetricsWriter {
            out,
            path: path.to_path_buf(),
            start: Instant::now(),
            deterministic,
            last_env_steps: None,
        }
    }

    /// Writer that drops every row; used when no run directory exists.
    pub fn sink() -> Self {
        MetricsWriter {
            out: None,
            path: PathBuf::new(),
            start: Instant::now(),
            deterministic: true,
            last_env_steps: None,
        }
    }

    pub fn row(&mut self, row: &MetricsRow) {
        if let Some(last) = self.last_env_steps {
            assert!(
                row.env_steps > last,
                "metrics rows must be strictly increasing in env_steps ({} after {})",
                row.env_steps,
                last
            );
        }
        self.last_env_steps = Some(row.env_steps);
        let Some(out) = self.out.as_mut() else {
            return;
        };
        let wall = if self.deterministic {
            String::new()
        } else {
            format!("{:.3}", self.start.elapsed().as_secs_f64())
        };
        let line = format!(
            "{wall},{},{},{},{},{},{},{}",
            row.env_steps,
            row.episodes,
            fmt_opt(row.loss),
            fmt_f64(row.epsilon),
            fmt_opt(row.train_return_mean),
            fmt_opt(row.eval_pol),
            fmt_opt(row.eval_return_mean),
        );
        if let Err(err) = writeln!(out, "{line}").and_then(|()| out.flush()) {
            eprintln!("warning: metrics disabled, write to {} failed: {err}", self.path.display());
            self.out = None;
        }
    }

    pub fn flush(&mut self) {
        if let Some(out) = self.out.as_mut() {
            if let Err(err) = out.flush() {
                eprintln!("warning: metrics flush of {} failed: {err}", self.path.display());
                self.out = None;
            }
        }
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        self.flush();
    }
}

fn fmt_f64(v: f64) -> String {
    // Shortest round-trip form keeps files identical across reruns.
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}
