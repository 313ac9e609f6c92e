//! CSV and sidecar writers. Floats use 17 significant digits in scientific notation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use strata::EnergyTrace;

use crate::CliError;

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// `path` with `suffix` appended to the full file name, e.g. `run.csv.meta`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let mut f = File::create(path).map_err(io(path))?;
    f.write_all(text.as_bytes()).map_err(io(path))?;
    f.sync_all().map_err(io(path))
}

pub fn energy_header(modes: usize) -> String {
    let mut h = String::from("t");
    for l in 0..modes {
        h.push_str(&format!(",E{l}"));
    }
    h
}

pub fn write_trace(path: &Path, trace: &EnergyTrace, modes: usize) -> Result<(), CliError> {
    let f = File::create(path).map_err(io(path))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "{}", energy_header(modes)).map_err(io(path))?;
    for (t, row) in trace.times.iter().zip(&trace.energies) {
        let mut line = fmt_f64(*t);
        for e in row {
            line.push(',');
            line.push_str(&fmt_f64(*e));
        }
        writeln!(w, "{line}").map_err(io(path))?;
    }
    w.flush().map_err(io(path))
}

pub fn write_rows(path: &Path, header: &str, rows: &[String]) -> Result<(), CliError> {
    let mut text = String::with_capacity(64 * (rows.len() + 1));
    text.push_str(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    write_text(path, &text)
}
