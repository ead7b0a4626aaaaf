//! CSV output. Files are written to a temporary sibling and renamed into
//! place, so readers never see a half-written file.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::metrics::{MetricsSummary, TimingSample};

pub const SAMPLE_HEADER: [&str; 4] = ["target", "n", "repeat", "t_ms"];
pub const SUMMARY_HEADER: [&str; 6] = ["target", "n", "mean_ms", "stddev_ms", "throughput_per_s", "cv_pct"];

/// `results.csv` → `results.summary.csv`, in the same directory.
pub fn summary_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "results".into());
    path.with_file_name(format!("{stem}.summary.csv"))
}

pub fn write_atomically(path: &Path, fill: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    fill(tmp.as_file_mut())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn write_samples(out: &mut dyn Write, samples: &[TimingSample]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SAMPLE_HEADER)?;
    for s in samples {
        w.write_record([s.target.clone(), s.n.to_string(), s.repeat.to_string(), s.t_ms.to_string()])?;
    }
    w.flush()
}

pub fn write_summaries(out: &mut dyn Write, summaries: &[MetricsSummary]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for s in summaries {
        w.write_record([
            s.target.clone(),
            s.n.to_string(),
            s.mean_ms.to_string(),
            s.stddev_ms.to_string(),
            s.throughput_per_s.to_string(),
            s.cv_pct.to_string(),
        ])?;
    }
    w.flush()
}

/// Writes the per-repeat table to `path` and the per-step summary next to it.
/// Returns the summary path.
pub fn emit_csv(samples: &[TimingSample], summaries: &[MetricsSummary], path: &Path) -> io::Result<PathBuf> {
    if samples.is_empty() {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "no samples to write"));
    }
    let summary = summary_path(path);
    write_atomically(path, |w| write_samples(w, samples))?;
    write_atomically(&summary, |w| write_summaries(w, summaries))?;
    Ok(summary)
}
