//! Deterministic report rendering and crash-safe file output.
//!
//! All numbers are printed with a fixed precision so that two runs with
//! the same seed produce byte-identical files.

use std::path::Path;

use crate::error::Result;
use crate::metrics::{AggregateMetrics, EpisodeMetrics};

/// Writes via a temporary file in the same directory followed by an
/// atomic rename, so a crash never leaves a half-written file behind.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            tempfile::NamedTempFile::new_in(d)?
        }
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    use std::io::Write;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// Plain `key value` report of the aggregate metrics with stable key
/// order, one entry per line.
pub fn render_report(agg: &AggregateMetrics) -> String {
    let mut out = String::new();
    let mut line = |k: &str, v: String| {
        out.push_str(k);
        out.push(' ');
        out.push_str(&v);
        out.push('\n');
    };
    line("episode_count", agg.episode_count.to_string());
    for (key, mc) in [
        ("b_over_b", agg.b_over_b),
        ("n_over_n", agg.n_over_n),
        ("b_over_j", agg.b_over_j),
        ("n_over_j", agg.n_over_j),
        ("j_over_j", agg.j_over_j),
        ("hm", agg.hm),
        ("am", agg.am),
    ] {
        line(key, fmt(mc.mean));
        line(&format!("ci95_{key}"), fmt(mc.ci95));
    }
    line("hm_of_means", fmt(agg.hm_of_means));
    out
}

pub const EPISODE_CSV_HEADER: &str = "episode,b_over_b,n_over_n,b_over_j,n_over_j,j_over_j,hm,am";

/// One row per episode, columns matching `EPISODE_CSV_HEADER`.
pub fn render_episodes_csv(episodes: &[EpisodeMetrics]) -> String {
    let mut out = String::from(EPISODE_CSV_HEADER);
    out.push('\n');
    for (i, e) in episodes.iter().enumerate() {
        out.push_str(&i.to_string());
        for (_, v) in e.fields() {
            out.push(',');
            out.push_str(&fmt(v));
        }
        out.push('\n');
    }
    out
}

/// Per-epoch scalar curves (`name,epoch,value`), e.g. training loss or
/// validation harmonic mean.
pub fn render_curves_csv(curves: &[(String, Vec<f64>)]) -> String {
    let mut out = String::from("name,epoch,value\n");
    for (name, values) in curves {
        for (epoch, v) in values.iter().enumerate() {
            out.push_str(&format!("{name},{epoch},{}\n", fmt(*v)));
        }
    }
    out
}
