//! Artifact writers: CSV and JSON outputs, a small SVG histogram renderer,
//! and the run manifest with per-file checksums.
//!
//! Every data artifact is byte-deterministic for a fixed resolved config
//! and seed. The manifest's creation timestamp is the only field that
//! differs between re-runs, so checksum equality across manifests is the
//! reproducibility check.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cpr_core::audit::AuditReport;
use cpr_core::sampler::{ModelChoice, Trajectory};
use cpr_core::schedule::NoiseSchedule;

use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::experiment::BenchRow;

/// One row per trajectory state: index, grid time, coordinates, and the
/// model that produced the transition into this state (empty for the
/// initial state and for methods without per-step choices).
pub fn write_samples_csv(path: &Path, trajectories: &[Trajectory<f64>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    let dim = trajectories.first().map_or(0, |t| t.states[0].1.len());
    let mut header = vec!["traj".to_string(), "step".into(), "t".into()];
    header.extend((0..dim).map(|j| format!("x{j}")));
    header.push("choice".into());
    w.write_record(&header)?;
    for trajectory in trajectories {
        for (k, (t, x)) in trajectory.states.iter().enumerate() {
            let mut record = vec![trajectory.index.to_string(), k.to_string(), t.to_string()];
            record.extend(x.iter().map(f64::to_string));
            record.push(choice_label(trajectory, k).into());
            w.write_record(&record)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn choice_label(trajectory: &Trajectory<f64>, state_index: usize) -> &'static str {
    if state_index == 0 {
        return "";
    }
    match trajectory.choices.as_ref().map(|c| c[state_index - 1]) {
        Some(ModelChoice::Safe) => "safe",
        Some(ModelChoice::Private) => "private",
        None => "",
    }
}

/// Accepted-attempt counts from the rejection baseline, one row per sample.
pub fn write_attempts_csv(path: &Path, attempts: &[u64]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["traj", "attempts"])?;
    for (i, count) in attempts.iter().enumerate() {
        w.write_record([i.to_string(), count.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// The discretized schedule, one row per grid point in ascending time.
pub fn write_schedule_csv<W: Write>(writer: W, schedule: &NoiseSchedule<f64>) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "beta", "gamma", "sigma", "alpha"])?;
    for i in 0..schedule.num_steps() {
        w.write_record([
            schedule.t(i).to_string(),
            schedule.beta(i).to_string(),
            schedule.gamma(i).to_string(),
            schedule.sigma(i).to_string(),
            schedule.log_snr(i).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_audit_json(path: &Path, report: &AuditReport) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_histogram_csv(path: &Path, report: &AuditReport) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bin_left", "bin_right", "count"])?;
    let h = &report.histogram;
    for (i, count) in h.counts.iter().enumerate() {
        w.write_record([
            h.edges[i].to_string(),
            h.edges[i + 1].to_string(),
            count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-size bar chart of the per-sample log-ratio histogram, with the
/// divergence budget drawn as a vertical line when it lies in range. Pure
/// text assembly, so the artifact is byte-stable.
pub fn write_histogram_svg(path: &Path, report: &AuditReport) -> CliResult<()> {
    const WIDTH: f64 = 640.0;
    const HEIGHT: f64 = 360.0;
    const LEFT: f64 = 55.0;
    const RIGHT: f64 = 15.0;
    const TOP: f64 = 20.0;
    const BOTTOM: f64 = 45.0;
    let h = &report.histogram;
    let lo = h.edges[0];
    let hi = *h.edges.last().expect("histogram has edges");
    let span = hi - lo;
    let max_count = h.counts.iter().copied().max().unwrap_or(1).max(1) as f64;
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x_of = |v: f64| LEFT + (v - lo) / span * plot_w;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"14\" font-family=\"monospace\" font-size=\"12\">{} per-sample log-ratio ({} samples)</text>\n",
        LEFT, report.method, report.sample_count
    ));
    for (i, &count) in h.counts.iter().enumerate() {
        let x0 = x_of(h.edges[i]);
        let x1 = x_of(h.edges[i + 1]);
        let bar_h = count as f64 / max_count * plot_h;
        svg.push_str(&format!(
            "  <rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#4a7ab5\"/>\n",
            x0,
            TOP + plot_h - bar_h,
            (x1 - x0).max(0.0),
            bar_h
        ));
    }
    svg.push_str(&format!(
        "  <line x1=\"{LEFT:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        TOP + plot_h,
        WIDTH - RIGHT,
        TOP + plot_h
    ));
    svg.push_str(&format!(
        "  <line x1=\"{LEFT:.1}\" y1=\"{TOP:.1}\" x2=\"{LEFT:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        TOP + plot_h
    ));
    if let Some(k_c) = report.k_c_bound {
        if k_c >= lo && k_c <= hi {
            let x = x_of(k_c);
            svg.push_str(&format!(
                "  <line x1=\"{x:.2}\" y1=\"{TOP:.1}\" x2=\"{x:.2}\" y2=\"{:.1}\" \
                 stroke=\"#c23b22\" stroke-dasharray=\"4 3\"/>\n",
                TOP + plot_h
            ));
            svg.push_str(&format!(
                "  <text x=\"{:.2}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\" \
                 fill=\"#c23b22\">k_c={k_c:.4}</text>\n",
                x + 4.0,
                TOP + 12.0
            ));
        }
    }
    svg.push_str(&format!(
        "  <text x=\"{LEFT:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\">{lo:.4}</text>\n",
        HEIGHT - 20.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\" \
         text-anchor=\"end\">{hi:.4}</text>\n",
        WIDTH - RIGHT,
        HEIGHT - 20.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\" \
         text-anchor=\"end\">{}</text>\n",
        LEFT - 5.0,
        TOP + 10.0,
        h.counts.iter().copied().max().unwrap_or(0)
    ));
    svg.push_str("</svg>\n");
    fs::write(path, svg)?;
    Ok(())
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "config",
        "method",
        "samples",
        "safe_evals",
        "private_evals",
        "mean_attempts",
        "max_attempts",
    ])?;
    for row in rows {
        w.write_record([
            row.config.clone(),
            row.method.to_string(),
            row.samples.to_string(),
            row.safe_evals.to_string(),
            row.private_evals.to_string(),
            row.mean_attempts.map(|v| v.to_string()).unwrap_or_default(),
            row.max_attempts.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OutputChecksum {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Ties a run's artifacts to the exact resolved config: re-running an
/// identical config and seed reproduces every checksum; only
/// `created_unix_secs` differs.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_sha256: String,
    pub code_version: String,
    pub created_unix_secs: u64,
    pub outputs: Vec<OutputChecksum>,
}

pub struct ManifestBuilder {
    dir: PathBuf,
    outputs: Vec<OutputChecksum>,
}

impl ManifestBuilder {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            outputs: Vec::new(),
        }
    }

    /// Hash an artifact already written under the output directory.
    pub fn record(&mut self, name: &str) -> CliResult<()> {
        let bytes = fs::read(self.dir.join(name))?;
        self.outputs.push(OutputChecksum {
            path: name.into(),
            sha256: hex(&Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn write(mut self, config_sha256: String) -> CliResult<PathBuf> {
        self.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = RunManifest {
            config_sha256,
            code_version: env!("CARGO_PKG_VERSION").into(),
            created_unix_secs: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            outputs: self.outputs,
        };
        let path = self.dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }
}

/// Hash of the resolved config's canonical JSON form. The output directory
/// is excluded from serialization, so runs differing only in destination
/// hash identically.
pub fn config_sha256(config: &ExperimentConfig) -> CliResult<String> {
    Ok(hex(&Sha256::digest(serde_json::to_vec(config)?)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
