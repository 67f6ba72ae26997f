//! Artifact formats and atomic file writes.

use std::io::Write;
use std::path::Path;

use essvi_mm::agent::{EpisodeRecord, StepRecord};
use serde::Deserialize;

pub const RUN_LOG: &str = "run_log.csv";
pub const STEP_LOG: &str = "step_log.csv";
pub const SETTINGS: &str = "settings.json";

pub const RUN_LOG_HEADER: [&str; 13] = [
    "episode",
    "reward_sum",
    "pnl_raw",
    "pnl_adj",
    "bf_mean",
    "cal_mean",
    "shape_mean",
    "cvar_mean",
    "var5_steps",
    "cvar5_steps",
    "alpha_mean",
    "hedge_mean",
    "act_std",
];

pub const STEP_LOG_HEADER: [&str; 15] = [
    "episode",
    "t",
    "spot",
    "reward",
    "pnl_quote",
    "pnl_hedge",
    "bf",
    "cal",
    "shape",
    "cvar",
    "alpha",
    "hedge",
    "psi_scale",
    "rho_shift",
    "dual",
];

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Serializes a header and rows of pre-formatted fields as CSV with LF endings.
pub fn csv_bytes<R, I>(header: &[&str], rows: R) -> Vec<u8>
where
    R: IntoIterator<Item = I>,
    I: IntoIterator<Item = String>,
{
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(row.into_iter().collect::<Vec<_>>()).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn run_log_bytes(episodes: &[EpisodeRecord]) -> Vec<u8> {
    csv_bytes(
        &RUN_LOG_HEADER,
        episodes.iter().map(|e| {
            let mut row = vec![e.episode.to_string()];
            row.extend(
                [
                    e.reward_sum,
                    e.pnl_raw,
                    e.pnl_adj,
                    e.bf_mean,
                    e.cal_mean,
                    e.shape_mean,
                    e.cvar_mean,
                    e.var5_steps,
                    e.cvar5_steps,
                    e.alpha_mean,
                    e.hedge_mean,
                    e.act_std,
                ]
                .map(fmt_f64),
            );
            row
        }),
    )
}

pub fn step_log_bytes(steps: &[StepRecord]) -> Vec<u8> {
    csv_bytes(
        &STEP_LOG_HEADER,
        steps.iter().map(|s| {
            let mut row = vec![s.episode.to_string(), s.t.to_string()];
            row.extend(
                [
                    s.spot,
                    s.reward,
                    s.pnl_quote,
                    s.pnl_hedge,
                    s.bf,
                    s.cal,
                    s.shape,
                    s.cvar,
                    s.alpha,
                    s.hedge,
                    s.psi_scale,
                    s.rho_shift,
                    s.dual,
                ]
                .map(fmt_f64),
            );
            row
        }),
    )
}

/// One row of `step_log.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct StepRow {
    pub episode: usize,
    pub t: usize,
    pub spot: f64,
    pub reward: f64,
    pub pnl_quote: f64,
    pub pnl_hedge: f64,
    pub bf: f64,
    pub cal: f64,
    pub shape: f64,
    pub cvar: f64,
    pub alpha: f64,
    pub hedge: f64,
    pub psi_scale: f64,
    pub rho_shift: f64,
    pub dual: f64,
}

/// One row of `run_log.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct RunRow {
    pub episode: usize,
    pub reward_sum: f64,
    pub pnl_raw: f64,
    pub pnl_adj: f64,
    pub bf_mean: f64,
    pub cal_mean: f64,
    pub shape_mean: f64,
    pub cvar_mean: f64,
    pub var5_steps: f64,
    pub cvar5_steps: f64,
    pub alpha_mean: f64,
    pub hedge_mean: f64,
    pub act_std: f64,
}

/// Reads a CSV file, requiring the exact header.
pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path, header: &[&str]) -> Result<Vec<T>, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let got = r.headers().map_err(|e| format!("{}: {e}", path.display()))?;
    if !got.iter().eq(header.iter().copied()) {
        return Err(format!("{}: unexpected header", path.display()));
    }
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| format!("{}: {e}", path.display()))
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_at_17_digits() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 123456.789, f64::MIN_POSITIVE, 0.0] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
        }
        assert_eq!(fmt_f64(0.5), "5.0000000000000000e-1");
    }

    #[test]
    fn csv_uses_lf_and_header() {
        let b = csv_bytes(&["a", "b"], [vec!["1".to_string(), "2".to_string()]]);
        assert_eq!(String::from_utf8(b).unwrap(), "a,b\n1,2\n");
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("x.csv");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(d.path()).unwrap().count(), 1);
    }
}
