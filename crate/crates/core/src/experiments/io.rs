//! Trajectory CSVs and coefficient bundles.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so a value
//! read back parses to the identical `f64`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::plant::{ClosedLoopTrajectory, StepRecord};

fn header(dims: (usize, usize, usize)) -> String {
    let (lx, lu, ly) = dims;
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=ly).map(|i| format!("r_{i}")));
    cols.extend((1..=ly).map(|i| format!("y_{i}")));
    cols.extend((1..=lx).map(|i| format!("x_{i}")));
    cols.extend((1..=lu).map(|i| format!("ur_{i}")));
    cols.extend((1..=lu).map(|i| format!("u_{i}")));
    cols.push("ctrl_time_s".into());
    cols.join(",")
}

pub fn trajectory_to_csv(traj: &ClosedLoopTrajectory) -> String {
    let mut out = header(traj.dims);
    out.push('\n');
    for rec in &traj.records {
        let _ = write!(out, "{}", rec.t);
        for v in rec.r.iter().chain(&rec.y).chain(&rec.x).chain(&rec.u_r).chain(&rec.u) {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{}", rec.controller_time);
    }
    out
}

pub fn export_csv(traj: &ClosedLoopTrajectory, path: &Path) -> Result<()> {
    fs::write(path, trajectory_to_csv(traj)).map_err(|e| Error::io(path, e))
}

/// Parses a trajectory CSV. `ts` is taken from the first two time stamps,
/// or is zero for fewer than two rows.
pub fn parse_csv(text: &str, path: &Path) -> Result<ClosedLoopTrajectory> {
    let fail = |reason: String| Error::Parse {
        what: "trajectory CSV",
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| fail("empty file".into()))?;
    let cols: Vec<&str> = head.split(',').collect();
    let count = |prefix: &str| cols.iter().filter(|c| c.strip_prefix(prefix).is_some_and(|n| n.parse::<usize>().is_ok())).count();
    let (ly, lx, lu) = (count("y_"), count("x_"), count("u_"));
    let dims = (lx, lu, ly);
    if head != header(dims) {
        return Err(fail(format!("unexpected header `{head}`")));
    }
    let width = cols.len();
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(str::parse::<f64>)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| fail(format!("line {}: {e}", i + 2)))?;
        if vals.len() != width {
            return Err(fail(format!("line {} has {} fields, expected {width}", i + 2, vals.len())));
        }
        let mut at = 1;
        let mut take = |n: usize| {
            let v = DVector::from_column_slice(&vals[at..at + n]);
            at += n;
            v
        };
        let r = take(ly);
        let y = take(ly);
        let x = take(lx);
        let u_r = take(lu);
        let u = take(lu);
        records.push(StepRecord {
            t: vals[0],
            r,
            y,
            x,
            u_r,
            u,
            controller_time: vals[width - 1],
        });
    }
    let ts = if records.len() >= 2 { records[1].t - records[0].t } else { 0.0 };
    let mut traj = ClosedLoopTrajectory::new(ts, dims);
    traj.records = records;
    Ok(traj)
}

pub fn ingest_csv(path: &Path) -> Result<ClosedLoopTrajectory> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path)
}

/// ARMA coefficients with their shape.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientBundle {
    pub window: usize,
    pub input_dim: usize,
    /// Dimension of the performance variable.
    pub perf_dim: usize,
    pub theta: DVector<f64>,
}

impl CoefficientBundle {
    pub fn to_text(&self) -> String {
        let mut out = format!("lw,lu,ly\n{},{},{}\n", self.window, self.input_dim, self.perf_dim);
        for v in self.theta.iter() {
            let _ = writeln!(out, "{v}");
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Parse {
            what: "coefficient bundle",
            path: path.to_path_buf(),
            reason,
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("lw,lu,ly") {
            return Err(fail("missing `lw,lu,ly` header".into()));
        }
        let shape: Vec<usize> = lines
            .next()
            .ok_or_else(|| fail("missing shape line".into()))?
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| fail(format!("shape line: {e}")))?;
        let [window, input_dim, perf_dim] = shape[..] else {
            return Err(fail("shape line must have three fields".into()));
        };
        let theta: Vec<f64> = lines
            .map(|l| l.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| fail(format!("coefficient: {e}")))?;
        let expected = crate::arma::theta_len(window, input_dim, perf_dim);
        if theta.len() != expected {
            return Err(fail(format!("{} coefficients, expected {expected}", theta.len())));
        }
        Ok(Self {
            window,
            input_dim,
            perf_dim,
            theta: DVector::from_vec(theta),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// Samples `k_start..=k_end` with `t_start ≤ k·Ts ≤ t_end`.
pub fn slice_indices(ts: f64, t_start: f64, t_end: f64) -> (usize, usize) {
    let k0 = (t_start / ts - 1e-9).ceil().max(0.0) as usize;
    let k1 = (t_end / ts + 1e-9).floor() as usize;
    (k0, k1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn sample() -> ClosedLoopTrajectory {
        let mut t = ClosedLoopTrajectory::new(0.01, (2, 1, 1));
        for k in 0..3 {
            t.records.push(StepRecord {
                t: k as f64 * 0.01,
                r: dvector![2.0],
                y: dvector![0.1 * k as f64],
                x: dvector![0.1 * k as f64, 1.0 / 3.0],
                u_r: dvector![12.5],
                u: dvector![10.0],
                controller_time: 1.5e-6,
            });
        }
        t
    }

    #[test]
    fn header_layout() {
        let csv = trajectory_to_csv(&ClosedLoopTrajectory::new(0.01, (2, 1, 1)));
        assert_eq!(csv, "t,r_1,y_1,x_1,x_2,ur_1,u_1,ctrl_time_s\n");
    }

    #[test]
    fn round_trip_is_exact() {
        let t = sample();
        let back = parse_csv(&trajectory_to_csv(&t), Path::new("mem")).unwrap();
        assert_eq!(back.records, t.records);
        assert_eq!(back.dims, t.dims);
    }

    #[test]
    fn rejects_ragged_rows() {
        let text = "t,r_1,y_1,x_1,ur_1,u_1,ctrl_time_s\n0,1,2\n";
        assert!(parse_csv(text, Path::new("mem")).is_err());
    }

    #[test]
    fn bundle_round_trip() {
        let b = CoefficientBundle {
            window: 1,
            input_dim: 1,
            perf_dim: 1,
            theta: dvector![0.1, -2.0 / 3.0],
        };
        let text = b.to_text();
        assert!(text.starts_with("lw,lu,ly\n1,1,1\n"));
        assert_eq!(CoefficientBundle::parse(&text, Path::new("mem")).unwrap(), b);
        assert!(CoefficientBundle::parse("lw,lu,ly\n1,1,1\n0.5\n", Path::new("mem")).is_err());
    }

    #[test]
    fn inclusive_slices() {
        assert_eq!(slice_indices(0.01, 0.0, 6.0), (0, 600));
        assert_eq!(slice_indices(0.01, 1.5, 6.0), (150, 600));
        assert_eq!(slice_indices(0.02, 0.0, 2.5), (0, 125));
        assert_eq!(slice_indices(0.02, 0.0, 15.0), (0, 750));
    }
}
