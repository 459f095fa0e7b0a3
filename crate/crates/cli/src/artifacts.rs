//! Versioned CSV formats and atomic file output.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use brachiation::designlab::SweepRecord;
use brachiation::dynamics::{ControlInput, FullState};
use brachiation::simulator::TelemetryRow;
use brachiation::trajopt::Trajectory;
use nalgebra::{Vector2, Vector3};
use serde::Serialize;

use crate::error::CliError;

pub const TRAJECTORY_HEADER: &str = "# brachiate-trajectory v1";
pub const TELEMETRY_HEADER: &str = "# brachiate-telemetry v1";
pub const CYCLE_TELEMETRY_HEADER: &str = "# brachiate-cycle-telemetry v1";
pub const SWEEP_HEADER: &str = "# brachiate-sweep v1";

const STATE_COLUMNS: [&str; 9] = ["t", "q1", "q2", "q3", "dq1", "dq2", "dq3", "u2", "u3"];

/// 17 significant digits, enough to read back the same f64.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `bytes` to a temporary file beside `path`, then renames it over
/// `path`, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |source| CliError::Io {
        path: path.to_owned(),
        source,
    };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_owned(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn csv_bytes(
    header: &str,
    columns: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Vec<u8> {
    let mut out = Vec::new();
    writeln!(out, "{header}").expect("in-memory write");
    let mut w = csv::Writer::from_writer(out);
    w.write_record(columns).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn state_fields(t: f64, x: &FullState) -> Vec<String> {
    std::iter::once(t)
        .chain(x.q.iter().copied())
        .chain(x.dq.iter().copied())
        .map(num)
        .collect()
}

/// One row per knot; the terminal knot has no control and leaves the
/// torque columns empty. The cost is not stored.
pub fn trajectory_csv(traj: &Trajectory) -> Vec<u8> {
    let rows = traj.states.iter().enumerate().map(|(i, x)| {
        let mut row = state_fields(traj.times[i], x);
        match traj.controls.get(i) {
            Some(u) => row.extend([num(u[0]), num(u[1])]),
            None => row.extend([String::new(), String::new()]),
        }
        row
    });
    csv_bytes(TRAJECTORY_HEADER, &STATE_COLUMNS, rows)
}

fn telemetry_columns() -> Vec<&'static str> {
    STATE_COLUMNS
        .iter()
        .copied()
        .chain(["ex", "ez", "singular"])
        .collect()
}

fn telemetry_fields(row: &TelemetryRow, t: f64) -> Vec<String> {
    let mut out = state_fields(t, &row.state);
    out.extend([row.u[0], row.u[1], row.ee_error[0], row.ee_error[1]].map(num));
    out.push(u8::from(row.singular).to_string());
    out
}

pub fn telemetry_csv(rows: &[TelemetryRow]) -> Vec<u8> {
    csv_bytes(
        TELEMETRY_HEADER,
        &telemetry_columns(),
        rows.iter().map(|r| telemetry_fields(r, r.t)),
    )
}

/// Telemetry of several swings with a leading cycle column. Times run on
/// one clock across cycles; states stay in each cycle's own base frame.
pub fn cycle_telemetry_csv<'a>(
    cycles: impl IntoIterator<Item = (usize, f64, &'a [TelemetryRow])>,
) -> Vec<u8> {
    let mut columns = vec!["cycle"];
    columns.extend(telemetry_columns());
    let rows = cycles.into_iter().flat_map(|(cycle, start, rows)| {
        rows.iter().map(move |r| {
            let mut fields = vec![cycle.to_string()];
            fields.extend(telemetry_fields(r, start + r.t));
            fields
        })
    });
    csv_bytes(CYCLE_TELEMETRY_HEADER, &columns, rows)
}

pub fn sweep_csv(records: &[SweepRecord]) -> Vec<u8> {
    let columns = [
        "axis",
        "value",
        "case",
        "final_cost",
        "iterations",
        "converged",
        "terminal_hand_error",
    ];
    let rows = records.iter().map(|r| {
        vec![
            r.axis.to_string(),
            num(r.value),
            r.case.to_string(),
            num(r.final_cost),
            r.iterations.to_string(),
            r.converged.to_string(),
            num(r.terminal_hand_error),
        ]
    });
    csv_bytes(SWEEP_HEADER, &columns, rows)
}

/// Reads a trajectory written by [`trajectory_csv`], rejecting any other
/// format version.
pub fn read_trajectory(path: &Path) -> Result<Trajectory, CliError> {
    let file = std::fs::File::open(path).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_trajectory(BufReader::new(file)).map_err(|reason| CliError::Format {
        path: path.to_owned(),
        reason,
    })
}

pub fn parse_trajectory(mut input: impl BufRead) -> Result<Trajectory, String> {
    let mut first = String::new();
    input.read_line(&mut first).map_err(|e| e.to_string())?;
    let first = first.trim_end();
    if first != TRAJECTORY_HEADER {
        return Err(format!("expected `{TRAJECTORY_HEADER}`, found `{first}`"));
    }
    let mut reader = csv::Reader::from_reader(input);
    let header = reader.headers().map_err(|e| e.to_string())?;
    if header.iter().ne(STATE_COLUMNS) {
        return Err(format!(
            "unexpected columns `{}`",
            header.iter().collect::<Vec<_>>().join(",")
        ));
    }
    let mut traj = Trajectory {
        times: Vec::new(),
        states: Vec::new(),
        controls: Vec::new(),
        cost: 0.0,
    };
    let mut ended = false;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| e.to_string())?;
        let row = line + 3;
        if ended {
            return Err(format!("row {row}: data after the terminal knot"));
        }
        let field = |i: usize| -> Result<f64, String> {
            record[i]
                .parse::<f64>()
                .map_err(|_| format!("row {row}: column `{}` is not a number", STATE_COLUMNS[i]))
        };
        let v: Vec<f64> = (0..7).map(field).collect::<Result<_, _>>()?;
        traj.times.push(v[0]);
        traj.states.push(FullState::new(
            Vector3::new(v[1], v[2], v[3]),
            Vector3::new(v[4], v[5], v[6]),
        ));
        if record[7].is_empty() && record[8].is_empty() {
            ended = true;
        } else {
            let u: ControlInput = Vector2::new(field(7)?, field(8)?);
            traj.controls.push(u);
        }
    }
    if !ended || traj.states.len() < 2 {
        return Err(
            "trajectory needs at least two knots and a terminal knot without torque".into(),
        );
    }
    if traj.times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err("times must be strictly increasing".into());
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Trajectory {
        Trajectory {
            times: vec![0.0, 0.1, 0.2],
            states: vec![
                FullState::new(
                    Vector3::new(0.1, -0.2, 1.0 / 3.0),
                    Vector3::new(0.0, 1e-300, -2.5),
                ),
                FullState::new(
                    Vector3::new(std::f64::consts::PI, 0.0, -0.0),
                    Vector3::zeros(),
                ),
                FullState::zeros(),
            ],
            controls: vec![Vector2::new(0.1, 0.2), Vector2::new(-7.0e-12, 3.0)],
            cost: 0.0,
        }
    }

    #[test]
    fn trajectory_round_trips_bitwise() {
        let traj = sample();
        let bytes = trajectory_csv(&traj);
        let back = parse_trajectory(bytes.as_slice()).unwrap();
        assert_eq!(back, traj);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let text = String::from_utf8(trajectory_csv(&sample()))
            .unwrap()
            .replace("v1", "v2");
        let err = parse_trajectory(text.as_bytes()).unwrap_err();
        assert!(err.contains("v1"), "{err}");
    }

    #[test]
    fn missing_terminal_knot_is_rejected() {
        let text = String::from_utf8(trajectory_csv(&sample())).unwrap();
        let cut: Vec<&str> = text.lines().collect();
        let truncated = cut[..cut.len() - 1].join("\n");
        assert!(parse_trajectory(truncated.as_bytes()).is_err());
    }

    #[test]
    fn numbers_carry_seventeen_digits() {
        assert_eq!(num(0.1), "1.0000000000000001e-1");
        assert_eq!(num(0.1).parse::<f64>().unwrap(), 0.1);
    }
}
