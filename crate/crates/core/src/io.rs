//! Model files and CSV artifacts.
//!
//! Model files are JSON objects `{"d", "m", "A", "H", "r"}`; `A` and `H`
//! may be given row-major either flat or as nested rows. Every CSV written
//! here has a reader, so artifacts can be re-parsed by the tool itself.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::divergence::{DivergenceSeries, Estimate};
use crate::dual::{BackwardMapEstimate, EstimatorKind};
use crate::error::{Error, Result};
use crate::filter::FilterTrajectory;
use crate::model::{validate_model, HmmModel};
use crate::sim::{ObservationPath, StatePath};

fn matrix_field(obj: &serde_json::Map<String, Value>, key: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let v = obj.get(key).ok_or_else(|| Error::config(key, "missing"))?;
    let arr = v.as_array().ok_or_else(|| Error::config(key, "expected an array"))?;
    let mut flat = Vec::with_capacity(rows * cols);
    let nested = arr.iter().all(Value::is_array) && !arr.is_empty();
    let mut push = |x: &Value| -> Result<()> {
        let f = x.as_f64().ok_or_else(|| Error::config(key, format!("entry {x} is not a number")))?;
        if !f.is_finite() {
            return Err(Error::config(key, "entries must be finite"));
        }
        flat.push(f);
        Ok(())
    };
    if nested {
        if arr.len() != rows {
            return Err(Error::config(key, format!("expected {rows} rows, found {}", arr.len())));
        }
        for (i, row) in arr.iter().enumerate() {
            let row = row.as_array().expect("checked above");
            if row.len() != cols {
                return Err(Error::config(key, format!("row {i} has {} entries, expected {cols}", row.len())));
            }
            row.iter().try_for_each(&mut push)?;
        }
    } else {
        if arr.len() != rows * cols {
            return Err(Error::config(key, format!("expected {} entries, found {}", rows * cols, arr.len())));
        }
        arr.iter().try_for_each(&mut push)?;
    }
    Ok(DMatrix::from_row_slice(rows, cols, &flat))
}

fn usize_field(obj: &serde_json::Map<String, Value>, key: &str) -> Result<usize> {
    obj.get(key)
        .and_then(Value::as_u64)
        .filter(|v| *v > 0)
        .map(|v| v as usize)
        .ok_or_else(|| Error::config(key, "expected a positive integer"))
}

/// Builds a model from a parsed JSON value; `r = 0` is accepted only when `allow_noiseless`.
pub fn model_from_value(v: &Value, allow_noiseless: bool) -> Result<HmmModel> {
    let obj = v.as_object().ok_or_else(|| Error::config("model", "expected a JSON object"))?;
    let d = usize_field(obj, "d")?;
    let m = usize_field(obj, "m")?;
    let a = matrix_field(obj, "A", d, d)?;
    let h = matrix_field(obj, "H", d, m)?;
    let r = match obj.get("r") {
        None => 1.0,
        Some(x) => x.as_f64().ok_or_else(|| Error::config("r", "expected a number"))?,
    };
    if !r.is_finite() {
        return Err(Error::config("r", "must be finite"));
    }
    validate_model(a, h, r, allow_noiseless)
}

pub fn parse_model(text: &str, allow_noiseless: bool) -> Result<HmmModel> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::config("model", e.to_string()))?;
    model_from_value(&v, allow_noiseless)
}

pub fn read_model(path: &Path, allow_noiseless: bool) -> Result<HmmModel> {
    let mut text = String::new();
    File::open(path)
        .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?
        .read_to_string(&mut text)?;
    parse_model(&text, allow_noiseless)
}

/// Serializable form of a model in raw (not unit-noise) units, with nested rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub d: usize,
    pub m: usize,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "H")]
    pub h: Vec<Vec<f64>>,
    pub r: f64,
}

impl From<&HmmModel> for ModelFile {
    fn from(model: &HmmModel) -> Self {
        let a = model.generator().matrix();
        let h = model.observation().matrix();
        ModelFile {
            d: model.dim(),
            m: model.channels(),
            a: (0..a.nrows()).map(|i| a.row(i).iter().copied().collect()).collect(),
            h: (0..h.nrows()).map(|i| h.row(i).iter().copied().collect()).collect(),
            r: model.noise_std(),
        }
    }
}

pub fn write_model(path: &Path, model: &HmmModel) -> Result<()> {
    let text = serde_json::to_string_pretty(&ModelFile::from(model)).map_err(|e| Error::Io(e.to_string()))?;
    File::create(path)?.write_all(text.as_bytes())?;
    Ok(())
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    Ok(csv::Writer::from_path(path)?)
}

fn reader(path: &Path) -> Result<csv::Reader<BufReader<File>>> {
    Ok(csv::Reader::from_reader(BufReader::new(File::open(path)?)))
}

fn parse_row(rec: &csv::StringRecord) -> Result<Vec<f64>> {
    rec.iter()
        .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Io(format!("bad number `{s}`: {e}"))))
        .collect()
}

fn numeric_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = reader(path)?;
    let header = rdr.headers()?.iter().map(str::to_string).collect();
    let rows = rdr.records().map(|r| parse_row(&r?)).collect::<Result<_>>()?;
    Ok((header, rows))
}

fn fmt(v: f64) -> String {
    // Shortest representation that parses back to the same value.
    format!("{v:?}")
}

pub const SERIES_HEADER: [&str; 8] = ["t", "chi2_mean", "chi2_se", "kl_mean", "kl_se", "tv_mean", "tv_se", "n_paths"];

pub fn write_series(path: &Path, s: &DivergenceSeries) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(SERIES_HEADER)?;
    for k in 0..s.times.len() {
        w.write_record([
            fmt(s.times[k]),
            fmt(s.chi2[k].mean),
            fmt(s.chi2[k].se),
            fmt(s.kl[k].mean),
            fmt(s.kl[k].se),
            fmt(s.tv[k].mean),
            fmt(s.tv[k].se),
            s.n_paths.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_series(path: &Path) -> Result<DivergenceSeries> {
    let (_, rows) = numeric_rows(path)?;
    let est = |r: &Vec<f64>, i: usize| Estimate { mean: r[i], se: r[i + 1] };
    if rows.iter().any(|r| r.len() != SERIES_HEADER.len()) {
        return Err(Error::Io("series rows must have 8 columns".into()));
    }
    Ok(DivergenceSeries {
        times: rows.iter().map(|r| r[0]).collect(),
        chi2: rows.iter().map(|r| est(r, 1)).collect(),
        kl: rows.iter().map(|r| est(r, 3)).collect(),
        tv: rows.iter().map(|r| est(r, 5)).collect(),
        n_paths: rows.first().map(|r| r[7] as usize).unwrap_or(0),
    })
}

/// `(t, ln mean χ²)` pairs exactly as handed to the rate fit.
pub fn write_plot_data(path: &Path, times: &[f64], log_chi2: &[f64]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["t", "log_chi2_mean"])?;
    for (t, y) in times.iter().zip(log_chi2) {
        w.write_record([fmt(*t), fmt(*y)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_plot_data(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let (_, rows) = numeric_rows(path)?;
    Ok((rows.iter().map(|r| r[0]).collect(), rows.iter().map(|r| r[1]).collect()))
}

pub fn write_trajectory(path: &Path, traj: &FilterTrajectory) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=traj.d).map(|i| format!("pi_{i}")));
    w.write_record(&header)?;
    for k in 0..=traj.n_steps {
        let mut row = vec![fmt(traj.time(k))];
        row.extend(traj.at(k).iter().map(|v| fmt(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory(path: &Path, label: &str) -> Result<FilterTrajectory> {
    let (header, rows) = numeric_rows(path)?;
    let d = header.len() - 1;
    let n_steps = rows.len().saturating_sub(1);
    let dt = if n_steps > 0 { rows[n_steps][0] / n_steps as f64 } else { 0.0 };
    Ok(FilterTrajectory {
        label: label.to_string(),
        dt,
        n_steps,
        d,
        pis: rows.iter().flat_map(|r| r[1..].iter().copied()).collect(),
    })
}

/// Rows `(t_k, ΔZ_k)`, `t_k` being the left end of step `k`.
pub fn write_observation(path: &Path, obs: &ObservationPath) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=obs.channels).map(|j| format!("dz_{j}")));
    w.write_record(&header)?;
    for k in 0..obs.n_steps {
        let mut row = vec![fmt(obs.time(k))];
        row.extend(obs.increment(k).iter().map(|v| fmt(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_observation(path: &Path, dt: f64) -> Result<ObservationPath> {
    let (header, rows) = numeric_rows(path)?;
    Ok(ObservationPath {
        dt,
        n_steps: rows.len(),
        channels: header.len() - 1,
        increments: rows.iter().flat_map(|r| r[1..].iter().copied()).collect(),
    })
}

/// Sidecar of a state path: a `t = 0` row with `x0`, then one row per jump.
pub fn write_jumps(path: &Path, p: &StatePath) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["t", "state"])?;
    w.write_record([fmt(0.0), p.x0.to_string()])?;
    for (t, s) in p.jump_times.iter().zip(&p.states[1..]) {
        w.write_record([fmt(*t), s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jumps(path: &Path, horizon: f64) -> Result<StatePath> {
    let (_, rows) = numeric_rows(path)?;
    let first = rows.first().ok_or_else(|| Error::Io("empty jump file".into()))?;
    Ok(StatePath {
        x0: first[1] as usize,
        horizon,
        jump_times: rows[1..].iter().map(|r| r[0]).collect(),
        states: rows.iter().map(|r| r[1] as usize).collect(),
    })
}

pub fn write_backward_map(path: &Path, e: &BackwardMapEstimate) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["x", "y0", "stderr"])?;
    for x in 0..e.y0.len() {
        w.write_record([(x + 1).to_string(), fmt(e.y0[x]), fmt(e.stderr[x])])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_backward_map(path: &Path, horizon: f64, kind: EstimatorKind, n_paths: usize) -> Result<BackwardMapEstimate> {
    let (_, rows) = numeric_rows(path)?;
    let stderr: Vec<f64> = rows.iter().map(|r| r[2]).collect();
    Ok(BackwardMapEstimate {
        horizon,
        kind,
        y0: rows.iter().map(|r| r[1]).collect(),
        spread: stderr.iter().map(|s| s * (n_paths as f64).sqrt()).collect(),
        skipped: stderr.iter().map(|_| false).collect(),
        stderr,
        n_paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::cyclic_generator;

    #[test]
    fn model_accepts_flat_and_nested() {
        let flat = r#"{"d":2,"m":1,"A":[-1,1,2,-2],"H":[1,0],"r":0.5}"#;
        let nested = r#"{"d":2,"m":1,"A":[[-1,1],[2,-2]],"H":[[1],[0]],"r":0.5}"#;
        let a = parse_model(flat, false).unwrap();
        let b = parse_model(nested, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.noise_std(), 0.5);
        assert_eq!(a.unit_observation().value(0, 0), 2.0);
    }

    #[test]
    fn model_rejections() {
        assert!(matches!(parse_model(r#"{"d":2,"m":1,"A":[-1,2,1,-1],"H":[1,0]}"#, false), Err(Error::RowSumNonZero { .. })));
        assert!(matches!(parse_model(r#"{"d":2,"m":1,"A":[-1,1,2,-2],"H":[1]}"#, false), Err(Error::Config { .. })));
        assert!(parse_model(r#"{"d":2,"m":1,"A":[-1,1,2,-2],"H":[1,NaN]}"#, false).is_err());
        assert!(parse_model(r#"{"d":2,"m":1,"A":[-1,1,2,-2],"H":[1,1e999]}"#, false).is_err());
        assert!(matches!(parse_model(r#"{"d":2,"m":1,"A":[-1,1,2,-2],"H":[1,0],"r":0}"#, false), Err(Error::NonPositiveNoise(_))));
        assert!(parse_model(r#"{"d":2,"m":1,"A":[-1,1,2,-2],"H":[1,0],"r":0}"#, true).unwrap().is_noiseless());
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let model = HmmModel::new(cyclic_generator(), crate::model::ObservationMatrix::column(&[1.0, 0.0, 1.0, 0.0]).unwrap(), 2.0).unwrap();
        write_model(&p, &model).unwrap();
        assert_eq!(read_model(&p, false).unwrap(), model);
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let series = DivergenceSeries {
            times: vec![0.0, 0.1],
            chi2: vec![Estimate { mean: 0.16, se: 0.0 }, Estimate { mean: 0.1 / 3.0, se: 1e-3 }],
            kl: vec![Estimate { mean: 0.08, se: 0.0 }, Estimate { mean: 0.02, se: 1e-4 }],
            tv: vec![Estimate { mean: 0.2, se: 0.0 }, Estimate { mean: 0.1, se: 2e-3 }],
            n_paths: 7,
        };
        let p = dir.path().join("s.csv");
        write_series(&p, &series).unwrap();
        assert_eq!(read_series(&p).unwrap(), series);

        let traj = FilterTrajectory {
            label: "mu".into(),
            dt: 0.5,
            n_steps: 2,
            d: 2,
            pis: vec![0.3, 0.7, 0.1, 0.9, 1.0 / 3.0, 2.0 / 3.0],
        };
        let p = dir.path().join("t.csv");
        write_trajectory(&p, &traj).unwrap();
        assert_eq!(read_trajectory(&p, "mu").unwrap(), traj);

        let obs = ObservationPath {
            dt: 0.25,
            n_steps: 2,
            channels: 2,
            increments: vec![0.1, -0.2, 1e-17, 3.0],
        };
        let p = dir.path().join("o.csv");
        write_observation(&p, &obs).unwrap();
        assert_eq!(read_observation(&p, 0.25).unwrap(), obs);

        let sp = StatePath {
            x0: 2,
            horizon: 3.0,
            jump_times: vec![0.5, 1.25],
            states: vec![2, 0, 1],
        };
        let p = dir.path().join("j.csv");
        write_jumps(&p, &sp).unwrap();
        assert_eq!(read_jumps(&p, 3.0).unwrap(), sp);

        let bm = BackwardMapEstimate {
            horizon: 2.0,
            kind: EstimatorKind::Plain,
            y0: vec![1.2, 0.8],
            stderr: vec![0.04, 0.01],
            spread: vec![0.4, 0.1],
            n_paths: 100,
            skipped: vec![false, false],
        };
        let p = dir.path().join("b.csv");
        write_backward_map(&p, &bm).unwrap();
        let back = read_backward_map(&p, 2.0, EstimatorKind::Plain, 100).unwrap();
        assert_eq!(back.y0, bm.y0);
        assert_eq!(back.stderr, bm.stderr);

        let p = dir.path().join("p.csv");
        write_plot_data(&p, &[0.0, 0.5], &[-1.5, -2.25]).unwrap();
        assert_eq!(read_plot_data(&p).unwrap(), (vec![0.0, 0.5], vec![-1.5, -2.25]));
    }
}
