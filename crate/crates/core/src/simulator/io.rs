//! Dataset directory layout:
//!
//! - `config.toml`: generating configuration
//! - `imu.csv`: `t,wx,wy,wz,ax,ay,az`
//! - `keyframes.csv`: `t`, row-major `R`, `p`, `v`, `bg`, `ba`
//! - `tracks.csv`: `landmark_id,keyframe_id,u,v`
//! - `landmarks.csv`: `landmark_id,x,y,z`
//! - `prior.csv`: prior mean of the first keyframe, same columns as `keyframes.csv`
//!
//! Floats are written with 17 significant digits so that a reread dataset is
//! bit-identical.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector2;
use thiserror::Error;

use crate::factors::{LandmarkTrack, Observation};
use crate::liealg::{Mat3, Rotation, Vec3};
use crate::preintegration::{ImuBias, ImuSample};
use crate::state::NavState;

use super::{ConfigError, SimConfig, SimDataset};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: u64,
        message: String,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

const STATE_HEADER: [&str; 22] = [
    "t", "r00", "r01", "r02", "r10", "r11", "r12", "r20", "r21", "r22", "px", "py", "pz", "vx",
    "vy", "vz", "bgx", "bgy", "bgz", "bax", "bay", "baz",
];

fn state_row(t: f64, x: &NavState) -> Vec<String> {
    let r = x.rotation.matrix();
    let mut row = vec![fmt_f64(t)];
    for i in 0..3 {
        for j in 0..3 {
            row.push(fmt_f64(r[(i, j)]));
        }
    }
    for v in [x.position, x.velocity, x.bias.gyro, x.bias.accel] {
        row.extend(v.iter().map(|c| fmt_f64(*c)));
    }
    row
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes a CSV file with a header row.
pub fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_to_dataset(path, e))?;
    w.write_record(header).map_err(|e| csv_to_dataset(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_to_dataset(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

fn csv_to_dataset(path: &Path, e: csv::Error) -> DatasetError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    DatasetError::Parse {
        file: path.display().to_string(),
        line,
        message: e.to_string(),
    }
}

/// Writes `ds` under `dir`. `config_text`, when given, is echoed verbatim as
/// `config.toml`; otherwise the resolved configuration is serialized.
pub fn write_dataset(dir: &Path, ds: &SimDataset, config_text: Option<&str>) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let cfg_path = dir.join("config.toml");
    let text = config_text.map(str::to_owned).unwrap_or_else(|| ds.config.to_toml_string());
    fs::write(&cfg_path, text).map_err(io_err(&cfg_path))?;

    write_csv(
        &dir.join("imu.csv"),
        &["t", "wx", "wy", "wz", "ax", "ay", "az"],
        ds.imu.iter().map(|s| {
            let mut row = vec![fmt_f64(s.timestamp)];
            row.extend(s.gyro.iter().chain(s.accel.iter()).map(|c| fmt_f64(*c)));
            row
        }),
    )?;
    write_csv(
        &dir.join("keyframes.csv"),
        &STATE_HEADER,
        ds.keyframe_times.iter().zip(&ds.ground_truth).map(|(t, x)| state_row(*t, x)),
    )?;
    write_csv(
        &dir.join("prior.csv"),
        &STATE_HEADER,
        std::iter::once(state_row(ds.keyframe_times[0], &ds.prior_mean)),
    )?;
    write_csv(
        &dir.join("tracks.csv"),
        &["landmark_id", "keyframe_id", "u", "v"],
        ds.tracks.iter().flat_map(|t| {
            t.observations.iter().map(move |o| {
                vec![
                    t.landmark_id.to_string(),
                    o.keyframe.to_string(),
                    fmt_f64(o.pixel.x),
                    fmt_f64(o.pixel.y),
                ]
            })
        }),
    )?;
    write_csv(
        &dir.join("landmarks.csv"),
        &["landmark_id", "x", "y", "z"],
        ds.landmarks.iter().enumerate().map(|(i, p)| {
            let mut row = vec![i.to_string()];
            row.extend(p.iter().map(|c| fmt_f64(*c)));
            row
        }),
    )
}

/// Rows of a CSV file with a header, each paired with its 1-based line number.
fn read_rows(path: &Path, width: usize) -> Result<Vec<(u64, Vec<String>)>, DatasetError> {
    let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => DatasetError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => DatasetError::Parse {
            file: file.clone(),
            line: 1,
            message: format!("{other:?}"),
        },
    })?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            DatasetError::Parse {
                file: file.clone(),
                line,
                message: e.to_string(),
            }
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != width {
            return Err(DatasetError::Parse {
                file: file.clone(),
                line,
                message: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        rows.push((line, rec.iter().map(str::to_owned).collect()));
    }
    Ok(rows)
}

fn parse<T: std::str::FromStr>(file: &str, line: u64, field: &str) -> Result<T, DatasetError> {
    field.trim().parse().map_err(|_| DatasetError::Parse {
        file: file.to_owned(),
        line,
        message: format!("cannot parse `{field}`"),
    })
}

fn parse_floats(file: &str, line: u64, fields: &[String]) -> Result<Vec<f64>, DatasetError> {
    fields
        .iter()
        .map(|f| {
            let v: f64 = parse(file, line, f)?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(DatasetError::Parse {
                    file: file.to_owned(),
                    line,
                    message: format!("non-finite value `{f}`"),
                })
            }
        })
        .collect()
}

fn parse_state(file: &str, line: u64, v: &[f64]) -> Result<(f64, NavState), DatasetError> {
    let m = Mat3::from_row_slice(&v[1..10]);
    let rotation = Rotation::from_matrix(m).map_err(|e| DatasetError::Parse {
        file: file.to_owned(),
        line,
        message: e.to_string(),
    })?;
    let seg = |o: usize| Vec3::new(v[o], v[o + 1], v[o + 2]);
    Ok((
        v[0],
        NavState::new(rotation, seg(10), seg(13), ImuBias::new(seg(16), seg(19))),
    ))
}

pub fn read_dataset(dir: &Path) -> Result<SimDataset, DatasetError> {
    let cfg_path = dir.join("config.toml");
    let text = fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
    let config = SimConfig::from_toml_str(&text)?;

    let mut keyframe_times = Vec::new();
    let mut ground_truth = Vec::new();
    for (line, row) in read_rows(&dir.join("keyframes.csv"), STATE_HEADER.len())? {
        let v = parse_floats("keyframes.csv", line, &row)?;
        let (t, x) = parse_state("keyframes.csv", line, &v)?;
        keyframe_times.push(t);
        ground_truth.push(x);
    }
    let prior_rows = read_rows(&dir.join("prior.csv"), STATE_HEADER.len())?;
    let (line, row) = prior_rows
        .first()
        .ok_or_else(|| DatasetError::Inconsistent("prior.csv has no rows".into()))?;
    let prior_mean = parse_state("prior.csv", *line, &parse_floats("prior.csv", *line, row)?)?.1;

    let mut imu = Vec::new();
    for (line, row) in read_rows(&dir.join("imu.csv"), 7)? {
        let v = parse_floats("imu.csv", line, &row)?;
        imu.push(ImuSample::new(v[0], Vec3::new(v[1], v[2], v[3]), Vec3::new(v[4], v[5], v[6])));
    }
    let per_kf = config.samples_per_keyframe();
    if keyframe_times.len() < 2 || imu.len() != (keyframe_times.len() - 1) * per_kf {
        return Err(DatasetError::Inconsistent(format!(
            "{} IMU samples for {} keyframes at {per_kf} samples per interval",
            imu.len(),
            keyframe_times.len()
        )));
    }
    let end = *keyframe_times.last().expect("checked above");
    let mut imu_dt = Vec::with_capacity(imu.len());
    for k in 0..imu.len() {
        let next = imu.get(k + 1).map(|s| s.timestamp).unwrap_or(end);
        let dt = next - imu[k].timestamp;
        if !(dt > 0.0) {
            return Err(DatasetError::Parse {
                file: "imu.csv".into(),
                line: k as u64 + 2,
                message: "timestamps must be strictly increasing".into(),
            });
        }
        imu_dt.push(dt);
    }

    let mut landmarks = Vec::new();
    for (line, row) in read_rows(&dir.join("landmarks.csv"), 4)? {
        let id: usize = parse("landmarks.csv", line, &row[0])?;
        if id != landmarks.len() {
            return Err(DatasetError::Parse {
                file: "landmarks.csv".into(),
                line,
                message: format!("landmark ids must be consecutive, found {id}"),
            });
        }
        let v = parse_floats("landmarks.csv", line, &row[1..])?;
        landmarks.push(Vec3::new(v[0], v[1], v[2]));
    }

    let sigma = config.camera.pixel_sigma;
    let mut tracks: Vec<LandmarkTrack> = Vec::new();
    for (line, row) in read_rows(&dir.join("tracks.csv"), 4)? {
        let lid: usize = parse("tracks.csv", line, &row[0])?;
        let kf: usize = parse("tracks.csv", line, &row[1])?;
        let px = parse_floats("tracks.csv", line, &row[2..])?;
        if kf >= keyframe_times.len() || lid >= landmarks.len() {
            return Err(DatasetError::Parse {
                file: "tracks.csv".into(),
                line,
                message: "unknown keyframe or landmark id".into(),
            });
        }
        let obs = Observation {
            keyframe: kf,
            pixel: Vector2::new(px[0], px[1]),
            sigma,
        };
        match tracks.last_mut() {
            Some(t) if t.landmark_id == lid => {
                if t.observations.iter().any(|o| o.keyframe == kf) {
                    return Err(DatasetError::Parse {
                        file: "tracks.csv".into(),
                        line,
                        message: "duplicate keyframe in track".into(),
                    });
                }
                t.observations.push(obs)
            }
            _ => tracks.push(LandmarkTrack {
                landmark_id: lid,
                observations: vec![obs],
            }),
        }
    }

    Ok(SimDataset {
        config,
        keyframe_times,
        ground_truth,
        imu,
        imu_dt,
        tracks,
        landmarks,
        prior_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::simulate;

    fn small() -> SimDataset {
        let mut cfg = SimConfig::default();
        cfg.trajectory.duration = 4.0;
        cfg.trajectory.path_length = 8.0;
        simulate(&cfg).unwrap()
    }

    fn tmp(name: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("vio-io-{}-{name}", std::process::id()));
        let _ = fs::remove_dir_all(&d);
        d
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let ds = small();
        let dir = tmp("rt");
        write_dataset(&dir, &ds, None).unwrap();
        let back = read_dataset(&dir).unwrap();
        assert_eq!(back, ds);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn corrupted_row_reports_line() {
        let ds = small();
        let dir = tmp("bad");
        write_dataset(&dir, &ds, None).unwrap();
        let path = dir.join("imu.csv");
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
        lines[5] = lines[5].replacen("e", "x", 1);
        fs::write(&path, lines.join("\n")).unwrap();
        match read_dataset(&dir) {
            Err(DatasetError::Parse { file, line, .. }) => {
                assert_eq!(file, "imu.csv");
                assert_eq!(line, 6);
            }
            other => panic!("unexpected {other:?}"),
        }
        fs::remove_dir_all(&dir).unwrap();
    }
}
