//! On-disk formats: trace CSV, model files, and metrics JSON.
//!
//! Floats are printed with 17 significant digits so every file round-trips
//! bit-exactly; reruns with the same seed produce byte-identical artifacts.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::types::{ControlCommand, Pose, Wrench};

/// One recorded step of a calibration run or alignment episode.
#[derive(Debug, Clone)]
pub struct TraceStep {
    pub index: u64,
    pub pose: Pose,
    pub command: ControlCommand,
    pub measured: Wrench,
    pub predicted: Wrench,
    /// Innovation variance `w' Sigma w + 1` the model assigns this step's
    /// features.
    pub innovation_variance: f64,
    /// Whether the plant clipped the pose against a socket constraint.
    pub clipped: bool,
}

/// Trace CSV header, fixed column order. Rotation entries are flattened in
/// column-major order to match the feature layout.
pub const TRACE_HEADER: &str = "step,pos_x,pos_y,pos_z,\
rot_xx,rot_yx,rot_zx,rot_xy,rot_yy,rot_zy,rot_xz,rot_yz,rot_zz,\
des_x,des_y,des_z,phi_x,phi_y,phi_z,\
meas_fx,meas_fy,meas_fz,meas_tx,meas_ty,meas_tz,\
pred_fx,pred_fy,pred_fz,pred_tx,pred_ty,pred_tz,\
innovation_var,clipped";

const TRACE_COLUMNS: usize = 33;

/// 17 significant digits: enough to reconstruct any f64 exactly.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_float(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Data(format!("cannot parse {what} from {s:?}")))
}

pub fn write_trace(path: &Path, steps: &[TraceStep]) -> Result<()> {
    let mut out = String::with_capacity(steps.len() * 64 + TRACE_HEADER.len());
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for step in steps {
        write!(out, "{}", step.index).unwrap();
        let mut push = |v: f64| {
            out.push(',');
            out.push_str(&format_float(v));
        };
        for v in step.pose.position().iter() {
            push(*v);
        }
        for v in step.pose.rotation().iter() {
            push(*v); // nalgebra iterates column-major
        }
        for v in step.command.desired_position.iter() {
            push(*v);
        }
        for v in step.command.rotation_correction.iter() {
            push(*v);
        }
        for v in step.measured.to_vector().iter() {
            push(*v);
        }
        for v in step.predicted.to_vector().iter() {
            push(*v);
        }
        push(step.innovation_variance);
        out.push(',');
        out.push(if step.clipped { '1' } else { '0' });
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceStep>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty trace file", path.display())))?;
    if header.trim() != TRACE_HEADER {
        return Err(Error::Data(format!(
            "{}: unexpected trace header; column layout mismatch",
            path.display()
        )));
    }
    let mut steps = Vec::new();
    for (line_no, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != TRACE_COLUMNS {
            return Err(Error::Data(format!(
                "{}: line {} has {} columns, expected {TRACE_COLUMNS}",
                path.display(),
                line_no + 2,
                fields.len()
            )));
        }
        let index = fields[0]
            .trim()
            .parse::<u64>()
            .map_err(|_| Error::Data(format!("cannot parse step index {:?}", fields[0])))?;
        let mut cursor = 1usize;
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let mut vals = Vec::with_capacity(n);
            for f in &fields[cursor..cursor + n] {
                vals.push(parse_float(f, "trace value")?);
            }
            cursor += n;
            Ok(vals)
        };
        let pos = take(3)?;
        let rot = take(9)?;
        let des = take(3)?;
        let phi = take(3)?;
        let meas = take(6)?;
        let pred = take(6)?;
        let innovation_variance = take(1)?[0];
        let clipped = match fields[cursor].trim() {
            "0" => false,
            "1" => true,
            other => return Err(Error::Data(format!("bad clipped flag {other:?}"))),
        };

        let rotation = Matrix3::from_column_slice(&rot);
        let pose = Pose::new(Vector3::new(pos[0], pos[1], pos[2]), rotation)
            .map_err(|e| Error::Data(format!("line {}: {e}", line_no + 2)))?;
        steps.push(TraceStep {
            index,
            pose,
            command: ControlCommand::new(
                Vector3::new(des[0], des[1], des[2]),
                Vector3::new(phi[0], phi[1], phi[2]),
            ),
            measured: Wrench::new(
                Vector3::new(meas[0], meas[1], meas[2]),
                Vector3::new(meas[3], meas[4], meas[5]),
            ),
            predicted: Wrench::new(
                Vector3::new(pred[0], pred[1], pred[2]),
                Vector3::new(pred[3], pred[4], pred[5]),
            ),
            innovation_variance,
            clipped,
        });
    }
    Ok(steps)
}

/// Stored estimate: raw-coordinate model plus the shared covariance.
#[derive(Debug, Clone)]
pub struct ModelFile {
    pub raw_model: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    pub step_count: u64,
}

const MODEL_MAGIC: &str = "lml-model v1";

pub fn write_model(path: &Path, model: &ModelFile) -> Result<()> {
    let mut out = String::new();
    out.push_str(MODEL_MAGIC);
    out.push('\n');
    writeln!(
        out,
        "rows {} cols {} steps {}",
        model.raw_model.nrows(),
        model.raw_model.ncols(),
        model.step_count
    )
    .unwrap();
    out.push_str("raw_model\n");
    for i in 0..model.raw_model.nrows() {
        let row: Vec<String> = (0..model.raw_model.ncols())
            .map(|j| format_float(model.raw_model[(i, j)]))
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out.push_str("covariance\n");
    for i in 0..model.covariance.nrows() {
        let row: Vec<String> = (0..model.covariance.ncols())
            .map(|j| format_float(model.covariance[(i, j)]))
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<ModelFile> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let magic = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty model file", path.display())))?;
    if magic.trim() != MODEL_MAGIC {
        return Err(Error::Data(format!("{}: not a model file", path.display())));
    }
    let dims = lines
        .next()
        .ok_or_else(|| Error::Data("missing dimension line".into()))?;
    let parts: Vec<&str> = dims.split_whitespace().collect();
    if parts.len() != 6 || parts[0] != "rows" || parts[2] != "cols" || parts[4] != "steps" {
        return Err(Error::Data(format!("bad dimension line {dims:?}")));
    }
    let rows: usize = parts[1].parse().map_err(|_| Error::Data("bad row count".into()))?;
    let cols: usize = parts[3].parse().map_err(|_| Error::Data("bad column count".into()))?;
    let step_count: u64 = parts[5].parse().map_err(|_| Error::Data("bad step count".into()))?;

    let mut read_matrix = |name: &str, nrows: usize, ncols: usize| -> Result<DMatrix<f64>> {
        let marker = lines
            .next()
            .ok_or_else(|| Error::Data(format!("missing {name} section")))?;
        if marker.trim() != name {
            return Err(Error::Data(format!("expected {name} marker, found {marker:?}")));
        }
        let mut m = DMatrix::zeros(nrows, ncols);
        for i in 0..nrows {
            let line = lines
                .next()
                .ok_or_else(|| Error::Data(format!("{name}: missing row {i}")))?;
            let values: Vec<&str> = line.split_whitespace().collect();
            if values.len() != ncols {
                return Err(Error::Data(format!(
                    "{name} row {i} has {} values, expected {ncols}",
                    values.len()
                )));
            }
            for (j, v) in values.iter().enumerate() {
                m[(i, j)] = parse_float(v, name)?;
            }
        }
        Ok(m)
    };

    let raw_model = read_matrix("raw_model", rows, cols)?;
    let covariance = read_matrix("covariance", cols, cols)?;
    Ok(ModelFile {
        raw_model,
        covariance,
        step_count,
    })
}

/// Serializes any metrics struct as pretty JSON with a trailing newline.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("cannot serialize metrics: {e}")))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_steps(n: usize, seed: u64) -> Vec<TraceStep> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|k| {
                let rot = *Rotation3::from_scaled_axis(Vector3::new(
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                ))
                .matrix();
                TraceStep {
                    index: k as u64,
                    pose: Pose::new(
                        Vector3::new(rng.random(), rng.random(), rng.random()),
                        rot,
                    )
                    .unwrap(),
                    command: ControlCommand::new(
                        Vector3::new(rng.random(), rng.random(), rng.random()),
                        Vector3::new(rng.random(), rng.random(), rng.random()),
                    ),
                    measured: Wrench::new(
                        Vector3::new(rng.random(), rng.random(), rng.random()),
                        Vector3::new(rng.random(), rng.random(), rng.random()),
                    ),
                    predicted: Wrench::new(
                        Vector3::new(rng.random(), rng.random(), rng.random()),
                        Vector3::new(rng.random(), rng.random(), rng.random()),
                    ),
                    innovation_variance: 1.0 + rng.random::<f64>(),
                    clipped: rng.random::<f64>() > 0.8,
                }
            })
            .collect()
    }

    #[test]
    fn trace_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let steps = sample_steps(25, 3);
        write_trace(&path, &steps).unwrap();
        let back = read_trace(&path).unwrap();
        assert_eq!(back.len(), steps.len());
        for (a, b) in steps.iter().zip(&back) {
            assert_eq!(a.index, b.index);
            assert_eq!(a.pose.position(), b.pose.position());
            assert_eq!(a.pose.rotation(), b.pose.rotation());
            assert_eq!(a.command.desired_position, b.command.desired_position);
            assert_eq!(a.measured, b.measured);
            assert_eq!(a.predicted, b.predicted);
            assert_eq!(a.innovation_variance, b.innovation_variance);
            assert_eq!(a.clipped, b.clipped);
        }
    }

    #[test]
    fn trace_rejects_column_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        std::fs::write(&path, format!("{TRACE_HEADER}\n1,2,3\n")).unwrap();
        assert!(matches!(read_trace(&path), Err(Error::Data(_))));
        std::fs::write(&path, "wrong,header\n").unwrap();
        assert!(matches!(read_trace(&path), Err(Error::Data(_))));
    }

    #[test]
    fn model_file_round_trips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.txt");
        let model = ModelFile {
            raw_model: DMatrix::from_fn(6, 19, |_, _| rng.random::<f64>() * 1e3 - 500.0),
            covariance: DMatrix::from_fn(19, 19, |i, j| {
                if i == j {
                    1.0 + rng.random::<f64>()
                } else {
                    0.0
                }
            }),
            step_count: 1000,
        };
        write_model(&path, &model).unwrap();
        let back = read_model(&path).unwrap();
        assert_eq!(back.raw_model, model.raw_model);
        assert_eq!(back.covariance, model.covariance);
        assert_eq!(back.step_count, model.step_count);
    }

    #[test]
    fn model_file_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.txt");
        std::fs::write(&path, "not a model\n").unwrap();
        assert!(matches!(read_model(&path), Err(Error::Data(_))));
        std::fs::write(&path, "lml-model v1\nrows 2 cols 2 steps 0\nraw_model\n1 2\n").unwrap();
        assert!(matches!(read_model(&path), Err(Error::Data(_))));
    }

    #[test]
    fn float_format_round_trips_extremes() {
        for v in [
            0.0,
            -0.0,
            1.0,
            std::f64::consts::PI,
            1e-308,
            1e308,
            -2.2250738585072014e-308,
            f64::MIN_POSITIVE,
        ] {
            let s = format_float(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{v} -> {s}");
        }
    }
}
