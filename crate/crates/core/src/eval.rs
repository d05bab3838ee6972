//! Trajectory files and accuracy metrics.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;

/// Largest timestamp gap accepted when pairing poses, microseconds.
pub const MAX_ASSOCIATION_GAP_US: i64 = 10_000;
/// Span used by [`Alignment::First5s`], microseconds.
pub const FIRST_SPAN_US: i64 = 5_000_000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no estimate pose lies within 10 ms of a ground-truth pose")]
    NoOverlap,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    Se3,
    Sim3,
    /// Rigid fit over the first five seconds of ground truth only.
    First5s,
}

impl std::str::FromStr for Alignment {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "se3" => Ok(Alignment::Se3),
            "sim3" => Ok(Alignment::Sim3),
            "first5s" => Ok(Alignment::First5s),
            other => Err(format!("unknown alignment `{other}`")),
        }
    }
}

/// Timestamped pose, microseconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stamped {
    pub t_us: i64,
    pub pose: Pose,
}

fn format_time(t_us: i64) -> String {
    let sign = if t_us < 0 { "-" } else { "" };
    let a = t_us.unsigned_abs();
    format!("{sign}{}.{:06}", a / 1_000_000, a % 1_000_000)
}

/// `timestamp tx ty tz qx qy qz qw` per line.
pub fn format_tum(poses: &[Stamped]) -> String {
    let mut out = String::new();
    for s in poses {
        let t = &s.pose.translation;
        let q = &s.pose.rotation;
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            format_time(s.t_us),
            t.x,
            t.y,
            t.z,
            q.i,
            q.j,
            q.k,
            q.w
        );
    }
    out
}

pub fn write_tum<W: Write>(mut w: W, poses: &[Stamped]) -> std::io::Result<()> {
    w.write_all(format_tum(poses).as_bytes())
}

pub fn read_tum<R: Read>(r: R) -> Result<Vec<Stamped>, EvalError> {
    let mut out = Vec::new();
    for (k, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: &str| EvalError::Parse {
            line: k + 1,
            msg: msg.to_string(),
        };
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| err("non-numeric field"))?;
        if v.len() != 8 {
            return Err(err("expected 8 fields"));
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if q.norm() < 1e-9 {
            return Err(err("zero quaternion"));
        }
        out.push(Stamped {
            t_us: (v[0] * 1e6).round() as i64,
            pose: Pose::new(UnitQuaternion::from_quaternion(q), Vector3::new(v[1], v[2], v[3])),
        });
    }
    Ok(out)
}

/// Nearest ground-truth pose for every estimate, within `max_gap_us`.
pub fn associate(est: &[Stamped], gt: &[Stamped], max_gap_us: i64) -> Vec<(Stamped, Stamped)> {
    let mut gt_sorted = gt.to_vec();
    gt_sorted.sort_by_key(|s| s.t_us);
    let mut pairs = Vec::new();
    for e in est {
        let k = gt_sorted.partition_point(|g| g.t_us < e.t_us);
        let best = [k.checked_sub(1), Some(k)]
            .into_iter()
            .flatten()
            .filter(|&i| i < gt_sorted.len())
            .min_by_key(|&i| (gt_sorted[i].t_us - e.t_us).abs());
        if let Some(i) = best {
            if (gt_sorted[i].t_us - e.t_us).abs() <= max_gap_us {
                pairs.push((*e, gt_sorted[i]));
            }
        }
    }
    pairs
}

/// `x -> s R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * x + self.translation
    }
}

/// Least-squares transform taking `src` onto `dst`.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> Similarity {
    let n = src.len() as f64;
    if src.is_empty() {
        return Similarity::identity();
    }
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - mu_s, d - mu_d);
        cov += b * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = SVD::new(cov, true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sign = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * vt;
    let scale = if with_scale && var_s > 0.0 {
        (svd.singular_values.component_mul(&sign.diagonal())).sum() / var_s
    } else {
        1.0
    };
    Similarity {
        scale,
        rotation,
        translation: mu_d - scale * rotation * mu_s,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub pairs: usize,
    pub ate_rmse_m: f64,
    /// Mean position error over ground-truth path length, percent.
    pub mpe_percent: f64,
    pub rmse_xyz_m: [f64; 3],
    pub traveled_m: f64,
    pub scale: f64,
}

impl Metrics {
    pub fn report(&self) -> String {
        format!(
            "pairs {}\nate_rmse_m {:.9}\nmpe_percent {:.6}\nrmse_x_m {:.9}\nrmse_y_m {:.9}\nrmse_z_m {:.9}\ntraveled_m {:.6}\nalign_scale {:.9}\n",
            self.pairs,
            self.ate_rmse_m,
            self.mpe_percent,
            self.rmse_xyz_m[0],
            self.rmse_xyz_m[1],
            self.rmse_xyz_m[2],
            self.traveled_m,
            self.scale
        )
    }
}

/// Align `est` to `gt` and compute position errors.
pub fn evaluate(est: &[Stamped], gt: &[Stamped], alignment: Alignment) -> Result<Metrics, EvalError> {
    let pairs = associate(est, gt, MAX_ASSOCIATION_GAP_US);
    if pairs.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    let src: Vec<Vector3<f64>> = pairs.iter().map(|(e, _)| e.pose.translation).collect();
    let dst: Vec<Vector3<f64>> = pairs.iter().map(|(_, g)| g.pose.translation).collect();
    let sim = match alignment {
        Alignment::Se3 => umeyama(&src, &dst, false),
        Alignment::Sim3 => umeyama(&src, &dst, true),
        Alignment::First5s => {
            let t0 = pairs[0].1.t_us;
            let k = pairs.iter().take_while(|(_, g)| g.t_us - t0 <= FIRST_SPAN_US).count();
            umeyama(&src[..k], &dst[..k], false)
        }
    };
    let n = pairs.len() as f64;
    let mut sq = Vector3::zeros();
    let mut mean_err = 0.0;
    for (s, d) in src.iter().zip(&dst) {
        let e = sim.apply(s) - d;
        sq += e.component_mul(&e);
        mean_err += e.norm();
    }
    let traveled: f64 = dst.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    let mean_err = mean_err / n;
    Ok(Metrics {
        pairs: pairs.len(),
        ate_rmse_m: (sq.sum() / n).sqrt(),
        mpe_percent: if traveled > 0.0 {
            100.0 * mean_err / traveled
        } else {
            0.0
        },
        rmse_xyz_m: [(sq.x / n).sqrt(), (sq.y / n).sqrt(), (sq.z / n).sqrt()],
        traveled_m: traveled,
        scale: sim.scale,
    })
}

/// Largest distance between any two positions.
pub fn diameter(poses: &[Stamped]) -> f64 {
    let mut best: f64 = 0.0;
    for (k, a) in poses.iter().enumerate() {
        for b in &poses[k + 1..] {
            best = best.max((a.pose.translation - b.pose.translation).norm());
        }
    }
    best
}
