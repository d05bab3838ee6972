//! Quintic Hermite splines and the rigid-body trajectories built from them.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::geometry::Pose;

/// Value with its first two time derivatives.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Jet {
    pub fn new(value: f64, d1: f64, d2: f64) -> Self {
        Jet { value, d1, d2 }
    }

    pub fn constant(value: f64) -> Self {
        Jet::new(value, 0.0, 0.0)
    }

    /// `a sin(w t + phase)` with derivatives.
    pub fn sine(a: f64, w: f64, phase: f64, t: f64) -> Self {
        let (s, c) = (w * t + phase).sin_cos();
        Jet::new(a * s, a * w * c, -a * w * w * s)
    }

    pub fn linear(offset: f64, rate: f64, t: f64) -> Self {
        Jet::new(offset + rate * t, rate, 0.0)
    }
}

impl std::ops::Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        Jet::new(self.value + o.value, self.d1 + o.d1, self.d2 + o.d2)
    }
}

/// Coefficients of the six quintic Hermite basis polynomials in powers of
/// `u` (rows: p0, h v0, h^2 a0, h^2 a1, h v1, p1).
const BASIS: [[f64; 6]; 6] = [
    [1.0, 0.0, 0.0, -10.0, 15.0, -6.0],
    [0.0, 1.0, 0.0, -6.0, 8.0, -3.0],
    [0.0, 0.0, 0.5, -1.5, 1.5, -0.5],
    [0.0, 0.0, 0.0, 0.5, -1.0, 0.5],
    [0.0, 0.0, 0.0, -4.0, 7.0, -3.0],
    [0.0, 0.0, 0.0, 10.0, -15.0, 6.0],
];

/// Piecewise quintic through uniformly spaced knots, matching value,
/// first and second derivative at each knot (so C2 everywhere).
#[derive(Clone, Debug)]
pub struct QuinticSpline {
    t0: f64,
    h: f64,
    /// Polynomial coefficients in `u` per segment.
    segments: Vec<[f64; 6]>,
}

impl QuinticSpline {
    pub fn new(t0: f64, h: f64, knots: &[Jet]) -> Self {
        assert!(knots.len() >= 2 && h > 0.0);
        let segments = knots
            .windows(2)
            .map(|w| {
                let inputs = [
                    w[0].value,
                    h * w[0].d1,
                    h * h * w[0].d2,
                    h * h * w[1].d2,
                    h * w[1].d1,
                    w[1].value,
                ];
                let mut c = [0.0; 6];
                for (row, x) in BASIS.iter().zip(inputs) {
                    for (ck, bk) in c.iter_mut().zip(row) {
                        *ck += bk * x;
                    }
                }
                c
            })
            .collect();
        QuinticSpline { t0, h, segments }
    }

    pub fn t_end(&self) -> f64 {
        self.t0 + self.h * self.segments.len() as f64
    }

    /// Value and derivatives at `t`, clamped to the knot span.
    pub fn eval(&self, t: f64) -> Jet {
        let s = ((t - self.t0) / self.h).clamp(0.0, self.segments.len() as f64);
        let k = (s.floor() as usize).min(self.segments.len() - 1);
        let u = s - k as f64;
        let c = &self.segments[k];
        let mut v = 0.0;
        let mut d1 = 0.0;
        let mut d2 = 0.0;
        for p in (0..6).rev() {
            v = v * u + c[p];
        }
        for p in (1..6).rev() {
            d1 = d1 * u + p as f64 * c[p];
        }
        for p in (2..6).rev() {
            d2 = d2 * u + (p * (p - 1)) as f64 * c[p];
        }
        Jet::new(v, d1 / self.h, d2 / (self.h * self.h))
    }
}

/// Position and yaw-pitch-roll jets at one instant.
#[derive(Clone, Copy, Debug, Default)]
pub struct Waypoint {
    pub position: [Jet; 3],
    /// yaw, pitch, roll
    pub euler: [Jet; 3],
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Kinematic state of the body at one instant.
#[derive(Clone, Copy, Debug)]
pub struct BodyState {
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    /// World-frame acceleration.
    pub acceleration: Vector3<f64>,
    /// Body-frame angular rate.
    pub omega: Vector3<f64>,
}

/// Body trajectory: spline position and `R = Rz(yaw) Ry(pitch) Rx(roll)`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    position: [QuinticSpline; 3],
    euler: [QuinticSpline; 3],
}

impl Trajectory {
    /// Fit splines through `f` sampled every `h` seconds over `[0, duration]`.
    pub fn from_fn(duration: f64, h: f64, f: impl Fn(f64) -> Waypoint) -> Self {
        let n = (duration / h).ceil().max(1.0) as usize;
        let wps: Vec<Waypoint> = (0..=n).map(|k| f(k as f64 * h)).collect();
        let axis = |sel: &dyn Fn(&Waypoint) -> Jet| {
            let knots: Vec<Jet> = wps.iter().map(sel).collect();
            QuinticSpline::new(0.0, h, &knots)
        };
        Trajectory {
            position: [
                axis(&|w| w.position[0]),
                axis(&|w| w.position[1]),
                axis(&|w| w.position[2]),
            ],
            euler: [axis(&|w| w.euler[0]), axis(&|w| w.euler[1]), axis(&|w| w.euler[2])],
        }
    }

    pub fn duration(&self) -> f64 {
        self.position[0].t_end()
    }

    pub fn state(&self, t: f64) -> BodyState {
        let p = self.position.each_ref().map(|s| s.eval(t));
        let [yaw, pitch, roll] = self.euler.each_ref().map(|s| s.eval(t));
        let (rz, ry, rx) = (rot_z(yaw.value), rot_y(pitch.value), rot_x(roll.value));
        let r = rz * ry * rx;
        // R^T dR/dt = yaw' (Ry Rx)^T [e_z] + pitch' Rx^T [e_y] + roll' [e_x]
        let omega = (ry * rx).transpose() * Vector3::z() * yaw.d1
            + rx.transpose() * Vector3::y() * pitch.d1
            + Vector3::x() * roll.d1;
        let rotation = UnitQuaternion::from_matrix(&r);
        BodyState {
            pose: Pose::new(rotation, Vector3::new(p[0].value, p[1].value, p[2].value)),
            velocity: Vector3::new(p[0].d1, p[1].d1, p[2].d1),
            acceleration: Vector3::new(p[0].d2, p[1].d2, p[2].d2),
            omega,
        }
    }

    pub fn pose(&self, t: f64) -> Pose {
        self.state(t).pose
    }
}
