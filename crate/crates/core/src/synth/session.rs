//! Camera trajectories and simulated gaze sessions.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

use super::{Scene, SynthError};
use crate::gaze::GazeSample;
use crate::geometry::{Intrinsics, Pose6D};

fn default_rate() -> f64 {
    30.0
}

fn default_up() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

fn default_supersample() -> usize {
    1
}

fn default_noise() -> f64 {
    0.6
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

/// Camera at `eye` looking at `target` at time `t`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyPose {
    pub t: f64,
    pub eye: [f64; 3],
    pub target: [f64; 3],
}

/// Key poses are interpolated linearly in eye and target position; frames
/// are sampled at `rate_hz` over `[first.t, last.t)`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub camera: CameraSpec,
    #[serde(default = "default_rate")]
    pub rate_hz: f64,
    #[serde(default = "default_up")]
    pub up: [f64; 3],
    /// Color samples per pixel along each axis.
    #[serde(default = "default_supersample")]
    pub supersample: usize,
    #[serde(rename = "pose")]
    pub poses: Vec<KeyPose>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomWalk {
    pub center: [f64; 3],
    pub radius: f64,
    /// Per-sample standard deviation of each coordinate step (m).
    pub step: f64,
}

/// Gaze target over `[start, end)`: either a fixed world point or a random
/// walk around a center.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GazeSegment {
    pub start: f64,
    pub end: f64,
    pub target: Option<[f64; 3]>,
    pub walk: Option<RandomWalk>,
}

/// Eye-tracker frames in `[start, end)` are Gaussian-blurred by `sigma` px.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlurSpan {
    pub start: f64,
    pub end: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionSpec {
    /// Median angular gaze error in degrees.
    #[serde(default = "default_noise")]
    pub noise_deg: f64,
    /// RGB-D scanning pass used to build the map.
    pub scan: Option<TrajectorySpec>,
    pub eye_tracker: TrajectorySpec,
    #[serde(default)]
    pub gaze: Vec<GazeSegment>,
    #[serde(default)]
    pub blur: Vec<BlurSpan>,
}

impl TrajectorySpec {
    pub fn validate(&self, what: &str) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Spec(format!("{what}: {m}")));
        if let Err(e) = self.intrinsics() {
            return bad(&e.to_string());
        }
        if !(self.rate_hz > 0.0) {
            return bad("rate_hz must be positive");
        }
        if !(1..=8).contains(&self.supersample) {
            return bad("supersample must be in 1..=8");
        }
        if self.poses.len() < 2 {
            return bad("need at least two poses");
        }
        if self.poses.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return bad("pose timestamps must increase");
        }
        let up = v3(self.up);
        for p in &self.poses {
            let d = v3(p.target) - v3(p.eye);
            if !(d.norm() > 0.0) || d.normalize().cross(&up).norm() < 1e-6 {
                return bad(&format!("pose at t={}: view direction degenerate or parallel to up", p.t));
            }
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<Intrinsics, crate::geometry::GeometryError> {
        let c = &self.camera;
        Intrinsics::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height)
    }

    pub fn frame_times(&self) -> Vec<f64> {
        let (t0, t1) = (self.poses[0].t, self.poses[self.poses.len() - 1].t);
        let n = ((t1 - t0) * self.rate_hz - 1e-9).ceil().max(0.0) as usize;
        (0..n).map(|i| t0 + i as f64 / self.rate_hz).collect()
    }

    /// Pose at time `t`, clamped to the trajectory ends.
    pub fn pose_at(&self, t: f64) -> Pose6D {
        let p = &self.poses;
        let i = p.partition_point(|k| k.t <= t).clamp(1, p.len() - 1);
        let (a, b) = (&p[i - 1], &p[i]);
        let s = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
        let eye = v3(a.eye) * (1.0 - s) + v3(b.eye) * s;
        let target = v3(a.target) * (1.0 - s) + v3(b.target) * s;
        Pose6D::look_at(eye, target, v3(self.up))
    }
}

impl SessionSpec {
    pub fn parse(text: &str) -> Result<Self, SynthError> {
        let s: Self = toml::from_str(text).map_err(|e| SynthError::Spec(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.noise_deg >= 0.0 && self.noise_deg < 90.0) {
            return Err(SynthError::Spec("noise_deg must be in [0, 90)".into()));
        }
        if let Some(scan) = &self.scan {
            scan.validate("scan")?;
        }
        self.eye_tracker.validate("eye_tracker")?;
        for (i, g) in self.gaze.iter().enumerate() {
            if !(g.end > g.start) {
                return Err(SynthError::Spec(format!("gaze {i}: end must follow start")));
            }
            match (&g.target, &g.walk) {
                (Some(_), None) => {}
                (None, Some(w)) if w.radius >= 0.0 && w.step >= 0.0 => {}
                _ => {
                    return Err(SynthError::Spec(format!(
                        "gaze {i}: set exactly one of target or walk (non-negative radius and step)"
                    )))
                }
            }
        }
        for (i, b) in self.blur.iter().enumerate() {
            if !(b.end > b.start && b.sigma > 0.0) {
                return Err(SynthError::Spec(format!("blur {i}: need end > start and sigma > 0")));
            }
        }
        Ok(())
    }

    /// Blur sigma for an eye-tracker frame at time `t`, if any.
    pub fn blur_at(&self, t: f64) -> Option<f64> {
        self.blur.iter().find(|b| t >= b.start && t < b.end).map(|b| b.sigma)
    }
}

/// Ground truth for one gaze sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeTruth {
    pub timestamp: f64,
    /// The point the gaze program aims at, if a segment is active.
    pub target: Option<Vector3<f64>>,
    /// First surface point along the noiseless gaze direction.
    pub fixation: Option<Vector3<f64>>,
    pub logo: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSession {
    pub samples: Vec<GazeSample>,
    pub truth: Vec<GazeTruth>,
    /// Eye-tracker pose per sample.
    pub poses: Vec<Pose6D>,
}

/// Concentration of a von Mises–Fisher distribution on the sphere whose
/// median angular deviation is `median` radians.
pub fn vmf_kappa_for_median(median: f64) -> f64 {
    let a = 1.0 - median.cos();
    // P(angle <= median) = (1 - exp(-κa)) / (1 - exp(-2κ)), increasing in κ.
    let cdf = |k: f64| (-(k * a)).exp_m1() / (-2.0 * k).exp_m1();
    let (mut lo, mut hi) = (1e-9f64, 1.0f64);
    while cdf(hi) < 0.5 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if cdf(mid) < 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo * hi).sqrt()
}

/// Draws a unit vector from a von Mises–Fisher distribution about `mu`.
pub fn sample_vmf(mu: &Vector3<f64>, kappa: f64, rng: &mut impl Rng) -> Vector3<f64> {
    let u: f64 = 1.0 - rng.random::<f64>();
    let w = (1.0 + (u + (1.0 - u) * (-2.0 * kappa).exp()).ln() / kappa).clamp(-1.0, 1.0);
    let phi = rng.random::<f64>() * std::f64::consts::TAU;
    let helper = if mu.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = mu.cross(&helper).normalize();
    let e2 = mu.cross(&e1);
    let s = (1.0 - w * w).max(0.0).sqrt();
    (mu * w + (e1 * phi.cos() + e2 * phi.sin()) * s).normalize()
}

/// Simulates the eye-tracker gaze stream: one sample per eye-tracker frame
/// time. Samples outside any gaze segment, or whose noisy direction leaves
/// the image, are flagged invalid.
pub fn simulate_gaze_session(scene: &Scene, session: &SessionSpec, seed: u64) -> Result<SimulatedSession, SynthError> {
    session.validate()?;
    let traj = &session.eye_tracker;
    let k = traj.intrinsics().map_err(|e| SynthError::Spec(e.to_string()))?;
    let sigma = session.noise_deg.to_radians();
    let kappa = (sigma > 0.0).then(|| vmf_kappa_for_median(sigma));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut walk: Option<(usize, Vector3<f64>)> = None;
    let times = traj.frame_times();
    let mut out = SimulatedSession {
        samples: Vec::with_capacity(times.len()),
        truth: Vec::with_capacity(times.len()),
        poses: Vec::with_capacity(times.len()),
    };
    for t in times {
        let pose = traj.pose_at(t);
        out.poses.push(pose);
        let seg = session.gaze.iter().position(|g| t >= g.start && t < g.end);
        let target = match seg {
            None => None,
            Some(i) => match (&session.gaze[i].target, &session.gaze[i].walk) {
                (Some(p), _) => Some(v3(*p)),
                (None, Some(w)) => {
                    let center = v3(w.center);
                    let mut pos = match walk {
                        Some((j, p)) if j == i => p,
                        _ => center,
                    };
                    if w.step > 0.0 {
                        let n = Normal::new(0.0, w.step).expect("positive step");
                        pos += Vector3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng));
                    }
                    let off = pos - center;
                    if off.norm() > w.radius {
                        pos = center + off * (w.radius / off.norm());
                    }
                    walk = Some((i, pos));
                    Some(pos)
                }
                (None, None) => None,
            },
        };
        let Some(target) = target else {
            out.samples.push(GazeSample {
                timestamp: t,
                pixel: Vector2::zeros(),
                valid: false,
            });
            out.truth.push(GazeTruth {
                timestamp: t,
                target: None,
                fixation: None,
                logo: None,
            });
            continue;
        };
        if pose.transform(&target).z <= 0.0 {
            return Err(SynthError::TargetBehindCamera(t));
        }
        let eye = pose.camera_center();
        let dir = (target - eye).normalize();
        let noisy = match kappa {
            Some(kappa) => sample_vmf(&dir, kappa, &mut rng),
            None => dir,
        };
        let pc = pose.rotation * noisy;
        let (pixel, valid) = if pc.z > 0.0 {
            let px = k.project_camera(&pc);
            (px, k.contains(&px))
        } else {
            (Vector2::zeros(), false)
        };
        out.samples.push(GazeSample {
            timestamp: t,
            pixel,
            valid,
        });
        let hit = scene.intersect(&eye, &dir);
        out.truth.push(GazeTruth {
            timestamp: t,
            target: Some(target),
            fixation: hit.map(|h| h.point),
            logo: hit.and_then(|h| scene.logo_at(&h.point)).map(|l| l.id),
        });
    }
    Ok(out)
}
