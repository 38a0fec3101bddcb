//! Winding core, vertex sequence, and the dense timed reference path.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nmpc::{solve_tracking, KinematicModel, NmpcConfig, NmpcError, TrackingCost};
use crate::robot::{plant_step, JointCommand, JointState};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("winding sequence needs at least 2 entries, got {0}")]
    EmptySequence(usize),
    #[error("invalid geometry: {0}")]
    Invalid(String),
    #[error("planner window at sample {step} failed: {source}")]
    SolverFailure {
        step: usize,
        #[source]
        source: NmpcError,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Polyhedral winding core; vertices are stored in the core frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Core {
    pub vertices: Vec<Vector3<f64>>,
    pub edges: Vec<(usize, usize)>,
    /// Core frame origin in the robot base frame.
    pub offset: Vector3<f64>,
}

impl Core {
    pub fn new(vertices: Vec<Vector3<f64>>, edges: Vec<(usize, usize)>, offset: Vector3<f64>) -> Result<Self, GeometryError> {
        if vertices.len() < 4 {
            return Err(GeometryError::Invalid(format!("core needs >= 4 vertices, got {}", vertices.len())));
        }
        if let Some(&(a, b)) = edges.iter().find(|(a, b)| *a >= vertices.len() || *b >= vertices.len() || a == b) {
            return Err(GeometryError::Invalid(format!("edge ({a}, {b}) is not valid")));
        }
        Ok(Self { vertices, edges, offset })
    }

    /// Vertex `i` in the robot base frame.
    pub fn vertex(&self, i: usize) -> Vector3<f64> {
        self.vertices[i] + self.offset
    }
}

/// Regular tetrahedron with a horizontal base face and its centroid at `offset`.
pub fn make_tetrahedron(edge_length: f64, offset: Vector3<f64>) -> Result<Core, GeometryError> {
    if !(edge_length > 0.0 && edge_length.is_finite()) {
        return Err(GeometryError::Invalid(format!("edge length must be > 0, got {edge_length}")));
    }
    let h = edge_length * (2.0f64 / 3.0).sqrt();
    let rc = edge_length / 3f64.sqrt();
    let mut vertices: Vec<Vector3<f64>> = (0..3)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / 3.0;
            Vector3::new(rc * a.cos(), rc * a.sin(), -h / 4.0)
        })
        .collect();
    vertices.push(Vector3::new(0.0, 0.0, 0.75 * h));
    let edges = vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
    Core::new(vertices, edges, offset)
}

/// Vertex visit order; the whole list is traversed `repetitions` times.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindingSequence {
    pub indices: Vec<usize>,
    pub repetitions: usize,
}

impl WindingSequence {
    pub fn new(indices: Vec<usize>, repetitions: usize) -> Result<Self, GeometryError> {
        let seq = Self { indices, repetitions };
        seq.validate(usize::MAX)?;
        Ok(seq)
    }

    /// Closed walk over all six tetrahedron edges.
    pub fn tetrahedron_default() -> Self {
        Self { indices: vec![0, 1, 2, 3, 0, 2, 1, 3, 0], repetitions: 1 }
    }

    fn validate(&self, n_vertices: usize) -> Result<(), GeometryError> {
        if self.indices.len() < 2 {
            return Err(GeometryError::EmptySequence(self.indices.len()));
        }
        if self.repetitions == 0 {
            return Err(GeometryError::Invalid("repetitions must be >= 1".into()));
        }
        if let Some(w) = self.indices.windows(2).find(|w| w[0] == w[1]) {
            return Err(GeometryError::Invalid(format!("vertex {} repeats consecutively", w[0])));
        }
        if let Some(i) = self.indices.iter().find(|&&i| i >= n_vertices) {
            return Err(GeometryError::Invalid(format!("vertex index {i} out of range")));
        }
        Ok(())
    }

    /// Visit order with all passes unrolled.
    pub fn unrolled(&self) -> Vec<usize> {
        let mut out = self.indices.clone();
        for _ in 1..self.repetitions {
            for &i in &self.indices {
                if out.last() != Some(&i) {
                    out.push(i);
                }
            }
        }
        out
    }
}

/// Speed change inside the corner window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CornerProfile {
    /// Constant reduced speed over the whole window.
    Step,
    /// Speed varies linearly with distance, from nominal at the window edge
    /// to the reduced speed at the vertex.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CornerConfig {
    pub window_m: f64,
    /// Speed factor at the vertex, in (0, 1].
    pub slowdown: f64,
    pub profile: CornerProfile,
}

impl Default for CornerConfig {
    fn default() -> Self {
        Self { window_m: 0.005, slowdown: 0.25, profile: CornerProfile::Step }
    }
}

impl CornerConfig {
    /// Time to cover distance `d <= w` leaving a vertex.
    fn ramp_time(&self, d: f64, w: f64, v: f64) -> f64 {
        let s = self.slowdown;
        match self.profile {
            _ if s == 1.0 || w == 0.0 => d / v,
            CornerProfile::Step => d / (v * s),
            CornerProfile::Linear => w / (v * (1.0 - s)) * ((s + (1.0 - s) * d / w) / s).ln(),
        }
    }

    /// Inverse of [`Self::ramp_time`].
    fn ramp_distance(&self, t: f64, w: f64, v: f64) -> f64 {
        let s = self.slowdown;
        let d = match self.profile {
            _ if s == 1.0 || w == 0.0 => v * t,
            CornerProfile::Step => v * s * t,
            CornerProfile::Linear => w * s / (1.0 - s) * ((t * v * (1.0 - s) / w).exp() - 1.0),
        };
        d.min(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaperConfig {
    pub peak: f64,
    pub window_m: f64,
}

impl Default for TaperConfig {
    fn default() -> Self {
        Self { peak: 1.0, window_m: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub t: f64,
    pub p: Vector3<f64>,
    pub vertex_weight: f64,
    pub is_corner: bool,
    /// Nearest vertex along the current segment.
    pub vertex: Vector3<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReferencePath {
    pub ts: f64,
    pub points: Vec<ReferencePoint>,
}

impl ReferencePath {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(|p| p.p).collect()
    }

    pub fn arc_length(&self) -> f64 {
        self.points.windows(2).map(|w| (w[1].p - w[0].p).norm()).sum()
    }

    pub fn max_step(&self) -> f64 {
        self.points.windows(2).map(|w| (w[1].p - w[0].p).norm()).fold(0.0, f64::max)
    }

    /// `N` targets following sample `k`; the final point repeats past the end.
    pub fn window(&self, k: usize, horizon: usize) -> Vec<Vector3<f64>> {
        let last = self.points.len() - 1;
        (1..=horizon).map(|j| self.points[(k + j).min(last)].p).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), GeometryError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "px", "py", "pz", "vertex_weight", "is_corner"])?;
        for p in &self.points {
            w.write_record([
                p.t.to_string(),
                p.p.x.to_string(),
                p.p.y.to_string(),
                p.p.z.to_string(),
                p.vertex_weight.to_string(),
                u8::from(p.is_corner).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV export. Vertex targets are not stored there, so each
    /// point's vertex is set to its own position.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, GeometryError> {
        #[derive(Deserialize)]
        struct Row {
            t: f64,
            px: f64,
            py: f64,
            pz: f64,
            vertex_weight: f64,
            is_corner: u8,
        }
        let mut points = Vec::new();
        for row in csv::Reader::from_reader(reader).deserialize() {
            let r: Row = row?;
            let p = Vector3::new(r.px, r.py, r.pz);
            points.push(ReferencePoint { t: r.t, p, vertex_weight: r.vertex_weight, is_corner: r.is_corner != 0, vertex: p });
        }
        let ts = if points.len() >= 2 { points[1].t - points[0].t } else { 0.0 };
        if points.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(GeometryError::Invalid("reference times must increase".into()));
        }
        Ok(Self { ts, points })
    }

    pub fn read_csv_path(path: impl AsRef<Path>) -> Result<Self, GeometryError> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Arc length reached after time `tau` on a segment of length `len` whose
/// first and last `w` metres follow the corner profile.
fn arc_at(tau: f64, len: f64, w: f64, v: f64, corner: &CornerConfig) -> f64 {
    let t1 = corner.ramp_time(w, w, v);
    let t2 = t1 + (len - 2.0 * w) / v;
    if tau <= t1 {
        corner.ramp_distance(tau, w, v)
    } else if tau <= t2 {
        w + v * (tau - t1)
    } else {
        (len - corner.ramp_distance(2.0 * t1 + (len - 2.0 * w) / v - tau, w, v)).clamp(0.0, len)
    }
}

/// Piecewise-linear timed path through the sequence. Every vertex is a
/// sample; each segment is split into the fewest intervals of duration
/// `ts` that keep the local speed at or below the nominal profile.
pub fn densify(
    core: &Core,
    seq: &WindingSequence,
    ts: f64,
    speed: f64,
    corner: &CornerConfig,
    taper: &TaperConfig,
) -> Result<ReferencePath, GeometryError> {
    seq.validate(core.vertices.len())?;
    if !(ts > 0.0 && speed > 0.0) {
        return Err(GeometryError::Invalid("Ts and speed must be > 0".into()));
    }
    if !(corner.slowdown > 0.0 && corner.slowdown <= 1.0 && corner.window_m >= 0.0) {
        return Err(GeometryError::Invalid("corner slowdown must be in (0, 1] and window >= 0".into()));
    }
    if !(taper.peak >= 0.0 && taper.window_m >= 0.0) {
        return Err(GeometryError::Invalid("taper peak and window must be >= 0".into()));
    }

    let order = seq.unrolled();
    let mut points: Vec<ReferencePoint> = Vec::new();
    for (si, pair) in order.windows(2).enumerate() {
        let (a, b) = (core.vertex(pair[0]), core.vertex(pair[1]));
        let len = (b - a).norm();
        let dir = (b - a) / len;
        let w = corner.window_m.min(len / 2.0);
        let dur = 2.0 * corner.ramp_time(w, w, speed) + (len - 2.0 * w) / speed;
        let n = ((dur / ts) - 1e-9).ceil().max(1.0) as usize;
        let start = if si == 0 { 0 } else { 1 };
        for k in start..=n {
            let s = if k == n { len } else { arc_at(dur * k as f64 / n as f64, len, w, speed, corner) };
            let d = s.min(len - s);
            let vertex = if s <= len - s { a } else { b };
            let vertex_weight = if taper.window_m > 0.0 {
                taper.peak * (1.0 - d / taper.window_m).max(0.0)
            } else if d == 0.0 {
                taper.peak
            } else {
                0.0
            };
            let p = if k == n { b } else { a + dir * s };
            points.push(ReferencePoint {
                t: points.len() as f64 * ts,
                p,
                vertex_weight,
                is_corner: d <= corner.window_m,
                vertex,
            });
        }
    }
    Ok(ReferencePath { ts, points })
}

/// Weights of the open-loop smoothing pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerWeights {
    pub q_bar: f64,
    pub r_bar: f64,
    /// Scale applied to the per-sample vertex weight.
    pub w_vertex: f64,
    /// Thread-alignment weight; accepted for config compatibility, not modelled.
    pub w_align: Option<f64>,
}

impl Default for PlannerWeights {
    fn default() -> Self {
        Self { q_bar: 2e4, r_bar: 5e-3, w_vertex: 1.0, w_align: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedPath {
    /// Joint positions per path sample.
    pub joints: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    /// FK of `joints`, with the raw path's timing and vertex weights.
    pub reference: ReferencePath,
    pub cost: f64,
}

/// Receding-horizon smoothing of the raw path, starting from `q0`.
pub fn plan_open_loop<M: KinematicModel>(
    model: &M,
    cfg: &NmpcConfig,
    path: &ReferencePath,
    weights: &PlannerWeights,
    q0: &[f64],
) -> Result<PlannedPath, GeometryError> {
    if path.is_empty() {
        return Err(GeometryError::Invalid("empty path".into()));
    }
    if weights.w_align.is_some() {
        log::warn!("w_align is set but thread alignment is not modelled; ignoring it");
    }
    if !(weights.q_bar > 0.0 && weights.r_bar > 0.0 && weights.w_vertex >= 0.0) {
        return Err(GeometryError::Invalid("planner weights must be positive".into()));
    }
    let n = model.dof();
    let horizon = cfg.settings.horizon;
    let ts = cfg.settings.ts_s;
    let rate = vec![weights.r_bar; n];
    let last = path.len() - 1;

    let mut q = q0.to_vec();
    let mut u_prev = vec![0.0; n];
    let mut warm: Option<Vec<f64>> = None;
    let mut joints = vec![q.clone()];
    let mut inputs = Vec::with_capacity(path.len());
    let mut cost = 0.0;
    let mut targets = Vec::with_capacity(horizon);
    let mut stage_w = Vec::with_capacity(horizon);

    for k in 0..path.len() {
        targets.clear();
        stage_w.clear();
        for j in 1..=horizon {
            let pt = &path.points[(k + j).min(last)];
            let wv = weights.w_vertex * pt.vertex_weight;
            let total = weights.q_bar + wv;
            targets.push((pt.p * weights.q_bar + pt.vertex * wv) / total);
            stage_w.push(Vector3::repeat(total));
        }
        let tc = TrackingCost { targets: &targets, stage_weights: &stage_w, rate_weights: &rate };
        let sol = solve_tracking(model, cfg, tc, &q, &u_prev, warm.as_deref())
            .map_err(|source| GeometryError::SolverFailure { step: k, source })?;
        let u = sol.first_input();
        if k < last {
            let next = plant_step(
                &JointState::from_slice(&q),
                &JointCommand::from_slice(u.as_slice()),
                ts,
                &cfg.limits,
            );
            q = next.0.as_slice().to_vec();
            joints.push(q.clone());
            let p = model.position(&q);
            let pt = &path.points[k + 1];
            let du = &u - DVector::from_column_slice(&u_prev);
            cost += weights.q_bar * (p - pt.p).norm_squared()
                + weights.w_vertex * pt.vertex_weight * (p - pt.vertex).norm_squared()
                + weights.r_bar * du.norm_squared();
        }
        u_prev = u.as_slice().to_vec();
        inputs.push(u_prev.clone());
        warm = Some(sol.shifted());
    }

    let points = path
        .points
        .iter()
        .zip(&joints)
        .map(|(pt, qk)| ReferencePoint { p: model.position(qk), ..*pt })
        .collect();
    Ok(PlannedPath { joints, inputs, reference: ReferencePath { ts: path.ts, points }, cost })
}

/// Core and sequence configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryConfig {
    pub edge_length_m: f64,
    pub offset_m: [f64; 3],
    pub sequence: Vec<usize>,
    pub repetitions: usize,
    pub speed_mps: f64,
    pub corner: CornerConfig,
    pub taper: TaperConfig,
    pub planner: PlannerWeights,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        let seq = WindingSequence::tetrahedron_default();
        Self {
            edge_length_m: 0.08,
            offset_m: [-0.69, -0.17, 0.62],
            sequence: seq.indices,
            repetitions: seq.repetitions,
            speed_mps: 0.02,
            corner: CornerConfig::default(),
            taper: TaperConfig::default(),
            planner: PlannerWeights::default(),
        }
    }
}

impl GeometryConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, GeometryError> {
        Ok(serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?)
    }

    pub fn core(&self) -> Result<Core, GeometryError> {
        make_tetrahedron(self.edge_length_m, Vector3::from(self.offset_m))
    }

    pub fn winding(&self) -> Result<WindingSequence, GeometryError> {
        WindingSequence::new(self.sequence.clone(), self.repetitions)
    }

    pub fn densify(&self, ts: f64) -> Result<ReferencePath, GeometryError> {
        densify(&self.core()?, &self.winding()?, ts, self.speed_mps, &self.corner, &self.taper)
    }
}
