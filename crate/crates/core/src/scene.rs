//! Synthetic highway scenes seen by a gantry-mounted camera and traffic radar.
//!
//! World frame: x to the right of the road direction at the gantry, y along
//! the road, z up, road surface at z = 0. Radar frame: x right, y forward,
//! z up. The ground-truth extrinsic maps radar coordinates into the camera
//! frame.

use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Vector2};
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::geometry::{CameraIntrinsics, Extrinsic, Vec3};
use crate::image::RgbImage;

const MIN_CAR_LENGTH: f64 = 3.5;
/// Longitudinal position of the reference point (rear axle) from the rear face,
/// as a fraction of vehicle length.
const REAR_AXLE_FRACTION: f64 = 0.2;
/// Front detection of a multi-detected vehicle, as a fraction of length from the rear face.
const FRONT_POINT_FRACTION: f64 = 0.8;
const LATERAL_JITTER: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub lane_count: u32,
    pub lane_width: f64,
    /// `[near, far]` road distance from the gantry in meters.
    pub observation_range: [f64; 2],
    pub vehicle_count_range: [u32; 2],
    pub truck_fraction: f64,
    /// Smallest bumper-to-bumper gap between vehicles in one lane.
    pub min_headway: f64,
    /// Signed road curvature in 1/m; 0 is a straight road.
    pub road_curvature: f64,
    pub rng_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            lane_count: 8,
            lane_width: 3.75,
            observation_range: [25.0, 150.0],
            vehicle_count_range: [16, 32],
            truck_fraction: 0.15,
            min_headway: 2.0,
            road_curvature: 0.0,
            rng_seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lane_count < 1 {
            return Err(invalid("scene.lane_count", "must be at least 1"));
        }
        if !(self.lane_width > 0.0) {
            return Err(invalid("scene.lane_width", "must be positive"));
        }
        let [near, far] = self.observation_range;
        if !(near >= 0.0 && near < far) {
            return Err(invalid("scene.observation_range", "expected 0 <= near < far"));
        }
        if self.vehicle_count_range[0] > self.vehicle_count_range[1] {
            return Err(invalid("scene.vehicle_count_range", "min exceeds max"));
        }
        if !(0.0..=1.0).contains(&self.truck_fraction) {
            return Err(invalid("scene.truck_fraction", "must lie in [0, 1]"));
        }
        if !(self.min_headway >= 0.0) {
            return Err(invalid("scene.min_headway", "must be >= 0"));
        }
        if !self.road_curvature.is_finite() || self.road_curvature.abs() * far > 1.5 {
            return Err(invalid(
                "scene.road_curvature",
                "road must not turn more than 1.5 rad within range",
            ));
        }
        Ok(())
    }

    pub fn road(&self) -> Road {
        Road {
            lane_count: self.lane_count,
            lane_width: self.lane_width,
            curvature: self.road_curvature,
        }
    }

    /// Vehicles that fit into one lane when every vehicle is a minimum-length car.
    pub fn lane_capacity(&self) -> usize {
        let [near, far] = self.observation_range;
        ((far - near + self.min_headway) / (MIN_CAR_LENGTH + self.min_headway))
            .floor()
            .max(0.0) as usize
    }
}

/// Road centerline geometry. The centerline starts at the world origin
/// heading along +y and bends with constant curvature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub lane_count: u32,
    pub lane_width: f64,
    pub curvature: f64,
}

impl Road {
    pub fn half_width(&self) -> f64 {
        self.lane_count as f64 * self.lane_width / 2.0
    }

    /// Lateral offset (positive to the right) of a lane center.
    pub fn lane_center(&self, lane: u32) -> f64 {
        (lane as f64 + 0.5) * self.lane_width - self.half_width()
    }

    /// World `(x, y)` of road coordinates and the unit heading there.
    pub fn to_world(&self, s: f64, lateral: f64) -> (Vector2<f64>, Vector2<f64>) {
        if self.curvature.abs() < 1e-12 {
            return (Vector2::new(lateral, s), Vector2::new(0.0, 1.0));
        }
        let r = 1.0 / self.curvature;
        let th = s * self.curvature;
        let (sin, cos) = th.sin_cos();
        let center = Vector2::new(r * (1.0 - cos), r * sin);
        let normal = Vector2::new(cos, -sin);
        (center + normal * lateral, Vector2::new(sin, cos))
    }

    /// Road coordinates `(s, lateral)` of a ground point.
    pub fn from_world(&self, x: f64, y: f64) -> (f64, f64) {
        if self.curvature.abs() < 1e-12 {
            return (y, x);
        }
        let r = 1.0 / self.curvature;
        let sg = r.signum();
        let dist = ((x - r).powi(2) + y * y).sqrt();
        let th = (y * sg).atan2((r - x) * sg);
        (th * r, r - sg * dist)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleClass {
    Car,
    Truck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    /// Rear-axle center at mid-body height, world frame.
    pub position: [f64; 3],
    /// Unit heading in the ground plane.
    pub heading: [f64; 2],
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub class: VehicleClass,
    pub color: [u8; 3],
    pub lane: u32,
    /// Road coordinate of the rear face.
    pub s_rear: f64,
}

impl Vehicle {
    pub fn reference_point(&self) -> Vec3 {
        Vec3::from(self.position)
    }

    fn axes(&self) -> (Vec3, Vec3) {
        let fwd = Vec3::new(self.heading[0], self.heading[1], 0.0);
        let right = Vec3::new(self.heading[1], -self.heading[0], 0.0);
        (fwd, right)
    }

    /// Point at fraction `along` of the length (0 = rear face), mid-body height.
    pub fn body_point(&self, along: f64) -> Vec3 {
        let (fwd, _) = self.axes();
        self.reference_point() + fwd * ((along - REAR_AXLE_FRACTION) * self.length)
    }

    pub fn center(&self) -> Vec3 {
        self.body_point(0.5)
    }

    /// Eight cuboid corners; bit 0 selects front/rear, bit 1 right/left, bit 2 top/bottom.
    pub fn corners(&self) -> [Vec3; 8] {
        let (fwd, right) = self.axes();
        let base = self.reference_point() - Vec3::new(0.0, 0.0, self.height / 2.0);
        std::array::from_fn(|i| {
            let along = if i & 1 == 1 {
                1.0 - REAR_AXLE_FRACTION
            } else {
                -REAR_AXLE_FRACTION
            };
            let side = if i & 2 == 2 { 0.5 } else { -0.5 };
            let up = if i & 4 == 4 { self.height } else { 0.0 };
            base + fwd * (along * self.length) + right * (side * self.width) + Vec3::new(0.0, 0.0, up)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub road: Road,
    pub observation_range: [f64; 2],
    pub vehicles: Vec<Vehicle>,
}

fn pick_color<R: Rng + ?Sized>(rng: &mut R) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 10] = [
        [230, 230, 225],
        [200, 30, 35],
        [30, 70, 190],
        [240, 200, 40],
        [40, 150, 60],
        [250, 130, 20],
        [150, 40, 160],
        [20, 190, 200],
        [245, 245, 245],
        [120, 200, 240],
    ];
    let base = PALETTE[rng.random_range(0..PALETTE.len())];
    base.map(|c| (c as i32 + rng.random_range(-15..=15)).clamp(0, 255) as u8)
}

struct Body {
    class: VehicleClass,
    length: f64,
    width: f64,
    height: f64,
}

fn draw_body<R: Rng + ?Sized>(truck_fraction: f64, rng: &mut R) -> Body {
    if rng.random::<f64>() < truck_fraction {
        Body {
            class: VehicleClass::Truck,
            length: rng.random_range(10.0..18.0),
            width: rng.random_range(2.45..2.55),
            height: rng.random_range(3.4..4.0),
        }
    } else {
        Body {
            class: VehicleClass::Car,
            length: rng.random_range(MIN_CAR_LENGTH..5.2),
            width: rng.random_range(1.7..1.95),
            height: rng.random_range(1.4..1.8),
        }
    }
}

/// Random traffic: a vehicle count from the configured range, lanes drawn
/// uniformly, no overlap closer than `min_headway` within a lane.
pub fn generate_scene<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Result<Scene> {
    cfg.validate()?;
    let road = cfg.road();
    let [near, far] = cfg.observation_range;
    let per_lane = cfg.lane_capacity();
    let capacity = per_lane * cfg.lane_count as usize;
    let [lo, hi] = cfg.vehicle_count_range.map(|v| v as usize);
    if lo > capacity {
        return Err(CoreError::Unsatisfiable { wanted: lo, capacity });
    }
    let count = rng.random_range(lo..=hi).min(capacity);

    let mut per_lane_count = vec![0usize; cfg.lane_count as usize];
    for _ in 0..count {
        let open: Vec<usize> = (0..per_lane_count.len())
            .filter(|&l| per_lane_count[l] < per_lane)
            .collect();
        per_lane_count[open[rng.random_range(0..open.len())]] += 1;
    }

    let mut vehicles = Vec::with_capacity(count);
    for (lane, &k) in per_lane_count.iter().enumerate() {
        if k == 0 {
            continue;
        }
        let mut bodies: Vec<Body> = (0..k).map(|_| draw_body(cfg.truck_fraction, rng)).collect();
        let gaps = (k - 1) as f64 * cfg.min_headway;
        let slack = |b: &[Body]| (far - near) - gaps - b.iter().map(|v| v.length).sum::<f64>();
        while slack(&bodies) < 0.0 {
            let longest = (0..k)
                .max_by(|&a, &b| bodies[a].length.total_cmp(&bodies[b].length))
                .expect("k > 0");
            if bodies[longest].class == VehicleClass::Truck {
                bodies[longest] = draw_body(0.0, rng);
            } else {
                bodies[longest].length = MIN_CAR_LENGTH;
            }
        }
        let free = slack(&bodies);
        let mut offsets: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * free).collect();
        offsets.sort_by(f64::total_cmp);

        let mut cursor = near;
        for (body, off) in bodies.into_iter().zip(offsets) {
            let s_rear = cursor + off;
            cursor += body.length + cfg.min_headway;
            let lateral = road.lane_center(lane as u32) + rng.random_range(-LATERAL_JITTER..LATERAL_JITTER);
            let s_ref = s_rear + REAR_AXLE_FRACTION * body.length;
            let (xy, heading) = road.to_world(s_ref, lateral);
            vehicles.push(Vehicle {
                position: [xy.x, xy.y, body.height / 2.0],
                heading: [heading.x, heading.y],
                length: body.length,
                width: body.width,
                height: body.height,
                class: body.class,
                color: pick_color(rng),
                lane: lane as u32,
                s_rear,
            });
        }
    }
    Ok(Scene {
        road,
        observation_range: cfg.observation_range,
        vehicles,
    })
}

/// Noise and artifact model of the traffic radar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RadarModel {
    /// Per-axis standard deviation of position noise, meters.
    pub position_noise_sigma: f64,
    pub dropout_prob: f64,
    /// Expected number of spurious detections per frame.
    pub false_positive_rate: f64,
    /// Vehicles longer than this produce a front and a rear detection.
    pub multi_detection_length_threshold: f64,
    /// Full horizontal opening angle, degrees.
    pub field_of_view: f64,
}

impl Default for RadarModel {
    fn default() -> Self {
        Self {
            position_noise_sigma: 0.3,
            dropout_prob: 0.1,
            false_positive_rate: 0.5,
            multi_detection_length_threshold: 8.0,
            field_of_view: 40.0,
        }
    }
}

impl RadarModel {
    /// Perfect radar: no noise, no dropouts, no false positives.
    pub fn ideal() -> Self {
        Self {
            position_noise_sigma: 0.0,
            dropout_prob: 0.0,
            false_positive_rate: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.position_noise_sigma >= 0.0) {
            return Err(invalid("radar.position_noise_sigma", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(invalid("radar.dropout_prob", "must lie in [0, 1]"));
        }
        if !(self.false_positive_rate >= 0.0) {
            return Err(invalid("radar.false_positive_rate", "must be >= 0"));
        }
        if !(self.field_of_view > 0.0 && self.field_of_view <= 360.0) {
            return Err(invalid("radar.field_of_view", "must lie in (0, 360]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarDetection {
    /// Position in the radar frame, meters.
    pub x: [f64; 3],
    pub is_false_positive: bool,
    pub vehicle_id: Option<usize>,
}

impl RadarDetection {
    pub fn position(&self) -> Vec3 {
        Vec3::from(self.x)
    }
}

/// Mounting of one sensor: position plus yaw (about world z, positive
/// turning right), pitch (down positive) and roll (about the viewing axis).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mount {
    pub position: [f64; 3],
    pub yaw_deg: f64,
    pub pitch_down_deg: f64,
    pub roll_deg: f64,
}

impl Mount {
    /// Body axes x-right, y-forward, z-up expressed in the world frame.
    fn body_rotation(&self) -> Matrix3<f64> {
        let rz = nalgebra::Rotation3::from_axis_angle(&Vec3::z_axis(), -self.yaw_deg.to_radians());
        let rx = nalgebra::Rotation3::from_axis_angle(&Vec3::x_axis(), -self.pitch_down_deg.to_radians());
        let ry = nalgebra::Rotation3::from_axis_angle(&Vec3::y_axis(), self.roll_deg.to_radians());
        (rz * rx * ry).into_inner()
    }

    /// Pose of a radar-style sensor (x right, y forward, z up).
    pub fn radar_pose(&self) -> Extrinsic {
        Extrinsic::new(self.body_rotation(), Vec3::from(self.position)).expect("rotation")
    }

    /// Pose of a camera (x right, y down, z forward).
    pub fn camera_pose(&self) -> Extrinsic {
        // camera axes in body coordinates: x -> x, y -> -z, z -> y
        let cam_in_body = Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0);
        Extrinsic::new(self.body_rotation() * cam_in_body, Vec3::from(self.position)).expect("rotation")
    }
}

/// Serializable description of a sensor rig.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigSpec {
    pub name: String,
    pub camera: Mount,
    pub radar: Mount,
    /// Focal length in pixels at the native resolution.
    pub focal_px: f64,
    pub width: u32,
    pub height: u32,
}

impl RigSpec {
    /// Camera above the median, looking down the road; radar just below it.
    pub fn primary() -> Self {
        Self {
            name: "rig1".into(),
            camera: Mount {
                position: [0.0, 0.0, 7.0],
                yaw_deg: 0.0,
                pitch_down_deg: 7.0,
                roll_deg: 0.0,
            },
            radar: Mount {
                position: [0.4, 0.1, 6.6],
                yaw_deg: 1.5,
                pitch_down_deg: 1.0,
                roll_deg: 0.5,
            },
            focal_px: 760.0,
            width: 480,
            height: 300,
        }
    }

    /// Second gantry: offset to the side, higher, turned inward, different
    /// lens; used with a curved road.
    pub fn secondary() -> Self {
        Self {
            name: "rig2".into(),
            camera: Mount {
                position: [5.0, 0.0, 8.5],
                yaw_deg: -6.0,
                pitch_down_deg: 8.5,
                roll_deg: 0.8,
            },
            radar: Mount {
                position: [5.3, 0.3, 8.1],
                yaw_deg: -4.0,
                pitch_down_deg: 2.0,
                roll_deg: -0.5,
            },
            focal_px: 700.0,
            width: 480,
            height: 300,
        }
    }

    pub fn build(&self) -> Result<RigConfig> {
        if !(self.focal_px > 0.0) {
            return Err(invalid("rig.focal_px", "must be positive"));
        }
        if self.width < 2 || self.height < 2 {
            return Err(invalid("rig.width/height", "image too small"));
        }
        RigConfig::new(
            CameraIntrinsics::centered(self.focal_px, self.width, self.height),
            self.camera.camera_pose(),
            self.radar.radar_pose(),
        )
    }
}

/// Sensor rig with its ground-truth radar-to-camera extrinsic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigConfig {
    pub h_gt: Extrinsic,
    pub intrinsics: CameraIntrinsics,
    pub radar_pose_world: Extrinsic,
    pub camera_pose_world: Extrinsic,
}

impl RigConfig {
    pub fn new(
        intrinsics: CameraIntrinsics,
        camera_pose_world: Extrinsic,
        radar_pose_world: Extrinsic,
    ) -> Result<Self> {
        intrinsics.validate()?;
        Ok(Self {
            h_gt: camera_pose_world.inverse() * radar_pose_world,
            intrinsics,
            radar_pose_world,
            camera_pose_world,
        })
    }

    /// World-to-camera transform.
    pub fn camera_from_world(&self) -> Extrinsic {
        self.camera_pose_world.inverse()
    }

    pub fn radar_from_world(&self) -> Extrinsic {
        self.radar_pose_world.inverse()
    }
}

/// Radar measurements of one scene.
pub fn simulate_radar<R: Rng + ?Sized>(
    scene: &Scene,
    rig: &RigConfig,
    model: &RadarModel,
    rng: &mut R,
) -> Vec<RadarDetection> {
    let to_radar = rig.radar_from_world();
    let noise = Normal::new(0.0, model.position_noise_sigma).expect("sigma >= 0");
    let half_fov = (model.field_of_view / 2.0).to_radians();
    let mut out = Vec::new();
    for (id, v) in scene.vehicles.iter().enumerate() {
        let p = to_radar.transform_point(&v.reference_point());
        if p.x.atan2(p.y).abs() > half_fov {
            continue;
        }
        if rng.random::<f64>() < model.dropout_prob {
            continue;
        }
        let points = if v.length > model.multi_detection_length_threshold {
            vec![v.reference_point(), v.body_point(FRONT_POINT_FRACTION)]
        } else {
            vec![v.reference_point()]
        };
        for w in points {
            let q = to_radar.transform_point(&w);
            out.push(RadarDetection {
                x: [
                    q.x + noise.sample(rng),
                    q.y + noise.sample(rng),
                    q.z + noise.sample(rng),
                ],
                is_false_positive: false,
                vehicle_id: Some(id),
            });
        }
    }
    let n_fp = if model.false_positive_rate > 0.0 {
        Poisson::new(model.false_positive_rate).expect("rate > 0").sample(rng) as usize
    } else {
        0
    };
    let [near, far] = scene.observation_range;
    let hw = scene.road.half_width();
    for _ in 0..n_fp {
        let s = rng.random_range(near..far);
        let lat = rng.random_range(-hw..hw);
        let z = rng.random_range(0.5..1.5);
        let (xy, _) = scene.road.to_world(s, lat);
        let q = to_radar.transform_point(&Vec3::new(xy.x, xy.y, z));
        out.push(RadarDetection {
            x: [q.x, q.y, q.z],
            is_false_positive: true,
            vehicle_id: None,
        });
    }
    out
}

const SKY: [u8; 3] = [150, 190, 230];
const GRASS: [u8; 3] = [70, 110, 55];
const ASPHALT: [u8; 3] = [95, 95, 100];
const MARKING: [u8; 3] = [235, 235, 235];
const MARKING_WIDTH: f64 = 0.15;
const DASH_PERIOD: f64 = 12.0;
const DASH_LENGTH: f64 = 4.5;

fn background_pixel(road: &Road, origin: &Vec3, dir: &Vec3) -> [u8; 3] {
    if dir.z >= -1e-9 {
        return SKY;
    }
    let t = -origin.z / dir.z;
    let hit = origin + dir * t;
    let (s, lat) = road.from_world(hit.x, hit.y);
    let hw = road.half_width();
    if s < -5.0 || lat.abs() > hw + 0.5 {
        return GRASS;
    }
    for k in 0..=road.lane_count {
        let boundary = k as f64 * road.lane_width - hw;
        if (lat - boundary).abs() < MARKING_WIDTH / 2.0 {
            let solid = k == 0 || k == road.lane_count || k == road.lane_count / 2;
            if solid || s.rem_euclid(DASH_PERIOD) < DASH_LENGTH {
                return MARKING;
            }
        }
    }
    ASPHALT
}

fn shade(c: [u8; 3], f: f64) -> [u8; 3] {
    c.map(|v| (v as f64 * f).round().clamp(0.0, 255.0) as u8)
}

const NEAR_CLIP: f64 = 0.1;

/// Clip a polygon (camera frame) to `z >= NEAR_CLIP`.
fn clip_near(poly: &[Vec3]) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let ain = a.z >= NEAR_CLIP;
        let bin = b.z >= NEAR_CLIP;
        if ain {
            out.push(a);
        }
        if ain != bin {
            let t = (NEAR_CLIP - a.z) / (b.z - a.z);
            out.push(a + (b - a) * t);
        }
    }
    out
}

fn fill_convex(img: &mut RgbImage, pts: &[(f64, f64)], rgb: [u8; 3]) {
    if pts.len() < 3 {
        return;
    }
    let area: f64 = (0..pts.len())
        .map(|i| {
            let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    if area.abs() < 1e-12 {
        return;
    }
    let sign = area.signum();
    let (w, h) = (img.width() as f64, img.height() as f64);
    let min_x = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).floor().max(0.0);
    let max_x = pts
        .iter()
        .map(|p| p.0)
        .fold(f64::NEG_INFINITY, f64::max)
        .ceil()
        .min(w - 1.0);
    let min_y = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).floor().max(0.0);
    let max_y = pts
        .iter()
        .map(|p| p.1)
        .fold(f64::NEG_INFINITY, f64::max)
        .ceil()
        .min(h - 1.0);
    if min_x > max_x || min_y > max_y {
        return;
    }
    for py in min_y as u32..=max_y as u32 {
        let y = py as f64 + 0.5;
        for px in min_x as u32..=max_x as u32 {
            let x = px as f64 + 0.5;
            let inside = (0..pts.len()).all(|i| {
                let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
                sign * ((b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)) >= 0.0
            });
            if inside {
                img.put(px, py, rgb);
            }
        }
    }
}

/// Faces of a cuboid as corner indices (see [`Vehicle::corners`]) with a shading factor.
const FACES: [([usize; 4], f64); 6] = [
    ([4, 5, 7, 6], 1.0),  // top
    ([0, 2, 3, 1], 0.4),  // bottom
    ([0, 1, 5, 4], 0.8),  // left side
    ([2, 6, 7, 3], 0.8),  // right side
    ([0, 4, 6, 2], 0.65), // rear
    ([1, 3, 7, 5], 0.65), // front
];

/// Flat-shaded rendering: road background plus vehicle cuboids drawn far
/// to near with back-face culling.
pub fn render_image(scene: &Scene, rig: &RigConfig) -> RgbImage {
    let k = &rig.intrinsics;
    let mut img = RgbImage::new(k.width, k.height);
    let pose = &rig.camera_pose_world;
    let origin = *pose.translation();
    for py in 0..k.height {
        for px in 0..k.width {
            let d = Vec3::new((px as f64 + 0.5 - k.cx) / k.fx, (py as f64 + 0.5 - k.cy) / k.fy, 1.0);
            img.put(px, py, background_pixel(&scene.road, &origin, &(pose.rotation() * d)));
        }
    }

    let cam = rig.camera_from_world();
    let mut order: Vec<(f64, usize)> = scene
        .vehicles
        .iter()
        .enumerate()
        .map(|(i, v)| (cam.transform_point(&v.center()).z, i))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    for (_, i) in order {
        let v = &scene.vehicles[i];
        let corners_cam = v.corners().map(|c| cam.transform_point(&c));
        if corners_cam.iter().all(|c| c.z < NEAR_CLIP) {
            continue;
        }
        let center_cam = cam.transform_point(&v.center());
        for (idx, factor) in FACES {
            let face: Vec<Vec3> = idx.iter().map(|&j| corners_cam[j]).collect();
            let fc = face.iter().fold(Vec3::zeros(), |a, b| a + b) / 4.0;
            let outward = fc - center_cam;
            // visible when the camera lies on the outward side of the face plane
            if outward.dot(&fc) >= 0.0 {
                continue;
            }
            let clipped = clip_near(&face);
            let pts: Vec<(f64, f64)> = clipped
                .iter()
                .map(|p| (k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
                .collect();
            fill_convex(&mut img, &pts, shade(v.color, factor));
        }
    }
    img
}

/// One simulated sensor snapshot at native resolution.
#[derive(Clone, Debug)]
pub struct Frame {
    pub frame_id: u64,
    pub rig_id: String,
    pub scene: Scene,
    pub image: RgbImage,
    pub detections: Vec<RadarDetection>,
}

pub fn simulate_frame<R: Rng + ?Sized>(
    frame_id: u64,
    rig_id: &str,
    rig: &RigConfig,
    scene_cfg: &SceneConfig,
    radar: &RadarModel,
    rng: &mut R,
) -> Result<Frame> {
    let scene = generate_scene(scene_cfg, rng)?;
    let image = render_image(&scene, rig);
    let detections = simulate_radar(&scene, rig, radar, rng);
    Ok(Frame {
        frame_id,
        rig_id: rig_id.to_owned(),
        scene,
        image,
        detections,
    })
}

/// One JSON object per line.
pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, items: &[T]) -> Result<()> {
    for it in items {
        serde_json::to_writer(&mut w, it).map_err(|e| CoreError::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead, T: for<'de> Deserialize<'de>>(r: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CoreError::Format(e.to_string()))?);
    }
    Ok(out)
}
