//! Software rasterizer: axis-aligned boxes, perspective projection, z-buffer,
//! flat per-face shading. Produces the low-resolution multi-view observations
//! the agent learns from.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::Vec3;
use crate::sim::{
    Aperture, BlockColor, WorldState, BIN_SIZE_X, BIN_SIZE_Y, FIXTURE_HEIGHT, FIXTURE_HOLE_SPACING,
    FIXTURE_SIZE_X, FIXTURE_SIZE_Y,
};
use crate::{Error, Result};

pub const DEFAULT_RESOLUTION: usize = 32;
pub const MAX_RESOLUTION: usize = 64;
pub const N_CAMERAS: usize = 3;
/// Far-plane distance used to normalize the depth channel.
pub const FAR_PLANE: f64 = 2.0;
const NEAR_PLANE: f64 = 0.05;

/// Uniform camera-pose noise: zero mean, standard deviation 0.01 per
/// component, so the half-range is 0.01 * sqrt(3).
pub const CAMERA_NOISE_STD: f64 = 0.01;

const BACKGROUND: [f64; 3] = [0.85, 0.9, 0.95];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    pub fov_degrees: f64,
}

impl CameraPose {
    /// Orthonormal camera frame: (right, up, forward).
    fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let forward = (self.look_at - self.position).normalized();
        let right = forward.cross(self.up).normalized();
        let up = right.cross(forward);
        (right, up, forward)
    }

    pub fn is_degenerate(&self) -> bool {
        let forward = (self.look_at - self.position).normalized();
        forward.cross(self.up.normalized()).norm() < 1e-3
    }
}

/// The three nominal camera placements: over the shoulder, left, and right,
/// all aimed at the midpoint between the bins. Shoulder and left sit close
/// together.
pub fn nominal_cameras() -> Vec<CameraPose> {
    let target = Vec3::new(0.0, 0.0, 0.05);
    let cam = |az_deg: f64, r: f64, h: f64| CameraPose {
        position: Vec3::new(
            r * az_deg.to_radians().cos(),
            r * az_deg.to_radians().sin(),
            h,
        ),
        look_at: target,
        up: Vec3::new(0.0, 0.0, 1.0),
        fov_degrees: 45.0,
    };
    vec![cam(90.0, 0.62, 0.46), cam(128.0, 0.6, 0.4), cam(30.0, 0.6, 0.4)]
}

/// Per-episode camera jitter: each pose component gets independent uniform
/// noise with standard deviation [`CAMERA_NOISE_STD`]; up is re-normalized.
/// Degenerate poses are re-sampled.
pub fn perturb_cameras(nominal: &[CameraPose], seed: u64) -> Vec<CameraPose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = CAMERA_NOISE_STD * 3.0f64.sqrt();
    let jitter = |v: Vec3, rng: &mut ChaCha8Rng| {
        Vec3::new(
            v.x + rng.random_range(-half..=half),
            v.y + rng.random_range(-half..=half),
            v.z + rng.random_range(-half..=half),
        )
    };
    nominal
        .iter()
        .map(|cam| loop {
            let candidate = CameraPose {
                position: jitter(cam.position, &mut rng),
                look_at: jitter(cam.look_at, &mut rng),
                up: jitter(cam.up, &mut rng).normalized(),
                fov_degrees: cam.fov_degrees,
            };
            if !candidate.is_degenerate() {
                break candidate;
            }
        })
        .collect()
}

/// One rendered view. Pixels are stored as bytes; values read back as v/255,
/// so everything stays in [0, 1] and round-trips bit-exactly through logs.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewImage {
    pub resolution: usize,
    /// 3 = RGB, 4 = RGB + normalized depth.
    pub channels: usize,
    /// Row-major [H][W][C].
    pub data: Arc<Vec<u8>>,
    pub view_id: usize,
}

impl ViewImage {
    pub fn value(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.resolution + x) * self.channels + c] as f64 / 255.0
    }

    /// Channels-first tensor [C, H, W] with values in [0, 1].
    pub fn to_tensor(&self) -> crate::nn::Tensor {
        let r = self.resolution;
        let mut data = vec![0.0; self.channels * r * r];
        for y in 0..r {
            for x in 0..r {
                for c in 0..self.channels {
                    data[c * r * r + y * r + x] = self.value(y, x, c);
                }
            }
        }
        crate::nn::Tensor::from_vec(&[self.channels, r, r], data).unwrap()
    }

    /// RGB-only tensor [3, H, W].
    pub fn rgb_tensor(&self) -> crate::nn::Tensor {
        let r = self.resolution;
        let mut data = vec![0.0; 3 * r * r];
        for y in 0..r {
            for x in 0..r {
                for c in 0..3 {
                    data[c * r * r + y * r + x] = self.value(y, x, c);
                }
            }
        }
        crate::nn::Tensor::from_vec(&[3, r, r], data).unwrap()
    }

    /// Depth-only tensor [1, H, W]; requires a 4-channel image.
    pub fn depth_tensor(&self) -> Result<crate::nn::Tensor> {
        if self.channels != 4 {
            return Err(Error::Contract("image has no depth channel".into()));
        }
        let r = self.resolution;
        let mut data = vec![0.0; r * r];
        for y in 0..r {
            for x in 0..r {
                data[y * r + x] = self.value(y, x, 3);
            }
        }
        Ok(crate::nn::Tensor::from_vec(&[1, r, r], data).unwrap())
    }

    /// Raw binary dump: 16-byte header (magic "MVIM", H, W, C as u32 LE)
    /// followed by the pixel bytes.
    pub fn dump_raw(&self, path: &std::path::Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(16 + self.data.len());
        bytes.extend_from_slice(b"MVIM");
        bytes.extend_from_slice(&(self.resolution as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.resolution as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.channels as u32).to_le_bytes());
        bytes.extend_from_slice(&self.data);
        std::fs::write(path, bytes)?;
        Ok(())
    }
}

/// The agent's entire input: n rendered views plus the gripper bit.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewObservation {
    pub views: Vec<ViewImage>,
    pub gripper_aperture: Aperture,
}

/// An axis-aligned colored box in the scene.
#[derive(Debug, Clone, Copy)]
pub struct SceneBox {
    pub center: Vec3,
    pub half_extents: Vec3,
    pub color: [f64; 3],
}

impl SceneBox {
    pub fn new(center: Vec3, size: Vec3, color: [f64; 3]) -> SceneBox {
        SceneBox {
            center,
            half_extents: size * 0.5,
            color,
        }
    }
}

/// Shading factor per outward face normal axis.
fn face_shade(axis: usize, positive: bool) -> f64 {
    match (axis, positive) {
        (2, true) => 1.0,
        (2, false) => 0.35,
        (0, _) => 0.75,
        (1, _) => 0.55,
        _ => unreachable!(),
    }
}

struct Raster {
    res: usize,
    color: Vec<[f64; 3]>,
    depth: Vec<f64>,
}

impl Raster {
    fn new(res: usize) -> Raster {
        Raster {
            res,
            color: vec![BACKGROUND; res * res],
            depth: vec![FAR_PLANE; res * res],
        }
    }

    /// Rasterize one camera-space triangle. Vertices are (sx, sy, depth).
    fn triangle(&mut self, v: [[f64; 3]; 3], color: [f64; 3]) {
        let area = (v[1][0] - v[0][0]) * (v[2][1] - v[0][1])
            - (v[1][1] - v[0][1]) * (v[2][0] - v[0][0]);
        if area.abs() < 1e-12 {
            return;
        }
        let min_x = v.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let max_x = (v.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max).ceil() as isize)
            .clamp(0, self.res as isize - 1) as usize;
        let min_y = v.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let max_y = (v.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max).ceil() as isize)
            .clamp(0, self.res as isize - 1) as usize;
        if min_x >= self.res || min_y >= self.res {
            return;
        }
        for py in min_y..=max_y {
            for px in min_x..=max_x {
                let p = (px as f64 + 0.5, py as f64 + 0.5);
                let w0 = (v[1][0] - v[0][0]) * (p.1 - v[0][1]) - (v[1][1] - v[0][1]) * (p.0 - v[0][0]);
                let w1 = (v[2][0] - v[1][0]) * (p.1 - v[1][1]) - (v[2][1] - v[1][1]) * (p.0 - v[1][0]);
                let w2 = (v[0][0] - v[2][0]) * (p.1 - v[2][1]) - (v[0][1] - v[2][1]) * (p.0 - v[2][0]);
                let inside = if area > 0.0 {
                    w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0
                } else {
                    w0 <= 0.0 && w1 <= 0.0 && w2 <= 0.0
                };
                if !inside {
                    continue;
                }
                // Barycentric depth interpolation.
                let (b1, b2) = (w1 / area, w2 / area);
                let b0 = 1.0 - b1 - b2;
                // w1 spans opposite v[0]... map weights to vertices.
                let z = v[0][2] * b1 + v[1][2] * b2 + v[2][2] * b0;
                let idx = py * self.res + px;
                if z < self.depth[idx] && z > 0.0 {
                    self.depth[idx] = z;
                    self.color[idx] = color;
                }
            }
        }
    }
}

/// Render a raw list of boxes. Core of [`render`]; also handy for tests.
pub fn render_boxes(
    boxes: &[SceneBox],
    camera: &CameraPose,
    with_depth: bool,
    resolution: usize,
) -> ViewImage {
    let (right, up, forward) = camera.basis();
    let res = resolution;
    let focal = (res as f64 / 2.0) / (camera.fov_degrees.to_radians() / 2.0).tan();
    let project = |p: Vec3| -> Option<[f64; 3]> {
        let d = p - camera.position;
        let z = d.dot(forward);
        if z < NEAR_PLANE {
            return None;
        }
        let x = d.dot(right) * focal / z + res as f64 / 2.0;
        let y = res as f64 / 2.0 - d.dot(up) * focal / z;
        Some([x, y, z])
    };

    let mut raster = Raster::new(res);
    for b in boxes {
        let c = b.center;
        let h = b.half_extents;
        // Eight corners indexed by sign bits (x, y, z).
        let corner = |sx: f64, sy: f64, sz: f64| Vec3::new(c.x + sx * h.x, c.y + sy * h.y, c.z + sz * h.z);
        // Six faces as (axis, positive, four corners CCW seen from outside).
        let faces: [(usize, bool, [Vec3; 4]); 6] = [
            (0, true, [corner(1.0, -1.0, -1.0), corner(1.0, 1.0, -1.0), corner(1.0, 1.0, 1.0), corner(1.0, -1.0, 1.0)]),
            (0, false, [corner(-1.0, 1.0, -1.0), corner(-1.0, -1.0, -1.0), corner(-1.0, -1.0, 1.0), corner(-1.0, 1.0, 1.0)]),
            (1, true, [corner(1.0, 1.0, -1.0), corner(-1.0, 1.0, -1.0), corner(-1.0, 1.0, 1.0), corner(1.0, 1.0, 1.0)]),
            (1, false, [corner(-1.0, -1.0, -1.0), corner(1.0, -1.0, -1.0), corner(1.0, -1.0, 1.0), corner(-1.0, -1.0, 1.0)]),
            (2, true, [corner(-1.0, -1.0, 1.0), corner(1.0, -1.0, 1.0), corner(1.0, 1.0, 1.0), corner(-1.0, 1.0, 1.0)]),
            (2, false, [corner(-1.0, 1.0, -1.0), corner(1.0, 1.0, -1.0), corner(1.0, -1.0, -1.0), corner(-1.0, -1.0, -1.0)]),
        ];
        for (axis, positive, quad) in faces {
            let shade = face_shade(axis, positive);
            let col = [
                (b.color[0] * shade).clamp(0.0, 1.0),
                (b.color[1] * shade).clamp(0.0, 1.0),
                (b.color[2] * shade).clamp(0.0, 1.0),
            ];
            let pts: Option<Vec<[f64; 3]>> = quad.iter().map(|&p| project(p)).collect();
            if let Some(p) = pts {
                raster.triangle([p[0], p[1], p[2]], col);
                raster.triangle([p[0], p[2], p[3]], col);
            }
        }
    }

    let channels = if with_depth { 4 } else { 3 };
    let mut data = vec![0u8; res * res * channels];
    for i in 0..res * res {
        for c in 0..3 {
            data[i * channels + c] = (raster.color[i][c] * 255.0).round().clamp(0.0, 255.0) as u8;
        }
        if with_depth {
            let d = (raster.depth[i] / FAR_PLANE).clamp(0.0, 1.0);
            data[i * channels + 3] = (d * 255.0).round() as u8;
        }
    }
    ViewImage {
        resolution: res,
        channels,
        data: Arc::new(data),
        view_id: 0,
    }
}

fn block_color(c: BlockColor) -> [f64; 3] {
    match c {
        BlockColor::Blue => [0.1, 0.2, 0.9],
        BlockColor::Orange => [0.95, 0.55, 0.1],
    }
}

/// Build the scene boxes for a world state: bin floors, blocks, fixture with
/// hole markers, and the two gripper fingers.
pub fn scene_boxes(state: &WorldState) -> Vec<SceneBox> {
    let mut boxes = Vec::new();
    for bin in &state.bins {
        boxes.push(SceneBox::new(
            bin.center - Vec3::new(0.0, 0.0, 0.006),
            Vec3::new(BIN_SIZE_X, BIN_SIZE_Y, 0.012),
            [0.45, 0.45, 0.45],
        ));
    }
    if let Some(f) = &state.fixture {
        boxes.push(SceneBox::new(
            f.position,
            Vec3::new(FIXTURE_SIZE_X, FIXTURE_SIZE_Y, FIXTURE_HEIGHT),
            [0.55, 0.58, 0.55],
        ));
        for (i, dx) in [-FIXTURE_HOLE_SPACING, 0.0, FIXTURE_HOLE_SPACING].iter().enumerate() {
            let color = if i == 1 { [0.1, 0.8, 0.2] } else { [0.12, 0.12, 0.12] };
            boxes.push(SceneBox::new(
                f.position + Vec3::new(*dx, 0.0, FIXTURE_HEIGHT / 2.0 + 0.001),
                Vec3::new(0.045, 0.045, 0.002),
                color,
            ));
        }
    }
    for b in &state.blocks {
        boxes.push(SceneBox::new(
            b.position,
            Vec3::new(b.edge_length, b.edge_length, b.edge_length),
            block_color(b.color),
        ));
    }
    // Gripper: two fingers whose separation encodes Opened vs Closed,
    // tips at the grasp point.
    let sep = match state.gripper_aperture {
        Aperture::Opened => 0.06,
        Aperture::Closed => 0.014,
    };
    let g = state.gripper_position;
    for side in [-0.5, 0.5] {
        boxes.push(SceneBox::new(
            g + Vec3::new(side * sep, 0.0, 0.035),
            Vec3::new(0.012, 0.012, 0.07),
            [0.75, 0.1, 0.12],
        ));
    }
    boxes
}

/// Render one camera's view of the world.
pub fn render(state: &WorldState, camera: &CameraPose, with_depth: bool, resolution: usize) -> ViewImage {
    render_boxes(&scene_boxes(state), camera, with_depth, resolution)
}

/// Render every camera and attach the gripper bit.
pub fn observe(
    state: &WorldState,
    cameras: &[CameraPose],
    with_depth: bool,
    resolution: usize,
) -> MultiViewObservation {
    let views = cameras
        .iter()
        .enumerate()
        .map(|(i, cam)| {
            let mut img = render(state, cam, with_depth, resolution);
            img.view_id = i;
            img
        })
        .collect();
    MultiViewObservation {
        views,
        gripper_aperture: state.gripper_aperture,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{reset_episode, Task, TaskConfig};

    fn camera_at_origin_looking_y() -> CameraPose {
        CameraPose {
            position: Vec3::new(0.0, -1.0, 0.0),
            look_at: Vec3::ZERO,
            up: Vec3::new(0.0, 0.0, 1.0),
            fov_degrees: 45.0,
        }
    }

    #[test]
    fn perturb_with_same_seed_is_identical() {
        let nom = nominal_cameras();
        assert_eq!(perturb_cameras(&nom, 5), perturb_cameras(&nom, 5));
    }

    #[test]
    fn perturb_noise_moment_matches_uniform_oracle() {
        // Std of U(-a, a) is a / sqrt(3); here a = 0.01 * sqrt(3).
        let nom = vec![nominal_cameras()[0]];
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for seed in 0..n {
            let p = perturb_cameras(&nom, seed as u64);
            let dx = p[0].position.x - nom[0].position.x;
            sum += dx;
            sumsq += dx * dx;
        }
        let mean = sum / n as f64;
        let std = (sumsq / n as f64 - mean * mean).sqrt();
        assert!(
            (std - CAMERA_NOISE_STD).abs() < 0.05 * CAMERA_NOISE_STD,
            "sample std {std}"
        );
    }

    #[test]
    fn empty_scene_is_all_background() {
        let img = render_boxes(&[], &camera_at_origin_looking_y(), true, 16);
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(img.value(y, x, 0), (BACKGROUND[0] * 255.0).round() / 255.0);
                assert_eq!(img.value(y, x, 3), 1.0);
            }
        }
    }

    #[test]
    fn block_centroid_matches_analytic_projection() {
        let cam = camera_at_origin_looking_y();
        let center = Vec3::new(0.08, 0.1, -0.05);
        let boxes = [SceneBox::new(center, Vec3::new(0.05, 0.05, 0.05), [0.1, 0.2, 0.9])];
        let res = 64;
        let img = render_boxes(&boxes, &cam, false, res);
        // Collect blue-ish pixels.
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for y in 0..res {
            for x in 0..res {
                // Blue dominates red on every shaded face of a blue block but
                // not on the background.
                if img.value(y, x, 2) > img.value(y, x, 0) + 0.2 {
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                    n += 1.0;
                }
            }
        }
        assert!(n > 0.0, "no blue pixels rendered");
        // Pinhole oracle.
        let d = center - cam.position;
        let focal = (res as f64 / 2.0) / (cam.fov_degrees.to_radians() / 2.0).tan();
        let px = d.x * focal / d.y + res as f64 / 2.0;
        let py = res as f64 / 2.0 - d.z * focal / d.y;
        assert!((sx / n - px).abs() < 1.0, "x centroid {} vs {}", sx / n, px);
        assert!((sy / n - py).abs() < 1.0, "y centroid {} vs {}", sy / n, py);
    }

    #[test]
    fn nearer_box_occludes_and_has_smaller_depth() {
        let cam = camera_at_origin_looking_y();
        let near = SceneBox::new(Vec3::new(0.0, 0.2, 0.0), Vec3::new(0.05, 0.05, 0.05), [1.0, 0.0, 0.0]);
        let far = SceneBox::new(Vec3::new(0.0, 0.3, 0.0), Vec3::new(0.05, 0.05, 0.05), [0.0, 1.0, 0.0]);
        let res = 32;
        let both = render_boxes(&[far, near], &cam, false, res);
        let c = res / 2;
        // Occluded center pixel takes the near box's color.
        assert!(both.value(c, c, 0) > both.value(c, c, 1));
        let only_near = render_boxes(&[near], &cam, true, res);
        let only_far = render_boxes(&[far], &cam, true, res);
        assert!(only_near.value(c, c, 3) < only_far.value(c, c, 3));
    }

    #[test]
    fn silhouette_shrinks_with_distance() {
        let cam = camera_at_origin_looking_y();
        let res = 64;
        let mut prev_area = usize::MAX;
        // Distances spaced so the projected area changes by well over one
        // pixel row even after quantization.
        for dist in [0.25, 0.45, 0.8] {
            let b = SceneBox::new(
                Vec3::new(0.0, -1.0 + dist, 0.0),
                Vec3::new(0.05, 0.05, 0.05),
                [0.1, 0.2, 0.9],
            );
            let img = render_boxes(&[b], &cam, false, res);
            let area = (0..res)
                .flat_map(|y| (0..res).map(move |x| (y, x)))
                .filter(|&(y, x)| img.value(y, x, 2) > img.value(y, x, 0) + 0.2)
                .count();
            assert!(area < prev_area, "area {area} did not shrink");
            prev_area = area;
        }
    }

    #[test]
    fn observe_is_deterministic_and_labels_views() {
        let cfg = TaskConfig::new(Task::Insertion);
        let state = reset_episode(&cfg, 1).unwrap();
        let cams = perturb_cameras(&nominal_cameras(), 2);
        let a = observe(&state, &cams, false, 32);
        let b = observe(&state, &cams, false, 32);
        assert_eq!(a, b);
        assert_eq!(a.views.len(), N_CAMERAS);
        for (i, v) in a.views.iter().enumerate() {
            assert_eq!(v.view_id, i);
        }
        assert_eq!(a.gripper_aperture, state.gripper_aperture);
    }

    #[test]
    fn rendered_world_has_visible_objects() {
        let cfg = TaskConfig::new(Task::Insertion);
        let state = reset_episode(&cfg, 3).unwrap();
        let cams = nominal_cameras();
        for cam in &cams {
            let img = render(&state, cam, true, 32);
            let distinct: std::collections::HashSet<&[u8]> =
                img.data.chunks(img.channels).map(|c| &c[..3]).collect();
            assert!(distinct.len() > 3, "scene renders almost empty");
        }
    }
}
