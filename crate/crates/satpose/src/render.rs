//! Scene synthesis: pose sampling and z-buffer rasterization of the target
//! model into a shaded grayscale image with mask, box, keypoints and
//! visibility flags.

use crate::geometry::{CameraModel, GeometryError, Pose, MIN_DEPTH_M};
use crate::losses::BBox;
use crate::model::{TargetModel, KEYPOINT_COUNT};
use crate::util::{random_unit_quat, standard_normal};
use nalgebra::{Vector2, Vector3};
use rand::Rng;
use thiserror::Error;

/// Screen-space triangles flatter than this are skipped by the rasterizer.
pub const MIN_TRIANGLE_AREA_PX2: f64 = 1e-12;

/// Sentinel pixel coordinate stored for keypoints that fall behind the
/// camera; far outside any image, so heatmap encoding zeroes the channel.
pub const BEHIND_CAMERA_SENTINEL_PX: f64 = -1e9;

const POSE_SAMPLE_ATTEMPTS: usize = 10_000;
const NEAR_PLANE_M: f64 = 1e-4;
const STAR_COUNT: usize = 20;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("silhouette is empty; sample is degenerate and should be redrawn")]
    DegenerateSample,
    #[error("no acceptable pose after {0} draws; geometry and camera are mismatched")]
    PoseRejection(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("sample invariant violated: {0}")]
    InvalidSample(String),
}

/// One fully annotated dataset item.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub width: usize,
    pub height: usize,
    /// Grayscale intensities in `[0, 1]`, row-major.
    pub image: Vec<f64>,
    /// Binary silhouette, row-major, values 0/1.
    pub mask: Vec<u8>,
    pub pose: Pose,
    /// Projected keypoints in pixels; may lie outside the image. Keypoints
    /// behind the camera carry [`BEHIND_CAMERA_SENTINEL_PX`] coordinates.
    pub keypoints_px: Vec<Vector2<f64>>,
    pub visibility: Vec<bool>,
    /// Tight axis-aligned box of the mask's on pixels, center-size.
    pub bbox: BBox,
}

impl SampleRecord {
    /// Tight integer bounding box of a mask's on pixels, center-size in px.
    pub fn bbox_from_mask(mask: &[u8], width: usize, height: usize) -> Option<BBox> {
        let (mut min_c, mut max_c, mut min_r, mut max_r) = (usize::MAX, 0, usize::MAX, 0);
        let mut any = false;
        for r in 0..height {
            for c in 0..width {
                if mask[r * width + c] != 0 {
                    any = true;
                    min_c = min_c.min(c);
                    max_c = max_c.max(c);
                    min_r = min_r.min(r);
                    max_r = max_r.max(r);
                }
            }
        }
        if !any {
            return None;
        }
        Some(BBox {
            cx: (min_c + max_c) as f64 / 2.0,
            cy: (min_r + max_r) as f64 / 2.0,
            w: (max_c - min_c + 1) as f64,
            h: (max_r - min_r + 1) as f64,
        })
    }

    /// Check every per-sample invariant; used after rendering and on load.
    pub fn validate(&self) -> Result<(), RenderError> {
        let n = self.width * self.height;
        let fail = |msg: String| Err(RenderError::InvalidSample(msg));
        if self.image.len() != n || self.mask.len() != n {
            return fail(format!(
                "buffer sizes image={} mask={} vs {}x{}",
                self.image.len(),
                self.mask.len(),
                self.width,
                self.height
            ));
        }
        if self.image.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return fail("image intensity outside [0, 1]".into());
        }
        if self.mask.iter().any(|&v| v > 1) {
            return fail("mask is not binary".into());
        }
        if self.keypoints_px.len() != KEYPOINT_COUNT || self.visibility.len() != KEYPOINT_COUNT {
            return fail(format!(
                "expected {KEYPOINT_COUNT} keypoints, got {} with {} visibility flags",
                self.keypoints_px.len(),
                self.visibility.len()
            ));
        }
        let Some(tight) = Self::bbox_from_mask(&self.mask, self.width, self.height) else {
            return fail("mask has no on pixels".into());
        };
        if tight != self.bbox {
            return fail(format!("bbox {:?} is not the tight mask box {tight:?}", self.bbox));
        }
        for (i, (kp, &vis)) in self.keypoints_px.iter().zip(&self.visibility).enumerate() {
            if vis
                && !(kp.x >= 0.0
                    && kp.x < self.width as f64
                    && kp.y >= 0.0
                    && kp.y < self.height as f64)
            {
                return fail(format!("visible keypoint {i} at {kp:?} lies outside the image"));
            }
        }
        Ok(())
    }
}

/// Draw a pose with range uniform in `[d_min, d_max]`, attitude uniform on
/// SO(3), and the target center projecting inside the central 80% of the
/// image. Center placement rejection-samples over the full image.
pub fn sample_pose(
    rng: &mut impl Rng,
    d_min: f64,
    d_max: f64,
    camera: &CameraModel,
) -> Result<Pose, RenderError> {
    assert!(d_min > 0.0 && d_min < d_max, "need 0 < d_min < d_max");
    let (w, h) = (camera.width_px as f64, camera.height_px as f64);
    for _ in 0..POSE_SAMPLE_ATTEMPTS {
        let d = rng.gen_range(d_min..d_max);
        let u = rng.gen_range(0.0..w);
        let v = rng.gen_range(0.0..h);
        if u < 0.1 * w || u >= 0.9 * w || v < 0.1 * h || v >= 0.9 * h {
            continue;
        }
        let dir = Vector3::new(
            (u - camera.cx) / camera.f_px,
            (v - camera.cy) / camera.f_px,
            1.0,
        )
        .normalize();
        let q = random_unit_quat(rng);
        return Ok(Pose::new(q, dir * d)?);
    }
    Err(RenderError::PoseRejection(POSE_SAMPLE_ATTEMPTS))
}

/// Screen-space vertex: pixel coordinates plus inverse depth.
#[derive(Debug, Clone, Copy)]
struct ScreenVertex {
    u: f64,
    v: f64,
    inv_z: f64,
}

fn to_screen(camera: &CameraModel, p: Vector3<f64>) -> ScreenVertex {
    ScreenVertex {
        u: camera.f_px * p.x / p.z + camera.cx,
        v: camera.f_px * p.y / p.z + camera.cy,
        inv_z: 1.0 / p.z,
    }
}

/// Clip a camera-space triangle against the near plane `z = NEAR_PLANE_M`.
/// Returns 0, 3 or 4 polygon vertices.
fn clip_near(tri: [Vector3<f64>; 3]) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(4);
    for i in 0..3 {
        let a = tri[i];
        let b = tri[(i + 1) % 3];
        let a_in = a.z > NEAR_PLANE_M;
        let b_in = b.z > NEAR_PLANE_M;
        if a_in {
            out.push(a);
        }
        if a_in != b_in {
            let t = (NEAR_PLANE_M - a.z) / (b.z - a.z);
            out.push(a + (b - a) * t);
        }
    }
    out
}

struct ZBuffer {
    width: usize,
    height: usize,
    /// Inverse depth per pixel; 0 marks background.
    inv_z: Vec<f64>,
    shade: Vec<f64>,
}

impl ZBuffer {
    fn new(width: usize, height: usize) -> Self {
        Self { width, height, inv_z: vec![0.0; width * height], shade: vec![0.0; width * height] }
    }

    /// Rasterize one screen triangle with a closed-triangle fill rule; depth
    /// is inverse-z interpolated linearly in screen space.
    fn rasterize(&mut self, v: [ScreenVertex; 3], shade: f64) {
        let area = (v[1].u - v[0].u) * (v[2].v - v[0].v) - (v[2].u - v[0].u) * (v[1].v - v[0].v);
        if area.abs() < MIN_TRIANGLE_AREA_PX2 {
            return;
        }
        let min_x = v.iter().map(|p| p.u).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let max_x = v
            .iter()
            .map(|p| p.u)
            .fold(f64::NEG_INFINITY, f64::max)
            .ceil()
            .min(self.width as f64 - 1.0);
        let min_y = v.iter().map(|p| p.v).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let max_y = v
            .iter()
            .map(|p| p.v)
            .fold(f64::NEG_INFINITY, f64::max)
            .ceil()
            .min(self.height as f64 - 1.0);
        if max_x < 0.0 || max_y < 0.0 {
            return;
        }
        let inv_area = 1.0 / area;
        for row in min_y..=max_y as usize {
            let py = row as f64;
            for col in min_x..=max_x as usize {
                let px = col as f64;
                // Signed edge functions; inside when all share the area's sign.
                let w0 = (v[1].u - v[0].u) * (py - v[0].v) - (px - v[0].u) * (v[1].v - v[0].v);
                let w1 = (v[2].u - v[1].u) * (py - v[1].v) - (px - v[1].u) * (v[2].v - v[1].v);
                let w2 = (v[0].u - v[2].u) * (py - v[2].v) - (px - v[2].u) * (v[0].v - v[2].v);
                let inside = if area > 0.0 {
                    w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0
                } else {
                    w0 <= 0.0 && w1 <= 0.0 && w2 <= 0.0
                };
                if !inside {
                    continue;
                }
                // Barycentric weights opposite each vertex.
                let b0 = w1 * inv_area;
                let b1 = w2 * inv_area;
                let b2 = w0 * inv_area;
                let inv_z = b0 * v[0].inv_z + b1 * v[1].inv_z + b2 * v[2].inv_z;
                let idx = row * self.width + col;
                if inv_z > self.inv_z[idx] {
                    self.inv_z[idx] = inv_z;
                    self.shade[idx] = shade;
                }
            }
        }
    }
}

/// Render one sample: silhouette mask with z-buffer occlusion, flat-shaded
/// image over a noisy star background, tight box, projected keypoints and
/// their visibility.
pub fn render(
    camera: &CameraModel,
    pose: &Pose,
    model: &TargetModel,
    rng: &mut impl Rng,
) -> Result<SampleRecord, RenderError> {
    let (width, height) = (camera.width_px as usize, camera.height_px as usize);
    let rot = pose.rotation_matrix();
    let t = pose.translation();
    let cam_vertices: Vec<Vector3<f64>> = model.vertices().iter().map(|p| rot * p + t).collect();

    // Light and surface shading are drawn before any per-pixel noise so the
    // rng stream layout is stable.
    let light = loop {
        let l = Vector3::new(
            standard_normal(rng),
            standard_normal(rng),
            standard_normal(rng),
        );
        if l.norm() > 1e-6 {
            break l.normalize();
        }
    };
    let light_intensity = rng.gen_range(0.4..1.0);

    let mut zbuf = ZBuffer::new(width, height);
    for tri in model.triangles() {
        let corners = [
            cam_vertices[tri[0]],
            cam_vertices[tri[1]],
            cam_vertices[tri[2]],
        ];
        let normal = (corners[1] - corners[0]).cross(&(corners[2] - corners[0]));
        let shade = if normal.norm() > 1e-12 {
            (light_intensity * normal.normalize().dot(&light).abs()).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let poly = clip_near(corners);
        if poly.len() < 3 {
            continue;
        }
        let screen: Vec<ScreenVertex> = poly.iter().map(|&p| to_screen(camera, p)).collect();
        for i in 1..screen.len() - 1 {
            zbuf.rasterize([screen[0], screen[i], screen[i + 1]], shade);
        }
    }

    let mask: Vec<u8> = zbuf.inv_z.iter().map(|&z| u8::from(z > 0.0)).collect();
    let bbox = SampleRecord::bbox_from_mask(&mask, width, height)
        .ok_or(RenderError::DegenerateSample)?;

    // Background: uniform noise floor plus a fixed number of bright stars,
    // then the shaded object on top.
    let mut image: Vec<f64> = (0..width * height).map(|_| rng.gen_range(0.0..0.08)).collect();
    for _ in 0..STAR_COUNT {
        let r = rng.gen_range(0..height);
        let c = rng.gen_range(0..width);
        image[r * width + c] = rng.gen_range(0.7..1.0);
    }
    for (i, &m) in mask.iter().enumerate() {
        if m != 0 {
            image[i] = zbuf.shade[i];
        }
    }

    let mut keypoints_px = Vec::with_capacity(KEYPOINT_COUNT);
    let mut visibility = Vec::with_capacity(KEYPOINT_COUNT);
    for kp in model.keypoints() {
        let pc = rot * kp.position + t;
        if pc.z <= MIN_DEPTH_M {
            keypoints_px
                .push(Vector2::new(BEHIND_CAMERA_SENTINEL_PX, BEHIND_CAMERA_SENTINEL_PX));
            visibility.push(false);
            continue;
        }
        let sv = to_screen(camera, pc);
        let uv = Vector2::new(sv.u, sv.v);
        keypoints_px.push(uv);
        let in_frame = camera.contains(uv);
        let visible = if !in_frame {
            false
        } else {
            let col = (uv.x.round() as isize).clamp(0, width as isize - 1) as usize;
            let row = (uv.y.round() as isize).clamp(0, height as isize - 1) as usize;
            let buf_inv_z = zbuf.inv_z[row * width + col];
            if buf_inv_z <= 0.0 {
                // Off the silhouette by rounding; nothing occludes it.
                true
            } else {
                let z_buf = 1.0 / buf_inv_z;
                // Tolerance absorbs interpolation error at the sample point.
                pc.z <= z_buf + 0.005 * pc.z + 1e-4
            }
        };
        visibility.push(visible);
    }

    let record = SampleRecord {
        width,
        height,
        image,
        mask,
        pose: *pose,
        keypoints_px,
        visibility,
        bbox,
    };
    record.validate()?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quat;
    use crate::model::build_target_model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn camera() -> CameraModel {
        CameraModel::from_fov(64, 64, 35.0).unwrap()
    }

    #[test]
    fn pose_samples_respect_range_and_are_deterministic() {
        let cam = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut norms = Vec::new();
        let mut comp_sum = [0.0f64; 4];
        for _ in 0..10_000 {
            let pose = sample_pose(&mut rng, 1.0, 25.0, &cam).unwrap();
            let n = pose.translation().norm();
            assert!((1.0..25.0).contains(&n), "range violated: {n}");
            norms.push(n);
            for (acc, q) in comp_sum.iter_mut().zip(pose.quat().to_array()) {
                *acc += q;
            }
            let uv = crate::geometry::project(&cam, &pose, &[Vector3::zeros()]).unwrap()[0];
            assert!(uv.x >= 6.4 && uv.x < 57.6 && uv.y >= 6.4 && uv.y < 57.6);
        }
        // Attitude uniformity sanity: component means near zero.
        for acc in comp_sum {
            assert!((acc / 10_000.0).abs() < 0.05);
        }
        // Determinism: same seed, same sequence.
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let pose2 = sample_pose(&mut rng2, 1.0, 25.0, &cam).unwrap();
        let mut rng3 = ChaCha8Rng::seed_from_u64(7);
        let pose3 = sample_pose(&mut rng3, 1.0, 25.0, &cam).unwrap();
        assert_eq!(pose2, pose3);
    }

    #[test]
    fn bbox_shrinks_with_distance() {
        let cam = camera();
        let model = build_target_model();
        let near = Pose::identity_at(Vector3::new(0.0, 0.0, 2.0)).unwrap();
        let far = Pose::identity_at(Vector3::new(0.0, 0.0, 25.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = render(&cam, &near, &model, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = render(&cam, &far, &model, &mut rng).unwrap();
        assert!(b.bbox.w * b.bbox.h < a.bbox.w * a.bbox.h);
    }

    #[test]
    fn head_on_bus_corner_visibility() {
        let cam = camera();
        let model = build_target_model();
        let pose = Pose::identity_at(Vector3::new(0.0, 0.0, 5.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rec = render(&cam, &pose, &model, &mut rng).unwrap();
        let idx_near = model.keypoints().iter().position(|k| k.name == "bus_ppm").unwrap();
        let idx_far = model.keypoints().iter().position(|k| k.name == "bus_ppp").unwrap();
        assert!(rec.visibility[idx_near], "camera-facing corner must be visible");
        assert!(!rec.visibility[idx_far], "far-side corner must be occluded");
    }

    #[test]
    fn mask_matches_brute_force_rasterizer_exactly() {
        // Independent oracle: per-pixel point-in-triangle via barycentric
        // coordinates from a solved 2x2 system.
        let cam = camera();
        let model = build_target_model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let pose = sample_pose(&mut rng, 2.5, 20.0, &cam).unwrap();
            let mut render_rng = ChaCha8Rng::seed_from_u64(4);
            let rec = render(&cam, &pose, &model, &mut render_rng).unwrap();

            let rot = pose.rotation_matrix();
            let t = pose.translation();
            let screen: Vec<Vector2<f64>> = model
                .vertices()
                .iter()
                .map(|p| {
                    let c = rot * p + t;
                    assert!(c.z > 0.0, "oracle poses must not need clipping");
                    Vector2::new(cam.f_px * c.x / c.z + cam.cx, cam.f_px * c.y / c.z + cam.cy)
                })
                .collect();

            let mut oracle_count = 0usize;
            for row in 0..rec.height {
                for col in 0..rec.width {
                    let p = Vector2::new(col as f64, row as f64);
                    let covered = model.triangles().iter().any(|tri| {
                        let (a, b, c) = (screen[tri[0]], screen[tri[1]], screen[tri[2]]);
                        let m00 = b.x - a.x;
                        let m01 = c.x - a.x;
                        let m10 = b.y - a.y;
                        let m11 = c.y - a.y;
                        let det = m00 * m11 - m01 * m10;
                        if det.abs() < MIN_TRIANGLE_AREA_PX2 {
                            return false;
                        }
                        let rx = p.x - a.x;
                        let ry = p.y - a.y;
                        let alpha = (rx * m11 - ry * m01) / det;
                        let beta = (m00 * ry - m10 * rx) / det;
                        alpha >= 0.0 && beta >= 0.0 && alpha + beta <= 1.0
                    });
                    if covered {
                        oracle_count += 1;
                    }
                }
            }
            let mask_count: usize = rec.mask.iter().map(|&m| m as usize).sum();
            assert_eq!(mask_count, oracle_count, "coverage mismatch at pose {pose:?}");
        }
    }

    #[test]
    fn visible_keypoints_stay_in_frame() {
        let cam = camera();
        let model = build_target_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let pose = sample_pose(&mut rng, 1.0, 25.0, &cam).unwrap();
            let rec = match render(&cam, &pose, &model, &mut rng) {
                Ok(r) => r,
                Err(RenderError::DegenerateSample) => continue,
                Err(e) => panic!("{e}"),
            };
            rec.validate().unwrap();
        }
    }

    #[test]
    fn far_pose_never_clips_but_wraparound_pose_errors_cleanly() {
        let cam = camera();
        let model = build_target_model();
        // A pose so close the model surrounds the camera: either renders a
        // valid (possibly huge) silhouette or reports a degenerate sample,
        // but never panics or emits an invalid record.
        let pose = Pose::new(
            Quat::from_axis_angle(Vector3::y(), 0.7),
            Vector3::new(0.0, 0.0, 0.75),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        match render(&cam, &pose, &model, &mut rng) {
            Ok(rec) => rec.validate().unwrap(),
            Err(RenderError::DegenerateSample) => {}
            Err(e) => panic!("unexpected error: {e}"),
        }
    }
}
