//! The 3D target body: a deterministic stand-in satellite mesh with 18 named
//! keypoints (8 bus corners, 8 solar-panel corners, 2 antenna tips).

use nalgebra::Vector3;
use thiserror::Error;

/// Every target model in this crate carries exactly this many keypoints.
pub const KEYPOINT_COUNT: usize = 18;

/// Radius of the bounding sphere the model must fit inside, in meters.
pub const MAX_MODEL_RADIUS_M: f64 = 1.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("expected {KEYPOINT_COUNT} keypoints, got {0}")]
    KeypointCount(usize),
    #[error("triangle {tri} references vertex {index} out of {count}")]
    TriangleIndex { tri: usize, index: usize, count: usize },
    #[error("vertex {index} lies {radius} m from the origin, outside the {MAX_MODEL_RADIUS_M} m bounding sphere")]
    OutsideBoundingSphere { index: usize, radius: f64 },
}

/// A labeled 3D keypoint in the body frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub name: &'static str,
    pub position: Vector3<f64>,
}

/// Triangle mesh plus labeled keypoints, all in the body frame (meters).
#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel {
    vertices: Vec<Vector3<f64>>,
    triangles: Vec<[usize; 3]>,
    keypoints: Vec<Keypoint>,
}

impl TargetModel {
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        triangles: Vec<[usize; 3]>,
        keypoints: Vec<Keypoint>,
    ) -> Result<Self, ModelError> {
        if keypoints.len() != KEYPOINT_COUNT {
            return Err(ModelError::KeypointCount(keypoints.len()));
        }
        for (tri, idx) in triangles.iter().enumerate() {
            for &index in idx {
                if index >= vertices.len() {
                    return Err(ModelError::TriangleIndex { tri, index, count: vertices.len() });
                }
            }
        }
        for (index, v) in vertices.iter().enumerate() {
            let radius = v.norm();
            if radius > MAX_MODEL_RADIUS_M {
                return Err(ModelError::OutsideBoundingSphere { index, radius });
            }
        }
        Ok(Self { vertices, triangles, keypoints })
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn keypoints(&self) -> &[Keypoint] {
        &self.keypoints
    }

    pub fn keypoint_positions(&self) -> Vec<Vector3<f64>> {
        self.keypoints.iter().map(|k| k.position).collect()
    }
}

/// Bus half-extents: a 0.8 x 0.75 x 0.32 m cuboid.
const BUS: [f64; 3] = [0.4, 0.375, 0.16];
/// Panel quads in the z = 0 plane, spanning [PANEL_X0, PANEL_X1] x [-PANEL_Y, PANEL_Y].
const PANEL_X0: f64 = 0.42;
const PANEL_X1: f64 = 0.92;
const PANEL_Y: f64 = 0.3;
/// Antenna fins rise from the bus top face to this height.
const ANTENNA_TIP_Z: f64 = 0.55;

/// Build the stand-in satellite: cuboid bus, two solar-panel quads, and two
/// thin antenna fins. Fully deterministic; identical on every call.
pub fn build_target_model() -> TargetModel {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut keypoints = Vec::new();

    // Bus corners, in fixed (+/- x, +/- y, +/- z) order.
    let bus_corner_names = [
        "bus_ppp", "bus_ppm", "bus_pmp", "bus_pmm", "bus_mpp", "bus_mpm", "bus_mmp", "bus_mmm",
    ];
    let mut name_idx = 0;
    for sx in [1.0, -1.0] {
        for sy in [1.0, -1.0] {
            for sz in [1.0, -1.0] {
                let v = Vector3::new(sx * BUS[0], sy * BUS[1], sz * BUS[2]);
                vertices.push(v);
                keypoints.push(Keypoint { name: bus_corner_names[name_idx], position: v });
                name_idx += 1;
            }
        }
    }
    // Index layout above: bit 2 = -x, bit 1 = -y, bit 0 = -z.
    let c = |sx: usize, sy: usize, sz: usize| sx * 4 + sy * 2 + sz; // 0 = +, 1 = -
    let bus_faces = [
        [c(0, 0, 0), c(0, 1, 0), c(0, 1, 1), c(0, 0, 1)], // +x
        [c(1, 0, 0), c(1, 0, 1), c(1, 1, 1), c(1, 1, 0)], // -x
        [c(0, 0, 0), c(0, 0, 1), c(1, 0, 1), c(1, 0, 0)], // +y
        [c(0, 1, 0), c(1, 1, 0), c(1, 1, 1), c(0, 1, 1)], // -y
        [c(0, 0, 0), c(1, 0, 0), c(1, 1, 0), c(0, 1, 0)], // +z
        [c(0, 0, 1), c(0, 1, 1), c(1, 1, 1), c(1, 0, 1)], // -z
    ];
    for f in bus_faces {
        triangles.push([f[0], f[1], f[2]]);
        triangles.push([f[0], f[2], f[3]]);
    }

    // Solar panels.
    for (side, sx) in [("right", 1.0), ("left", -1.0)] {
        let x0 = sx * PANEL_X0;
        let x1 = sx * PANEL_X1;
        let base = vertices.len();
        let corners = [
            (x0, -PANEL_Y, "inner_ym"),
            (x0, PANEL_Y, "inner_yp"),
            (x1, PANEL_Y, "outer_yp"),
            (x1, -PANEL_Y, "outer_ym"),
        ];
        for (x, y, which) in corners {
            let v = Vector3::new(x, y, 0.0);
            vertices.push(v);
            let name: &'static str = match (side, which) {
                ("right", "inner_ym") => "panel_right_inner_ym",
                ("right", "inner_yp") => "panel_right_inner_yp",
                ("right", "outer_yp") => "panel_right_outer_yp",
                ("right", "outer_ym") => "panel_right_outer_ym",
                ("left", "inner_ym") => "panel_left_inner_ym",
                ("left", "inner_yp") => "panel_left_inner_yp",
                ("left", "outer_yp") => "panel_left_outer_yp",
                _ => "panel_left_outer_ym",
            };
            keypoints.push(Keypoint { name, position: v });
        }
        triangles.push([base, base + 1, base + 2]);
        triangles.push([base, base + 2, base + 3]);
    }

    // Antenna fins: thin triangles in the x-z plane on the bus top face.
    for (name, sx) in [("antenna_xp_tip", 1.0), ("antenna_xm_tip", -1.0)] {
        let base = vertices.len();
        vertices.push(Vector3::new(sx * 0.26, 0.0, BUS[2]));
        vertices.push(Vector3::new(sx * 0.18, 0.0, BUS[2]));
        let tip = Vector3::new(sx * 0.22, 0.0, ANTENNA_TIP_Z);
        vertices.push(tip);
        triangles.push([base, base + 1, base + 2]);
        keypoints.push(Keypoint { name, position: tip });
    }

    TargetModel::new(vertices, triangles, keypoints).expect("stand-in model satisfies invariants")
}
