use nalgebra::{Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use satpose::geometry::{project, CameraModel};
use satpose::model::build_target_model;
use satpose::pnp::{solve_pnp, Correspondence};
use satpose::render::sample_pose;

fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen();
    (-2.0 * u1.max(1e-300).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn main() {
    let camera = CameraModel::from_fov(64, 64, 35.0).unwrap();
    let model = build_target_model();
    let mut rng = ChaCha8Rng::seed_from_u64(65);
    let mut solved = 0;
    let mut attempt = 0;
    while solved < 10 {
        attempt += 1;
        let pose = sample_pose(&mut rng, 2.0, 20.0, &camera).unwrap();
        let points = model.keypoint_positions();
        let rot = pose.rotation_matrix();
        if points.iter().any(|p| (rot * p + pose.translation()).z <= 1e-3) {
            continue;
        }
        let px = match project(&camera, &pose, &points) {
            Ok(p) => p,
            Err(_) => continue,
        };
        let mut corrs: Vec<Correspondence> = points
            .iter()
            .zip(px)
            .map(|(&p3, p2)| Correspondence { p3, p2, weight: 1.0 })
            .collect();
        for c in corrs.iter_mut() {
            c.weight = rng.gen_range(0.2..1.0);
            c.p2.x += 0.2 * normal(&mut rng);
            c.p2.y += 0.2 * normal(&mut rng);
        }
        match solve_pnp(&corrs, &camera) {
            Ok(_) => { solved += 1; }
            Err(e) => {
                println!("attempt {attempt}: FAILED {e}");
                println!("  pose t = {:?} |t| = {}", pose.translation(), pose.translation().norm());
                let uvs: Vec<_> = corrs.iter().map(|c| (c.p2.x, c.p2.y)).collect();
                println!("  pixel spread: {:?}", uvs.iter().fold((1e9f64,-1e9f64,1e9f64,-1e9f64), |acc, p| (acc.0.min(p.0), acc.1.max(p.0), acc.2.min(p.1), acc.3.max(p.1))));
                solved += 1;
            }
        }
    }
}
