#![allow(dead_code)]

use nalgebra::{Point3, Vector3};
use rand::Rng;
use scrfocus::geometry::{project, CameraIntrinsics, Pose, ScenePoint};
use scrfocus::localizer::Correspondence;
use scrfocus::scene_map::SynthConfig;

pub fn cam() -> CameraIntrinsics {
    CameraIntrinsics::new(200.0, 200.0, 80.0, 60.0, 160, 120).unwrap()
}

pub fn random_k(rng: &mut impl Rng) -> CameraIntrinsics {
    let w = rng.gen_range(64..800u32);
    let h = rng.gen_range(48..600u32);
    CameraIntrinsics::new(
        rng.gen_range(50.0..1500.0),
        rng.gen_range(50.0..1500.0),
        rng.gen_range(0.0..w as f64),
        rng.gen_range(0.0..h as f64),
        w,
        h,
    )
    .unwrap()
}

pub fn random_pose(rng: &mut impl Rng) -> Pose {
    let axis = Vector3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    Pose::from_parts(
        nalgebra::UnitQuaternion::from_scaled_axis(axis.normalize() * angle),
        Vector3::new(
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
        ),
    )
}

/// Camera a few units from the origin looking roughly at it.
pub fn facing_pose(rng: &mut impl Rng) -> Pose {
    let eye = Point3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-4.0..-2.5),
    );
    let target = Point3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), 0.0);
    let up = Vector3::new(rng.gen_range(-0.3..0.3), 1.0, 0.0);
    Pose::look_at(&eye, &target, &up)
}

pub fn random_scene_point(rng: &mut impl Rng) -> ScenePoint {
    Point3::new(
        rng.gen_range(-0.8..0.8),
        rng.gen_range(-0.6..0.6),
        rng.gen_range(-0.3..0.3),
    )
}

/// `n` noise-free correspondences of points inside the frame of `pose`.
pub fn exact_corrs(pose: &Pose, n: usize, rng: &mut impl Rng) -> Vec<Correspondence> {
    let k = cam();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x = random_scene_point(rng);
        if let Some(y) = project(&x, &k, pose).filter(|y| k.contains(y)) {
            out.push(Correspondence { pixel: y, scene: x });
        }
    }
    out
}

/// Rotation angle in degrees and translation distance between two poses.
pub fn pose_gap(a: &Pose, b: &Pose) -> (f64, f64) {
    (
        a.rotation.angle_to(&b.rotation).to_degrees(),
        (a.translation - b.translation).norm(),
    )
}

pub fn small_scene(seed: u64) -> SynthConfig {
    SynthConfig {
        n_points: 120,
        n_images: 10,
        n_queries: 3,
        descriptor_dim: 16,
        rng_seed: seed,
        ..SynthConfig::default()
    }
}

/// VGA camera of the resolution dense pipelines usually localize at.
pub fn vga_cam() -> CameraIntrinsics {
    CameraIntrinsics::new(525.0, 525.0, 320.0, 240.0, 640, 480).unwrap()
}

/// `n` noise-free correspondences filling the view frustum of `pose` at
/// depths between 2 and 6.
pub fn frustum_corrs(
    k: &CameraIntrinsics,
    pose: &Pose,
    n: usize,
    rng: &mut impl Rng,
) -> Vec<Correspondence> {
    (0..n)
        .map(|_| {
            let y = scrfocus::geometry::Pixel::new(
                rng.gen_range(0.0..k.width as f64),
                rng.gen_range(0.0..k.height as f64),
            );
            let scene = scrfocus::geometry::backproject_ray(&y, k, pose, rng.gen_range(2.0..6.0)).unwrap();
            Correspondence { pixel: y, scene }
        })
        .collect()
}
