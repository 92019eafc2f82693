//! Fits the robot-to-scanner transform from noisy fiducials and shows how
//! the fit degrades with noise and fiducial count.
//!
//! ```text
//! cargo run --example needle_registration
//! ```

use crane::kinematics::{rot_z, Vec3};
use crane::registration::{register, FiducialSet, RigidTransform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() {
    let truth = RigidTransform::new(rot_z(0.3), Vec3::new(0.01, -0.02, 0.05)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    println!("sigma(mm)  N  rot err(deg)  trans err(mm)  FRE(mm)");
    for sigma in [0.0, 0.1, 0.2, 0.5] {
        for n in [4, 6, 10] {
            let noise = Normal::new(0.0, sigma * 1e-3).unwrap();
            let robot: Vec<Vec3> = (0..n)
                .map(|_| Vec3::new(rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15), rng.random_range(0.25..0.45)))
                .collect();
            let scanner = robot
                .iter()
                .map(|p| truth.apply(p) + Vec3::from_fn(|_, _| noise.sample(&mut rng)))
                .collect();
            let r = register(&FiducialSet::new(robot, scanner)).unwrap();
            println!(
                "{sigma:>9.1} {n:>2} {:>13.4} {:>14.4} {:>8.4}",
                r.transform.rotation_angle_to(&truth).to_degrees(),
                (r.transform.translation - truth.translation).norm() * 1e3,
                r.fre * 1e3
            );
        }
    }

    let json = serde_json::to_string_pretty(&truth).unwrap();
    println!("\ntransform as written by `crane register`:\n{json}");
}
