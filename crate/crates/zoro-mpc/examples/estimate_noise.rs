//! Recovers process-noise bounds the way you would on hardware: drive the
//! robot around, difference the measured next state against the prediction
//! model, and set the bounds at three standard deviations.
//!
//! The plant here has a first-order velocity lag the prediction model does
//! not know about, so the velocity rows come out an order of magnitude
//! noisier than the pose rows.

use nalgebra::{Matrix5, Vector5};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use zoro_mpc::model::{ControlInput, DiffDriveParams, DiscretizationParams, RobotState};
use zoro_mpc::scenario::estimate_noise_bounds;
use zoro_mpc::sim::{plant_transition, NoiseMode, PlantMode, PlantModel};
use zoro_mpc::tube::NoiseModel;

fn main() -> zoro_mpc::Result<()> {
    let p = DiscretizationParams::new(0.05, 1)?;
    let plant = PlantModel {
        mode: PlantMode::DiffDriveMismatch,
        dd: DiffDriveParams::new(0.3)?,
        noise: NoiseModel::new(Matrix5::zeros())?,
        noise_mode: NoiseMode::Off,
    };

    // Sensor-grade pose noise on top of the model mismatch.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pose_noise = Normal::new(0.0, 5e-4).unwrap();

    let mut states = vec![RobotState::new(0.0, 0.0, 0.0, 0.0, 0.0)];
    let mut inputs = Vec::new();
    let (mut v_target, mut w_target) = (0.5, 0.0);
    for k in 0..4_000 {
        if k % 25 == 0 {
            // New random velocity setpoints every 1.25 s keep the commands busy.
            v_target = rng.gen_range(-0.8..0.8);
            w_target = rng.gen_range(-1.5..1.5);
        }
        let s = *states.last().unwrap();
        let u = ControlInput::new(
            (2.0 * (v_target - s.v)).clamp(-1.5, 1.5),
            (2.0 * (w_target - s.omega)).clamp(-3.0, 3.0),
        );
        let w = Vector5::new(
            pose_noise.sample(&mut rng),
            pose_noise.sample(&mut rng),
            pose_noise.sample(&mut rng) * 0.4,
            0.0,
            0.0,
        );
        states.push(plant_transition(&s, &u, &plant, &p, &w));
        inputs.push(u);
    }

    let est = estimate_noise_bounds(&states, &inputs, &p)?;
    println!("{} samples", est.samples);
    println!("component |     sigma | W diagonal = (3 sigma)^2");
    for (name, i) in [("x", 0), ("y", 1), ("theta", 2), ("v", 3), ("omega", 4)] {
        println!("{name:>9} | {:9.2e} | {:9.2e}", est.sigma[i], est.w_diag[i]);
    }
    let pose = est.sigma[0].max(est.sigma[1]);
    println!("\nvelocity rows vs pose rows: {:.0}x / {:.0}x",
        est.sigma[3] / pose, est.sigma[4] / pose);
    println!("paste the W diagonal into a scenario's \"noise_w\" to use these bounds.");
    Ok(())
}
