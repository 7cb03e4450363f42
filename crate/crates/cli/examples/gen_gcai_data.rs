//! Regenerate the bundled engine example data: a history file of raw
//! per-step disturbances (used to identify the support polytope) and the
//! trajectory samples that center the ambiguity ball.
//!
//! Run from the workspace root:
//!     cargo run -p dadr-cli --example gen_gcai_data
//!
//! The mixture below is a synthetic stand-in for measured combustion
//! disturbances: a tight everyday component plus a rarer wide component
//! skewed toward late-combustion (positive CA50) events, zero mean overall,
//! truncated to a design box so the identified support stays compatible
//! with a nonempty terminal set.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

const HISTORY_ROWS: usize = 3000;
const N_SAMPLES: usize = 15;
const N_H: usize = 4;

// component weights / means / stds in normalized units (CA50, IMEP channels)
const W_A: f64 = 0.75;
const MEAN_A: [f64; 2] = [-0.040, 0.010];
const STD_A: [f64; 2] = [0.170, 0.060];
const MEAN_B: [f64; 2] = [0.120, -0.030];
const STD_B: [f64; 2] = [0.380, 0.160];
// truncation box
const LO: [f64; 2] = [-0.30, -0.26];
const HI: [f64; 2] = [0.42, 0.26];

fn draw(rng: &mut ChaCha12Rng) -> [f64; 2] {
    loop {
        let (mean, std) = if rng.gen_range(0.0..1.0) < W_A {
            (MEAN_A, STD_A)
        } else {
            (MEAN_B, STD_B)
        };
        let mut w = [0.0; 2];
        let mut ok = true;
        for i in 0..2 {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            w[i] = mean[i] + std[i] * z;
            ok &= w[i] >= LO[i] && w[i] <= HI[i];
        }
        if ok {
            return w;
        }
    }
}

fn main() {
    let mut rng = ChaCha12Rng::seed_from_u64(2024);
    let mut history = String::from("w_ca50,w_imep\n");
    for _ in 0..HISTORY_ROWS {
        let w = draw(&mut rng);
        history.push_str(&format!("{},{}\n", w[0], w[1]));
    }
    std::fs::write("configs/gcai_history.csv", history).expect("write history");

    let mut samples = String::new();
    for _ in 0..N_SAMPLES {
        let mut row = Vec::new();
        for _ in 0..N_H {
            let w = draw(&mut rng);
            row.push(format!("{}", w[0]));
            row.push(format!("{}", w[1]));
        }
        samples.push_str(&row.join(","));
        samples.push('\n');
    }
    std::fs::write("configs/gcai_samples.csv", samples).expect("write samples");
    println!("wrote configs/gcai_history.csv and configs/gcai_samples.csv");
}
