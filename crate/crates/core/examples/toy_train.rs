//! Trains on the in-memory synthetic dataset and reports validation DSC.
//!
//! Usage: `cargo run --release --example toy_train -- [iterations] [lr]`

use clusterprop::evaluation::{ablation_grid, evaluate_interactive};
use clusterprop::model::ModelConfig;
use clusterprop::synth::{generate_examples, SynthConfig};
use clusterprop::training::{train, TrainConfig};

fn main() -> clusterprop::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iterations = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let lr = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(TrainConfig::default().lr);
    let synth = SynthConfig::default();
    let n_train = synth.n_volumes - synth.n_val;
    let train_set = generate_examples(&synth, 0..n_train)?;
    let val_set = generate_examples(&synth, n_train..synth.n_volumes)?;
    let cfg = TrainConfig { iterations, lr, val_every: 0, ..Default::default() };
    let out = train(&cfg, &ModelConfig::default(), &train_set, &val_set, |r| {
        if r.iter % 20 == 0 {
            println!("iter {} loss {:.4} {:?}", r.iter, r.loss, r.terms);
        }
    })?;
    println!("elapsed {:.1}s val dsc {:?} aborted {:?}", out.elapsed_secs, out.final_val_dsc, out.aborted);
    let cfg_inf = cfg.inference.clone();
    for row in ablation_grid(&out.params, &val_set, &cfg_inf, 1.0, 0)? {
        println!("{row:?}");
    }
    let s = evaluate_interactive(&out.params, &val_set, &cfg_inf, 5)?;
    println!("interactive {:?}", s.per_round_dsc);
    Ok(())
}
