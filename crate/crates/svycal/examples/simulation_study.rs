//! Run a named simulation preset and print the bias/RMSE/coverage table.
//!
//! Usage: cargo run --release --example simulation_study [preset] [reps] [seed]

use svycal::simlab;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let name = args.get(1).map(String::as_str).unwrap_or("fourth-order");
    let preset = simlab::preset(name)?;
    let reps = args
        .get(2)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(preset.replications);
    let seed = args
        .get(3)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(preset.seed);

    println!(
        "preset {} | N = {} | J = {} | R = {} | seed = {}",
        preset.name,
        preset.population_size,
        preset.schema.num_cells(),
        reps,
        seed
    );
    let start = std::time::Instant::now();
    let (result, response) = simlab::run_preset(&preset, reps, seed)?;
    println!(
        "response: mean pi = {:.4}, min pi = {:.6}, clipped = {}",
        response.mean_pi, response.min_pi, response.clipped
    );
    println!(
        "{:<22} {:>12} {:>12} {:>10} {:>12} {:>8}",
        "estimator", "bias", "rmse", "coverage", "mean n_eff", "failures"
    );
    for row in &result.rows {
        println!(
            "{:<22} {:>12.6} {:>12.6} {:>10} {:>12} {:>8}",
            row.name,
            row.bias,
            row.rmse,
            row.coverage.map_or("-".into(), |c| format!("{:.3}", c)),
            row.mean_n_eff.map_or("-".into(), |n| format!("{:.1}", n)),
            row.failures
        );
    }
    println!(
        "max identity residual = {:.3e} | elapsed = {:.1?}",
        result.max_identity_residual,
        start.elapsed()
    );
    Ok(())
}
