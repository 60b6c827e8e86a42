// Delay-resolution error before and after using the delays carried in the
// payload.
//
// cargo run --release --example delay_retrieval

use schedloc::experiment::{mean_std, presets, retrieval_residuals, simulate, Scenario};

fn main() -> schedloc::Result<()> {
    let scenario = Scenario::new(presets::fig3())?;
    let batches = simulate(&scenario)?;
    let r = retrieval_residuals(&scenario, &batches)?;
    let (_, without) = mean_std(&r.without);
    let (_, with) = mean_std(&r.with);
    println!("{} batches, delay error sigma {} ns", batches.len(), scenario.config().clocks.delay_err_sigma_ns);
    println!("residual std without retrieval: {:.4} ns", without * 1e9);
    println!("residual std with retrieval:    {:.4} ns", with * 1e9);
    println!("reduction: {:.1}x", without / with);
    Ok(())
}
