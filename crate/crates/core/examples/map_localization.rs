// One pooled position fix per listener position, with its HCRB ellipse.
//
// cargo run --release --example map_localization

use schedloc::experiment::{bound, calibrate, calibrated_batches, localize, presets, simulate, Scenario};

fn main() -> schedloc::Result<()> {
    for pos in 0..presets::FIG6_LISTENERS.len() {
        let scenario = Scenario::new(presets::fig6(pos))?;
        let batches = simulate(&scenario)?;
        let windows = calibrate(&scenario, &batches)?;
        let est = &windows[0].outcome.state.theta_hat * 1e6;
        println!("listener at {:?}", presets::FIG6_LISTENERS[pos]);
        println!("  skew estimate {:.3?} ppm (true {:.3?})", est.as_slice(), (scenario.relative_skews() * 1e6).as_slice());
        let loc = localize(&scenario, &calibrated_batches(&windows))?;
        if let Some(p) = loc.pooled {
            println!(
                "  MAP from {} passes: ({:.4}, {:.4}) m after {} iterations, converged {}",
                batches.len(),
                p.listener.x,
                p.listener.y,
                p.iterations,
                p.converged
            );
        }
        let e = bound(&scenario)?;
        println!(
            "  HCRB 99% ellipse: semi-axes {:.2} / {:.2} cm, orientation {:.2} rad",
            e.semi_axes[0] * 100.0,
            e.semi_axes[1] * 100.0,
            e.orientation_rad
        );
    }
    Ok(())
}
