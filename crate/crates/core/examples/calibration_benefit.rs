// Position fixes with +-20 ppm oscillators, with and without clock-error
// mitigation.
//
// cargo run --release --example calibration_benefit

use nalgebra::Point2;
use schedloc::experiment::{fix_statistics, monte_carlo, presets, Scenario};

fn main() -> schedloc::Result<()> {
    let cfg = presets::random_skews(0, 20.0, 11);
    println!("anchor skews {:.2?} ppm, listener {:.2} ppm", cfg.clocks.anchor_skews_ppm, cfg.clocks.listener_skew_ppm);
    let truth = Point2::from(presets::FIG6_LISTENERS[0]);
    for (label, c) in [("calibrated", cfg.clone()), ("raw", presets::uncalibrated(cfg))] {
        let fixes = monte_carlo(&Scenario::new(c)?, 100)?;
        match fix_statistics(&fixes, truth) {
            Some(s) => println!(
                "{label:>10}: mean ({:.3}, {:.3}) m, bias {:.3} m, {}/{} converged",
                s.mean.x, s.mean.y, s.bias, s.n_converged, s.n_fixes
            ),
            None => println!("{label:>10}: no converged fixes"),
        }
    }
    Ok(())
}
