// Monte-Carlo fixes at both listener positions: bias and scatter ellipse
// against the HCRB ellipse.
//
// cargo run --release --example monte_carlo_ellipses -- [n_fixes]

use nalgebra::Point2;
use schedloc::estimation::error_ellipse;
use schedloc::experiment::{bound, fix_statistics, monte_carlo, presets, Scenario};

fn main() -> schedloc::Result<()> {
    let n_fixes = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(200);
    for pos in 0..presets::FIG6_LISTENERS.len() {
        let scenario = Scenario::new(presets::fig6(pos))?;
        let truth = Point2::from(presets::FIG6_LISTENERS[pos]);
        let fixes = monte_carlo(&scenario, n_fixes)?;
        let Some(stats) = fix_statistics(&fixes, truth) else {
            println!("{truth}: no converged fixes");
            continue;
        };
        let mc = error_ellipse(&stats.covariance, stats.mean, 0.99)?;
        let hb = bound(&scenario)?;
        println!("listener {:?}: {}/{} fixes converged", presets::FIG6_LISTENERS[pos], stats.n_converged, stats.n_fixes);
        println!("  bias {:.3} cm", stats.bias * 100.0);
        println!("  Monte-Carlo 99% axes {:.2} / {:.2} cm", mc.semi_axes[0] * 100.0, mc.semi_axes[1] * 100.0);
        println!("  HCRB        99% axes {:.2} / {:.2} cm", hb.semi_axes[0] * 100.0, hb.semi_axes[1] * 100.0);
    }
    Ok(())
}
