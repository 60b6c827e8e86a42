// Inline skew estimation over one 500-pass session, with and without delay
// retrieval, and the spread of the estimate across seeds.
//
// cargo run --release --example rls_convergence

use schedloc::experiment::{presets, rls_session, rls_variance_curve, Scenario};

fn main() -> schedloc::Result<()> {
    let on = Scenario::new(presets::fig4())?;
    let off = on.with_config(|c| c.calibration.retrieval = false)?;
    let truth = on.relative_skews() * 1e6;
    println!("true relative skews (ppm): {:.3?}", truth.as_slice());
    for (label, s) in [("retrieval on", &on), ("retrieval off", &off)] {
        let trace = rls_session(s)?;
        println!("{label}:");
        for n in [1, 10, 100, 500] {
            let row = &trace[n - 1];
            let est = &row.theta_hat * 1e6;
            println!("  n = {n:3}: theta_hat {:.3?} ppm, max error {:.4} ppm", est.as_slice(), (&est - &truth).amax());
        }
    }
    let v_on = rls_variance_curve(&on, 50)?;
    let v_off = rls_variance_curve(&off, 50)?;
    for n in [1, 10, 100, 500] {
        println!("variance over 50 seeds at n = {n:3}: {:.3e} vs {:.3e} ppm^2", v_on[n - 1] * 1e12, v_off[n - 1] * 1e12);
    }
    Ok(())
}
