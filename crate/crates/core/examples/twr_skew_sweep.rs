// Noise-free two-way-ranging error seen by a third node as the response
// delay grows: it is linear in the delay with slope `2 th3 - th1 - th2`.
//
// cargo run --example twr_skew_sweep

use schedloc::experiment::{linear_fit, twr_skew_sweep};

fn main() -> schedloc::Result<()> {
    let skews = [5e-6, -3e-6, 8e-6];
    let deltas: Vec<f64> = (3..=20).map(|ms| ms as f64 * 1e-3).collect();
    let sweep = twr_skew_sweep(skews, 1.0, &deltas)?;
    println!("delta_ms  error_ns");
    for (d, e) in &sweep {
        println!("{:8.1}  {:8.3}", d * 1e3, e * 1e9);
    }
    let fit = linear_fit(&sweep);
    println!(
        "slope {:.4} ppm (2 th3 - th1 - th2 = {:.4} ppm), R^2 = {:.9}",
        fit.slope * 1e6,
        (2.0 * skews[2] - skews[0] - skews[1]) * 1e6,
        fit.r_squared
    );
    Ok(())
}
