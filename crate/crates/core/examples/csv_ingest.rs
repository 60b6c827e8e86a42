// Ingesting captured measurements: writes a measurement CSV (with some
// payloads missing, as for real captures), reads it back and runs
// calibration and localization on the file contents.
//
// cargo run --release --example csv_ingest

use std::fs::File;

use schedloc::experiment::{calibrate, calibrated_batches, localize, presets, simulate, Scenario};
use schedloc::io::{read_measurements, write_measurements};

fn main() -> schedloc::Result<()> {
    let scenario = Scenario::new(presets::fig6(0))?;
    let mut batches = simulate(&scenario)?;
    for b in batches.iter_mut().step_by(10) {
        b.delta_actual = None;
    }
    let path = std::env::temp_dir().join("schedloc_capture.csv");
    write_measurements(File::create(&path)?, &batches, scenario.schedule())?;
    println!("wrote {}", path.display());

    let ingested = read_measurements(File::open(&path)?, scenario.schedule())?;
    let windows = calibrate(&scenario, &ingested)?;
    let cal = calibrated_batches(&windows);
    let retrieved = cal.iter().filter(|b| b.retrieved).count();
    let rejected = cal.iter().filter(|b| b.rejected).count();
    println!("{} batches read, {retrieved} with delay payload, {rejected} rejected", ingested.len());
    let loc = localize(&scenario, &cal)?;
    if let Some(p) = loc.pooled {
        println!("pooled fix ({:.4}, {:.4}) m, converged {}", p.listener.x, p.listener.y, p.converged);
    }
    Ok(())
}
