// Builds the schedule matrices for the reference seven-transmission
// schedule and checks a few random schedules for observability.
//
// cargo run --example schedule_matrices

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use schedloc::schedule::{build_s_matrix, validate_schedule, Schedule, ScheduleMatrices};

fn main() -> schedloc::Result<()> {
    let schedule = Schedule::new(vec![1, 2, 3, 2, 1, 3, 1], 3, 3e-3)?;
    let m = ScheduleMatrices::new(&schedule)?;
    println!("schedule {:?}: M = {} measurements", schedule.order(), m.n_measurements());
    println!("columns: rho_12 rho_13 rho_23 | rho_L1 rho_L2 rho_L3");
    println!("S ={}", m.s());
    println!("delay holders: {:?}", schedule.delay_holders().collect::<Vec<_>>());
    let d = m.diagnosis();
    println!("rank {} kernel_dim {} valid {}", d.rank, d.kernel_dim, d.valid);
    println!("|Pi S+ S - Pi|_F = {:.2e}", (m.pi() * m.s_pinv() * m.s() - m.pi()).norm());
    println!("G^T (maps relative skews to the pair-block residual) ={}", m.g_nominal().transpose());

    // a schedule that never lets the listener separate pairs
    let s = build_s_matrix(&[1, 2, 1, 2], 3)?;
    let d = validate_schedule(&s, 3);
    println!("[1,2,1,2] with N = 3: rank {} kernel_dim {} valid {}", d.rank, d.kernel_dim, d.valid);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 3..=5 {
        let s = Schedule::random(n, 3e-3, &mut rng)?;
        let d = ScheduleMatrices::new(&s)?.diagnosis();
        println!("random N = {n}: {:?} (kernel_dim {})", s.order(), d.kernel_dim);
    }
    Ok(())
}
