//! Runs the quick examples so they cannot rot.

mod schedule_matrices {
    include!("../examples/schedule_matrices.rs");
    pub fn run() -> schedloc::Result<()> {
        main()
    }
}

mod twr_skew_sweep {
    include!("../examples/twr_skew_sweep.rs");
    pub fn run() -> schedloc::Result<()> {
        main()
    }
}

mod map_localization {
    include!("../examples/map_localization.rs");
    pub fn run() -> schedloc::Result<()> {
        main()
    }
}

mod csv_ingest {
    include!("../examples/csv_ingest.rs");
    pub fn run() -> schedloc::Result<()> {
        main()
    }
}

#[test]
fn examples_run() {
    schedule_matrices::run().unwrap();
    twr_skew_sweep::run().unwrap();
    map_localization::run().unwrap();
    csv_ingest::run().unwrap();
}
