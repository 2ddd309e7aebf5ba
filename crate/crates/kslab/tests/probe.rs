use kslab::{coercivity_check, make_grid, CoercivityKind};
use std::time::Instant;

#[test]
fn probe_coercivity_combos() {
    for ppd in [48usize, 96, 192] {
        let grid = make_grid(1e-3, 4000.0, ppd, 20.0).unwrap();
        for kind in [
            CoercivityKind::Delta0,
            CoercivityKind::Delta1,
            CoercivityKind::Hardy,
        ] {
            let t = Instant::now();
            let r = coercivity_check(kind, &grid, 20.0);
            println!(
                "ppd {ppd} {kind:?}: {:?} in {:.2} s",
                r,
                t.elapsed().as_secs_f64()
            );
        }
    }
}
