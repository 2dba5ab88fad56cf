use std::time::Instant;

use leadi_core::gradcheck::{composed_ikres, primitive_suite};

#[test]
fn every_primitive() {
    let suite = primitive_suite();
    assert_eq!(suite.len(), 15);
    for (name, err) in suite {
        println!("{name:<28} relative error {err:.3e}");
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }
}

#[test]
fn composed_network() {
    let start = Instant::now();
    let (err, n) = composed_ikres();
    println!("IKres 1x100 ({n} params) relative error {err:.3e} in {:?}", start.elapsed());
    assert!(n > 1000);
    assert!(err < 1e-3, "composed relative error {err:e}");
    assert!(start.elapsed().as_secs() < 120);
}
