use mcsplit::macrosystem::Scheme;
use mcsplit_demo::Model;

#[test]
fn builds_and_simulates_a_small_medium() {
    let model = Model::build("example1", 1e4, 10, 2).unwrap();
    let s = model.summary();
    assert_eq!(model.field().len(), s.fine_n * s.fine_n);
    assert!(s.i0 >= 1 && s.i0 < s.eigenvalues.len());
    let tau2 = s.stability.tau2.expect("scheme-2 bound");

    let sim = model.simulate(Scheme::Scheme2, 0.9 * tau2, 20).unwrap();
    assert!(!sim.diverged);
    assert_eq!(sim.steps, 20);
    assert_eq!(sim.averages.len(), 100);
    assert_eq!(sim.fine.len(), (s.fine_n + 1) * (s.fine_n + 1));
    assert!(sim.fine.iter().all(|v| v.is_finite()));
    assert!(sim.monitor.len() <= 200);

    let blown = model.simulate(Scheme::Explicit, 100.0 * tau2, 200).unwrap();
    assert!(blown.diverged && blown.fine.is_empty());
}
