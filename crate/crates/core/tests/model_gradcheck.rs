//! Whole pipeline (two layers, halting modules, head, three losses) against
//! central differences.

use tokenhalt::diagnostics::model_gradcheck;

#[test]
fn full_model_gradients_match_finite_differences() {
    let mut touched = Vec::new();
    let mut names = Vec::new();
    for seed in 0..4 {
        let c = model_gradcheck(seed, 1e-6, 4).unwrap();
        let r = &c.report;
        eprintln!(
            "seed {seed}: {} entries, max rel {:.2e} at {:?}, resolved {:.2e}, floor {:.2e}, directional {:.2e}",
            r.entries.len(),
            r.max_rel_error,
            c.worst_parameter(),
            r.max_resolved_rel_error(1e-4),
            r.noise_floor,
            c.directional
        );
        assert!(r.within(1e-4), "seed {seed}");
        assert!(
            c.directional < 1e-4,
            "seed {seed}: directional {}",
            c.directional
        );
        touched.resize(c.parameter_names.len(), false);
        for e in r.entries.iter().filter(|e| e.analytic != 0.0) {
            touched[e.input] = true;
        }
        names = c.parameter_names;
    }
    // a parameter the losses never reach would pass the check vacuously
    for (name, t) in names.iter().zip(touched) {
        assert!(t, "{name} never received a gradient");
    }
}
