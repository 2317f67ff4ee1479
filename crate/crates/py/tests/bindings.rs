use std::ffi::CString;

use pyo3::prelude::*;
use pyo3::types::PyModule;

fn with_module(code: &str) {
    Python::initialize();
    Python::attach(|py| {
        let m = PyModule::new(py, "adaptmpc_py").unwrap();
        adaptmpc_py::adaptmpc_py(&m).unwrap();
        let globals = pyo3::types::PyDict::new(py);
        globals.set_item("am", m).unwrap();
        let code = CString::new(code).unwrap();
        if let Err(e) = py.run(&code, Some(&globals), None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn niw_scalar_example_through_python() {
    with_module(
        "mean, cov = am.niw_map_update([[2.0]], [0.0], 1.0, 1.0, [1.0], [[1.0]], 3.0)\n\
         assert cov == [[1.4375]] and mean == [0.5]\n\
         mean, _ = am.niw_map_update([[2.0]], [0.0], 1.0, 1.0, [1.0], [[1.0]], 3.0, rule='standard')\n\
         assert mean == [0.75]",
    );
}

#[test]
fn conditioning_and_moments_through_python() {
    with_module(
        "d = am.condition_dynamics([0.0, 0.0, 0.0], [[1.0, 0.0, 2.0], [0.0, 1.0, 1.0], [2.0, 1.0, 5.01]], 1, 1)\n\
         assert abs(d['fx'][0][0] - 2.0) < 1e-5 and abs(d['fu'][0][0] - 1.0) < 1e-5\n\
         m = am.RunningMoments([1.0], [[2.0]], 0.5)\n\
         m.observe([3.0])\n\
         assert m.mean == [2.0] and m.covariance() == [[1.5]] and m.beta == 0.5",
    );
}

#[test]
fn errors_become_python_exceptions() {
    with_module(
        "try:\n    am.condition_dynamics([0.0] * 4, [[1.0, 0.0], [0.0, 1.0, 0.0]], 1, 1)\n    raise SystemExit(1)\nexcept ValueError:\n    pass\n\
         try:\n    am.RunningMoments([0.0], [[1.0]], 1.5)\n    raise SystemExit(1)\nexcept ValueError:\n    pass",
    );
}
