use pyo3::prelude::*;
use pyo3::types::PyDict;
use pyo3::wrap_pymodule;

fn with_module<F: FnOnce(Python<'_>, &Bound<'_, PyDict>)>(f: F) {
    Python::initialize();
    Python::attach(|py| {
        let m = wrap_pymodule!(docpatch_py::docpatch_module)(py);
        let globals = PyDict::new(py);
        globals.set_item("dp", m).unwrap();
        f(py, &globals);
    });
}

fn run(py: Python<'_>, globals: &Bound<'_, PyDict>, code: &str) {
    let code = std::ffi::CString::new(code).unwrap();
    if let Err(e) = py.run(&code, Some(globals), None) {
        e.print(py);
        panic!("python snippet failed");
    }
}

#[test]
fn grid_and_scoring_from_python() {
    with_module(|py, g| {
        run(
            py,
            g,
            r#"
import math
assert dp.patch_dims(100, 50, 0.25) == (35, 35)
cells = dp.build_grid(40, 40, 0.25)
assert [c.index for c in cells] == list(range(9))
assert (cells[8].x0, cells[8].y0, cells[8].w, cells[8].h) == (20, 20, 20, 20)
pc = dp.patch_confidence([math.log(0.9), math.log(0.8), math.log(0.7)])
assert abs(pc + 0.2283930036369228) < 1e-15
assert dp.patch_confidence([-1.0, -3.0], special=[False, True], include_stop_token=True) == -2.0
assert dp.choose_size([(0.1, -0.3, 0.1), (0.2, -0.31, 0.1), (0.5, -2.0, 1.0)]) == 0.2
"#,
        );
    });
}

#[test]
fn parsing_and_errors_from_python() {
    with_module(|py, g| {
        run(
            py,
            g,
            r#"
assert abs(dp.parse_dms("60°12'59.32\"") - 60.21647777777778) < 1e-9
n = dp.normalize("12,000 ft", "depth")
assert (n.numeric_value, n.unit) == (12000.0, "ft")
assert dp.check_answer("60°12'59.32\"", "60.21647778", "latitude")
for call in (lambda: dp.parse_dms("north"), lambda: dp.normalize("1", "colour"), lambda: dp.patch_dims(0, 5, 0.1),
             lambda: dp.patch_confidence([0.5])):
    try:
        call()
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")
assert issubclass(dp.BackendDown, dp.DocpatchError)
"#,
        );
    });
}
