use pyo3::prelude::*;

#[pymodule]
fn transkim_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
