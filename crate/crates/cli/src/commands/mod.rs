pub mod example_e;
pub mod fbspde_solve;
pub mod fk_eval;
pub mod smp_check;

use serde::Serialize;

/// One named pass/fail entry in a report's check list.
#[derive(Clone, Debug, Serialize)]
pub struct CheckEntry {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl CheckEntry {
    pub fn new(name: &str, pass: bool, detail: String) -> Self {
        CheckEntry {
            name: name.to_string(),
            pass,
            detail,
        }
    }
}

/// Values stated in the source write-up for the worked example, embedded in
/// reports next to the formula-derived ones.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PaperValues {
    pub x_star: f64,
    pub u_bar: f64,
    pub objective: f64,
}

impl PaperValues {
    pub fn stated() -> Self {
        PaperValues {
            x_star: smp_core::meanfield::PAPER_X_STAR,
            u_bar: smp_core::meanfield::PAPER_U_BAR,
            objective: smp_core::meanfield::PAPER_J,
        }
    }
}
