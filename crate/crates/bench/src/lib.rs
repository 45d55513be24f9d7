//! Fixtures shared by the planning benchmarks.

use catp::scenario::ScenarioConfig;

/// The bundled ten-robot scenario with the cycle count capped.
pub fn bundled(max_cycles: usize) -> ScenarioConfig {
    let mut c = ScenarioConfig::paper_inspection();
    c.max_cycles = max_cycles;
    c
}
