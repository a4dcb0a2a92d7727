//! The `simulate` engine: run the whole scenario catalog through the
//! exhaustive interleaving explorer and report verdict-versus-expectation
//! per scenario.

use selfdbg_core::report::{SimScenarioReport, SimulateReport};
use selfdbg_core::sim::{explore, scenario_catalog, DeadlockVerdict, ExpectedVerdict};

fn verdict_name(v: &DeadlockVerdict) -> &'static str {
    match v {
        DeadlockVerdict::DeadlockFree => "DeadlockFree",
        DeadlockVerdict::Deadlock { .. } => "Deadlock",
        DeadlockVerdict::DepthExceeded => "DepthExceeded",
    }
}

fn expected_name(e: ExpectedVerdict) -> &'static str {
    match e {
        ExpectedVerdict::Deadlock => "Deadlock",
        ExpectedVerdict::DeadlockFree => "DeadlockFree",
    }
}

pub fn run_simulate(depth: usize) -> SimulateReport {
    let mut scenarios = Vec::new();
    let mut all_match = true;
    for scenario in scenario_catalog() {
        let result = explore(&scenario, depth);
        let matches = result.verdict.matches(scenario.expected);
        all_match &= matches;
        let trace = match &result.verdict {
            DeadlockVerdict::Deadlock { trace } => Some(trace.clone()),
            _ => None,
        };
        scenarios.push(SimScenarioReport {
            name: scenario.name.to_string(),
            expected: expected_name(scenario.expected).to_string(),
            verdict: verdict_name(&result.verdict).to_string(),
            matches,
            states_explored: result.states_explored,
            trace,
        });
    }
    SimulateReport { report: SimulateReport::KIND, depth, scenarios, all_match }
}

#[cfg(test)]
mod tests {
    use super::*;
    use selfdbg_core::sim::DEFAULT_DEPTH;

    #[test]
    fn full_catalog_matches_expectations() {
        let report = run_simulate(DEFAULT_DEPTH);
        assert!(report.all_match, "catalog mismatch: {:?}", report.scenarios);
        assert_eq!(report.scenarios.len(), 8);
    }

    #[test]
    fn deadlock_scenarios_carry_traces() {
        let report = run_simulate(DEFAULT_DEPTH);
        for s in &report.scenarios {
            if s.verdict == "Deadlock" {
                assert!(s.trace.as_ref().is_some_and(|t| !t.is_empty()), "{} lacks a trace", s.name);
            } else {
                assert!(s.trace.is_none());
            }
        }
    }
}
