use std::path::PathBuf;

use awarenet_sim::{run_scenario, Script, SimConfig};

fn scenario(name: &str) -> Script {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    Script::from_toml(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn every_scenario_passes() {
    for n in 1..=6 {
        let name = format!("3_8_2_{n}.scn");
        let trace = run_scenario(&scenario(&name), &SimConfig::default(), 1).unwrap();
        assert!(trace.passed(), "{name}\n{}", trace.expectations_report());
    }
}
