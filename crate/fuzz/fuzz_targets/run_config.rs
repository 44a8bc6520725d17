#![no_main]

use libfuzzer_sys::fuzz_target;
use tpdm_core::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_json(text) {
        RunConfig::from_json(&cfg.to_json()).expect("round trip");
    }
});
