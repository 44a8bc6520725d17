#![no_main]

use libfuzzer_sys::fuzz_target;
use tpdm_core::dataset::Manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = Manifest::from_json(text) {
        Manifest::from_json(&m.to_json()).expect("round trip");
    }
});
