#![no_main]

use libfuzzer_sys::fuzz_target;
use tpdm_core::vq::LoudnessCodebook;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cb) = LoudnessCodebook::from_json(text) {
        // Anything accepted must survive a round trip.
        let again = LoudnessCodebook::from_json(&cb.to_json()).expect("round trip");
        assert_eq!(again.to_json(), cb.to_json());
    }
});
