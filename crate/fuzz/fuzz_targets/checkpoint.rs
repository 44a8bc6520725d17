#![no_main]

use libfuzzer_sys::fuzz_target;
use tpdm_core::training::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        let bytes = ckpt.to_bytes();
        Checkpoint::from_bytes(&bytes).expect("round trip");
    }
});
