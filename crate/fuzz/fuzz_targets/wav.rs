#![no_main]

use libfuzzer_sys::fuzz_target;
use tpdm_core::audio::{read_wav_bytes, to_mono};

fuzz_target!(|data: &[u8]| {
    if let Ok(clip) = read_wav_bytes(data) {
        let _ = to_mono(&clip);
    }
});
