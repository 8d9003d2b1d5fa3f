#![no_main]

use ibnl_core::metrics::{confidence_profile, read_confidence_dump};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = read_confidence_dump(data) {
        let _ = confidence_profile(&records);
    }
});
