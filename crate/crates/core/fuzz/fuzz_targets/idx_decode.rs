#![no_main]

use ibnl_core::data::idx::{decode_idx, encode_idx};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(array) = decode_idx(data) {
        let again = decode_idx(&encode_idx(&array)).expect("re-encoded array decodes");
        assert_eq!(again, array);
    }
});
