#![no_main]

use ibnl_core::nn::checkpoint::{parse, to_text};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(model) = parse(text) {
        let written = to_text(&model);
        let again = parse(&written).expect("written checkpoint parses");
        // NaN parameters compare unequal, so compare the text instead
        assert_eq!(to_text(&again), written);
    }
});
