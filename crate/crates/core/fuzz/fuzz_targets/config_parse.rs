#![no_main]

use ibnl_core::experiment::{parse_config, to_toml};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = parse_config(text) {
        let echoed = to_toml(&cfg);
        let again = parse_config(&echoed).expect("echoed config parses");
        assert_eq!(to_toml(&again), echoed);
    }
});
