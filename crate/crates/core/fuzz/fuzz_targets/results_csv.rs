#![no_main]

use ibnl_core::experiment::{read_results_csv, write_results_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_results_csv(data) {
        let mut out = Vec::new();
        write_results_csv(&rows, &mut out).expect("rows serialize");
        read_results_csv(out.as_slice()).expect("written rows parse");
    }
});
