#![no_main]

use depca_cli::matrix_io::{parse_auto, NanPolicy};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = parse_auto(data, NanPolicy::Reject);
    let _ = parse_auto(data, NanPolicy::Allow);
});
