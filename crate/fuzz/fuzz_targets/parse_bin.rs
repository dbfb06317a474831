#![no_main]

use depca_cli::matrix_io::{encode_bin, parse_bin, NanPolicy};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = parse_bin(data, NanPolicy::Reject) {
        assert_eq!(encode_bin(&m), data, "accepted files re-encode to the same bytes");
    }
    let _ = parse_bin(data, NanPolicy::Allow);
});
