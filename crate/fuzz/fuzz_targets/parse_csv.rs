#![no_main]

use depca_cli::matrix_io::{encode_csv, parse_csv, NanPolicy};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = parse_csv(text, NanPolicy::Reject) {
        let again = parse_csv(&encode_csv(&m.name, &m.data), NanPolicy::Reject).expect("re-encoded matrix parses");
        assert_eq!(again.data, m.data);
    }
    let _ = parse_csv(text, NanPolicy::Allow);
});
