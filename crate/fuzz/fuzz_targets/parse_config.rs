#![no_main]

use depca_cli::config::parse_config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = parse_config(text) {
        let _ = cfg.validate();
        let _ = cfg.generate.spec(cfg.seed);
        let _ = cfg.estimator.options(cfg.seed);
    }
});
