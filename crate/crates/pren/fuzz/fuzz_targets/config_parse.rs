#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = pren::config::RunConfig::from_json_str(text) {
            // accepted configs serialize and re-validate
            let json = cfg.to_json();
            pren::config::RunConfig::from_json_str(&json).expect("round trip");
        }
    }
});
