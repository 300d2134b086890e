#![no_main]

use derain_sr::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::from_toml_str(text) {
            // anything that parses must survive a round trip
            let again = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
            assert_eq!(cfg.config_hash(), again.config_hash());
        }
    }
});
