#![no_main]

use crossret_core::EngineConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(config) = EngineConfig::parse(text) {
        if let Ok(rendered) = config.render() {
            assert_eq!(EngineConfig::parse(&rendered).unwrap(), config);
        }
    }
});
