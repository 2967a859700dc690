#![no_main]

use crossret_core::EnsembleState;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(state) = EnsembleState::from_json(text) {
        assert_eq!(EnsembleState::from_json(&state.to_json()).unwrap(), state);
    }
});
