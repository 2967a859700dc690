#![no_main]

use crossret_core::store::ClassSetFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = ClassSetFile::parse(text);
    }
});
