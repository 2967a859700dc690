#![no_main]

use crossret_core::store::parse_metadata;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = parse_metadata(data, true);
    let _ = parse_metadata(data, false);
});
