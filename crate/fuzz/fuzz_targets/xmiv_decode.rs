#![no_main]

use crossret_core::knn::IvfLayout;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(layout) = IvfLayout::decode(data) {
        assert_eq!(IvfLayout::decode(&layout.encode()).unwrap(), layout);
    }
});
