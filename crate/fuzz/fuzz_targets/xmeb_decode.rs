#![no_main]

use crossret_core::store::{decode_matrix, encode_matrix, read_header, EmbeddingSpace};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(header) = read_header(data) else {
        return;
    };
    // cap the dimension so absurd headers fail fast instead of allocating
    let dim = (header.dim as usize).clamp(1, 4096);
    let space = EmbeddingSpace::new("fuzz", dim, true).unwrap();
    if let Ok(m) = decode_matrix(data, &space) {
        assert_eq!(m.count() as u64, header.count);
        // decoded rows are already unit norm, so re-encoding is stable
        let again = decode_matrix(&encode_matrix(&m), &space).unwrap();
        assert_eq!(again.as_slice(), m.as_slice());
    }
});
