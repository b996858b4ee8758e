#![no_main]

use libfuzzer_sys::fuzz_target;
use mvret::store::{decode_embeddings, encode_embeddings};

fuzz_target!(|data: &[u8]| {
    if let Ok(matrices) = decode_embeddings(data) {
        let refs: Vec<_> = matrices.iter().collect();
        let bytes = encode_embeddings(&refs).expect("decoded matrices re-encode");
        assert_eq!(
            decode_embeddings(&bytes).expect("re-encoded bytes decode"),
            matrices
        );
    }
});
