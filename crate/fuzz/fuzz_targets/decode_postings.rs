#![no_main]

use libfuzzer_sys::fuzz_target;
use mvret::index::{decode_postings, encode_postings};

fuzz_target!(|data: &[u8]| {
    if let Ok((lists, n_docs)) = decode_postings(data) {
        let bytes = encode_postings(&lists, n_docs).expect("decoded postings re-encode");
        assert_eq!(bytes, data);
    }
});
