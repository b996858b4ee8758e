#![no_main]

use libfuzzer_sys::fuzz_target;
use mvret::store::{decode_network, encode_network};

fuzz_target!(|data: &[u8]| {
    if let Ok(net) = decode_network(data) {
        let bytes = encode_network(&net).expect("decoded network re-encodes");
        assert_eq!(bytes, data);
    }
});
