#![no_main]

use libfuzzer_sys::fuzz_target;
use mvret::store::corpus::parse_doc_meta;

fuzz_target!(|text: &str| {
    let _ = parse_doc_meta(text);
});
