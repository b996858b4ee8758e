#![no_main]

use libfuzzer_sys::fuzz_target;
use mvret::store::corpus::parse_query_meta;

fuzz_target!(|text: &str| {
    let _ = parse_query_meta(text);
});
