#![no_main]

use libfuzzer_sys::fuzz_target;
use mvret::store::corpus::parse_gold;

fuzz_target!(|text: &str| {
    let _ = parse_gold(text);
});
