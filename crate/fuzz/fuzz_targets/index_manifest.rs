#![no_main]

use libfuzzer_sys::fuzz_target;
use mvret::index::IndexManifest;

fuzz_target!(|text: &str| {
    let _ = IndexManifest::parse(text);
});
