#![no_main]

use libfuzzer_sys::fuzz_target;
use mvret::store::CorpusManifest;

fuzz_target!(|text: &str| {
    let _ = CorpusManifest::parse(text);
});
