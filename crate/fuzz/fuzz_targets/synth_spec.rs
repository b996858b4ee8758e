#![no_main]

use libfuzzer_sys::fuzz_target;
use mvret::store::SynthSpec;

fuzz_target!(|text: &str| {
    let _ = SynthSpec::parse(text);
});
