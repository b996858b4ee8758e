#![no_main]

use libfuzzer_sys::fuzz_target;
use mvret::TrainConfig;

fuzz_target!(|text: &str| {
    let _ = TrainConfig::parse(text);
});
