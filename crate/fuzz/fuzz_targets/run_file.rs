#![no_main]

use libfuzzer_sys::fuzz_target;
use mvret::pipeline::{parse_run, write_run};

fuzz_target!(|text: &str| {
    if let Ok(results) = parse_run(text) {
        let written = write_run(&results).expect("parsed run re-serializes");
        assert_eq!(parse_run(&written).expect("written run parses"), results);
    }
});
