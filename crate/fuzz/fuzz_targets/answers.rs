#![no_main]

use libfuzzer_sys::fuzz_target;
use mvret::metrics::{parse_answers, write_answers};

fuzz_target!(|text: &str| {
    if let Ok(entries) = parse_answers(text) {
        let written = write_answers(&entries);
        assert_eq!(
            parse_answers(&written)
                .expect("written answers parse")
                .len(),
            entries.len()
        );
    }
});
