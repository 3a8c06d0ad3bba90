#![no_main]

use libfuzzer_sys::fuzz_target;
use outpaint_core::caption::{parse_caption_lines, parse_local_prompt};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        for line in parse_caption_lines(text) {
            assert!(!line.trim().is_empty());
        }
        let _ = parse_local_prompt(text);
    }
});
