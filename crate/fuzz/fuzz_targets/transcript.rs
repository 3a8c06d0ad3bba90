#![no_main]

use libfuzzer_sys::fuzz_target;
use outpaint_core::caption::Transcript;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(t) = Transcript::parse(text) {
            let again = Transcript::parse(&t.to_jsonl()).expect("serialized transcript must parse");
            assert_eq!(again.to_jsonl(), t.to_jsonl());
        }
    }
});
