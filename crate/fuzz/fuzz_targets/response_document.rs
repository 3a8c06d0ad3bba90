#![no_main]

use libfuzzer_sys::fuzz_target;
use outpaint_core::caption::parse_response_document;

fuzz_target!(|data: &[u8]| {
    let _ = parse_response_document(data);
});
