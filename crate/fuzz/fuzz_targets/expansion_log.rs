#![no_main]

use libfuzzer_sys::fuzz_target;
use outpaint_core::pipeline::ExpansionState;

fuzz_target!(|data: &[u8]| {
    let _ = ExpansionState::parse_log(data);
});
