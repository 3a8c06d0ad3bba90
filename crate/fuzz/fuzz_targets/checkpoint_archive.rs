#![no_main]

use libfuzzer_sys::fuzz_target;
use outpaint_core::checkpoint::{decode_archive, encode_archive};

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = decode_archive(data) {
        let again = decode_archive(&encode_archive(&store)).expect("re-encoded archive must decode");
        assert_eq!(encode_archive(&again), encode_archive(&store));
    }
});
