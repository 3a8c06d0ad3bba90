#![no_main]

use libfuzzer_sys::fuzz_target;
use outpaint_core::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = RunConfig::from_json(data) {
        let _ = cfg.validate();
    }
});
