#![no_main]
use dynimg::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = RunConfig::parse(data) {
        let _ = cfg.validate();
    }
});
