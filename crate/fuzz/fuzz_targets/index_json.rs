#![no_main]
use dynimg::media::IndexFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = IndexFile::parse(data);
});
