#![no_main]
use dynimg::dtns::Tensor;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = Tensor::from_bytes(data) {
        // anything accepted must re-encode to something that decodes the same
        let bytes = t.to_bytes().expect("re-encode");
        assert_eq!(Tensor::from_bytes(&bytes).expect("re-decode"), t);
    }
});
