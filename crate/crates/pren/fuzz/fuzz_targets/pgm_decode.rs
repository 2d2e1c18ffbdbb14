#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = pren::pgm::decode(data) {
        // decoded images must survive re-encoding
        let bytes = pren::pgm::encode(&img);
        let again = pren::pgm::decode(&bytes).expect("re-encoded image parses");
        assert_eq!(again, img);
    }
});
