#![no_main]

use libfuzzer_sys::fuzz_target;
use stagediff::dataio::{decode_window_cache, encode_window_cache};

fuzz_target!(|data: &[u8]| {
    if let Ok(decoded) = decode_window_cache(data) {
        let again = decode_window_cache(&encode_window_cache(&decoded)).expect("re-decode");
        assert_eq!(again.windows.windows.dim(), decoded.windows.windows.dim());
    }
});
