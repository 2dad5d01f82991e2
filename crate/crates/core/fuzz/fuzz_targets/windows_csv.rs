#![no_main]

use libfuzzer_sys::fuzz_target;
use stagediff::dataio::read_windows_csv;

fuzz_target!(|data: &[u8]| {
    if let Ok((set, names)) = read_windows_csv(data, "fuzz") {
        assert!(set.is_empty() || set.dim() == names.len());
    }
});
