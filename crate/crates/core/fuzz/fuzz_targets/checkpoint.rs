#![no_main]

use libfuzzer_sys::fuzz_target;
use stagediff::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        let _ = Checkpoint::decode(&ckpt.encode()).expect("re-decode");
    }
});
