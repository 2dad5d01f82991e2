#![no_main]

use libfuzzer_sys::fuzz_target;
use stagediff::manifest::ExperimentManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = ExperimentManifest::from_toml_str(text) {
        let _ = m.validate();
        if let Ok(s) = m.to_toml_string() {
            let _ = ExperimentManifest::from_toml_str(&s);
        }
    }
});
