#![no_main]

use libfuzzer_sys::fuzz_target;
use stagediff::dataio::{load_csv_from_reader, make_windows, CsvSchema, MissingPolicy};

fuzz_target!(|data: &[u8]| {
    // First byte picks the missing-value policy so both paths get exercised.
    let (policy, body) = match data.split_first() {
        Some((b, rest)) => (
            if b & 1 == 0 { MissingPolicy::Reject } else { MissingPolicy::Drop },
            rest,
        ),
        None => (MissingPolicy::Reject, data),
    };
    let schema = CsvSchema {
        missing: policy,
        ..Default::default()
    };
    if let Ok(raw) = load_csv_from_reader(body, "fuzz", &schema) {
        assert_eq!(raw.values.ncols(), raw.feature_names.len());
        let _ = make_windows(&raw, 4, 1);
    }
});
