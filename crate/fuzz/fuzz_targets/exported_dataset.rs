#![no_main]

use fclbench::workload::parse_exported_dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(rows) = parse_exported_dataset(text) {
            if let Some(first) = rows.first() {
                assert!(rows.iter().all(|r| r.features.len() == first.features.len()));
            }
        }
    }
});
