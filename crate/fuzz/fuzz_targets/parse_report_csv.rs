#![no_main]

use libfuzzer_sys::fuzz_target;
use scalpel_core::report::{average_multiplexed, parse_report_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(reports) = parse_report_csv(text) {
        for r in &reports {
            for e in &r.entries {
                let _ = average_multiplexed(e);
            }
        }
    }
});
