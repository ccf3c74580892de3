#![no_main]

use dyadic::split::SplitAssignment;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(a) = SplitAssignment::from_csv(text) {
        assert_eq!(SplitAssignment::from_csv(&a.to_csv()).expect("written split parses"), a);
    }
});
