#![no_main]

use dyadic::geometry::{format_detections, parse_detections};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(boxes) = parse_detections(text) {
        let again = parse_detections(&format_detections(&boxes)).expect("formatted detections parse");
        assert_eq!(boxes, again);
    }
});
