#![no_main]

use dyadic::io::{decode_video, encode_video};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(video) = decode_video(data) {
        assert_eq!(encode_video(&video), data);
    }
});
