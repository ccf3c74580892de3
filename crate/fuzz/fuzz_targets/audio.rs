#![no_main]

use dyadic::io::{decode_audio, encode_audio};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(audio) = decode_audio(data) {
        // i16::MIN has no positive counterpart and encodes back as -32767.
        let again = decode_audio(&encode_audio(&audio)).expect("encoded audio decodes");
        assert_eq!(again.sample_rate, audio.sample_rate);
        assert_eq!(again.samples.len(), audio.samples.len());
    }
});
