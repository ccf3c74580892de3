#![no_main]

use dyadic::io::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        let again = Checkpoint::decode(&ckpt.encode()).expect("encoded checkpoint decodes");
        assert_eq!(ckpt.tensors, again.tensors);
        // Rebuilding may fail on mismatched tensors but must not panic.
        let _ = ckpt.to_model();
    }
});
