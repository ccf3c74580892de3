#![no_main]

use dyadic::corpus::SessionManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(manifest) = SessionManifest::from_toml(text) {
        let _ = manifest.session_records();
        SessionManifest::from_toml(&manifest.to_toml()).expect("serialized manifest parses");
    }
});
