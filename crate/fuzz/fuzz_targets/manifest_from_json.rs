#![no_main]

use libfuzzer_sys::fuzz_target;
use sst_atl::hsi::SplitManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(manifest) = SplitManifest::from_json(text) {
        let again = SplitManifest::from_json(&manifest.to_json()).expect("re-encoded manifest parses");
        assert_eq!(again.train, manifest.train);
        assert_eq!(again.pool, manifest.pool);
        assert_eq!(again.test, manifest.test);
    }
});
