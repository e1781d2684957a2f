#![no_main]

use libfuzzer_sys::fuzz_target;
use sst_atl::hsi::HsiCube;

fuzz_target!(|data: &[u8]| {
    if let Ok(cube) = HsiCube::from_bytes(data) {
        // Accepted input must re-encode to exactly the same bytes.
        assert_eq!(cube.to_bytes(), data);
        assert!(cube.data().iter().all(|v| v.is_finite()));
    }
});
