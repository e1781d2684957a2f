#![no_main]

use libfuzzer_sys::fuzz_target;
use sst_atl::hsi::LabelMap;

fuzz_target!(|data: &[u8]| {
    if let Ok(labels) = LabelMap::from_bytes(data) {
        assert_eq!(labels.to_bytes(), data);
        let hist = labels.histogram();
        assert_eq!(hist.iter().sum::<usize>(), labels.rows() * labels.cols());
    }
});
