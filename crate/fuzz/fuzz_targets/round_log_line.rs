#![no_main]

use libfuzzer_sys::fuzz_target;
use sst_atl::active::RoundRecord;

fuzz_target!(|data: &[u8]| {
    if let Ok(record) = serde_json::from_slice::<RoundRecord>(data) {
        let line = serde_json::to_string(&record).expect("record serializes");
        let again: RoundRecord = serde_json::from_str(&line).expect("re-encoded record parses");
        assert_eq!(again.queried_indices, record.queried_indices);
        assert_eq!(again.round, record.round);
    }
});
