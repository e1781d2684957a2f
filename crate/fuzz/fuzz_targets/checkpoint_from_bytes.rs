#![no_main]

use libfuzzer_sys::fuzz_target;
use sst_atl::model::SstModel;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = SstModel::from_checkpoint_bytes(data) {
        let bytes = model.to_checkpoint_bytes();
        let again = SstModel::from_checkpoint_bytes(&bytes).expect("re-encoded checkpoint parses");
        assert_eq!(again, model);
    }
});
