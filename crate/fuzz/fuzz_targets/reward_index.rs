#![no_main]

use derain_sr::reward_store::RewardIndex;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(index) = RewardIndex::from_json(data) {
        let bytes = serde_json::to_vec(&index).unwrap();
        assert_eq!(RewardIndex::from_json(&bytes).unwrap(), index);
    }
});
