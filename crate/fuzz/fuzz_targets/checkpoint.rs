#![no_main]

use distillens::model::checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Any byte string must load cleanly or fail with an error, never panic.
    // A model that loads must survive a save/load round trip unchanged.
    if let Ok(model) = checkpoint::from_bytes(data) {
        let bytes = checkpoint::to_bytes(&model);
        let again = checkpoint::from_bytes(&bytes).expect("re-encoded checkpoint loads");
        assert_eq!(checkpoint::to_bytes(&again), bytes);
    }
});
