#![no_main]

use batchgfn::policy::PolicyCheckpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = PolicyCheckpoint::from_bytes(data) {
        let bytes = ck.to_bytes();
        let again = PolicyCheckpoint::from_bytes(&bytes).expect("written checkpoint reparses");
        assert_eq!(again.to_bytes(), bytes);
    }
});
