#![no_main]

use batchgfn::gp::GpCheckpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ck) = GpCheckpoint::parse(text) {
        let json = ck.to_json().unwrap();
        assert_eq!(GpCheckpoint::parse(&json).expect("written checkpoint reparses"), ck);
    }
});
