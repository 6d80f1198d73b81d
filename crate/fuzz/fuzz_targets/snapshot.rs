#![no_main]

use batchgfn::data::{parse_snapshot, write_snapshot};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_snapshot(text) {
        let mut out = Vec::new();
        write_snapshot(&mut out, &records).unwrap();
        let again = parse_snapshot(std::str::from_utf8(&out).unwrap()).expect("written snapshot reparses");
        assert_eq!(again, records);
    }
});
