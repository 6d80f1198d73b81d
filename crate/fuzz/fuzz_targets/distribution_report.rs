#![no_main]

use batchgfn::oracle::DistributionReport;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(report) = DistributionReport::parse(text) {
        let mut out = Vec::new();
        report.write(&mut out).unwrap();
        let written = String::from_utf8(out).unwrap();
        let again = DistributionReport::parse(&written).expect("written report reparses");
        let mut out2 = Vec::new();
        again.write(&mut out2).unwrap();
        assert_eq!(String::from_utf8(out2).unwrap(), written);
    }
});
