#![no_main]

use batchgfn::config::Config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = Config::from_toml_str(text) {
        let echoed = cfg.to_toml();
        let again = Config::from_toml_str(&echoed).expect("resolved config reparses");
        assert_eq!(again.to_toml(), echoed);
    }
});
