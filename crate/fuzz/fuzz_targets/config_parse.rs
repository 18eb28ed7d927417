#![no_main]

use libfuzzer_sys::fuzz_target;
use seqrank::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let mut c = RunConfig::default();
    if c.apply_text(text).is_ok() {
        let mut d = RunConfig::default();
        d.apply_text(&c.render()).expect("rendered config parses");
        assert_eq!(c.render(), d.render());
    }
});
