#![no_main]

use libfuzzer_sys::fuzz_target;
use seqrank::serving::TransferModel;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(t) = TransferModel::parse(text) {
        assert!(t.overhead_us >= 0.0 && t.bandwidth_bytes_per_us > 0.0);
    }
});
