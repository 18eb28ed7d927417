#![no_main]

use libfuzzer_sys::fuzz_target;
use seqrank::numerics::checkpoint::{decode, encode, Dtype};

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = decode(data) {
        // Anything accepted must survive a lossless re-encode.
        let again = decode(&encode(&store, Dtype::F64)).expect("re-encoded checkpoint decodes");
        assert_eq!(again.len(), store.len());
    }
});
