#![no_main]

use libfuzzer_sys::fuzz_target;
use seqrank::serving::{parse_graph, plan_latency, search_placement, Device, Placement, TransferModel};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(g) = parse_graph(text) {
        let t = TransferModel::default();
        let cpu = plan_latency(&g, &Placement::all(&g, Device::Cpu), &t).expect("all-CPU is always eligible");
        let best = search_placement(&g, &t, 256).expect("search on a valid graph");
        if !best.truncated {
            assert!(best.latency_us <= cpu);
        }
    }
});
