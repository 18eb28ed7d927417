#![no_main]

use libfuzzer_sys::fuzz_target;
use seqrank::datasynth::{parse_action_line, parse_pin_line, parse_user_line, render_action_line};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for (i, line) in text.lines().enumerate() {
        if let Ok((user, a)) = parse_action_line(line, i + 1) {
            let (u2, a2) = parse_action_line(&render_action_line(user, &a), 1).expect("rendered action parses");
            assert_eq!((u2, a2.pin_id, a2.timestamp, a2.action_type), (user, a.pin_id, a.timestamp, a.action_type));
        }
        let _ = parse_pin_line(line, i + 1);
        let _ = parse_user_line(line, i + 1);
    }
});
