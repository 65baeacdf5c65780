#![no_main]

use distillens::synth::parse_jsonl;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_jsonl(text, None);
    if let Ok(examples) = parse_jsonl(text, Some(16)) {
        for ex in &examples {
            assert!(ex.prompt.iter().chain(&ex.response).all(|&t| t < 16));
        }
    }
});
