#![no_main]

use distillens::synth::Tokenizer;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&v, rest)) = data.split_first() else { return };
    let Ok(tok) = Tokenizer::new(v as usize) else { return };
    let ids: Vec<usize> = rest.iter().map(|&b| b as usize).collect();
    // Decoding arbitrary ids either fails or yields text that encodes back.
    if let Ok(text) = tok.decode(&ids) {
        assert_eq!(tok.encode(&text).expect("decoded text encodes"), ids);
    }
    if let Ok(text) = std::str::from_utf8(rest) {
        if let Ok(ids) = tok.encode(text) {
            assert_eq!(tok.decode(&ids).expect("encoded ids decode"), text);
        }
    }
});
