#![no_main]

use libfuzzer_sys::fuzz_target;
use nestune::env::{read_jsonl, write_jsonl};

fuzz_target!(|text: &str| {
    if let Ok(ts) = read_jsonl(text) {
        let mut out = Vec::new();
        write_jsonl(&mut out, &ts).expect("write to memory");
        let again = read_jsonl(std::str::from_utf8(&out).unwrap()).expect("written lines parse");
        assert_eq!(again.len(), ts.len());
    }
});
