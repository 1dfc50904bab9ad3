#![no_main]

use libfuzzer_sys::fuzz_target;
use nestune::report::RunRecord;
use nestune::EvalResult;

fuzz_target!(|text: &str| {
    let _ = serde_json::from_str::<EvalResult>(text);
    if let Ok(record) = serde_json::from_str::<RunRecord>(text) {
        let _ = record.file_name();
    }
});
