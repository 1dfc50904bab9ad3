#![no_main]

use libfuzzer_sys::fuzz_target;
use nestune::BackendConfig;

fuzz_target!(|text: &str| {
    let _ = BackendConfig::from_pairs(text);
});
