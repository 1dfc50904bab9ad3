#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(spec) = nestune::parse_spec(text) {
        let again = nestune::parse_spec(&spec.to_string()).expect("display output parses");
        assert_eq!(again, spec);
    }
});
