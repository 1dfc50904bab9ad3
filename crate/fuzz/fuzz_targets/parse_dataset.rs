#![no_main]

use libfuzzer_sys::fuzz_target;
use nestune::dataset::{parse_dataset, Split};

fuzz_target!(|text: &str| {
    if let Ok(ds) = parse_dataset(text) {
        let again = parse_dataset(&ds.to_text()).expect("rendered dataset parses");
        assert_eq!(again.len(), ds.len());
        for split in [Split::Train, Split::Test] {
            assert_eq!(again.split(split), ds.split(split));
        }
    }
});
