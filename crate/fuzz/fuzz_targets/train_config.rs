#![no_main]

use libfuzzer_sys::fuzz_target;
use nestune::dqn::TrainConfig;

fuzz_target!(|text: &str| {
    if let Ok(cfg) = TrainConfig::from_toml(text) {
        cfg.validate().expect("parsed configs are valid");
    }
});
