#![no_main]

use libfuzzer_sys::fuzz_target;
use nestune::dqn::checkpoint;

fuzz_target!(|bytes: &[u8]| {
    if let Ok(net) = checkpoint::decode(bytes) {
        assert_eq!(checkpoint::encode(&net), bytes);
    }
});
