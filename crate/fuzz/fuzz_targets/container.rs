#![no_main]

use emrdm::pipeline::container::Container;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Container::from_bytes(data) {
        // Anything accepted must re-encode to the same bytes.
        assert_eq!(c.to_bytes(), data);
    }
});
