#![no_main]
use libfuzzer_sys::fuzz_target;
use qface_numerics::Checkpoint;

// Anything that parses must re-serialise to a stable byte form.
fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Checkpoint::from_bytes(data) {
        let once = c.to_bytes();
        let again = Checkpoint::from_bytes(&once).expect("re-encoded checkpoint parses");
        assert_eq!(again.to_bytes(), once);
        assert_eq!(again.len(), c.len());
    }
});
