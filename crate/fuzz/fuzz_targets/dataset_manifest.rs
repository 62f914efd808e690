#![no_main]
use libfuzzer_sys::fuzz_target;
use qface::synthdata::DatasetManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(m) = DatasetManifest::from_json(s) {
        let back = DatasetManifest::from_json(&m.to_json()).expect("written manifest parses");
        assert_eq!(back, m);
    }
});
