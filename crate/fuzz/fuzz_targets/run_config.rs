#![no_main]
use libfuzzer_sys::fuzz_target;
use qface::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_json(s) {
        let back = RunConfig::from_json(&cfg.to_json()).expect("echoed config parses");
        assert_eq!(back, cfg);
        assert_eq!(cfg.encoder.num_tokens(), cfg.encoder.num_patches() + 1);
        let _ = cfg.num_queries();
    }
});
