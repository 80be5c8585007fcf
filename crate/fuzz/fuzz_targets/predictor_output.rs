#![no_main]
use libfuzzer_sys::fuzz_target;
use syndi::predictor::parse_predictor_output;

fuzz_target!(|data: &str| {
    if let Ok(p) = parse_predictor_output(data) {
        assert!(p.iter().all(|v| v.is_finite()));
    }
});
