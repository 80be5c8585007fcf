#![no_main]
use libfuzzer_sys::fuzz_target;
use syndi::estimate::FitResult;

fuzz_target!(|data: &str| {
    if let Ok(fit) = FitResult::from_json_str(data) {
        let text = fit.to_json_string();
        let again = FitResult::from_json_str(&text).expect("serialized fit parses");
        assert_eq!(again.names, fit.names);
    }
});
