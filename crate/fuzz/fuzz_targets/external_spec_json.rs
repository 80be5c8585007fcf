#![no_main]
use libfuzzer_sys::fuzz_target;
use syndi::model::ExternalModelSpec;

fuzz_target!(|data: &str| {
    if let Ok(spec) = ExternalModelSpec::from_json_str(data, 1) {
        let _ = spec.to_json();
        let _ = spec.replication(200);
    }
});
