#![no_main]
use libfuzzer_sys::fuzz_target;
use syndi::data::Schema;

fuzz_target!(|data: &str| {
    if let Ok(schema) = Schema::from_json_str(data) {
        let _ = schema.outcome();
        let _ = schema.without_outcome();
    }
});
