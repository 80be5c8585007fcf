#![no_main]
use libfuzzer_sys::fuzz_target;
use syndi::data::{read_dataset, Schema, Table};

const SCHEMA: &str = r#"{"y": "y", "x1": "x", "b1": "b", "pop": "pop"}"#;

fuzz_target!(|data: &[u8]| {
    let schema = Schema::from_json_str(SCHEMA).unwrap();
    let Ok(ds) = read_dataset(data, &schema, None) else {
        return;
    };
    // Whatever parses must survive a write/read round trip with its shape intact.
    let mut out = Vec::new();
    ds.write_csv(&mut out, Some("pop")).unwrap();
    let back = read_dataset(out.as_slice(), &schema, None).unwrap();
    assert_eq!(back.n_rows(), ds.n_rows());
    assert_eq!(back.total_missing(), ds.total_missing());
});
