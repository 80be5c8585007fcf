#![no_main]
use libfuzzer_sys::fuzz_target;
use syndi::model::HeterogeneitySelector;

fuzz_target!(|data: &str| {
    if let Ok(sel) = data.parse::<HeterogeneitySelector>() {
        let again: HeterogeneitySelector = sel.to_string().parse().expect("display output parses");
        assert_eq!(again, sel);
    }
});
