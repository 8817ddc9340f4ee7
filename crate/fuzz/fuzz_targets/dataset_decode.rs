#![no_main]
use libfuzzer_sys::fuzz_target;
use mmca::dataset::Dataset;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = Dataset::decode(data) {
        let bytes = ds.to_bytes().unwrap();
        Dataset::decode(&bytes).unwrap();
    }
});
