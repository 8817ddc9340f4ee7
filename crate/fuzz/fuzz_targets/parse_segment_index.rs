#![no_main]
use libfuzzer_sys::fuzz_target;
use mmca::ingest::parse_segment_index;

fuzz_target!(|data: &[u8]| {
    let _ = parse_segment_index(data);
});
