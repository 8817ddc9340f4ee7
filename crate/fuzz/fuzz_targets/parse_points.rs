#![no_main]
use libfuzzer_sys::fuzz_target;
use mmca::ingest::{parse_points, write_points};

fuzz_target!(|data: &[u8]| {
    if let Ok(parsed) = parse_points(data) {
        let mut out = Vec::new();
        write_points(&mut out, &parsed.points).unwrap();
        let again = parse_points(out.as_slice()).unwrap();
        assert_eq!(again.points.len(), parsed.points.len());
    }
});
