#![no_main]
use libfuzzer_sys::fuzz_target;
use mmca::model::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(Checkpoint::decode(&bytes).unwrap().to_bytes().unwrap(), bytes);
    }
});
