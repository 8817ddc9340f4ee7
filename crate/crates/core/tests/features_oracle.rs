mod support;

use mmca::features::{extract_frames, ExtractConfig};
use support::features_ref::{compare, sample};

#[test]
fn pipeline_frames_equal_brute_force() {
    let (trajs, index) = sample();
    let grid = extract_frames(&trajs, &index, &ExtractConfig::default()).unwrap();
    let c = compare(&trajs, &index, &grid);
    assert!(c.days_match);
    assert_eq!(c.cells, grid.frames.len());
    assert_eq!(c.exact_mismatches, 0);
    assert!(c.max_real_diff <= 1e-9, "{}", c.max_real_diff);
    assert!(c.seen.iter().all(|&n| n > 0), "every behavior class should occur: {:?}", c.seen);
}
