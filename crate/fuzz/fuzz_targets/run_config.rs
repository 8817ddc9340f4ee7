#![no_main]
use libfuzzer_sys::fuzz_target;
use mmca_cli::config::RunConfig;

fuzz_target!(|text: &str| {
    if let Ok(cfg) = RunConfig::from_toml(text) {
        if cfg.validate().is_err() {
            return;
        }
        if let Ok(back) = cfg.to_toml() {
            assert_eq!(RunConfig::from_toml(&back).unwrap(), cfg);
        }
    }
});
