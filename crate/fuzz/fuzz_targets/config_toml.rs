#![no_main]

use distillens_cli::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    // Accepted configs must serialize to TOML that parses back to the same
    // serialization (compared as text so NaN values do not trip equality).
    if let Ok(cfg) = RunConfig::from_toml_str(text) {
        let round = toml::to_string(&cfg).expect("config serializes");
        let again = RunConfig::from_toml_str(&round).expect("round trip parses");
        assert_eq!(toml::to_string(&again).expect("config serializes"), round);
    }
});
