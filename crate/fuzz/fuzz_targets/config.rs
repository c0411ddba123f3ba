#![no_main]

use fclbench::config::parse_config_str;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = parse_config_str(text) {
        // Anything that parses must print back to an equal config.
        let printed = cfg.to_config_string().expect("resolved config serializes");
        assert_eq!(parse_config_str(&printed).expect("printed config parses"), cfg);
    }
});
