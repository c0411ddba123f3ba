#![no_main]

use fclbench::config::parse_config_with;
use libfuzzer_sys::fuzz_target;

// Input: first line is the config file, every further line is one `--set` argument.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let mut parts = text.splitn(2, '\n');
    let head = parts.next().unwrap_or_default().replace("\\n", "\n");
    let overrides: Vec<String> = parts.next().unwrap_or_default().lines().map(str::to_owned).collect();
    if let Err(e) = parse_config_with(&head, &overrides, Some("fuzz-out")) {
        assert!(matches!(e.exit_code(), 1..=3));
    }
});
