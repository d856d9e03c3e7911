use std::path::Path;

use gazeteach::config::Config;

fn blocks(lang: &str) -> Vec<(String, String)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../book/src");
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "md") {
            let text = std::fs::read_to_string(&path).unwrap();
            let fence = format!("```{lang}\n");
            for chunk in text.split(&fence).skip(1) {
                let body = chunk.split("```").next().unwrap();
                out.push((path.file_name().unwrap().to_string_lossy().into_owned(), body.to_string()));
            }
        }
    }
    out
}

#[test]
fn toml_blocks_are_valid_configs() {
    let found = blocks("toml");
    assert!(!found.is_empty());
    for (file, body) in found {
        let c = Config::from_toml_str(&body).unwrap_or_else(|e| panic!("{file}: {e}"));
        c.validate().unwrap_or_else(|e| panic!("{file}: {e}"));
    }
}

#[test]
fn json_blocks_parse() {
    let found = blocks("json");
    assert!(found.len() >= 3);
    for (file, body) in found {
        // several one-line messages may share a block
        if body.trim_start().starts_with('{') && body.lines().all(|l| l.trim().is_empty() || l.starts_with('{') && l.ends_with('}')) {
            for l in body.lines().filter(|l| !l.trim().is_empty()) {
                serde_json::from_str::<serde_json::Value>(l).unwrap_or_else(|e| panic!("{file}: {e}: {l}"));
            }
        } else {
            serde_json::from_str::<serde_json::Value>(&body).unwrap_or_else(|e| panic!("{file}: {e}"));
        }
    }
}
