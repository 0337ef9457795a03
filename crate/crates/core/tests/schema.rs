//! The published schema names every key the config structs serialize, and
//! every bundled config parses.

use serde_json::Value;

use seiko::config::ExperimentConfig;

fn configs() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Branch of a `oneOf` whose `const` discriminant matches the value.
fn branch<'a>(schema: &'a Value, value: &Value) -> &'a Value {
    let Some(alts) = schema.get("oneOf").and_then(Value::as_array) else {
        return schema;
    };
    alts.iter()
        .find(|alt| {
            ["kind", "rule"].iter().any(|tag| {
                let want = alt.pointer(&format!("/properties/{tag}/const"));
                want.is_some() && want == value.get(*tag)
            })
        })
        .unwrap_or_else(|| panic!("no schema branch for {value}"))
}

fn covered(schema: &Value, value: &Value, path: &str) {
    let schema = branch(schema, value);
    match value {
        Value::Object(map) => {
            let props = schema["properties"].as_object().unwrap_or_else(|| panic!("{path} has no properties"));
            for (k, v) in map {
                let sub = props.get(k).unwrap_or_else(|| panic!("{path}.{k} missing from schema"));
                covered(sub, v, &format!("{path}.{k}"));
            }
        }
        Value::Array(items) => {
            if let Some(item) = schema.get("items") {
                for v in items {
                    covered(item, v, path);
                }
            }
        }
        _ => {}
    }
}

#[test]
fn schema_covers_every_serialized_key() {
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(configs().join("experiment.schema.json")).unwrap()).unwrap();
    let mut n = 0;
    for entry in std::fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let (cfg, _) = ExperimentConfig::load(&path).unwrap();
            covered(&schema, &serde_json::to_value(&cfg).unwrap(), "");
            n += 1;
        }
    }
    assert!(n >= 4);
}
