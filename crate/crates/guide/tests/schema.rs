use bdmesh::scenario::{bundled, ScenarioFile};
use bdmesh_guide::SCENARIO_SCHEMA;
use serde_json::Value;

fn schema() -> Value {
    serde_json::from_str(SCENARIO_SCHEMA).unwrap()
}

/// Every key in `doc` must be declared at the same place in `schema`.
fn check(doc: &Value, schema: &Value, at: &str, errors: &mut Vec<String>) {
    match doc {
        Value::Object(map) => {
            let Some(props) = schema.get("properties").and_then(Value::as_object) else {
                errors.push(format!("{at}: schema has no properties"));
                return;
            };
            for (k, v) in map {
                match props.get(k) {
                    Some(s) => check(v, s, &format!("{at}.{k}"), errors),
                    None => errors.push(format!("{at}.{k}: not in the schema")),
                }
            }
        }
        Value::Array(items) => {
            if let Some(s) = schema.get("items") {
                for (i, v) in items.iter().enumerate() {
                    check(v, s, &format!("{at}[{i}]"), errors);
                }
            }
        }
        Value::String(s) => {
            if let Some(allowed) = schema.get("enum").and_then(Value::as_array) {
                if !allowed.iter().any(|a| a == s) {
                    errors.push(format!("{at}: {s:?} not among {allowed:?}"));
                }
            }
        }
        _ => {}
    }
}

#[test]
fn bundled_scenarios_only_use_declared_keys() {
    let schema = schema();
    for (name, text) in bundled::ALL {
        let doc: Value = serde_json::from_str(text).unwrap();
        let mut errors = Vec::new();
        check(&doc, &schema, name, &mut errors);
        assert!(errors.is_empty(), "{errors:#?}");
    }
}

fn objects<'a>(v: &'a Value, out: &mut Vec<&'a Value>) {
    match v {
        Value::Object(map) => {
            if map.contains_key("properties") {
                out.push(v);
            }
            map.values().for_each(|c| objects(c, out));
        }
        Value::Array(items) => items.iter().for_each(|c| objects(c, out)),
        _ => {}
    }
}

#[test]
fn schema_objects_are_closed() {
    let schema = schema();
    let mut found = Vec::new();
    objects(&schema, &mut found);
    assert!(found.len() >= 9);
    for o in found {
        assert_eq!(o["additionalProperties"], Value::Bool(false), "{o}");
    }
}

/// Adding a key the schema does not declare must be rejected by the loader too.
#[test]
fn loader_rejects_what_the_schema_rejects() {
    let base: Value = serde_json::from_str(bundled::SITE2SITE).unwrap();
    let paths: [&[&str]; 5] = [
        &[],
        &["scheme"],
        &["experiment"],
        &["experiment", "punch"],
        &["hosts", "0"],
    ];
    for path in paths {
        let mut doc = base.clone();
        let mut at = &mut doc;
        for p in path {
            at = match p.parse::<usize>() {
                Ok(i) => &mut at[i],
                Err(_) => &mut at[*p],
            };
        }
        at.as_object_mut().unwrap().insert("surplus".into(), Value::Bool(true));
        assert!(ScenarioFile::from_json(&doc.to_string()).is_err(), "accepted surplus key at {path:?}");
    }
    assert!(ScenarioFile::from_json(&base.to_string()).is_ok());
}

#[test]
fn required_keys_match_the_loader() {
    let schema = schema();
    let required: Vec<&str> = schema["required"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(required, ["hosts", "scheme"]);
    assert!(ScenarioFile::from_json(r#"{"hosts":[{"id":"a"}],"scheme":{"G":0,"P":1,"theta":1}}"#).is_ok());
    assert!(ScenarioFile::from_json(r#"{"hosts":[{"id":"a"}]}"#).is_err());
    assert!(ScenarioFile::from_json(r#"{"scheme":{"G":0,"P":1,"theta":1}}"#).is_err());
}

#[test]
fn chapter_example_runs_connected() {
    let chapter = include_str!("../../../book/src/scenarios.md");
    let start = chapter.find("```json\n").unwrap() + "```json\n".len();
    let len = chapter[start..].find("```").unwrap();
    let text = &chapter[start..start + len];

    let mut errors = Vec::new();
    check(&serde_json::from_str(text).unwrap(), &schema(), "example", &mut errors);
    assert!(errors.is_empty(), "{errors:#?}");

    let report = ScenarioFile::from_json(text).unwrap().run().unwrap();
    assert!(report.connected(), "{:?}", report.realization.dead_links);
    assert!(report.trials.iter().all(|t| t.connected));
}
