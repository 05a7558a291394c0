//! The published webhook example and schema match what the dispatcher sends.

use std::path::Path;

use serde_json::Value;
use wlds_server::dispatch::AlertDocument;

fn load(name: &str) -> Value {
    let p = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../docs")
        .join(name);
    serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap()
}

#[test]
fn webhook_example_round_trips() {
    let example = load("alert-webhook.example.json");
    let doc: AlertDocument = serde_json::from_value(example.clone()).unwrap();
    assert_eq!(serde_json::to_value(&doc).unwrap(), example);
}

#[test]
fn webhook_schema_lists_exactly_the_document_fields() {
    let schema = load("alert-webhook.schema.json");
    let example = load("alert-webhook.example.json");
    let mut required: Vec<&str> = schema["required"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    let mut props: Vec<&str> = schema["properties"]
        .as_object()
        .unwrap()
        .keys()
        .map(String::as_str)
        .collect();
    let mut fields: Vec<&str> = example
        .as_object()
        .unwrap()
        .keys()
        .map(String::as_str)
        .collect();
    required.sort();
    props.sort();
    fields.sort();
    assert_eq!(required, fields);
    assert_eq!(props, fields);
    let dirs = &schema["properties"]["direction"]["enum"];
    for d in dirs.as_array().unwrap() {
        let mut v = example.clone();
        v["direction"] = d.clone();
        serde_json::from_value::<AlertDocument>(v).unwrap();
    }
}
