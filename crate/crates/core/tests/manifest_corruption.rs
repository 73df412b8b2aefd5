//! Every single-field corruption of a valid manifest is rejected before use.

use std::path::Path;

use serde_json::{json, Value};

use ovg_core::data::{check_disjointness, DatasetManifest};
use ovg_core::Error;

fn vg_manifest() -> Value {
    json!({
        "split": "train",
        "task": "vg",
        "registry": {"base": ["square", "circle"], "novel": ["oval"]},
        "records": [
            {"image_id": "a", "width": 64, "height": 48, "expression": "the red square",
             "bbox": [4, 4, 20, 20], "category": "square", "is_novel": false},
            {"image_id": "b", "width": 64, "height": 48, "expression": "the green oval",
             "bbox": [10, 5, 60, 40], "category": "oval", "is_novel": true}
        ]
    })
}

fn pl_manifest() -> Value {
    json!({
        "split": "test",
        "task": "pl",
        "registry": {"base": ["dog"], "novel": ["okapi"]},
        "records": [
            {"image_id": "p", "sentence": "a dog runs", "uses_novel": false,
             "chunks": [{"start": 0, "end": 5, "chain": 1}], "chains": {"1": [[0, 0, 10, 10]]}},
            {"image_id": "p", "sentence": "an okapi and a dog", "uses_novel": true,
             "chunks": [{"start": 0, "end": 8, "chain": 2}, {"start": 13, "end": 18, "chain": 0}],
             "chains": {"2": [[5, 5, 30, 30]], "0": []}}
        ]
    })
}

fn parse(v: &Value) -> Result<DatasetManifest, Error> {
    DatasetManifest::from_json_str(&v.to_string(), Path::new("fixture.json"))
}

fn mutated(base: fn() -> Value, pointer: &str, value: Value) -> Value {
    let mut v = base();
    *v.pointer_mut(pointer).unwrap_or_else(|| panic!("no field at {pointer}")) = value;
    v
}

#[test]
fn fixtures_are_valid() {
    assert_eq!(parse(&vg_manifest()).unwrap().len(), 2);
    let pl = parse(&pl_manifest()).unwrap();
    assert_eq!(pl.image_ids(), ["p"]);
}

#[test]
fn grounding_corruptions_are_rejected() {
    let cases: [(&str, Value); 14] = [
        ("/records/1/image_id", json!("a")),
        ("/records/0/image_id", json!(" ")),
        ("/records/0/width", json!(0)),
        ("/records/0/height", json!(-3)),
        ("/records/0/expression", json!("")),
        ("/records/0/bbox", json!([20, 4, 4, 20])),
        ("/records/0/bbox", json!([-1, 4, 20, 20])),
        ("/records/0/bbox", json!([4, 4, 80, 20])),
        ("/records/0/bbox", json!([4, 4, 20])),
        ("/records/0/category", json!("triangle")),
        ("/records/0/is_novel", json!(true)),
        ("/records/1/is_novel", json!("yes")),
        ("/registry/base/1", json!("square")),
        ("/task", json!("detection")),
    ];
    for (pointer, value) in cases {
        let v = mutated(vg_manifest, pointer, value.clone());
        assert!(
            matches!(parse(&v), Err(Error::Validation(_) | Error::Parse { .. })),
            "{pointer} = {value} was accepted"
        );
    }
}

#[test]
fn phrase_corruptions_are_rejected() {
    let cases: [(&str, Value); 6] = [
        ("/records/0/chunks/0/end", json!(11)),
        ("/records/0/chunks/0/start", json!(5)),
        ("/records/0/chunks/0/chain", json!(9)),
        ("/records/0/chains/1/0", json!([10, 0, 0, 10])),
        ("/records/1/uses_novel", json!(false)),
        ("/records/1/image_id", json!("q")),
    ];
    for (pointer, value) in cases {
        let v = mutated(pl_manifest, pointer, value.clone());
        assert!(
            matches!(parse(&v), Err(Error::Validation(_) | Error::Parse { .. })),
            "{pointer} = {value} was accepted"
        );
    }
}

#[test]
fn unknown_fields_are_rejected() {
    let mut v = vg_manifest();
    v["records"][0]["score"] = json!(1.0);
    assert!(parse(&v).is_err());
    let mut v = vg_manifest();
    v["version"] = json!(2);
    assert!(parse(&v).is_err());
}

#[test]
fn validation_reports_every_problem_with_its_record() {
    let mut v = vg_manifest();
    v["records"][0]["expression"] = json!("");
    v["records"][1]["category"] = json!("hexagon");
    let Err(Error::Validation(issues)) = parse(&v) else {
        panic!("expected validation failure")
    };
    let at: Vec<(Option<usize>, &str)> = issues.iter().map(|i| (i.record, i.field.as_str())).collect();
    assert_eq!(at, [(Some(0), "expression"), (Some(1), "category")]);
}

#[test]
fn shared_category_names_load_but_fail_the_audit() {
    let mut v = vg_manifest();
    v["registry"]["base"] = json!(["square", "circle", "oval"]);
    let train = parse(&v).unwrap();
    let eval = parse(&pl_manifest()).unwrap();
    let report = check_disjointness(&train, &eval);
    assert!(!report.pass);
    assert_eq!(report.category_overlaps, ["oval"]);
    assert!(report.image_overlaps.is_empty());
}
