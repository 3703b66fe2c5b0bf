//! Wire-level checks of the external-trainer interfaces: the model input byte layout, the data
//! manifest schema and a recorded transcript of the reference server.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde_json::{json, Value};
use smalldata_core::datakit::{stratified_split, DatasetIndex, SplitSpec};
use smalldata_core::heightfield::{synthesize_dataset, SynthesisConfig};
use smalldata_core::learner::external::{model_input_file, serve_reference, DataManifest, REFERENCE_CHECKPOINT};
use smalldata_core::learner::TrialData;
use smalldata_core::preprocess::{preprocess, quantize_center, ModelInput};
use smalldata_core::DefectLabel;

const GOLDEN: &str = include_str!("data/golden_transcript.jsonl");

fn le32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

#[test]
fn model_input_byte_layout() {
    let (patches, manifest) = synthesize_dataset(
        &SynthesisConfig::default(),
        &BTreeMap::from([(DefectLabel::Gap, 1)]),
    )
    .unwrap();
    let img = patches[0].image();
    let id = manifest.patches[0].item_id.as_str();
    let bytes = preprocess(img, id).unwrap().to_bytes();

    assert_eq!((le32(&bytes, 0), le32(&bytes, 4), le32(&bytes, 8)), (224, 224, 3));
    let id_len = le32(&bytes, 12) as usize;
    assert_eq!(&bytes[16..16 + id_len], id.as_bytes());
    let body = &bytes[16 + id_len..];
    assert_eq!(body.len(), 224 * 224 * 3);

    // interleaved RGB, 152×100 window at column 36, row 62, zeros elsewhere
    let gray = quantize_center(img);
    for row in 0..224 {
        for col in 0..224 {
            let inside = (62..162).contains(&row) && (36..188).contains(&col);
            let want = if inside { gray.pixels()[(row - 62) * 152 + (col - 36)] } else { 0 };
            let at = (row * 224 + col) * 3;
            assert_eq!(&body[at..at + 3], &[want; 3], "row {row} col {col}");
        }
    }
    assert_eq!(ModelInput::from_bytes(&bytes).unwrap().to_bytes(), bytes);
}

#[test]
fn model_input_rejects_bad_headers() {
    let good = preprocess(
        &smalldata_core::heightfield::HeightImage::filled(4, 4, 7, Default::default()).unwrap(),
        "x",
    )
    .unwrap()
    .to_bytes();
    let mut wrong_side = good.clone();
    wrong_side[0] = 100;
    assert!(ModelInput::from_bytes(&wrong_side).is_err());
    assert!(ModelInput::from_bytes(&good[..good.len() - 1]).is_err());
    assert!(ModelInput::from_bytes(&good[..10]).is_err());
    let mut long_id = good;
    long_id[12] = 200;
    assert!(ModelInput::from_bytes(&long_id).is_err());
}

/// Writes the model inputs and data manifest of a small balanced dataset.
fn fixture(dir: &Path) -> (TrialData, std::path::PathBuf) {
    let counts: BTreeMap<_, _> = DefectLabel::ALL.iter().map(|&l| (l, 8)).collect();
    let (patches, manifest) = synthesize_dataset(&SynthesisConfig::default(), &counts).unwrap();
    for (e, p) in manifest.patches.iter().zip(&patches) {
        let input = preprocess(p.image(), e.item_id.clone()).unwrap();
        std::fs::write(dir.join(model_input_file(&e.item_id)), input.to_bytes()).unwrap();
    }
    let split = stratified_split(&DatasetIndex::from_manifest(&manifest).unwrap(), &SplitSpec::default()).unwrap();
    let data = TrialData::new(split.train, split.eval, split.test);
    let path = dir.join("data.json");
    DataManifest::for_trial(&data, dir).write(&path).unwrap();
    (data, path)
}

#[test]
fn data_manifest_schema() {
    let dir = tempfile::tempdir().unwrap();
    let (data, path) = fixture(dir.path());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let obj = v.as_object().unwrap();
    assert_eq!(obj.keys().collect::<Vec<_>>(), ["eval", "test", "train"]);
    let first = &v["test"][0];
    let keys: Vec<&String> = first.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["item_id", "label", "path"]);
    let e = &data.test.entries()[0];
    assert_eq!(first["item_id"], e.item_id.as_str());
    assert_eq!(first["label"], e.label.as_str());
    assert!(first["path"].as_str().unwrap().ends_with(&format!("{}.bin", e.item_id)));
    assert_eq!(v["train"].as_array().unwrap().len(), data.train.len());
}

fn mask(mut v: Value) -> Value {
    if v.get("metric").is_some_and(Value::is_number) {
        v["metric"] = json!("<metric>");
    }
    v
}

#[test]
fn golden_transcript_replays() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = fixture(dir.path());
    let data = data.to_str().unwrap();
    let requests = [
        json!({"cmd": "init", "checkpoint": REFERENCE_CHECKPOINT, "lr": 0.005, "batch_size": 16, "seed": 3, "data": "$DATA"}),
        json!({"cmd": "train", "epochs": 1}),
        json!({"cmd": "eval_test"}),
        json!({"cmd": "shutdown"}),
    ];
    let mut input = Vec::new();
    for r in &requests {
        writeln!(input, "{}", r.to_string().replace("$DATA", data)).unwrap();
    }
    let mut output = Vec::new();
    serve_reference(BufReader::new(input.as_slice()), &mut output, dir.path()).unwrap();

    let replies: Vec<Value> = output.lines().map(|l| serde_json::from_str(&l.unwrap()).unwrap()).collect();
    let recorded: Vec<String> = requests
        .iter()
        .zip(replies)
        .map(|(req, resp)| json!({"request": req, "response": mask(resp)}).to_string())
        .collect();
    let golden: Vec<&str> = GOLDEN.lines().collect();
    assert_eq!(recorded, golden);
}
