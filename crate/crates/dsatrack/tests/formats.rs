use dsatrack::config::Config;
use dsatrack::report::{metrics_csv, metrics_summary, metrics_svg, parse_contributions, prune_doc, spec_from_doc, PruneSpecDoc};
use dsatrack::seqio::{self, FrameFormat};
use dsatrack::weights::{decode_model, decode_tensors, encode_model, encode_tensors, load_model, save_model};
use dsatrack_core::eval::{precision_success, sequence_set, Attribute};
use dsatrack_core::head::BBox;
use dsatrack_core::model::{Model, ModelConfig};
use dsatrack_core::pruning::{profiles_from_table, rank_and_prune, LayerGroups, REFERENCE_CONTRIBUTIONS};
use dsatrack_core::Tensor;

fn tiny() -> ModelConfig {
    ModelConfig {
        d_model: 12,
        heads: 3,
        depth: 4,
        dsa_layers: vec![2, 4],
        retention: vec![0.9, 0.7],
        template_size: 32,
        search_size: 64,
        ..ModelConfig::default()
    }
}

#[test]
fn dsaw_byte_layout() {
    let t = Tensor::new(&[2], vec![1.0, -2.5]).unwrap();
    let bytes = encode_tensors(&[("ab".to_string(), t)]).unwrap();
    let mut want = b"DSAW".to_vec();
    want.extend_from_slice(&1u32.to_le_bytes());
    want.extend_from_slice(&1u32.to_le_bytes());
    want.extend_from_slice(&2u16.to_le_bytes());
    want.extend_from_slice(b"ab");
    want.push(1);
    want.extend_from_slice(&2u32.to_le_bytes());
    want.extend_from_slice(&1.0f32.to_le_bytes());
    want.extend_from_slice(&(-2.5f32).to_le_bytes());
    assert_eq!(bytes, want);
    let back = decode_tensors(&bytes).unwrap();
    assert_eq!(back[0].0, "ab");
    assert_eq!(back[0].1.data(), &[1.0, -2.5]);
}

#[test]
fn dsaw_rejects_damage() {
    let t = Tensor::new(&[3], vec![0.5; 3]).unwrap();
    let bytes = encode_tensors(&[("w".to_string(), t)]).unwrap();
    assert!(decode_tensors(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_tensors(&extra).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(decode_tensors(&magic).is_err());
    let mut version = bytes;
    version[4] = 2;
    assert!(decode_tensors(&version).is_err());
}

#[test]
fn model_file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(tiny(), 3).unwrap();
    let first = encode_model(&model).unwrap();
    let path = dir.path().join("nested/m.dsaw");
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(&path, &first).unwrap();
    let loaded = load_model(&path).unwrap();
    assert_eq!(loaded.config(), model.config());
    assert_eq!(loaded.layers(), model.layers());
    let second = dir.path().join("again.dsaw");
    save_model(&loaded, &second).unwrap();
    assert_eq!(std::fs::read(&second).unwrap(), first);
    // Values already representable in binary32 survive unchanged.
    let again = decode_model(&first).unwrap();
    for (name, t) in loaded.params().iter() {
        assert_eq!(again.params().get(name).unwrap(), t, "{name}");
    }
}

#[test]
fn model_file_rejects_missing_tensor() {
    let model = Model::new(tiny(), 3).unwrap();
    let mut tensors = decode_tensors(&encode_model(&model).unwrap()).unwrap();
    tensors.pop();
    assert!(decode_model(&encode_tensors(&tensors).unwrap()).is_err());
}

#[test]
fn config_text_round_trip() {
    let mut c = Config::default();
    c.apply_text(
        "d_model = 48\n# comment\ndsa_layers = 3, 6\nretention = 0.8,0.6\nquality_gate = 0.3\nclip = none\nrelevance = static\n",
    )
    .unwrap();
    assert_eq!(c.model.d_model, 48);
    assert_eq!(c.model.dsa_layers, [3, 6]);
    assert_eq!(c.train.clip, None);
    let mut back = Config::default();
    back.apply_text(&c.to_text()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn config_errors_name_the_line() {
    let mut c = Config::default();
    let e = c.apply_text("seed = 1\nbogus = 2\n").unwrap_err().to_string();
    assert!(e.contains("line 2") && e.contains("bogus"), "{e}");
    assert!(c.apply_text("lr = fast").is_err());
    assert!(c.apply_text("no equals sign").is_err());
    for key in Config::KEYS {
        assert!(c.to_text().contains(key) || matches!(*key, "weights" | "data"), "{key}");
    }
}

#[test]
fn box_text_formats() {
    let b = seqio::parse_boxes("10,20,30,40\n\n1\t2\t3\t4\n5 6 7 8\n").unwrap();
    assert_eq!(b.len(), 3);
    assert_eq!(b[0].to_xywh(), [10.0, 20.0, 30.0, 40.0]);
    assert_eq!(b[2].to_xywh(), [5.0, 6.0, 7.0, 8.0]);
    assert_eq!(seqio::format_boxes(&b[..1]), "10.000,20.000,30.000,40.000\n");
    assert!(seqio::parse_boxes("1,2,3\n").is_err());
    assert!(seqio::parse_boxes("1,2,x,4\n").is_err());
}

#[test]
fn sequence_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let seqs = sequence_set(2, 4, 31, &[Attribute::Occlusion]).unwrap();
    for (i, format) in [FrameFormat::Png, FrameFormat::Ppm].into_iter().enumerate() {
        seqio::write_sequence(&dir.path().join(format!("s{i}")), &seqs[i], format).unwrap();
    }
    std::fs::create_dir(dir.path().join("not-a-sequence")).unwrap();
    let found = seqio::dataset_sequences(dir.path()).unwrap();
    assert_eq!(found.len(), 2);
    for (path, orig) in found.iter().zip(&seqs) {
        let back = seqio::read_sequence(path).unwrap();
        assert_eq!(back.len(), orig.len());
        assert_eq!(back.seed, orig.seed);
        assert_eq!(back.attributes, orig.attributes);
        for (a, b) in back.frames.iter().zip(&orig.frames) {
            let err = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(err <= 0.5 / 255.0 + 1e-6, "8-bit quantization error {err}");
        }
        for (a, b) in back.boxes.iter().zip(&orig.boxes) {
            let (p, q) = (a.to_xywh(), b.to_xywh());
            assert!(p.iter().zip(q).all(|(x, y)| (x - y).abs() <= 5e-4));
        }
    }
}

#[test]
fn mismatched_ground_truth_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let seq = &sequence_set(1, 3, 5, &[]).unwrap()[0];
    seqio::write_sequence(dir.path(), seq, FrameFormat::Ppm).unwrap();
    seqio::write_boxes(&dir.path().join(seqio::GROUNDTRUTH), &seq.boxes[..2]).unwrap();
    assert!(seqio::read_sequence(dir.path()).is_err());
}

#[test]
fn contribution_table_shapes() {
    let want = vec![(2, 0.5), (3, 0.25)];
    for text in [
        r#"{"2": 0.5, "3": 0.25}"#,
        "[[3, 0.25], [2, 0.5]]",
        r#"[{"layer": 2, "contribution": 0.5}, {"layer": 3, "contribution": 0.25}]"#,
        r#"{"contributions": {"3": 0.25, "2": 0.5}}"#,
    ] {
        assert_eq!(parse_contributions(text).unwrap(), want, "{text}");
    }
    assert!(parse_contributions("[[2, 0.5], [2, 0.1]]").is_err());
    assert!(parse_contributions(r#"{"two": 0.5}"#).is_err());
    assert!(parse_contributions("3").is_err());
}

#[test]
fn prune_spec_json_round_trip() {
    let groups = LayerGroups::canonical();
    let profiles = profiles_from_table(&groups, &REFERENCE_CONTRIBUTIONS, 0).unwrap();
    let spec = rank_and_prune(&profiles, &groups, 2.0 / 3.0, 3.0 / 9.0).unwrap();
    let doc = prune_doc(&spec, Some("d7"));
    assert_eq!(doc.removed, [6, 7, 8, 9, 10]);
    let json = serde_json::to_string(&doc).unwrap();
    let back: PruneSpecDoc = serde_json::from_str(&json).unwrap();
    assert_eq!(spec_from_doc(&back).unwrap(), spec);
}

#[test]
fn metric_outputs() {
    let gt: Vec<BBox> = (0..10)
        .map(|i| BBox::from_xywh(10.0 + i as f64, 10.0, 20.0, 20.0).unwrap())
        .collect();
    let r = precision_success(&gt, &gt).unwrap();
    let csv = metrics_csv(&r);
    assert_eq!(csv.lines().count(), 1 + 51 + 21);
    assert!(csv.contains("precision,20,1.000000"));
    let svg = metrics_svg(&r);
    assert!(svg.starts_with("<svg") && svg.matches("<polyline").count() == 2);
    let s = metrics_summary(&r);
    assert_eq!((s.frames, s.precision_at_20), (10, 1.0));
}
