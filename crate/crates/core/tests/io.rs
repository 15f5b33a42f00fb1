use std::fs;

use haug::augment::{Image, PipelineMode};
use haug::io::checkpoint::*;
use haug::io::config::Config;
use haug::io::dataset::*;
use haug::io::synthetic::*;
use haug::model::{EmbedKind, Model, ModelConfig};
use haug::trainer::zero_velocity;
use haug::Error;
use haug_tensor::Tensor;
use proptest::prelude::*;

fn small() -> ModelConfig {
    ModelConfig {
        channels: [4, 8, 8, 16],
        image_size: 16,
        embed_dim: 8,
        proj_dim: 8,
        pred_hidden: 4,
        stage_embeds: Default::default(),
    }
}

#[test]
fn single_zero_record_is_black_image() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("zero.bin");
    fs::write(&path, vec![0u8; 1 + 3 * 32 * 32]).unwrap();
    let ds = load_dataset(&path, 32, 32).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds.labels, vec![0]);
    assert!(ds.images[0].data().iter().all(|&v| v == 0.0));
}

#[test]
fn dataset_bytes_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    let bytes: Vec<u8> = (0..3 * (1 + 3 * 8 * 8)).map(|i| (i * 31 % 251) as u8).collect();
    fs::write(&path, &bytes).unwrap();
    let ds = load_dataset(&path, 8, 8).unwrap();
    let again = dir.path().join("e.bin");
    save_dataset(&again, &ds).unwrap();
    assert_eq!(fs::read(&again).unwrap(), bytes);
}

#[test]
fn wrong_geometry_reports_lengths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    fs::write(&path, vec![0u8; 2 * record_len(32, 32)]).unwrap();
    let err = load_dataset(&path, 24, 24).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dataset { .. }));
    assert!(msg.contains("6146") && msg.contains("1729"), "{msg}");
    assert!(msg.contains("d.bin"), "{msg}");
}

#[test]
fn truncated_file_names_offset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.bin");
    fs::write(&path, vec![1u8; 3073 + 100]).unwrap();
    let msg = load_dataset(&path, 32, 32).unwrap_err().to_string();
    assert!(msg.contains("3173") && msg.contains("6146") && msg.contains("offset 3073"), "{msg}");
    assert!(matches!(load_dataset(dir.path().join("missing.bin"), 32, 32), Err(Error::Io { .. })));
}

#[test]
fn synthetic_is_seeded_and_balanced() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate_synthetic(100, 10, 7, 32).unwrap();
    let b = generate_synthetic(100, 10, 7, 32).unwrap();
    let pa = dir.path().join("a.bin");
    let pb = dir.path().join("b.bin");
    write_synthetic(&pa, &a, 10).unwrap();
    write_synthetic(&pb, &b, 10).unwrap();
    assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap());
    let mut hist = [0; 10];
    for &l in &a.labels {
        hist[l as usize] += 1;
    }
    assert_eq!(hist, [10; 10]);
    // In-memory images already sit on the 8-bit grid.
    let loaded = load_dataset(&pa, 32, 32).unwrap();
    assert_eq!(loaded.images, a.images);
    assert_ne!(generate_synthetic(100, 10, 8, 32).unwrap().images, a.images);
    assert!(generate_synthetic(5, 10, 0, 32).is_err());
}

#[test]
fn manifest_flags_hue_only_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.bin");
    let ds = generate_synthetic(20, 10, 1, 32).unwrap();
    write_synthetic(&path, &ds, 10).unwrap();
    let text = fs::read_to_string(manifest_path(&path)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "class_a,class_b,shape_a,shape_b,family_a,family_b,color_critical");
    let mut flagged = 0;
    let mut rows = 0;
    for line in lines {
        let c: Vec<&str> = line.split(',').collect();
        let (a, b): (usize, usize) = (c[0].parse().unwrap(), c[1].parse().unwrap());
        let oracle = c[2] == c[3] && c[4] != c[5];
        assert_eq!(c[6] == "1", oracle, "{line}");
        assert_eq!(color_critical(a, b), oracle);
        flagged += oracle as usize;
        rows += 1;
    }
    assert_eq!(rows, 45);
    assert_eq!(flagged, 5);
}

#[test]
fn hue_only_pairs_match_after_grayscale() {
    // Same shape, same luma: the grayscale images of a color-critical pair
    // carry the same foreground level.
    use rand::SeedableRng;
    let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let warm = render(0, 32, &mut r1).grayscale();
    let cool = render(1, 32, &mut r2).grayscale();
    let diff: f32 =
        warm.data().iter().zip(cool.data()).map(|(a, b)| (a - b).abs()).sum::<f32>() / warm.data().len() as f32;
    assert!(diff < 0.01, "{diff}");
}

#[test]
fn checkpoint_double_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(small(), 3).unwrap();
    let mut vel = zero_velocity(&model.params);
    for (i, v) in vel.iter_mut().enumerate() {
        v.data_mut().iter_mut().for_each(|x| *x = i as haug_tensor::Float * 0.5);
    }
    let p1 = dir.path().join("a.haug");
    save_checkpoint(&p1, &model, Some(&vel)).unwrap();
    let mut loaded = Model::new(small(), 99).unwrap();
    let mut lv = Vec::new();
    load_checkpoint(&p1, &mut loaded, Some(&mut lv)).unwrap();
    assert_eq!(loaded.params, model.params);
    let p2 = dir.path().join("b.haug");
    save_checkpoint(&p2, &loaded, Some(&lv)).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    let raw = decode_checkpoint(&fs::read(&p1).unwrap()).unwrap();
    assert!(raw.get(&format!("{VELOCITY_PREFIX}head.1.fc0.weight")).is_some());
    assert!(raw.get(&format!("{VELOCITY_PREFIX}head.1.bn0.running_mean")).is_none());
}

#[test]
fn corrupted_checkpoints_rejected() {
    let model = Model::new(small(), 4).unwrap();
    let bytes = encode_checkpoint(&model, None).unwrap();
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x10;
    assert!(matches!(decode_checkpoint(&flipped), Err(Error::CrcMismatch { .. })));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(decode_checkpoint(&magic), Err(Error::BadMagic)));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(decode_checkpoint(&version), Err(Error::VersionMismatch { found: 9, expected: 1 })));
    assert!(decode_checkpoint(&bytes[..20]).is_err());
}

#[test]
fn mismatched_architecture_names_first_offender() {
    let model = Model::new(small(), 5).unwrap();
    let raw = decode_checkpoint(&encode_checkpoint(&model, None).unwrap()).unwrap();
    let mut wider = Model::new(ModelConfig { channels: [4, 8, 8, 32], ..small() }, 5).unwrap();
    match restore(&raw, &mut wider, None) {
        Err(Error::ParamShape { name, expected, found }) => {
            assert_eq!(name, "backbone.stage4.conv0.weight");
            assert_eq!(expected, vec![32, 8, 3, 3]);
            assert_eq!(found, vec![16, 8, 3, 3]);
        }
        other => panic!("{other:?}"),
    }
    let mut expanded =
        Model::new(ModelConfig { stage_embeds: std::array::from_fn(|_| vec![EmbedKind::Color]), ..small() }, 5)
            .unwrap();
    assert!(matches!(restore(&raw, &mut expanded, None), Err(Error::ParamShape { .. })));
    let mut other_size = Model::new(ModelConfig { image_size: 32, ..small() }, 5).unwrap();
    assert!(matches!(restore(&raw, &mut other_size, None), Err(Error::DigestMismatch)));
    let mut plain = Model::new(small(), 6).unwrap();
    assert!(matches!(restore(&raw, &mut plain, Some(&mut Vec::new())), Err(Error::MissingParam(_))));
}

#[test]
fn config_round_trips_through_render() {
    let mut cfg = Config::default();
    cfg.augment.mode = PipelineMode::HierarchicalStrength;
    cfg.augment.rotation_from_stage = Some(3);
    cfg.train.stage_weights = Some([0.0, 0.5, 1.0, 2.0]);
    cfg.eval.seeds = vec![4, 5];
    cfg.model.expansion = vec![EmbedKind::Color, EmbedKind::Crop];
    assert_eq!(Config::parse(&cfg.render()).unwrap(), cfg);
    assert_eq!(Config::parse(&Config::default().render()).unwrap(), Config::default());
}

#[test]
fn config_errors_name_line_and_key() {
    let text = "[train]\nepochs = 3\n\n[augment]\nmode = sideways\n";
    match Config::parse(text) {
        Err(Error::Config { location, key, .. }) => {
            assert_eq!(location, "line 5");
            assert_eq!(key, "augment.mode");
        }
        other => panic!("{other:?}"),
    }
    let err = Config::parse("[model]\nwidth = 3\n").unwrap_err().to_string();
    assert!(err.contains("line 2") && err.contains("model.width"), "{err}");
    assert!(Config::parse("[nope]\n").is_err());
    assert!(Config::parse("epochs = 3\n").is_err());
}

#[test]
fn set_overrides_file_values() {
    let mut cfg = Config::parse("[augment]\nmode = hierarchical\n[train]\nseed = 4\n").unwrap();
    cfg.set("augment.mode=uniform").unwrap();
    assert_eq!(cfg.augment.mode, PipelineMode::Uniform);
    assert_eq!(cfg.train.seed, 4);
    match cfg.set("train.epochs=many") {
        Err(Error::Config { location, key, .. }) => {
            assert_eq!(location, "--set");
            assert_eq!(key, "train.epochs");
        }
        other => panic!("{other:?}"),
    }
    assert!(cfg.set("epochs=3").is_err());
}

#[test]
fn model_config_follows_sections() {
    let mut cfg = Config::default();
    cfg.augment.settings.out_size = 16;
    cfg.model.channels = [8, 16, 32, 64];
    let m = cfg.model_config().unwrap();
    assert_eq!(m.image_size, 16);
    assert_eq!(m.head_input_dim(1), 64 + 32);
    cfg.model.expansion.clear();
    assert_eq!(cfg.model_config().unwrap().head_input_dim(1), 64);
}

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..4, 1..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(-1e3f32..1e3, n).prop_map(move |v| {
            Tensor::new(shape.clone(), v.into_iter().map(|x| x as haug_tensor::Float).collect()).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dataset_decode_encode_is_identity(labels in prop::collection::vec(any::<u8>(), 1..4), seed in any::<u8>()) {
        let rec = record_len(4, 4);
        let mut bytes = Vec::new();
        for (i, l) in labels.iter().enumerate() {
            bytes.push(*l);
            bytes.extend((0..rec - 1).map(|j| (j as u8).wrapping_mul(seed).wrapping_add(i as u8)));
        }
        let ds = Dataset::decode(&bytes, 4, 4, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(ds.encode(), bytes);
    }

    #[test]
    fn single_byte_corruption_detected(pos in any::<prop::sample::Index>(), bit in 0u8..8, t in tensor_strategy()) {
        let mut model = Model::new(small(), 1).unwrap();
        *model.params.tensor_mut(0) = Tensor::from_fn(model.params.tensor(0).shape(), |i| t.data()[i % t.numel()]);
        let mut bytes = encode_checkpoint(&model, None).unwrap();
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(decode_checkpoint(&bytes).is_err());
    }
}

#[test]
fn image_values_stay_in_range_after_decode() {
    let ds = Dataset {
        height: 2,
        width: 2,
        labels: vec![3],
        images: vec![Image::new(2, 2, vec![1.2, -0.1, 0.5, 0.25, 0.0, 1.0, 0.3, 0.3, 0.3, 0.9, 0.1, 0.7])],
    };
    let back = Dataset::decode(&ds.encode(), 2, 2, std::path::Path::new("mem")).unwrap();
    assert!(back.images[0].data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(back.images[0].data()[0], 1.0);
}
