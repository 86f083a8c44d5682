use std::path::Path;

use darkship_core::formats::{
    decode_detections, decode_labels, decode_scene, decode_weights, encode_detections, encode_labels, encode_scene,
    encode_weights, read_scene, write_scene, SCENE_MAGIC,
};
use darkship_core::model::{build_model, calibrate, GraphSpec, LoadedModel, WeightStore};
use darkship_core::pipeline::{BoxXyxy, ClassId, Detection, Grid, SceneRaster};
use darkship_core::scoring::{Confidence, GroundTruthLabel};
use darkship_core::tensor::{Shape, Tensor};
use darkship_core::Error;
use proptest::prelude::*;

fn tiny_graph() -> darkship_core::model::ModelGraph {
    let mut s: GraphSpec = "yolov8n-ghost-p2".parse().unwrap();
    s.width_multiple = 0.0625;
    s.reg_max = 4;
    build_model(&s).unwrap()
}

fn bytes_path() -> &'static Path {
    Path::new("mem")
}

#[test]
fn weights_round_trip_byte_identical() {
    let g = tiny_graph();
    let store = WeightStore::seeded(&g, 4);
    let bytes = encode_weights(&store).unwrap();
    let back = decode_weights(&bytes, bytes_path()).unwrap();
    assert_eq!(encode_weights(&back).unwrap(), bytes);
    back.validate(&g).unwrap();
}

#[test]
fn quantized_weights_round_trip_and_load() {
    let g = tiny_graph();
    let model = LoadedModel::new(g.clone(), &WeightStore::seeded(&g, 6)).unwrap();
    let chip = Tensor::from_fn(Shape::new(1, 3, 64, 64), |_, c, y, x| ((c * 31 + y * 7 + x * 13) % 256) as f32);
    let (store, _) = calibrate(&model, &[chip.clone()]).unwrap();
    let bytes = encode_weights(&store).unwrap();
    let back = decode_weights(&bytes, bytes_path()).unwrap();
    assert!(back.is_quantized());
    assert_eq!(encode_weights(&back).unwrap(), bytes);
    let a = LoadedModel::new(g.clone(), &store).unwrap();
    let b = LoadedModel::new(g, &back).unwrap();
    let mode = darkship_core::model::Precision::Quantized;
    assert_eq!(a.forward(&chip, mode).unwrap(), b.forward(&chip, mode).unwrap());
}

#[test]
fn corrupted_weights_are_rejected() {
    let g = tiny_graph();
    let mut bytes = encode_weights(&WeightStore::seeded(&g, 4)).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let err = decode_weights(&bytes, bytes_path()).unwrap_err();
    assert!(matches!(&err, Error::Format { reason, .. } if reason.contains("CRC")), "{err}");
    assert!(matches!(decode_weights(b"nope", bytes_path()), Err(Error::Format { .. })));
}

fn scene(w: usize, h: usize, vv: Vec<f32>, bathy: Vec<f32>) -> SceneRaster {
    let vh: Vec<f32> = vv.iter().map(|v| v - 8.0).collect();
    let (bw, bh) = (w.div_ceil(50), h.div_ceil(50));
    SceneRaster::new(
        "scene-x",
        Grid::new(w, h, vv).unwrap(),
        Grid::new(w, h, vh).unwrap(),
        Grid::new(bw, bh, bathy).unwrap(),
    )
    .unwrap()
}

#[test]
fn scene_file_round_trip_and_bad_magic() {
    let s = scene(120, 60, (0..7200).map(|i| (i % 97) as f32 - 40.0).collect(), vec![-10.0, 5.0, -3.0, 0.0, 1.0, -2.0]);
    let dir = std::env::temp_dir().join(format!("darkship-formats-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("s.scene");
    write_scene(&path, &s).unwrap();
    assert_eq!(read_scene(&path).unwrap(), s);
    let mut bytes = std::fs::read(&path).unwrap();
    assert!(bytes.starts_with(SCENE_MAGIC));
    bytes[0] = b'X';
    assert!(matches!(decode_scene(&bytes, &path), Err(Error::Format { .. })));
    assert!(matches!(read_scene(&dir.join("missing.scene")), Err(Error::Io { .. })));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn csv_errors_carry_line_numbers() {
    let csv = "scene_id,detect_scene_row,detect_scene_column,x1,y1,x2,y2,class,score\n\
               a,1,2,0,0,4,4,fishing,0.5\n\
               a,1,2,0,0,4,4,whale,0.5\n";
    match decode_detections(csv.as_bytes()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected parse error, got {other:?}"),
    }
    let labels = "scene_id,detect_scene_row,detect_scene_column,is_vessel,is_fishing,confidence,distance_from_shore_km\n\
                  a,1,2,false,true,HIGH,3\n";
    assert!(matches!(decode_labels(labels.as_bytes()), Err(Error::Parse { line: 2, .. })));
    assert!(matches!(decode_detections(b"scene_id,score\n"), Err(Error::Parse { line: 1, .. })));
}

fn any_detection() -> impl Strategy<Value = Detection> {
    (-1e4f64..1e4, -1e4f64..1e4, 0.0f64..500.0, 0.0f64..500.0, 0usize..3, 0.0f64..=1.0, prop::option::of(0.0f64..1e3))
        .prop_map(|(x, y, w, h, c, score, km)| {
            let mut d = Detection::from_box("scene-1", BoxXyxy::new(x, y, x + w, y + h), ClassId::ALL[c], score);
            d.shore_km = km;
            d
        })
}

fn any_label() -> impl Strategy<Value = GroundTruthLabel> {
    (0.0f64..2e4, 0.0f64..2e4, 0usize..3, 0usize..3, 0usize..3, 0.0f64..200.0).prop_map(|(row, col, v, f, c, km)| {
        let is_vessel = [None, Some(true), Some(false)][v];
        let is_fishing = if is_vessel == Some(true) { [None, Some(true), Some(false)][f] } else { None };
        GroundTruthLabel {
            scene_id: "scene-1".into(),
            row,
            col,
            is_vessel,
            is_fishing,
            confidence: [Confidence::High, Confidence::Medium, Confidence::Low][c],
            distance_from_shore_km: km,
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn detections_csv_round_trips(dets in prop::collection::vec(any_detection(), 0..20), shore in any::<bool>()) {
        let bytes = encode_detections(&dets, shore).unwrap();
        let back = decode_detections(&bytes).unwrap();
        prop_assert_eq!(encode_detections(&back, shore).unwrap(), bytes);
        if shore {
            prop_assert_eq!(back, dets);
        }
    }

    #[test]
    fn labels_csv_round_trips(labels in prop::collection::vec(any_label(), 0..20)) {
        let bytes = encode_labels(&labels).unwrap();
        let back = decode_labels(&bytes).unwrap();
        prop_assert_eq!(&back, &labels);
        prop_assert_eq!(encode_labels(&back).unwrap(), bytes);
    }

    #[test]
    fn scene_bytes_round_trip(w in 1usize..120, h in 1usize..120, seed in any::<u32>()) {
        let vv: Vec<f32> = (0..w * h).map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 / 1e8 - 20.0).collect();
        let bathy = (0..w.div_ceil(50) * h.div_ceil(50)).map(|i| i as f32 * 37.0 - 200.0).collect();
        let s = scene(w, h, vv, bathy);
        let bytes = encode_scene(&s).unwrap();
        let back = decode_scene(&bytes, bytes_path()).unwrap();
        prop_assert_eq!(encode_scene(&back).unwrap(), bytes);
        prop_assert_eq!(back, s);
    }
}
