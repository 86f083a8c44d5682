mod oracles;

use darkship_core::model::{build_model, GraphSpec, HeadLevel, HeadOutput, LoadedModel, WeightStore};
use darkship_core::pipeline::{
    apply_adaptive_thresholds, chip_origins, decode_heads, merge_chip_detections, nms, shore_distance,
    tile_offsets, BoxXyxy, ClassId, Detection, Grid, PipelineConfig, SceneRaster, ThresholdTable, WorkerPool,
    CHIP_SIZE,
};
use darkship_core::synth::{synth_scene, SynthParams};
use darkship_core::tensor::{Shape, Tensor};
use darkship_core::Error;
use oracles::{nms_bruteforce, shore_bruteforce};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_dets(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let (x, y) = (rng.gen_range(0.0..extent), rng.gen_range(0.0..extent));
            let (w, h) = (rng.gen_range(1.0..40.0), rng.gen_range(1.0..40.0));
            // Coarse scores so equal-score ties actually occur.
            let score = rng.gen_range(1..=20) as f64 / 20.0;
            let class = ClassId::ALL[rng.gen_range(0..3)];
            Detection::from_box("s", BoxXyxy::new(x, y, x + w, y + h), class, score)
        })
        .collect()
}

#[test]
fn nms_matches_quadratic_oracle_on_200_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5E7);
    for set in 0..200 {
        let n = rng.gen_range(0..=50);
        let dets = random_dets(&mut rng, n, 120.0);
        let thr = [0.3, 0.45, 0.5, 0.7][set % 4];
        assert_eq!(nms(dets.clone(), thr).unwrap(), nms_bruteforce(dets, thr), "set {set}");
    }
}

#[test]
fn nms_handles_boxes_spanning_many_index_cells() {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let mut dets = random_dets(&mut rng, 40, 5000.0);
    dets.push(Detection::from_box("s", BoxXyxy::new(0.0, 0.0, 4000.0, 4000.0), ClassId::Fishing, 0.3));
    dets.push(Detection::from_box("s", BoxXyxy::new(10.0, 10.0, 3990.0, 3990.0), ClassId::Fishing, 0.2));
    assert_eq!(nms(dets.clone(), 0.5).unwrap(), nms_bruteforce(dets, 0.5));
}

#[test]
fn merge_equals_single_pass_over_union() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xAB);
    for _ in 0..50 {
        let per_chip: Vec<Vec<Detection>> = (0..4)
            .map(|_| {
                let n = rng.gen_range(0..20);
                nms(random_dets(&mut rng, n, 150.0), 0.5).unwrap()
            })
            .collect();
        let mut expected = nms_bruteforce(per_chip.concat(), 0.5);
        expected.sort_by(|a, b| a.position_cmp(b));
        assert_eq!(merge_chip_detections(per_chip, 0.5).unwrap(), expected);
    }
}

#[test]
fn duplicate_across_overlapping_chips_merges_to_one() {
    // A vessel at scene (700, 650) seen by chips at column 0 and column 600.
    let a = Detection::from_box("s", BoxXyxy::new(640.0, 690.0, 660.0, 710.0), ClassId::Fishing, 0.81);
    let b = Detection::from_box("s", BoxXyxy::new(641.0, 690.5, 661.0, 710.0), ClassId::NonFishing, 0.77);
    let other = Detection::from_box("s", BoxXyxy::new(100.0, 100.0, 120.0, 110.0), ClassId::Fishing, 0.6);
    let merged = merge_chip_detections(vec![vec![a.clone(), other.clone()], vec![b]], 0.5).unwrap();
    assert_eq!(merged, vec![other, a]);
}

#[test]
fn tiling_examples() {
    assert_eq!(chip_origins(4000, 4000, 0).unwrap().len(), 25);
    assert_eq!(tile_offsets(500, 800, 200).unwrap(), vec![0]);
    assert_eq!(tile_offsets(1400, 800, 200).unwrap(), vec![0, 600]);
    assert_eq!(tile_offsets(1500, 800, 200).unwrap(), vec![0, 600, 700]);
    assert!(matches!(tile_offsets(1500, 800, 800), Err(Error::Config(_))));
}

proptest! {
    #[test]
    fn tiles_cover_every_pixel(len in 1usize..5000, overlap in 0usize..800) {
        let offs = tile_offsets(len, CHIP_SIZE, overlap).unwrap();
        prop_assert_eq!(offs[0], 0);
        prop_assert!(offs.windows(2).all(|w| w[0] < w[1] && w[1] - w[0] <= CHIP_SIZE - overlap));
        let last = *offs.last().unwrap();
        if len > CHIP_SIZE {
            prop_assert_eq!(last + CHIP_SIZE, len);
        }
        for p in 0..len {
            prop_assert!(offs.iter().any(|&o| o <= p && p < o + CHIP_SIZE));
        }
    }

    #[test]
    fn shore_distance_matches_bruteforce(w in 1usize..14, h in 1usize..14, land in 0.0f64..0.4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h).map(|_| if rng.gen_bool(land) { 10.0 } else { -100.0 }).collect();
        let g = Grid::new(w, h, data).unwrap();
        let fast = shore_distance(&g);
        for (a, b) in fast.data().iter().zip(shore_bruteforce(&g)) {
            if b.is_infinite() {
                prop_assert!(a.is_infinite());
            } else {
                prop_assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
            }
        }
    }
}

#[test]
fn thresholds_use_the_two_kilometre_split() {
    let mk = |score: f64, km: f64, class| {
        let mut d = Detection::from_box("s", BoxXyxy::new(0.0, 0.0, 4.0, 4.0), class, score);
        d.shore_km = Some(km);
        d
    };
    let mut t = ThresholdTable::uniform(0.5);
    t.set(ClassId::Fishing, true, 0.9);
    let dets = vec![
        mk(0.6, 1.99, ClassId::Fishing),
        mk(0.6, 2.0, ClassId::Fishing),
        mk(0.95, 0.0, ClassId::Fishing),
        mk(0.6, 0.5, ClassId::NonVessel),
        mk(0.4, 9.0, ClassId::NonFishing),
    ];
    let kept = apply_adaptive_thresholds(&dets, &t).unwrap();
    assert_eq!(kept, vec![dets[1].clone(), dets[2].clone(), dets[3].clone()]);

    let mut missing = dets[0].clone();
    missing.shore_km = None;
    assert!(matches!(apply_adaptive_thresholds(&[missing], &t), Err(Error::Usage(_))));
}

fn head(stride: usize, side: usize, reg_max: usize, bin_logit: impl Fn(usize) -> f32) -> HeadOutput {
    let mut box_logits = Tensor::zeros(Shape::new(1, 4 * reg_max, side, side));
    for s in 0..4 {
        for k in 0..reg_max {
            for y in 0..side {
                for x in 0..side {
                    box_logits.set(0, s * reg_max + k, y, x, bin_logit(k));
                }
            }
        }
    }
    let mut class_logits = Tensor::filled(Shape::new(1, 3, side, side), -10.0);
    for y in 0..side {
        for x in 0..side {
            class_logits.set(0, 2, y, x, 3.0);
        }
    }
    HeadOutput {
        levels: vec![HeadLevel {
            level: 3,
            stride,
            box_logits,
            class_logits,
        }],
    }
}

#[test]
fn one_hot_bin_decodes_to_exact_distance() {
    for k in 0..16 {
        let h = head(8, 2, 16, |b| if b == k { 0.0 } else { -1000.0 });
        let dets = decode_heads(&h, (100, 200), 0.05, "s").unwrap();
        assert_eq!(dets.len(), 4);
        let d = &dets[0];
        let (cx, cy) = (200.0 + 4.0, 100.0 + 4.0);
        let dist = (k * 8) as f64;
        assert_eq!(d.bbox, BoxXyxy::new(cx - dist, cy - dist, cx + dist, cy + dist));
        assert_eq!(d.class_id, ClassId::Fishing);
    }
}

#[test]
fn uniform_bins_decode_to_middle() {
    let h = head(32, 1, 16, |_| 0.25);
    let d = &decode_heads(&h, (0, 0), 0.05, "s").unwrap()[0];
    assert!((d.bbox.x2 - 16.0 - 7.5 * 32.0).abs() < 1e-9);
}

#[test]
fn confidence_floor_drops_cells() {
    let h = head(8, 2, 4, |_| 0.0);
    assert!(decode_heads(&h, (0, 0), 0.99, "s").unwrap().is_empty());
}

fn tiny_model() -> LoadedModel {
    let mut s: GraphSpec = "yolov8n-ghost".parse().unwrap();
    s.width_multiple = 0.0625;
    s.reg_max = 4;
    let g = build_model(&s).unwrap();
    LoadedModel::new(g.clone(), &WeightStore::seeded(&g, 21)).unwrap()
}

#[test]
fn detect_scene_is_identical_across_worker_counts() {
    let model = tiny_model();
    let scene = synth_scene(&SynthParams::new(5, 1400, 1400, 6)).unwrap().scene;
    let cfg = PipelineConfig::default();
    let reference = WorkerPool::new(1).unwrap().detect_scene(&model, &scene, &cfg).unwrap();
    assert!(!reference.is_empty());
    assert!(reference.iter().all(|d| d.shore_km.is_some()));
    for w in [2, 4] {
        assert_eq!(WorkerPool::new(w).unwrap().detect_scene(&model, &scene, &cfg).unwrap(), reference);
    }
}

#[test]
fn scene_validation_rejects_mismatched_bathymetry() {
    let vv = Grid::filled(200, 100, -20.0);
    let bad = Grid::filled(20, 2, -100.0);
    assert!(SceneRaster::new("s", vv.clone(), vv.clone(), bad).is_err());
    assert!(SceneRaster::new("s", vv.clone(), vv, Grid::filled(4, 2, -100.0)).is_ok());
}
