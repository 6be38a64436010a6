use sp_cyclegan::data::{CropKind, CropSpec};
use sp_cyclegan::experiment::{preset_names, ExperimentConfig};
use sp_cyclegan::models::SegmenterKind;

/// Published per-direction training settings.
struct Row {
    preset: &'static str,
    zeta: f64,
    segmenter: SegmenterKind,
    resize: Option<(usize, usize)>,
    da_crop: (CropKind, usize),
    translate_crop: (CropKind, usize),
    epochs: usize,
    anneal_start: usize,
    batch: usize,
}

const TABLE: [Row; 4] = [
    Row {
        preset: "stare2drive",
        zeta: 3.0,
        segmenter: SegmenterKind::AttentionUnet,
        resize: Some((512, 512)),
        da_crop: (CropKind::Random, 364),
        translate_crop: (CropKind::QuadrantTile, 364),
        epochs: 200,
        anneal_start: 150,
        batch: 2,
    },
    Row {
        preset: "drive2stare",
        zeta: 4.0,
        segmenter: SegmenterKind::AttentionUnet,
        resize: Some((512, 512)),
        da_crop: (CropKind::Random, 364),
        translate_crop: (CropKind::QuadrantTile, 364),
        epochs: 200,
        anneal_start: 150,
        batch: 2,
    },
    Row {
        preset: "ct2mr",
        zeta: 5.0,
        segmenter: SegmenterKind::NestedUnet,
        resize: None,
        da_crop: (CropKind::Center, 192),
        translate_crop: (CropKind::Center, 192),
        epochs: 100,
        anneal_start: 50,
        batch: 8,
    },
    Row {
        preset: "mr2ct",
        zeta: 4.0,
        segmenter: SegmenterKind::NestedUnet,
        resize: None,
        da_crop: (CropKind::Center, 192),
        translate_crop: (CropKind::Center, 192),
        epochs: 100,
        anneal_start: 50,
        batch: 8,
    },
];

const ALPHA: f64 = 0.7;
const BETA: f64 = 0.3;
const GAMMA: f64 = 4.0 / 3.0;
const LR_GAN: f64 = 2e-4;
const LR_SEG: f64 = 1e-3;

fn assert_crop(crop: Option<CropSpec>, resize: Option<(usize, usize)>, (kind, side): (CropKind, usize)) {
    let crop = crop.expect("crop configured");
    assert_eq!(crop.resize_to, resize);
    assert_eq!(crop.kind, kind);
    assert_eq!(crop.size, (side, side));
}

#[test]
fn paper_direction_presets_match_published_settings() {
    for row in &TABLE {
        let cfg = ExperimentConfig::preset(row.preset).unwrap();
        assert_eq!(cfg.direction, row.preset);
        assert_eq!(cfg.model.segmenter_kind, row.segmenter, "{}", row.preset);
        for stage in [&cfg.da, &cfg.seg] {
            let loss = &stage.loss;
            assert_eq!(
                (loss.alpha, loss.beta, loss.gamma, loss.zeta),
                (ALPHA, BETA, GAMMA, row.zeta),
                "{}",
                row.preset
            );
            assert_eq!(stage.total_epochs, row.epochs);
            assert_eq!(stage.anneal_start_epoch, row.anneal_start);
            assert_eq!(stage.batch_size, row.batch);
            assert_eq!((stage.lr_gan, stage.lr_seg), (LR_GAN, LR_SEG));
        }
        assert_crop(cfg.crops.da, row.resize, row.da_crop);
        assert_crop(cfg.crops.translate, row.resize, row.translate_crop);
        assert_crop(cfg.crops.test, row.resize, row.translate_crop);
        cfg.validate().unwrap();
    }
}

#[test]
fn mr2ct_preset_loads_its_row() {
    let cfg = ExperimentConfig::preset("mr2ct").unwrap();
    assert_eq!(cfg.da.loss.zeta, 4.0);
    assert_eq!(cfg.crops.da, Some(CropSpec::center(192, 192)));
    assert_eq!(cfg.model.segmenter_kind, SegmenterKind::NestedUnet);
    assert_eq!(cfg.da.batch_size, 8);
    assert_eq!(cfg.da.total_epochs, 100);
}

#[test]
fn every_shipped_preset_parses_and_validates() {
    let names: Vec<&str> = preset_names().collect();
    for row in &TABLE {
        assert!(names.contains(&row.preset));
    }
    for name in names {
        let cfg = ExperimentConfig::preset(name).unwrap();
        cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!((cfg.da.loss.alpha, cfg.da.loss.beta, cfg.da.loss.gamma), (ALPHA, BETA, GAMMA));
    }
    assert!(ExperimentConfig::preset("nope").is_err());
}
