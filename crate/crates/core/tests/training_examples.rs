//! Desk-scale training examples on synthetic data. These train real models
//! and take around a minute each.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uglyduck_core::detector::{
    detect_tile, labelled_tiles, neural, train_neural_detector, ClassicalParams, DetectorModel,
    LabelledTile, NeuralTrainConfig,
};
use uglyduck_core::evalmetrics::Label;
use uglyduck_core::image::{Plane, RgbImage};
use uglyduck_core::scoring::embedding_distances;
use uglyduck_core::segmenter::{
    build_compact_unet, lesion_pairs, mask_iou, mask_pixels, segment_all, select_threshold, skin_negatives, train_segmenter,
    MaskingPolicy, SegmenterModel, SegmenterTrainConfig,
};
use uglyduck_core::synthgen::{generate_patient, SynthConfig, SynthGroundTruth};
use uglyduck_core::tiling::{tile_image, Tile, TileGrid};
use uglyduck_core::vae::{
    embed, embed_all, finetune, pretrain_base, recon_score, train_scratch, ModeTag, VaeConfig, VaeModel, SCRATCH_EPOCHS,
};

fn tiles(seeds: std::ops::Range<u64>) -> (Vec<LabelledTile>, Vec<Tile>) {
    let grid = TileGrid { tile_size: 512, overlap_fraction: 0.5 };
    let (mut labelled, mut raw) = (Vec::new(), Vec::new());
    for s in seeds {
        let (img, truth) = generate_patient(&SynthConfig { seed: s, ..SynthConfig::default() }).unwrap();
        labelled.extend(labelled_tiles(&img, &truth, grid).unwrap());
        raw.extend(tile_image(&img, 512, 0.5).unwrap());
    }
    (labelled, raw)
}

#[test]
fn neural_detector_reaches_recall_on_held_out_tiles() {
    let (train, _) = tiles(100..109);
    let (val, val_raw) = tiles(500..503);
    let cfg = NeuralTrainConfig { epochs: 20, ..NeuralTrainConfig::default() };
    let (model, history) = train_neural_detector(&train[..200], &cfg).unwrap();
    assert!(history.last() < history.first(), "{history:?}");
    let truths: Vec<_> = val[..50].iter().map(|t| t.boxes.clone()).collect();
    let preds: Vec<_> = val_raw[..50].iter().map(|t| detect_tile(&model, t).unwrap()).collect();
    let recall = neural::recall(&preds, &truths, 0.3);
    let classical = DetectorModel::classical(ClassicalParams::default(), 0.05);
    let base: Vec<_> = val_raw[..50].iter().map(|t| detect_tile(&classical, t).unwrap()).collect();
    let base_recall = neural::recall(&base, &truths, 0.3);
    println!("neural recall {recall:.3}, classical baseline {base_recall:.3}");
    assert!(recall >= 0.9, "recall {recall}");
}

type Pairs = Vec<(RgbImage, Plane<u8>)>;

fn seg_data(seeds: std::ops::Range<u64>, n_pos: usize, n_neg: usize) -> (Pairs, Vec<RgbImage>) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for s in seeds {
        let (img, truth) = generate_patient(&SynthConfig { seed: s, n_outliers: 2, ..SynthConfig::default() }).unwrap();
        pos.extend(lesion_pairs(&img, &truth, 64));
        neg.extend(skin_negatives(&img, &truth, 64, 10, &mut rng));
    }
    pos.truncate(n_pos);
    neg.truncate(n_neg);
    (pos, neg)
}

fn check_segmenter(epochs: usize, n_pos: usize, n_neg: usize) {
    let (pos, neg) = seg_data(0..12, n_pos, n_neg);
    let (val, val_neg) = seg_data(1000..1003, 100, 30);
    assert_eq!((pos.len(), neg.len(), val.len()), (n_pos, n_neg, 100));
    let cfg = SegmenterTrainConfig { epochs, ..SegmenterTrainConfig::default() };
    let (mut model, log) = train_segmenter(build_compact_unet(16, 0).unwrap(), &pos, &neg, &cfg, 0).unwrap();
    assert!(log.warnings.is_empty());
    model.binary_threshold = select_threshold(&model, &val).unwrap();

    let crops: Vec<RgbImage> = val.iter().map(|(c, _)| c.clone()).collect();
    let masks = segment_all(&model, &crops).unwrap();
    let miou = masks.iter().zip(&val).map(|(m, (_, g))| mask_iou(&m.binary, g)).sum::<f64>() / val.len() as f64;
    let worst_skin = segment_all(&model, &val_neg).unwrap().iter().map(|m| m.foreground_fraction()).fold(0.0, f64::max);
    println!("segmenter mIoU {miou:.3}, threshold {}, worst skin-only foreground {worst_skin:.4}", model.binary_threshold);
    assert!(miou >= 0.7, "mIoU {miou}");
    assert!(worst_skin < 0.05, "skin-only foreground {worst_skin}");
    assert_eq!(segment_all(&model, &crops[..4]).unwrap(), masks[..4].to_vec());

    // the selected threshold travels in the sidecar and is used after reload
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("seg.ckpt");
    model.save(&path).unwrap();
    let loaded = SegmenterModel::load(&path).unwrap();
    assert_eq!(loaded.binary_threshold, model.binary_threshold);
    assert_eq!(segment_all(&loaded, &crops[..8]).unwrap(), masks[..8].to_vec());
}

#[test]
fn segmenter_learns_masks_at_reduced_scale() {
    check_segmenter(5, 160, 32);
}

#[test]
#[ignore = "full-size example, about 15 minutes on one core"]
fn segmenter_learns_masks_full_example() {
    check_segmenter(30, 500, 100);
}

/// VAE inputs are masked lesions; ground-truth masks stand in for a perfect segmenter.
fn lesion_crops(img: &uglyduck_core::image::WideFieldImage, truth: &SynthGroundTruth) -> Vec<RgbImage> {
    lesion_pairs(img, truth, 64).iter().map(|(c, m)| mask_pixels(c, m, MaskingPolicy::MeanSkinFill).unwrap()).collect()
}

fn split_by_label<T: Copy>(values: &[T], truth: &SynthGroundTruth) -> (Vec<T>, Vec<T>) {
    let (mut out, mut inl) = (Vec::new(), Vec::new());
    for (i, v) in values.iter().enumerate() {
        if truth.labels[&(i as u32)] == Label::Ud { out.push(*v) } else { inl.push(*v) }
    }
    (out, inl)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn vae_memorises_identical_copies() {
    let (img, truth) = generate_patient(&SynthConfig { seed: 3, n_common: 5, ..SynthConfig::default() }).unwrap();
    let crop = lesion_crops(&img, &truth).remove(0);
    let copies = vec![crop.clone(); 50];
    let cfg = VaeConfig::default();
    let (model, log) = train_scratch(&copies, SCRATCH_EPOCHS, &cfg, 1).unwrap();
    assert_eq!(log.recon_per_epoch.len(), SCRATCH_EPOCHS);
    let (first, last) = (log.recon_per_epoch[0], log.recon_per_epoch[SCRATCH_EPOCHS - 1]);
    println!("identical copies: first epoch {first:.5}, final epoch {last:.7}, mu-decoded {:.5}", recon_score(&model, &crop).unwrap());
    assert!(last < 0.01 * first, "final {last} vs first {first}");

    let (_, again) = train_scratch(&copies[..10], 2, &cfg, 4).unwrap();
    let (_, same) = train_scratch(&copies[..10], 2, &cfg, 4).unwrap();
    assert_eq!(again.recon_per_epoch, same.recon_per_epoch);
    assert_eq!(again.kl_per_epoch, same.kl_per_epoch);
}

#[test]
fn scratch_vae_reconstructs_outliers_worse() {
    let (img, truth) = generate_patient(&SynthConfig { seed: 21, n_common: 45, n_outliers: 5, ..SynthConfig::default() }).unwrap();
    let crops = lesion_crops(&img, &truth);
    let (model, _) = train_scratch(&crops, SCRATCH_EPOCHS, &VaeConfig::default(), 2).unwrap();
    let scores: Vec<f64> = crops.iter().map(|c| recon_score(&model, c).unwrap()).collect();
    let (out, inl) = split_by_label(&scores, &truth);
    println!("recon: outliers {:.5}, inliers {:.5}", mean(&out), mean(&inl));
    assert!(mean(&out) > mean(&inl));
}

#[test]
fn base_pretraining_and_finetuning() {
    let cfg = VaeConfig::default();
    let corpus: Vec<(String, Vec<RgbImage>)> = (0..30)
        .map(|s| {
            let (img, truth) = generate_patient(&SynthConfig { seed: 800 + s, n_common: 8, ..SynthConfig::default() }).unwrap();
            (truth.patient_id.clone(), lesion_crops(&img, &truth))
        })
        .collect();
    let (base, _) = pretrain_base(&corpus, 12, &cfg, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.ckpt");
    base.save(&path, None, 3).unwrap();
    let (loaded, side) = VaeModel::load(&path).unwrap();
    assert_eq!(side.mode_tag, ModeTag::Base);
    let probe = &corpus[0].1[0];
    assert_eq!(embed(&loaded, 0, probe).unwrap(), embed(&base, 0, probe).unwrap());

    // 10 finetune epochs separate planted outliers in latent space
    let (img, truth) = generate_patient(&SynthConfig { seed: 31, n_common: 40, n_outliers: 3, ..SynthConfig::default() }).unwrap();
    let crops = lesion_crops(&img, &truth);
    let (tuned, _) = finetune(&base, &crops, 10, &cfg, 3).unwrap();
    let refs: Vec<(u32, &RgbImage)> = crops.iter().enumerate().map(|(i, c)| (i as u32, c)).collect();
    let d = embedding_distances("p", &embed_all(&tuned, &refs).unwrap()).unwrap();
    let (out, inl) = split_by_label(&d.values(), &truth);
    println!("finetuned distances: outliers {:.3}, inliers {:.3}", mean(&out), mean(&inl));
    assert!(mean(&out) > mean(&inl));

    // reconstruction score ranks the outlier above the typical inlier in most patients
    let mut wins = 0;
    for seed in 0..20 {
        let (img, truth) = generate_patient(&SynthConfig { seed: 900 + seed, n_common: 20, ..SynthConfig::default() }).unwrap();
        let crops = lesion_crops(&img, &truth);
        let (tuned, _) = finetune(&base, &crops, 10, &cfg, seed).unwrap();
        let scores: Vec<f64> = crops.iter().map(|c| recon_score(&tuned, c).unwrap()).collect();
        let (out, inl) = split_by_label(&scores, &truth);
        wins += (out[0] > mean(&inl)) as usize;
    }
    println!("recon outlier > mean inlier in {wins}/20 patients");
    assert!(wins >= 16, "{wins}/20");
}
