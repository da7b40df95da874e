mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use uglyduck_core::config::{PipelineConfig, DETECTOR_FILE, SEGMENTER_FILE, VAE_BASE_FILE};
use uglyduck_core::detector::{labelled_tiles, train_neural_detector, DetectorKind, DetectorModel, NeuralTrainConfig};
use uglyduck_core::evalmetrics::{evaluate_corpus, read_ground_truth_csv, GroundTruth};
use uglyduck_core::image::WideFieldImage;
use uglyduck_core::pipeline::{analyze, detect_lesions, fit_segmenter, match_truth, pretraining_corpus, Models};
use uglyduck_core::scoring::{PatientReport, PipelineMode};
use uglyduck_core::segmenter::SegmenterModel;
use uglyduck_core::synthgen::{self, CorpusTemplate};
use uglyduck_core::vae::{corpus_fingerprint, pretrain_base};

use manifest::Manifest;

#[derive(Parser)]
#[command(name = "uglyduck", version, about = "Self-trained ugly-duckling lesion detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON pipeline config; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Detect lesions, or train the neural detector with --train.
    Detect {
        #[command(flatten)]
        common: Common,
        /// Wide-field images to run detection on.
        #[arg(long, required_unless_present = "train")]
        image: Vec<PathBuf>,
        /// Synthetic corpus directory to train the neural detector on.
        #[arg(long, conflicts_with = "image")]
        train: Option<PathBuf>,
    },
    /// Train the lesion segmenter on a synthetic corpus.
    SegmentTrain {
        #[command(flatten)]
        common: Common,
        /// Synthetic corpus directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Cap on (crop, mask) pairs drawn from the corpus.
        #[arg(long)]
        max_pairs: Option<usize>,
    },
    /// Pretrain the base VAE on lesions pooled from many patients.
    VaePretrain {
        #[command(flatten)]
        common: Common,
        /// Directory of wide-field PNG images.
        #[arg(long)]
        data: PathBuf,
    },
    /// Score one image, or every image in a directory.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// A PNG image or a directory of PNG images.
        #[arg(long)]
        image: PathBuf,
    },
    /// Evaluate a directory of reports against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory searched recursively for report.json files.
        #[arg(long)]
        reports: PathBuf,
        /// CSV with header patient_id,lesion_id,label keyed by report lesion ids.
        #[arg(long, required_unless_present = "match_boxes", conflicts_with = "match_boxes")]
        truth: Option<PathBuf>,
        /// Synthetic corpus directory; labels are transferred to detections by box overlap.
        #[arg(long)]
        match_boxes: Option<PathBuf>,
    },
    /// Generate a synthetic patient corpus.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of patients to generate.
        #[arg(long, default_value_t = 20)]
        patients: usize,
        /// Smallest number of common lesions per patient.
        #[arg(long)]
        n_common_min: Option<usize>,
        /// Largest number of common lesions per patient.
        #[arg(long)]
        n_common_max: Option<usize>,
        /// Fraction of patients with no planted outlier.
        #[arg(long)]
        ud_free_fraction: Option<f64>,
    },
}

struct Ctx {
    cfg: PipelineConfig,
    ud_home: Option<String>,
    out: Option<PathBuf>,
    config_path: Option<PathBuf>,
}

impl Ctx {
    fn new(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(Self {
            cfg,
            ud_home: std::env::var("UD_HOME").ok(),
            out: common.out.clone(),
            config_path: common.config.clone(),
        })
    }

    fn out_dir(&self, default: PathBuf) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or(default);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    /// Training commands default to the checkpoint directory so analyze finds their output.
    fn checkpoint_out(&self) -> Result<PathBuf> {
        self.out_dir(self.cfg.checkpoint_dir(self.ud_home.as_deref()))
    }

    fn detector(&self) -> Result<DetectorModel> {
        Ok(Models::load(&self.cfg.clone().with_detector_only(), self.ud_home.as_deref())?.detector)
    }

    fn manifest(&self, command: &str) -> Result<Manifest> {
        let mut m = Manifest::new(command, &self.cfg);
        if let Some(p) = &self.config_path {
            m.input(p)?;
        }
        Ok(m)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn png_inputs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_owned()]);
    }
    if !path.is_dir() {
        bail!("{} is neither an image nor a directory", path.display());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.ends_with(".png") && !name.ends_with("_masks.png") && name != "annotated.png"
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no PNG images found in {}", path.display());
    }
    Ok(files)
}

fn load_synth_dir(dir: &Path, m: &mut Manifest) -> Result<Vec<(WideFieldImage, synthgen::SynthGroundTruth)>> {
    let ids = synthgen::list_patients(dir).with_context(|| format!("listing {}", dir.display()))?;
    if ids.is_empty() {
        bail!("no *_truth.json files in {}; generate a corpus with `uglyduck synth`", dir.display());
    }
    ids.iter()
        .map(|pid| {
            m.input(&dir.join(format!("{pid}.png")))?;
            m.input(&dir.join(format!("{pid}_truth.json")))?;
            Ok(synthgen::load_patient(dir, pid)?)
        })
        .collect()
}

#[derive(Serialize)]
struct DetectionRecord {
    lesion_id: u32,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    confidence: f64,
}

#[derive(Serialize)]
struct Detections {
    patient_id: String,
    lesions: Vec<DetectionRecord>,
}

fn cmd_detect(common: &Common, images: &[PathBuf], train: Option<&Path>) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let cfg = &ctx.cfg;
    if let Some(dir) = train {
        let out = ctx.checkpoint_out()?;
        let mut m = ctx.manifest("detect --train")?;
        let patients = load_synth_dir(dir, &mut m)?;
        let mut tiles = Vec::new();
        for (img, truth) in &patients {
            tiles.extend(labelled_tiles(img, truth, cfg.grid())?);
        }
        let tcfg = NeuralTrainConfig { seed: cfg.seed, ..cfg.detector.training.clone() };
        let (model, history) = train_neural_detector(&tiles, &tcfg)?;
        let path = out.join(DETECTOR_FILE);
        model.save(&path, cfg.detector.crop_size)?;
        write_json(&out.join("detector_train_log.json"), &history)?;
        m.output(DETECTOR_FILE);
        m.output("detector_train_log.json");
        m.write(&out)?;
        println!("trained neural detector on {} tiles; wrote {}", tiles.len(), path.display());
        return Ok(());
    }
    let out = ctx.out_dir(PathBuf::from("."))?;
    let detector = ctx.detector()?;
    let mut m = ctx.manifest("detect")?;
    checkpoint_inputs(&cfg.clone().with_detector_only(), ctx.ud_home.as_deref(), &mut m)?;
    let mut paths = Vec::new();
    for p in images {
        paths.extend(png_inputs(p)?);
    }
    for path in paths {
        let img = WideFieldImage::load(&path)?;
        m.input(&path)?;
        let boxes = detect_lesions(&img, &detector, cfg)?;
        let record = Detections {
            patient_id: img.patient_id.clone(),
            lesions: boxes
                .iter()
                .map(|(id, b)| DetectionRecord { lesion_id: *id, bbox: b.coords(), confidence: b.confidence })
                .collect(),
        };
        let name = format!("{}_detections.json", img.patient_id);
        write_json(&out.join(&name), &record)?;
        println!("{}: {} lesions", img.patient_id, boxes.len());
        m.output(name);
    }
    m.write(&out)?;
    Ok(())
}

trait DetectorOnly {
    fn with_detector_only(self) -> Self;
}

impl DetectorOnly for PipelineConfig {
    /// Detection needs neither the segmenter nor a base VAE.
    fn with_detector_only(mut self) -> Self {
        self.segmenter.enabled = false;
        self.pipeline.mode = PipelineMode::Scratch;
        self
    }
}

fn cmd_segment_train(common: &Common, data: &Path, max_pairs: Option<usize>) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let out = ctx.checkpoint_out()?;
    let mut m = ctx.manifest("segment-train")?;
    let patients = load_synth_dir(data, &mut m)?;
    let fit = fit_segmenter(&patients, &ctx.cfg, max_pairs, ctx.cfg.seed)?;
    let path = out.join(SEGMENTER_FILE);
    fit.model.save(&path)?;
    #[derive(Serialize)]
    struct Log<'a> {
        train_pairs: usize,
        validation_pairs: usize,
        validation_miou: f64,
        binary_threshold: f64,
        trainable_param_count: usize,
        loss_per_epoch: &'a [f64],
        warnings: &'a [String],
        seconds: f64,
    }
    write_json(
        &out.join("segmenter_train_log.json"),
        &Log {
            train_pairs: fit.train_pairs,
            validation_pairs: fit.validation_pairs,
            validation_miou: fit.validation_miou,
            binary_threshold: fit.model.binary_threshold,
            trainable_param_count: fit.model.trainable_param_count,
            loss_per_epoch: &fit.log.loss_per_epoch,
            warnings: &fit.log.warnings,
            seconds: fit.log.seconds,
        },
    )?;
    m.output(SEGMENTER_FILE);
    m.output("segmenter_train_log.json");
    m.write(&out)?;
    println!(
        "segmenter: {} pairs, validation mIoU {:.3} at threshold {:.2}; wrote {}",
        fit.train_pairs,
        fit.validation_miou,
        fit.model.binary_threshold,
        path.display()
    );
    Ok(())
}

fn cmd_vae_pretrain(common: &Common, data: &Path) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let cfg = &ctx.cfg;
    let mut m = ctx.manifest("vae-pretrain")?;
    let detector = ctx.detector()?;
    checkpoint_inputs(&cfg.clone().with_detector_only(), ctx.ud_home.as_deref(), &mut m)?;
    let segmenter = if cfg.segmenter.enabled {
        let p = cfg.segmenter_checkpoint(ctx.ud_home.as_deref());
        if !p.exists() {
            bail!(
                "segmenter checkpoint {} not found; run `uglyduck segment-train` first or set segmenter.enabled to false",
                p.display()
            );
        }
        m.input(&p)?;
        let mut s = SegmenterModel::load(&p)?;
        s.masking_policy = cfg.segmenter.masking_policy;
        Some(s)
    } else {
        None
    };
    let mut images = Vec::new();
    for p in png_inputs(data)? {
        m.input(&p)?;
        images.push(WideFieldImage::load(&p)?);
    }
    let out = ctx.checkpoint_out()?;
    let corpus = pretraining_corpus(&images, &detector, segmenter.as_ref(), cfg)?;
    let fingerprint = corpus_fingerprint(&corpus);
    let (model, log) = pretrain_base(&corpus, cfg.vae.pretrain_epochs, &cfg.vae, cfg.seed)?;
    let path = out.join(VAE_BASE_FILE);
    model.save(&path, Some(fingerprint), cfg.seed)?;
    write_json(&out.join("vae_pretrain_log.json"), &log)?;
    m.output(VAE_BASE_FILE);
    m.output("vae_pretrain_log.json");
    m.write(&out)?;
    let n: usize = corpus.iter().map(|(_, c)| c.len()).sum();
    println!("pretrained base VAE on {n} lesions from {} patients; wrote {}", corpus.len(), path.display());
    Ok(())
}

/// Digests of the checkpoints `cfg` would load.
fn checkpoint_inputs(cfg: &PipelineConfig, home: Option<&str>, m: &mut Manifest) -> Result<()> {
    if cfg.segmenter.enabled {
        m.input(&cfg.segmenter_checkpoint(home))?;
    }
    if cfg.pipeline.mode != PipelineMode::Scratch {
        m.input(&cfg.vae_base_checkpoint(home))?;
    }
    if cfg.detector.kind == DetectorKind::Neural {
        m.input(&cfg.detector_checkpoint(home))?;
    }
    Ok(())
}

fn cmd_analyze(common: &Common, image: &Path) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let models = Models::load(&ctx.cfg, ctx.ud_home.as_deref())?;
    let inputs = png_inputs(image)?;
    let root = ctx.out_dir(PathBuf::from("."))?;
    let single = image.is_file();
    for path in &inputs {
        let img = WideFieldImage::load(path).with_context(|| format!("reading image {}", path.display()))?;
        let out = if single { root.clone() } else { root.join(&img.patient_id) };
        std::fs::create_dir_all(&out)?;
        let a = analyze(&img, &ctx.cfg, &models)?;
        for w in &a.warnings {
            eprintln!("warning: {w}");
        }
        std::fs::write(out.join("report.json"), a.report.to_json()?)?;
        a.annotated.save(&out.join("annotated.png"))?;
        let mut m = ctx.manifest("analyze")?;
        m.input(path)?;
        checkpoint_inputs(&ctx.cfg, ctx.ud_home.as_deref(), &mut m)?;
        m.output("report.json");
        m.output("annotated.png");
        m.write(&out)?;
        println!(
            "{}: {} lesions, {} flagged ({:?}, {:.1}s)",
            img.patient_id,
            a.report.lesions.len(),
            a.report.ud_ids().len(),
            a.report.status,
            a.timings.total_s
        );
    }
    Ok(())
}

fn find_reports(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_reports(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == "report.json") {
            found.push(p);
        }
    }
    Ok(())
}

fn cmd_eval(common: &Common, reports_dir: &Path, truth: Option<&Path>, match_boxes: Option<&Path>) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let out = ctx.out_dir(PathBuf::from("."))?;
    let mut m = ctx.manifest("eval")?;
    let mut paths = Vec::new();
    find_reports(reports_dir, &mut paths)?;
    if paths.is_empty() {
        bail!("no report.json files under {}", reports_dir.display());
    }
    let mut reports = Vec::new();
    for p in &paths {
        m.input(p)?;
        let text = std::fs::read_to_string(p)?;
        reports.push(PatientReport::from_json(&text).with_context(|| format!("parsing {}", p.display()))?);
    }
    let truths: Vec<GroundTruth> = if let Some(csv) = truth {
        m.input(csv)?;
        read_ground_truth_csv(csv)?
    } else {
        let dir = match_boxes.expect("clap requires --truth or --match-boxes");
        let mut missed = 0;
        let mut gts = Vec::new();
        for r in &reports {
            let truth_path = dir.join(format!("{}_truth.json", r.patient_id));
            m.input(&truth_path)?;
            let (_, t) = synthgen::load_patient(dir, &r.patient_id)
                .with_context(|| format!("no synthetic ground truth for {} in {}", r.patient_id, dir.display()))?;
            let matched = match_truth(r, &t);
            missed += matched.missed_uds;
            gts.push(matched.truth);
        }
        if missed > 0 {
            eprintln!("warning: {missed} planted outliers were not detected and are absent from the reports");
        }
        synthgen::write_ground_truth_csv(&out.join("matched_truth.csv"), &gts)?;
        m.output("matched_truth.csv");
        gts
    };
    let result = evaluate_corpus(&reports, &truths, ctx.cfg.scoring.topk_semantics)?;
    write_json(&out.join("eval.json"), &result)?;
    m.output("eval.json");
    m.write(&out)?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn cmd_synth(common: &Common, patients: usize, lo: Option<usize>, hi: Option<usize>, free: Option<f64>) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let out = ctx.out_dir(PathBuf::from("synth"))?;
    let mut template = CorpusTemplate::default();
    template.n_common_range = (lo.unwrap_or(template.n_common_range.0), hi.unwrap_or(template.n_common_range.1));
    if let Some(f) = free {
        template.ud_free_fraction = f;
    }
    let mut m = ctx.manifest("synth")?;
    let mut truths = Vec::new();
    for cfg in synthgen::corpus_configs(patients, ctx.cfg.seed, &template)? {
        let (img, truth) = synthgen::generate_patient(&cfg)?;
        synthgen::save_patient(&out, &img, &truth)?;
        for suffix in [".png", "_masks.png", "_truth.json"] {
            m.output(format!("{}{suffix}", truth.patient_id));
        }
        truths.push(truth.ground_truth());
    }
    synthgen::write_ground_truth_csv(&out.join("ground_truth.csv"), &truths)?;
    m.output("ground_truth.csv");
    m.write(&out)?;
    println!("wrote {patients} synthetic patients to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Detect { common, image, train } => cmd_detect(common, image, train.as_deref()),
        Command::SegmentTrain { common, data, max_pairs } => cmd_segment_train(common, data, *max_pairs),
        Command::VaePretrain { common, data } => cmd_vae_pretrain(common, data),
        Command::Analyze { common, image } => cmd_analyze(common, image),
        Command::Eval { common, reports, truth, match_boxes } => {
            cmd_eval(common, reports, truth.as_deref(), match_boxes.as_deref())
        }
        Command::Synth { common, patients, n_common_min, n_common_max, ud_free_fraction } => {
            cmd_synth(common, *patients, *n_common_min, *n_common_max, *ud_free_fraction)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
