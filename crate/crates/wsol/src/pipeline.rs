//! Stage orchestration and artifact persistence. The pipeline is seven
//! stages run in a fixed order; each stage reads its prerequisites from
//! the output directory and writes its own artifacts, so `run_pipeline`
//! is literally the composition of the individual stages.
//!
//! Images are always regenerated from (seed, index) rather than decoded
//! from the dumped PNGs: the PNG dump quantizes to 8 bits and exists for
//! inspection only. This keeps every stage bit-reproducible.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, RgbImage};
use wsol_tensor::{ndfile, Tensor};

use crate::cam::CamMap;
use crate::checkpoint;
use crate::classifier::{rank_logits, train_classifier, Classifier};
use crate::config::Config;
use crate::error::{Result, WsolError};
use crate::gppl::{enhance_cam, fit_weighted_gaussian, render_gaussian, trichotomize, PixelClass, PseudoLabel};
use crate::localization::{binarize, evaluate, extract_bbox, BBox, EvalRecord, Metrics};
use crate::mffnet::{compute_cam, train_mffnet, MffNet};
use crate::seeding::{derive_rng, streams};
use crate::segmentation::{train_segmenter, SegNet};
use crate::synthdata::{generate_range, Sample, NUM_CLASSES};

// ── Stages ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    TrainCam,
    MakePseudo,
    TrainSeg,
    TrainCls,
    Infer,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenData,
        Stage::TrainCam,
        Stage::MakePseudo,
        Stage::TrainSeg,
        Stage::TrainCls,
        Stage::Infer,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainCam => "train-cam",
            Stage::MakePseudo => "make-pseudo",
            Stage::TrainSeg => "train-seg",
            Stage::TrainCls => "train-cls",
            Stage::Infer => "infer",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = WsolError;

    fn from_str(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|stage| stage.name() == s)
            .ok_or_else(|| {
                WsolError::Config(format!(
                    "unknown stage '{s}'; expected one of {}",
                    Stage::ALL.map(Stage::name).join(", ")
                ))
            })
    }
}

// ── Output layout ────────────────────────────────────────────────────

/// All artifact paths under one output directory.
pub struct Layout {
    pub out: PathBuf,
}

impl Layout {
    pub fn new(out: &Path) -> Layout {
        Layout { out: out.to_path_buf() }
    }

    pub fn config(&self) -> PathBuf {
        self.out.join("config.txt")
    }
    pub fn dataset_dir(&self) -> PathBuf {
        self.out.join("dataset")
    }
    pub fn split_manifest(&self, split: &str) -> PathBuf {
        self.dataset_dir().join(format!("{split}_manifest.txt"))
    }
    pub fn sample_png(&self, split: &str, index: u64) -> PathBuf {
        self.dataset_dir().join(split).join(format!("{index:05}.png"))
    }
    pub fn net1_dir(&self) -> PathBuf {
        self.out.join("net1")
    }
    pub fn net2_dir(&self) -> PathBuf {
        self.out.join("net2")
    }
    pub fn cls_dir(&self) -> PathBuf {
        self.out.join("cls")
    }
    pub fn loss_curve(&self, dir: &Path) -> PathBuf {
        dir.join("loss.txt")
    }
    pub fn cams_dir(&self) -> PathBuf {
        self.out.join("cams")
    }
    pub fn cam_nd(&self, index: u64) -> PathBuf {
        self.cams_dir().join(format!("cam_{index:05}.{}", ndfile::EXTENSION))
    }
    pub fn cam_png(&self, index: u64) -> PathBuf {
        self.cams_dir().join(format!("cam_{index:05}.png"))
    }
    pub fn pseudo_dir(&self) -> PathBuf {
        self.out.join("pseudo")
    }
    pub fn pseudo_png(&self, index: u64) -> PathBuf {
        self.pseudo_dir().join(format!("label_{index:05}.png"))
    }
    pub fn skipped(&self) -> PathBuf {
        self.pseudo_dir().join("skipped.txt")
    }
    pub fn records(&self) -> PathBuf {
        self.out.join("infer").join("records.txt")
    }
    pub fn report(&self) -> PathBuf {
        self.out.join("report.json")
    }

    fn checkpoint_manifest(&self, dir: &Path) -> PathBuf {
        dir.join(checkpoint::MANIFEST)
    }
}

fn require(stage: &'static str, paths: &[PathBuf]) -> Result<()> {
    let missing: Vec<PathBuf> = paths.iter().filter(|p| !p.exists()).cloned().collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(WsolError::MissingArtifacts { stage, missing })
    }
}

// ── Sample regeneration ──────────────────────────────────────────────

pub fn train_samples(cfg: &Config) -> Result<Vec<Sample>> {
    generate_range(cfg.seed, 0, cfg.train_count, cfg.image_size)
}

pub fn test_samples(cfg: &Config) -> Result<Vec<Sample>> {
    generate_range(cfg.seed, cfg.train_count as u64, cfg.test_count, cfg.image_size)
}

fn images_of(samples: &[Sample]) -> Vec<Tensor<f32>> {
    samples.iter().map(|s| s.image.clone()).collect()
}

fn labels_of(samples: &[Sample]) -> Vec<usize> {
    samples.iter().map(|s| s.label).collect()
}

// ── Image encoding ───────────────────────────────────────────────────

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_rgb_png(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let data = image.data();
    let mut raw = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        raw.push(to_u8(data[i]));
        raw.push(to_u8(data[plane + i]));
        raw.push(to_u8(data[2 * plane + i]));
    }
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("raw buffer sized to image");
    img.save(path)?;
    Ok(())
}

fn write_gray_png(values: &[f32], h: usize, w: usize, path: &Path) -> Result<()> {
    let raw: Vec<u8> = values.iter().map(|&v| to_u8(v)).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, raw).expect("raw buffer sized to image");
    img.save(path)?;
    Ok(())
}

const PSEUDO_BG: u8 = 0;
const PSEUDO_CONFLICT: u8 = 128;
const PSEUDO_FG: u8 = 255;

fn write_pseudo_png(label: &PseudoLabel, path: &Path) -> Result<()> {
    let raw: Vec<u8> = label
        .classes
        .iter()
        .map(|c| match c {
            PixelClass::Background => PSEUDO_BG,
            PixelClass::Conflict => PSEUDO_CONFLICT,
            PixelClass::Foreground => PSEUDO_FG,
        })
        .collect();
    let img = GrayImage::from_raw(label.w as u32, label.h as u32, raw)
        .expect("raw buffer sized to label");
    img.save(path)?;
    Ok(())
}

pub fn read_pseudo_png(path: &Path) -> Result<PseudoLabel> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let classes = img
        .into_raw()
        .into_iter()
        .map(|v| match v {
            PSEUDO_BG => Ok(PixelClass::Background),
            PSEUDO_CONFLICT => Ok(PixelClass::Conflict),
            PSEUDO_FG => Ok(PixelClass::Foreground),
            other => Err(WsolError::Format {
                what: "pseudo label pixel",
                detail: format!("{} has value {other}, expected 0/128/255", path.display()),
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoLabel { h, w, classes })
}

fn write_loss_curve(path: &Path, curve: &[f64]) -> Result<()> {
    let mut text = String::with_capacity(curve.len() * 24);
    for v in curve {
        text.push_str(&format!("{v:?}\n"));
    }
    fs::write(path, text)?;
    Ok(())
}

// ── Model reconstruction ─────────────────────────────────────────────

fn load_mffnet(cfg: &Config, dir: &Path) -> Result<MffNet> {
    let mut rng = derive_rng(cfg.seed, streams::INIT_CAM, 0);
    let mut net = MffNet::new(&mut rng, cfg, NUM_CLASSES);
    let names: Vec<String> = net.named_params().iter().map(|(n, _)| n.clone()).collect();
    checkpoint::load(dir, checkpoint::name_slots(names, net.params_mut()))?;
    Ok(net)
}

fn load_segnet(cfg: &Config, dir: &Path) -> Result<SegNet> {
    let mut rng = derive_rng(cfg.seed, streams::INIT_SEG, 0);
    let mut net = SegNet::new(&mut rng, cfg);
    let names: Vec<String> = net.named_params().iter().map(|(n, _)| n.clone()).collect();
    checkpoint::load(dir, checkpoint::name_slots(names, net.params_mut()))?;
    Ok(net)
}

fn load_classifier(cfg: &Config, dir: &Path) -> Result<Classifier> {
    let mut rng = derive_rng(cfg.seed, streams::INIT_CLS, 0);
    let mut net = Classifier::new(&mut rng, NUM_CLASSES);
    let names: Vec<String> = net.named_params().iter().map(|(n, _)| n.clone()).collect();
    checkpoint::load(dir, checkpoint::name_slots(names, net.params_mut()))?;
    Ok(net)
}

// ── CAM to mask ──────────────────────────────────────────────────────

/// Gaussian-enhanced (when enabled) CAM upsampled to image resolution.
/// `None` when the CAM has no positive response at all.
fn cam_to_full_res(cam: &CamMap, cfg: &Config) -> Result<Option<CamMap>> {
    if cfg.gauss {
        match fit_weighted_gaussian(cam) {
            Err(WsolError::EmptyCam) => Ok(None),
            Err(e) => Err(e),
            Ok(params) => {
                let gmap = render_gaussian(&params, cam.h, cam.w);
                let enhanced = enhance_cam(cam, &gmap, cfg.t_gauss)?;
                Ok(Some(enhanced.resized(cfg.image_size, cfg.image_size, cfg.upsample)))
            }
        }
    } else if cam.values.iter().all(|v| *v == 0.0) {
        Ok(None)
    } else {
        Ok(Some(cam.resized(cfg.image_size, cfg.image_size, cfg.upsample)))
    }
}

// ── Stage implementations ────────────────────────────────────────────

fn gen_data(cfg: &Config, lay: &Layout) -> Result<()> {
    fs::create_dir_all(lay.out.as_path())?;
    fs::write(lay.config(), cfg.to_text())?;
    for (split, samples, base) in [
        ("train", train_samples(cfg)?, 0u64),
        ("test", test_samples(cfg)?, cfg.train_count as u64),
    ] {
        fs::create_dir_all(lay.dataset_dir().join(split))?;
        let mut manifest = String::from("# index,label,x_min,y_min,x_max,y_max\n");
        for (k, s) in samples.iter().enumerate() {
            let index = base + k as u64;
            let b = s.gt_box;
            manifest.push_str(&format!(
                "{index},{},{},{},{},{}\n",
                s.label, b.x_min, b.y_min, b.x_max, b.y_max
            ));
            write_rgb_png(&s.image, &lay.sample_png(split, index))?;
        }
        fs::write(lay.split_manifest(split), manifest)?;
    }
    Ok(())
}

fn train_cam(cfg: &Config, lay: &Layout) -> Result<()> {
    require("train-cam", &[lay.split_manifest("train")])?;
    let samples = train_samples(cfg)?;
    let (net, curve) = train_mffnet(&images_of(&samples), &labels_of(&samples), NUM_CLASSES, cfg)?;
    checkpoint::save(&lay.net1_dir(), cfg, &net.named_params())?;
    write_loss_curve(&lay.loss_curve(&lay.net1_dir()), &curve)?;
    Ok(())
}

fn make_pseudo(cfg: &Config, lay: &Layout) -> Result<()> {
    if !cfg.seg {
        return Ok(()); // segmentation disabled: pseudo labels are unused
    }
    require(
        "make-pseudo",
        &[lay.split_manifest("train"), lay.checkpoint_manifest(&lay.net1_dir())],
    )?;
    let net = load_mffnet(cfg, &lay.net1_dir())?;
    let samples = train_samples(cfg)?;
    fs::create_dir_all(lay.cams_dir())?;
    fs::create_dir_all(lay.pseudo_dir())?;
    let mut skipped: Vec<u64> = Vec::new();
    let mut chunk_start = 0usize;
    for chunk in samples.chunks(cfg.batch_size) {
        let batch = Tensor::stack(&chunk.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
        let out = net.infer(&batch)?;
        for (k, sample) in chunk.iter().enumerate() {
            let index = (chunk_start + k) as u64;
            let fused = out.fused_map.slice_first(k);
            let cam = compute_cam(&fused, &net.cls_weight, sample.label)?;
            ndfile::write(
                &lay.cam_nd(index),
                &Tensor::new(vec![cam.h, cam.w], cam.values.clone())?,
            )?;
            write_gray_png(&cam.values, cam.h, cam.w, &lay.cam_png(index))?;
            match cam_to_full_res(&cam, cfg)? {
                None => skipped.push(index),
                Some(full) => {
                    let label = trichotomize(&full, cfg.t_fg, cfg.t_bg)?;
                    write_pseudo_png(&label, &lay.pseudo_png(index))?;
                }
            }
        }
        chunk_start += chunk.len();
    }
    let mut log = format!("# images skipped for empty activation maps: {}\n", skipped.len());
    for index in skipped {
        log.push_str(&format!("{index}\n"));
    }
    fs::write(lay.skipped(), log)?;
    Ok(())
}

fn train_seg(cfg: &Config, lay: &Layout) -> Result<()> {
    if !cfg.seg {
        return Ok(());
    }
    require("train-seg", &[lay.pseudo_dir(), lay.skipped()])?;
    let samples = train_samples(cfg)?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (index, sample) in samples.iter().enumerate() {
        let path = lay.pseudo_png(index as u64);
        if path.exists() {
            images.push(sample.image.clone());
            labels.push(read_pseudo_png(&path)?);
        }
    }
    if images.is_empty() {
        return Err(WsolError::Format {
            what: "pseudo label set",
            detail: format!("no usable labels under {}", lay.pseudo_dir().display()),
        });
    }
    let (net, curve) = train_segmenter(&images, &labels, cfg)?;
    checkpoint::save(&lay.net2_dir(), cfg, &net.named_params())?;
    write_loss_curve(&lay.loss_curve(&lay.net2_dir()), &curve)?;
    Ok(())
}

fn train_cls(cfg: &Config, lay: &Layout) -> Result<()> {
    require("train-cls", &[lay.split_manifest("train")])?;
    let samples = train_samples(cfg)?;
    let (net, curve) =
        train_classifier(&images_of(&samples), &labels_of(&samples), NUM_CLASSES, cfg)?;
    checkpoint::save(&lay.cls_dir(), cfg, &net.named_params())?;
    write_loss_curve(&lay.loss_curve(&lay.cls_dir()), &curve)?;
    Ok(())
}

fn infer(cfg: &Config, lay: &Layout) -> Result<()> {
    let mut prereqs = vec![
        lay.split_manifest("test"),
        lay.checkpoint_manifest(&lay.cls_dir()),
    ];
    if cfg.seg {
        prereqs.push(lay.checkpoint_manifest(&lay.net2_dir()));
    } else {
        prereqs.push(lay.checkpoint_manifest(&lay.net1_dir()));
    }
    require("infer", &prereqs)?;

    let classifier = load_classifier(cfg, &lay.cls_dir())?;
    let seg_net = if cfg.seg { Some(load_segnet(cfg, &lay.net2_dir())?) } else { None };
    let cam_net = if cfg.seg { None } else { Some(load_mffnet(cfg, &lay.net1_dir())?) };

    let samples = test_samples(cfg)?;
    let size = cfg.image_size;
    let mut lines = String::from("# index pred_box class_ranks gt_box gt_class\n");
    let mut next_index = cfg.train_count as u64;
    for chunk in samples.chunks(cfg.batch_size) {
        let batch = Tensor::stack(&chunk.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
        let ranks = classifier.predict_ranks(&batch)?;
        let mut boxes: Vec<Option<BBox>> = Vec::with_capacity(chunk.len());
        if let Some(net) = &seg_net {
            let probs = net.predict(&batch)?;
            for k in 0..chunk.len() {
                let plane = probs.slice_first(k); // (1, S, S)
                let mask = binarize(size, size, plane.data(), cfg.tau);
                boxes.push(extract_bbox(&mask));
            }
        } else {
            let net = cam_net.as_ref().unwrap();
            let out = net.infer(&batch)?;
            for k in 0..chunk.len() {
                let logits = out.logits.slice_first(k);
                let top1 = rank_logits(logits.data())[0];
                let fused = out.fused_map.slice_first(k);
                let cam = compute_cam(&fused, &net.cls_weight, top1)?;
                boxes.push(match cam_to_full_res(&cam, cfg)? {
                    None => None,
                    Some(full) => {
                        let mask = binarize(size, size, &full.values, cfg.tau);
                        extract_bbox(&mask)
                    }
                });
            }
        }
        for ((sample, rank), bbox) in chunk.iter().zip(&ranks).zip(&boxes) {
            lines.push_str(&format_record(next_index, bbox, rank, &sample.gt_box, sample.label));
            lines.push('\n');
            next_index += 1;
        }
    }
    fs::create_dir_all(lay.records().parent().unwrap())?;
    fs::write(lay.records(), lines)?;
    Ok(())
}

fn eval(_cfg: &Config, lay: &Layout) -> Result<()> {
    require("eval", &[lay.records()])?;
    let text = fs::read_to_string(lay.records())?;
    let records = parse_records(&text)?;
    let metrics = evaluate(&records)?;
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    fs::write(lay.report(), json + "\n")?;
    Ok(())
}

// ── Record serialization ─────────────────────────────────────────────

fn format_box(b: &BBox) -> String {
    format!("{},{},{},{}", b.x_min, b.y_min, b.x_max, b.y_max)
}

fn format_record(
    index: u64,
    pred: &Option<BBox>,
    ranks: &[usize],
    gt: &BBox,
    gt_class: usize,
) -> String {
    let pred = pred.as_ref().map_or_else(|| "none".to_string(), format_box);
    let ranks = ranks
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(";");
    format!("{index} {pred} {ranks} {} {gt_class}", format_box(gt))
}

fn parse_box(s: &str) -> Result<BBox> {
    let parts: Vec<&str> = s.split(',').collect();
    let bad = |detail: String| WsolError::Format { what: "bounding box", detail };
    if parts.len() != 4 {
        return Err(bad(format!("'{s}' does not have four coordinates")));
    }
    let mut nums = [0usize; 4];
    for (n, p) in nums.iter_mut().zip(&parts) {
        *n = p.parse().map_err(|_| bad(format!("'{p}' is not a pixel coordinate")))?;
    }
    if nums[0] > nums[2] || nums[1] > nums[3] {
        return Err(bad(format!("'{s}' has inverted extents")));
    }
    Ok(BBox::new(nums[0], nums[1], nums[2], nums[3]))
}

pub fn parse_records(text: &str) -> Result<Vec<EvalRecord>> {
    let bad = |detail: String| WsolError::Format { what: "eval record", detail };
    let mut records = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(bad(format!("'{line}' does not have five fields")));
        }
        let pred_box = if fields[1] == "none" { None } else { Some(parse_box(fields[1])?) };
        let class_ranks = fields[2]
            .split(';')
            .map(|r| r.parse::<usize>().map_err(|_| bad(format!("bad rank '{r}'"))))
            .collect::<Result<Vec<_>>>()?;
        let mut seen = class_ranks.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != class_ranks.len() {
            return Err(bad(format!("'{line}' repeats a class rank")));
        }
        let gt_box = parse_box(fields[3])?;
        let gt_class = fields[4]
            .parse()
            .map_err(|_| bad(format!("bad class '{}'", fields[4])))?;
        records.push(EvalRecord {
            pred_box,
            class_ranks,
            gt_box,
            gt_class,
        });
    }
    Ok(records)
}

// ── Entry points ─────────────────────────────────────────────────────

pub fn run_stage(stage: Stage, cfg: &Config, out: &Path) -> Result<()> {
    let lay = Layout::new(out);
    let result = match stage {
        Stage::GenData => gen_data(cfg, &lay),
        Stage::TrainCam => train_cam(cfg, &lay),
        Stage::MakePseudo => make_pseudo(cfg, &lay),
        Stage::TrainSeg => train_seg(cfg, &lay),
        Stage::TrainCls => train_cls(cfg, &lay),
        Stage::Infer => infer(cfg, &lay),
        Stage::Eval => eval(cfg, &lay),
    };
    result.map_err(|e| e.in_stage(stage.name()))
}

/// Runs every stage in order and returns the final metrics.
pub fn run_pipeline(cfg: &Config, out: &Path) -> Result<Metrics> {
    for stage in Stage::ALL {
        run_stage(stage, cfg, out)?;
    }
    read_report(out)
}

pub fn read_report(out: &Path) -> Result<Metrics> {
    let text = fs::read_to_string(Layout::new(out).report())?;
    serde_json::from_str(&text).map_err(|e| WsolError::Format {
        what: "metrics report",
        detail: e.to_string(),
    })
}
