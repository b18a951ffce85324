use std::fs;
use std::path::{Path, PathBuf};

use ldp_core::artifact::{encode_artifact, Artifact};
use ldp_core::autoencoder::{self, train_autoencoder, AEParams};
use ldp_core::corpus::natural_images;
use ldp_core::detector::{self, dump_dataset, generate_synthetic_dataset, train_detector, DetectorParams, GridConfig, PersonDetector};
use ldp_core::diffusion::{self, train_diffusion, DenoiserParams};
use ldp_core::evaluation::{
    cross_model_matrix, evaluate_patch, labelled_ap, pseudo_ground_truth, write_matrix_csv, write_reports_csv,
    EvalReport, NamedDetector,
};
use ldp_core::image::load_image_dir;
use ldp_core::patch::{self, optimize_patch, patch_from_artifact, write_loss_csv, AttackSetup, PrintColorSet};
use ldp_core::{ImageTensor, LdpError, RandomSource, Result};
use serde::Serialize;

use crate::config::PipelineConfig;

/// Exit code for invalid configuration, inputs or artifacts.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code for a training stage that diverged.
pub const EXIT_TRAINING: i32 = 3;
/// Exit code for an evaluation set without any ground-truth person.
pub const EXIT_NO_TARGETS: i32 = 4;

/// Scenes used to measure detector AP against true labels.
const DETECTOR_CHECK_SCENES: usize = 200;
/// Lowest score kept when measuring detector AP against true labels.
const DETECTOR_CHECK_FLOOR: f64 = 0.01;

/// Child streams of the run seed, one per consumer.
mod stream {
    pub const CORPUS: u64 = 1;
    pub const AE: u64 = 2;
    pub const DIFFUSION: u64 = 3;
    pub const DETECTOR_SCENES: u64 = 4;
    pub const DETECTOR: u64 = 5;
    pub const DETECTOR_CHECK: u64 = 6;
    pub const ATTACK_SCENES: u64 = 7;
    pub const ATTACK: u64 = 8;
    pub const EVAL_SCENES: u64 = 9;
    pub const EVAL_PLACEMENT: u64 = 10;
}

pub fn exit_code(e: &LdpError) -> i32 {
    match e {
        LdpError::Divergence(_) | LdpError::NonFinite(_) => EXIT_TRAINING,
        LdpError::Undefined(_) => EXIT_NO_TARGETS,
        _ => EXIT_CONFIG,
    }
}

pub struct Context {
    pub config: PipelineConfig,
    pub quiet: bool,
}

impl Context {
    fn seed(&self) -> u64 {
        self.config.seed
    }

    fn stream(&self, k: u64) -> RandomSource {
        RandomSource::new(self.seed()).child(k)
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    /// Training and held-out images for the autoencoder and diffusion model.
    fn corpus(&self) -> Result<(Vec<ImageTensor>, Vec<ImageTensor>)> {
        let d = &self.config.data;
        let size = self.config.autoencoder.image_size;
        match &d.corpus_dir {
            Some(dir) => {
                let mut images = load_image_dir(dir, size)?;
                if images.len() <= d.held_out_images {
                    return Err(LdpError::Config(format!(
                        "{} holds {} images, need more than data.held_out_images = {}",
                        dir.display(),
                        images.len(),
                        d.held_out_images
                    )));
                }
                let held = images.split_off(images.len() - d.held_out_images);
                Ok((images, held))
            }
            None => {
                let mut images = natural_images(d.corpus_images + d.held_out_images, size, &self.stream(stream::CORPUS));
                let held = images.split_off(d.corpus_images);
                Ok((images, held))
            }
        }
    }
}

/// Everything a command writes, assembled in memory before touching disk.
#[derive(Default)]
struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    fn add(&mut self, path: PathBuf, bytes: Vec<u8>) {
        self.files.push((path, bytes));
    }

    fn artifact(&mut self, path: &Path, art: &Artifact) -> Result<()> {
        self.add(path.to_path_buf(), encode_artifact(&art.kind, &art.arrays, &art.meta)?);
        Ok(())
    }

    fn json(&mut self, path: PathBuf, value: &impl Serialize) {
        let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
        text.push('\n');
        self.add(path, text.into_bytes());
    }

    fn png(&mut self, path: PathBuf, img: &ImageTensor) -> Result<()> {
        let bytes = img.png_bytes().map_err(|e| LdpError::Image(format!("{}: {e}", path.display())))?;
        self.add(path, bytes);
        Ok(())
    }

    /// Each file goes to a temporary sibling first and is renamed into place.
    fn commit(self) -> Result<()> {
        for (path, bytes) in self.files {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
            }
            let mut tmp = path.clone().into_os_string();
            tmp.push(".partial");
            let tmp = PathBuf::from(tmp);
            fs::write(&tmp, &bytes).map_err(|e| io_error(&tmp, e))?;
            fs::rename(&tmp, &path).map_err(|e| io_error(&path, e))?;
        }
        Ok(())
    }
}

fn io_error(path: &Path, e: std::io::Error) -> LdpError {
    LdpError::Config(format!("{}: {e}", path.display()))
}

/// `dir/stem{suffix}` for an output path `dir/stem.ext`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn model_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

fn load_ae(path: &Path, cfg: &PipelineConfig) -> Result<AEParams> {
    let art = Artifact::load(path)?;
    art.expect_kind(autoencoder::ARTIFACT_KIND)?;
    let ae = AEParams::from_artifact(&art)?;
    let (a, b) = (&ae.config, &cfg.autoencoder);
    if (a.image_size, a.downsample_factor, a.latent_depth) != (b.image_size, b.downsample_factor, b.latent_depth) {
        return Err(LdpError::Shape(format!(
            "{} was trained for {}px images, f={}, d={} but the config asks for {}px, f={}, d={}",
            path.display(),
            a.image_size,
            a.downsample_factor,
            a.latent_depth,
            b.image_size,
            b.downsample_factor,
            b.latent_depth
        )));
    }
    Ok(ae)
}

fn load_diffusion(path: &Path) -> Result<DenoiserParams> {
    let art = Artifact::load(path)?;
    art.expect_kind(diffusion::ARTIFACT_KIND)?;
    DenoiserParams::from_artifact(&art)
}

fn load_detector(path: &Path) -> Result<DetectorParams> {
    let art = Artifact::load(path)?;
    art.expect_kind(detector::ARTIFACT_KIND)?;
    DetectorParams::from_artifact(&art)
}

/// The patch image and the name of the detector it was optimized against.
fn load_patch(path: &Path) -> Result<(ImageTensor, String)> {
    let art = Artifact::load(path)?;
    art.expect_kind(patch::ARTIFACT_KIND)?;
    let name = art.meta.get("detector").cloned().unwrap_or_else(|| model_name(path));
    Ok((patch_from_artifact(&art)?, name))
}

#[derive(Serialize)]
struct AeMetrics {
    held_out_mse: f64,
    epoch_losses: Vec<f64>,
}

pub fn train_ae(ctx: &Context, out: &Path) -> Result<()> {
    let (train, held) = ctx.corpus()?;
    let (ae, log) = train_autoencoder(&train, &ctx.config.autoencoder, &mut ctx.stream(stream::AE))?;
    let mse = ae.reconstruction_mse(&held)?;
    let mut o = Outputs::default();
    o.artifact(out, &ae.to_artifact(ctx.seed()))?;
    o.json(sibling(out, ".metrics.json"), &AeMetrics { held_out_mse: mse, epoch_losses: log.epoch_losses });
    o.commit()?;
    ctx.say(format!("held-out reconstruction mse {mse:.6}"));
    Ok(())
}

#[derive(Serialize)]
struct DiffusionMetrics {
    latent_scale: f64,
    final_loss: f64,
    losses: Vec<f64>,
}

pub fn train_diffusion_cmd(ctx: &Context, ae_path: &Path, out: &Path) -> Result<()> {
    let ae = load_ae(ae_path, &ctx.config)?;
    let (train, _) = ctx.corpus()?;
    let latents = train.iter().map(|x| ae.encode(x)).collect::<Result<Vec<_>>>()?;
    let (params, losses) = train_diffusion(&latents, &ctx.config.diffusion, &mut ctx.stream(stream::DIFFUSION))?;
    let tail = &losses[losses.len().saturating_sub(100)..];
    let final_loss = tail.iter().sum::<f64>() / tail.len() as f64;
    let mut o = Outputs::default();
    o.artifact(out, &params.to_artifact(ctx.seed()))?;
    o.json(
        sibling(out, ".metrics.json"),
        &DiffusionMetrics { latent_scale: params.latent_scale, final_loss, losses },
    );
    o.commit()?;
    ctx.say(format!("denoiser loss {final_loss:.5} (mean of the last steps)"));
    Ok(())
}

#[derive(Serialize)]
struct DetectorMetrics {
    person_ap: f64,
    check_scenes: usize,
    losses: Vec<f64>,
}

pub fn train_detector_cmd(ctx: &Context, out: &Path) -> Result<()> {
    let grid = &ctx.config.detector.grid;
    let train = &ctx.config.detector.train;
    let scenes = generate_synthetic_dataset(train.scenes, grid, &ctx.stream(stream::DETECTOR_SCENES))?;
    let (det, losses) = train_detector(&scenes, grid, train, &mut ctx.stream(stream::DETECTOR))?;
    let check = generate_synthetic_dataset(DETECTOR_CHECK_SCENES, grid, &ctx.stream(stream::DETECTOR_CHECK))?;
    let ap = labelled_ap(&det, &check, grid.person_index(), DETECTOR_CHECK_FLOOR)?;
    let mut o = Outputs::default();
    o.artifact(out, &det.to_artifact(ctx.seed()))?;
    o.json(
        sibling(out, ".metrics.json"),
        &DetectorMetrics { person_ap: ap, check_scenes: DETECTOR_CHECK_SCENES, losses },
    );
    o.commit()?;
    ctx.say(format!("person AP@0.5 on {DETECTOR_CHECK_SCENES} held-out scenes: {ap:.4}"));
    Ok(())
}

pub fn gen_data(ctx: &Context, out: &Path) -> Result<()> {
    let (train, held) = ctx.corpus()?;
    let grid = &ctx.config.detector.grid;
    let scenes = generate_synthetic_dataset(ctx.config.detector.train.scenes, grid, &ctx.stream(stream::DETECTOR_SCENES))?;
    let mut o = Outputs::default();
    for (i, x) in train.iter().chain(&held).enumerate() {
        o.png(out.join("corpus").join(format!("image_{i:05}.png")), x)?;
    }
    o.commit()?;
    dump_dataset(&scenes, grid, out.join("scenes"))?;
    ctx.say(format!(
        "wrote {} corpus images and {} labelled scenes to {}",
        train.len() + held.len(),
        scenes.len(),
        out.display()
    ));
    Ok(())
}

fn palette(ctx: &Context) -> Result<PrintColorSet> {
    match &ctx.config.attack.palette {
        Some(p) => PrintColorSet::load(p),
        None => Ok(PrintColorSet::default_palette()),
    }
}

/// Optimizes one patch against `det` on the attack scenes.
fn attack(
    ctx: &Context,
    ae: &AEParams,
    diff: &DenoiserParams,
    det: &DetectorParams,
    colors: &PrintColorSet,
    rng: &mut RandomSource,
) -> Result<patch::PatchResult> {
    let cfg = &ctx.config;
    let scenes = generate_synthetic_dataset(cfg.attack.train_scenes, &det.config, &ctx.stream(stream::ATTACK_SCENES))?;
    let images: Vec<ImageTensor> = scenes.into_iter().map(|s| s.image).collect();
    let boxes = pseudo_ground_truth(det, &images, cfg.eval.gt_threshold)?;
    let sched = diff.config.attack_schedule()?;
    let setup = AttackSetup {
        ae,
        diff,
        sched: &sched,
        images: &images,
        boxes: &boxes,
        weights: cfg.attack.weights,
        transform: cfg.attack.transform,
        colors,
        config: cfg.attack.optimizer.clone(),
    };
    optimize_patch(&setup, det, rng)
}

pub fn optimize_patch_cmd(ctx: &Context, ae_path: &Path, diff_path: &Path, det_path: &Path, out: &Path) -> Result<()> {
    let ae = load_ae(ae_path, &ctx.config)?;
    let diff = load_diffusion(diff_path)?;
    let det = load_detector(det_path)?;
    let colors = palette(ctx)?;
    let result = attack(ctx, &ae, &diff, &det, &colors, &mut ctx.stream(stream::ATTACK))?;
    let mut art = result.to_artifact(&ctx.config.to_toml(), ctx.seed());
    art.meta.insert("detector".into(), model_name(det_path));
    let mut csv = Vec::new();
    write_loss_csv(&result.history, &mut csv)?;
    let mut o = Outputs::default();
    o.artifact(out, &art)?;
    o.png(sibling(out, ".png"), &result.patch)?;
    o.add(sibling(out, "_loss.csv"), csv);
    o.commit()?;
    let last = result.history.last().expect("at least one step");
    ctx.say(format!(
        "step {}: l_det {:.4} l_kl {:.4} l_tv {:.4} l_nps {:.4} l_total {:.4}",
        last.step, last.l_det, last.l_kl, last.l_tv, last.l_nps, last.l_total
    ));
    Ok(())
}

fn eval_images(ctx: &Context, images_dir: Option<&Path>, grid: &GridConfig) -> Result<Vec<ImageTensor>> {
    match images_dir {
        Some(dir) => load_image_dir(dir, grid.image_size),
        None => {
            let n = ctx.config.eval.held_out_images;
            Ok(generate_synthetic_dataset(n, grid, &ctx.stream(stream::EVAL_SCENES))?
                .into_iter()
                .map(|s| s.image)
                .collect())
        }
    }
}

/// Report as written to JSON: the stored fields plus confidence means.
#[derive(Serialize)]
pub struct ReportFile<'a> {
    #[serde(flatten)]
    pub report: &'a EvalReport,
    pub mean_clean_conf: f64,
    pub mean_patched_conf: f64,
}

impl<'a> ReportFile<'a> {
    fn new(report: &'a EvalReport) -> Self {
        Self { report, mean_clean_conf: report.mean_clean_conf(), mean_patched_conf: report.mean_patched_conf() }
    }
}

pub fn evaluate(ctx: &Context, det_path: &Path, patch_path: &Path, gray: bool, images_dir: Option<&Path>, out: &Path) -> Result<()> {
    let det = load_detector(det_path)?;
    let (mut patch, mut train_name) = load_patch(patch_path)?;
    if gray {
        patch = ImageTensor::filled(patch.height(), patch.width(), [0.5; 3]);
        train_name = "gray".into();
    }
    let images = eval_images(ctx, images_dir, &det.config)?;
    let report = evaluate_patch(
        &train_name,
        &model_name(det_path),
        &det,
        &images,
        &patch,
        &ctx.config.attack.transform,
        &ctx.config.eval,
        &ctx.stream(stream::EVAL_PLACEMENT),
    )?;
    let mut csv = Vec::new();
    write_reports_csv(std::slice::from_ref(&report), &mut csv)?;
    let mut o = Outputs::default();
    o.json(out.to_path_buf(), &ReportFile::new(&report));
    o.add(out.with_extension("csv"), csv);
    o.commit()?;
    ctx.say(format!(
        "clean mAP {:.2} patched mAP {:.2} ASR {:.2} mean max conf {:.4} -> {:.4}",
        report.clean_map,
        report.patched_map,
        report.asr,
        report.mean_clean_conf(),
        report.mean_patched_conf()
    ));
    Ok(())
}

pub struct CrossInputs<'a> {
    pub detectors: &'a [PathBuf],
    pub patches: &'a [PathBuf],
    pub ae: Option<&'a Path>,
    pub diffusion: Option<&'a Path>,
    pub images: Option<&'a Path>,
}

pub fn cross_eval(ctx: &Context, inputs: &CrossInputs<'_>, out: &Path) -> Result<()> {
    if inputs.detectors.len() < 2 {
        return Err(LdpError::Config("cross-eval needs at least two --detector artifacts".into()));
    }
    let dets = inputs.detectors.iter().map(|p| load_detector(p)).collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = inputs.detectors.iter().map(|p| model_name(p)).collect();
    let size = dets[0].input_size();
    if dets.iter().any(|d| d.input_size() != size) {
        return Err(LdpError::Shape("cross-eval detectors must share one input size".into()));
    }
    let given: Vec<ImageTensor> = if inputs.patches.is_empty() {
        Vec::new()
    } else if inputs.patches.len() == dets.len() {
        inputs.patches.iter().map(|p| load_patch(p).map(|(img, _)| img)).collect::<Result<_>>()?
    } else {
        return Err(LdpError::Config(format!(
            "{} patches for {} detectors; pass one per detector or none",
            inputs.patches.len(),
            dets.len()
        )));
    };
    let stack = if given.is_empty() {
        let (Some(ae), Some(diff)) = (inputs.ae, inputs.diffusion) else {
            return Err(LdpError::Config("cross-eval without --patch needs --ae and --diffusion".into()));
        };
        Some((load_ae(ae, &ctx.config)?, load_diffusion(diff)?, palette(ctx)?))
    } else {
        None
    };
    let named: Vec<NamedDetector<'_>> = names
        .iter()
        .zip(&dets)
        .map(|(n, d)| NamedDetector { name: n, det: d as &dyn PersonDetector })
        .collect();
    let images = eval_images(ctx, inputs.images, &dets[0].config)?;
    let attack_rng = ctx.stream(stream::ATTACK);
    let rows = cross_model_matrix(
        &named,
        &named,
        &images,
        &ctx.config.attack.transform,
        &ctx.config.eval,
        &ctx.stream(stream::EVAL_PLACEMENT),
        |i, _| match &stack {
            Some((ae, diff, colors)) => {
                log::info!("optimizing a patch against {}", names[i]);
                Ok(attack(ctx, ae, diff, &dets[i], colors, &mut attack_rng.child(i as u64))?.patch)
            }
            None => Ok(given[i].clone()),
        },
    )?;
    let files: Vec<Vec<ReportFile<'_>>> = rows.iter().map(|r| r.iter().map(ReportFile::new).collect()).collect();
    let flat: Vec<EvalReport> = rows.iter().flatten().cloned().collect();
    let (mut csv, mut matrix) = (Vec::new(), Vec::new());
    write_reports_csv(&flat, &mut csv)?;
    write_matrix_csv(&rows, &mut matrix)?;
    let mut o = Outputs::default();
    o.json(out.to_path_buf(), &files);
    o.add(out.with_extension("csv"), csv);
    o.add(sibling(out, "_matrix.csv"), matrix);
    o.commit()?;
    for row in &rows {
        let cells: Vec<String> = row.iter().map(|r| format!("{}: {:.2}", r.victim_model, r.patched_map)).collect();
        ctx.say(format!("{} -> {}", row[0].train_model, cells.join(", ")));
    }
    Ok(())
}
