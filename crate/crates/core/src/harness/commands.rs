use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::layout::{require, RunLayout};
use super::render;
use super::report::{fmt_sig, ComparisonReport, Evaluation, HeadSummary, ImageInfluence, ImageMetrics, Summary};
use crate::diffusion::{sample_many, train_step, trajectory, DenoiserNet, TrainBatch};
use crate::error::{invalid, Error, Result};
use crate::exec::Execution;
use crate::metrics::{dice, frechet_distance, lpips, psnr, ssim, PerceptualNet};
use crate::phantom::{generate_dataset, load_dataset, load_image, save_image, Dataset, DatasetItem, Split};
use crate::prototypes::{
    explain, train_extractor, train_head, ExplanationReport, FeatureExtractor, FeatureSet, HeadKind, HeadReport,
    PrototypeBank,
};
use crate::rng;
use crate::tensor::{read_checkpoint, write_checkpoint, AdamConfig, AdamState, Tensor};

// Independent random streams per stage, all derived from the data seed.
const STREAM_DIFFUSION: u64 = 10;
const STREAM_TRAJECTORY: u64 = 20;
const STREAM_EXTRACTOR: u64 = 30;
const STREAM_HEADS: u64 = 40;
const SAMPLE_SEED_OFFSET: u64 = 1_000;

/// A loaded configuration bound to an output directory.
#[derive(Clone, Debug)]
pub struct Run {
    pub config: ExperimentConfig,
    pub layout: RunLayout,
    pub exec: Execution,
}

impl Run {
    pub fn new(mut config: ExperimentConfig, out: Option<PathBuf>, seed: Option<u64>) -> Self {
        if let Some(seed) = seed {
            config.data.seed = seed;
        }
        let root = out.unwrap_or_else(|| config.output.dir.clone());
        Self { config, layout: RunLayout::new(root), exec: Execution::default() }
    }

    fn seed(&self) -> u64 {
        self.config.data.seed
    }

    fn dataset(&self) -> Result<Dataset> {
        let path = self.layout.manifest();
        require(&path, "gen-data")?;
        load_dataset(&path)
    }

    fn heads(&self, head: Option<HeadKind>) -> Vec<HeadKind> {
        head.map_or_else(|| self.config.prototypes.heads.clone(), |h| vec![h])
    }
}

/// One generated image and the dataset item whose mask conditioned it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub file: String,
    pub mask_source: String,
}

fn save_params(path: &Path, named: &[(String, Tensor)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    write_checkpoint(BufWriter::new(File::create(path)?), named)
}

fn load_params(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    csv::Writer::from_path(path).map_err(csv_err)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}

fn write_rows(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

pub fn load_denoiser(run: &Run) -> Result<DenoiserNet> {
    let path = run.layout.denoiser();
    require(&path, "train-diffusion")?;
    let mut net = DenoiserNet::new(run.config.diffusion.net, &mut rng::seeded(0));
    net.params.load_values(load_params(&path)?)?;
    Ok(net)
}

pub fn load_extractor(run: &Run) -> Result<FeatureExtractor> {
    let path = run.layout.extractor();
    require(&path, "train-proto")?;
    let cfg = &run.config;
    let mut ex = FeatureExtractor::new(cfg.prototypes.extractor, cfg.data.size, &mut rng::seeded(0))?;
    ex.params.load_values(load_params(&path)?)?;
    ex.freeze();
    Ok(ex)
}

pub fn load_bank(run: &Run, head: HeadKind) -> Result<PrototypeBank> {
    let path = run.layout.bank(head);
    require(&path, &format!("train-proto --head {head}"))?;
    let bank = PrototypeBank::load(&path)?;
    if bank.kind != head {
        return Err(Error::Checkpoint(format!("{} holds a {} bank", path.display(), bank.kind)));
    }
    Ok(bank)
}

/// Generated images listed in the sample index, as `(entry, image)`.
pub fn load_samples(run: &Run) -> Result<Vec<(SampleEntry, Tensor)>> {
    let index = run.layout.samples_index();
    require(&index, "sample")?;
    let entries: Vec<SampleEntry> = read_json(&index)?;
    entries
        .into_iter()
        .map(|e| {
            let img = load_image(&run.layout.samples_dir().join(&e.file))?;
            Ok((e, img))
        })
        .collect()
}

pub fn cmd_gen_data(run: &Run) -> Result<String> {
    let d = &run.config.data;
    let (manifest, _) = generate_dataset(d.n, d.seed, d.size, d.style, &run.layout.data_dir(), run.exec)?;
    let val = manifest.items.iter().filter(|i| i.split == Split::Val).count();
    Ok(format!(
        "gen-data: {} phantoms ({}x{}; {} train / {val} val) -> {}",
        manifest.items.len(),
        d.size,
        d.size,
        manifest.items.len() - val,
        run.layout.manifest().display()
    ))
}

pub fn cmd_train_diffusion(run: &Run) -> Result<String> {
    let dataset = run.dataset()?;
    let train = dataset.train();
    if train.is_empty() {
        return Err(invalid("dataset has no training items"));
    }
    let cfg = &run.config.diffusion;
    let schedule = cfg.schedule()?;
    let mut r = rng::derived(run.seed(), STREAM_DIFFUSION);
    let mut net = DenoiserNet::new(cfg.net, &mut r);
    let mut opt = AdamState::new(AdamConfig::with_lr(cfg.learning_rate), &net.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<Tensor> = chunk.iter().map(|&i| train[i].image.clone()).collect();
            let masks: Vec<Tensor> = chunk.iter().map(|&i| train[i].mask.clone()).collect();
            let batch = TrainBatch::from_pairs(&images, &masks)?;
            total += train_step(&mut net, &batch, &schedule, &mut r, &mut opt)
                .map_err(|e| with_epoch(e, epoch))?;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::info!("diffusion epoch {epoch}: loss {mean:.5}");
        log.push(mean);
    }
    save_params(&run.layout.denoiser(), &net.params.named_values())?;
    write_rows(
        &run.layout.diffusion_log(),
        &header(&["epoch", "loss"]),
        log.iter().enumerate().map(|(e, l)| vec![e.to_string(), l.to_string()]),
    )?;
    Ok(format!(
        "train-diffusion: {} epochs over {} images, loss {:.4} -> {:.4}",
        cfg.epochs,
        train.len(),
        log[0],
        log[log.len() - 1]
    ))
}

fn with_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} (epoch {epoch})")),
        other => other,
    }
}

/// Items whose masks condition generation: the validation split, or every item
/// when the split is empty.
fn conditioning_items(dataset: &Dataset) -> Vec<&DatasetItem> {
    let val: Vec<&DatasetItem> = dataset.split(Split::Val).collect();
    if val.is_empty() {
        dataset.items.iter().collect()
    } else {
        val
    }
}

pub fn cmd_sample(run: &Run, count: Option<usize>) -> Result<String> {
    let dataset = run.dataset()?;
    let net = load_denoiser(run)?;
    let count = count.unwrap_or(run.config.diffusion.sample_count);
    if count == 0 {
        return Err(invalid("sample count must be >= 1"));
    }
    let sources = conditioning_items(&dataset);
    let picked: Vec<&DatasetItem> = (0..count).map(|k| sources[k % sources.len()]).collect();
    let masks: Vec<Tensor> = picked.iter().map(|i| i.mask.clone()).collect();
    let schedule = run.config.diffusion.schedule()?;
    let images = sample_many(&net, &masks, &schedule, run.seed() + SAMPLE_SEED_OFFSET, run.exec)?;
    let dir = run.layout.samples_dir();
    let mut entries = Vec::with_capacity(count);
    for (k, (img, src)) in images.iter().zip(&picked).enumerate() {
        let id = format!("sample_{k:04}");
        let file = format!("{id}.pgm");
        save_image(&dir.join(&file), img)?;
        entries.push(SampleEntry { id, file, mask_source: src.id.clone() });
    }
    write_json(&run.layout.samples_index(), &entries)?;
    Ok(format!("sample: {count} images with T={} -> {}", schedule.steps(), dir.display()))
}

pub fn cmd_trajectory(run: &Run) -> Result<String> {
    let dataset = run.dataset()?;
    let net = load_denoiser(run)?;
    let cfg = &run.config.diffusion;
    let schedule = cfg.schedule()?;
    let source = conditioning_items(&dataset)[0];
    let mut r = rng::derived(run.seed(), STREAM_TRAJECTORY);
    let frames = trajectory(&net, &source.mask, &schedule, &mut r, cfg.trajectory_stride)?;
    let dir = run.layout.trajectory_dir();
    let peak = frames
        .iter()
        .flat_map(|f| f.eps_hat.data().iter().map(|v| v.abs()))
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    for f in &frames {
        save_image(&dir.join(format!("frame_t{:04}.pgm", f.t)), &f.x_t.clamp(0.0, 1.0))?;
        save_image(&dir.join(format!("noise_t{:04}.pgm", f.t)), &f.eps_hat.map(|v| v.abs() / peak))?;
    }
    write_rows(
        &dir.join("trajectory.csv"),
        &header(&["t", "eps_mag"]),
        frames.iter().map(|f| vec![f.t.to_string(), fmt_sig(f.eps_mag, 6)]),
    )?;
    let (first, last) = (&frames[0], &frames[frames.len() - 1]);
    Ok(format!(
        "trajectory: {} frames for mask of {}, eps_mag t={}: {:.4}, t={}: {:.4}",
        frames.len(),
        source.id,
        first.t,
        first.eps_mag,
        last.t,
        last.eps_mag
    ))
}

#[derive(Serialize)]
struct HeadTrainingRecord {
    head: HeadKind,
    m: usize,
    initial_objective: f64,
    final_objective: f64,
    extractor_initial_loss: f64,
    extractor_final_loss: f64,
}

pub fn cmd_train_proto(run: &Run, head: Option<HeadKind>) -> Result<String> {
    let dataset = run.dataset()?;
    let train = dataset.train();
    let images: Vec<Tensor> = train.iter().map(|i| i.image.clone()).collect();
    let cfg = &run.config.prototypes;
    let (extractor, ex_report) =
        train_extractor(&images, cfg.extractor, &mut rng::derived(run.seed(), STREAM_EXTRACTOR))?;
    save_params(&run.layout.extractor(), &extractor.params.named_values())?;
    let maps = extractor.extract_all(&images, run.exec)?;
    let features = FeatureSet::new(train.iter().map(|i| i.id.clone()).collect(), maps)?;
    let mut parts = Vec::new();
    for kind in run.heads(head) {
        let stream = STREAM_HEADS + HeadKind::ALL.iter().position(|k| *k == kind).unwrap_or(0) as u64;
        let (bank, report): (PrototypeBank, HeadReport) =
            train_head(kind, &features, &cfg.head, &mut rng::derived(run.seed(), stream))?;
        bank.save(&run.layout.bank(kind))?;
        write_json(
            &run.layout.head_report(kind),
            &HeadTrainingRecord {
                head: kind,
                m: bank.m(),
                initial_objective: report.initial_objective,
                final_objective: report.final_objective,
                extractor_initial_loss: ex_report.initial_loss,
                extractor_final_loss: ex_report.final_loss,
            },
        )?;
        parts.push(format!("{kind} {:.4}->{:.4}", report.initial_objective, report.final_objective));
    }
    Ok(format!(
        "train-proto: extractor recon {:.4}->{:.4}; objectives {}",
        ex_report.initial_loss,
        ex_report.final_loss,
        parts.join(", ")
    ))
}

/// Explanations of every sample (or only `ids`) under `head`, in sample order.
fn explain_samples(
    run: &Run,
    head: HeadKind,
    extractor: &FeatureExtractor,
    samples: &[(SampleEntry, Tensor)],
) -> Result<Vec<ExplanationReport>> {
    let bank = load_bank(run, head)?;
    run.exec.try_map(samples.len(), |k| explain(&bank, extractor, &samples[k].1, &samples[k].0.id))
}

pub fn cmd_explain(run: &Run, head: Option<HeadKind>, ids: &[String]) -> Result<String> {
    let extractor = load_extractor(run)?;
    let mut samples = load_samples(run)?;
    if !ids.is_empty() {
        if let Some(missing) = ids.iter().find(|id| !samples.iter().any(|(e, _)| &e.id == *id)) {
            return Err(invalid(format!("no generated image with id `{missing}`")));
        }
        samples.retain(|(e, _)| ids.contains(&e.id));
    }
    let mut parts = Vec::new();
    for kind in run.heads(head) {
        let reports = explain_samples(run, kind, &extractor, &samples)?;
        let dir = run.layout.explanations_dir(kind);
        for r in &reports {
            write_json(&dir.join(format!("{}.json", r.image_id)), r)?;
        }
        let f: Vec<f64> = reports.iter().map(|r| r.faithfulness).collect();
        parts.push(format!("{kind} F={:.4}", Summary::of(&f).mean));
    }
    Ok(format!("explain: {} images; {}", samples.len(), parts.join(", ")))
}

fn dice_definition(threshold: f64) -> String {
    format!("conditioning mask vs generated image thresholded at intensity > {threshold}")
}

const FRECHET_DEFINITION: &str =
    "Frechet distance between Gaussian fits of mean-pooled extractor features: training images vs generated samples";

fn evaluate_samples(run: &Run, dataset: &Dataset, samples: &[(SampleEntry, Tensor)]) -> Result<Vec<ImageMetrics>> {
    let cfg = &run.config.metrics;
    let net = PerceptualNet::new(cfg.perceptual_seed);
    run.exec.try_map(samples.len(), |k| {
        let (entry, generated) = &samples[k];
        let source = dataset
            .get(&entry.mask_source)
            .ok_or_else(|| Error::Format(format!("sample {} refers to unknown item {}", entry.id, entry.mask_source)))?;
        let region = generated.map(|v| if v > cfg.dice_threshold { 1.0 } else { 0.0 });
        Ok(ImageMetrics {
            image_id: entry.id.clone(),
            psnr: psnr(&source.image, generated, &cfg.metric)?,
            ssim: ssim(&source.image, generated, &cfg.metric)?,
            lpips: lpips(&source.image, generated, &net, &cfg.metric)?,
            dice: dice(&source.mask, &region)?,
        })
    })
}

fn summarize(run: &Run, rows: &[ImageMetrics], frechet: f64) -> Evaluation {
    let col = |f: fn(&ImageMetrics) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    Evaluation {
        images: rows.len(),
        psnr: Summary::of(&col(|r| r.psnr)),
        ssim: Summary::of(&col(|r| r.ssim)),
        lpips: Summary::of(&col(|r| r.lpips)),
        dice: Summary::of(&col(|r| r.dice)),
        dice_definition: dice_definition(run.config.metrics.dice_threshold),
        frechet_distance: frechet,
        frechet_definition: FRECHET_DEFINITION.to_string(),
    }
}

pub fn cmd_evaluate(run: &Run) -> Result<String> {
    let dataset = run.dataset()?;
    let samples = load_samples(run)?;
    let extractor = load_extractor(run)?;
    let rows = evaluate_samples(run, &dataset, &samples)?;
    write_rows(
        &run.layout.metrics_csv(),
        &header(&["image_id", "psnr", "ssim", "lpips", "dice"]),
        rows.iter().map(|r| {
            vec![r.image_id.clone(), fmt_sig(r.psnr, 6), fmt_sig(r.ssim, 6), fmt_sig(r.lpips, 6), fmt_sig(r.dice, 6)]
        }),
    )?;
    let real: Vec<Tensor> = dataset.train().iter().map(|i| i.image.clone()).collect();
    let fake: Vec<Tensor> = samples.iter().map(|(_, t)| t.clone()).collect();
    let pooled = |imgs: &[Tensor]| -> Result<Vec<Vec<f64>>> {
        Ok(extractor.extract_all(imgs, run.exec)?.iter().map(|f| f.mean_vector()).collect())
    };
    let frechet = frechet_distance(&pooled(&real)?, &pooled(&fake)?)?;
    let eval = summarize(run, &rows, frechet);
    write_json(&run.layout.evaluation_json(), &eval)?;
    Ok(format!(
        "evaluate: {} images, PSNR {:.2}±{:.2}, SSIM {:.4}±{:.4}, LPIPS {:.4}±{:.4}, Dice {:.4}±{:.4}, Frechet {:.4}",
        eval.images,
        eval.psnr.mean,
        eval.psnr.sd,
        eval.ssim.mean,
        eval.ssim.sd,
        eval.lpips.mean,
        eval.lpips.sd,
        eval.dice.mean,
        eval.dice.sd,
        eval.frechet_distance
    ))
}

pub fn cmd_compare(run: &Run) -> Result<String> {
    let layout = &run.layout;
    require(&layout.evaluation_json(), "evaluate")?;
    let quality: Evaluation = read_json(&layout.evaluation_json())?;
    let extractor = load_extractor(run)?;
    let samples = load_samples(run)?;
    let mut heads = Vec::new();
    let mut per_image = Vec::new();
    for kind in run.heads(None) {
        let reports = explain_samples(run, kind, &extractor, &samples)?;
        let f: Vec<f64> = reports.iter().map(|r| r.faithfulness).collect();
        heads.push(HeadSummary { head: kind, m: reports[0].m, images: reports.len(), faithfulness: Summary::of(&f) });
        per_image.extend(reports.iter().map(|r| ImageInfluence {
            head: kind,
            image_id: r.image_id.clone(),
            faithfulness: r.faithfulness,
            nis: r.nis_by_prototype(),
        }));
    }
    let mut ranking: Vec<&HeadSummary> = heads.iter().collect();
    ranking.sort_by(|a, b| b.faithfulness.mean.total_cmp(&a.faithfulness.mean));
    let report = ComparisonReport {
        ranking: ranking.iter().map(|h| h.head).collect(),
        heads,
        per_image,
        quality,
    };
    write_comparison(run, &report)?;
    let parts: Vec<String> = report
        .heads
        .iter()
        .map(|h| format!("{} {:.4}±{:.4}", h.head, h.faithfulness.mean, h.faithfulness.sd))
        .collect();
    Ok(format!("compare: faithfulness over {} images: {}", samples.len(), parts.join(", ")))
}

fn write_comparison(run: &Run, report: &ComparisonReport) -> Result<()> {
    let layout = &run.layout;
    write_rows(
        &layout.comparison_csv(),
        &header(&["head", "m", "images", "faithfulness_mean", "faithfulness_sd"]),
        report.heads.iter().map(|h| {
            vec![
                h.head.to_string(),
                h.m.to_string(),
                h.images.to_string(),
                h.faithfulness.mean.to_string(),
                h.faithfulness.sd.to_string(),
            ]
        }),
    )?;
    write_rows(
        &layout.faithfulness_csv(),
        &header(&["head", "image_id", "faithfulness"]),
        report.per_image.iter().map(|r| vec![r.head.to_string(), r.image_id.clone(), r.faithfulness.to_string()]),
    )?;
    let m = report.per_image.iter().map(|r| r.nis.len()).max().unwrap_or(0);
    let mut nis_header = header(&["head", "image_id"]);
    nis_header.extend((0..m).map(|j| format!("nis_{j}")));
    write_rows(
        &layout.nis_csv(),
        &nis_header,
        report.per_image.iter().map(|r| {
            let mut row = vec![r.head.to_string(), r.image_id.clone()];
            row.extend((0..m).map(|j| r.nis.get(j).map_or_else(String::new, f64::to_string)));
            row
        }),
    )?;
    let q = &report.quality;
    write_rows(
        &layout.metric_summary_csv(),
        &header(&["metric", "mean", "sd"]),
        [("psnr", &q.psnr), ("ssim", &q.ssim), ("lpips", &q.lpips), ("dice", &q.dice)]
            .into_iter()
            .map(|(name, s)| vec![name.to_string(), fmt_sig(s.mean, 6), fmt_sig(s.sd, 6)]),
    )?;
    write_json(&layout.comparison_json(), report)?;
    if run.config.output.render {
        let dir = layout.figures_dir();
        let means: Vec<f64> = report.heads.iter().map(|h| h.faithfulness.mean).collect();
        save_image(&dir.join("faithfulness_bar.pgm"), &render::bar_chart(&means))?;
        for h in &report.heads {
            let values: Vec<f64> =
                report.per_image.iter().filter(|r| r.head == h.head).flat_map(|r| r.nis.iter().copied()).collect();
            let counts: Vec<f64> = render::histogram(&values, 20, 0.0, 1.0).into_iter().map(|c| c as f64).collect();
            save_image(&dir.join(format!("nis_hist_{}.pgm", h.head)), &render::bar_chart(&counts))?;
        }
    }
    Ok(())
}
