use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use msdamil::data::pnm::write_ppm;
use msdamil::data::{export_corpus, extract_bags, generate_synthetic_corpus, ingest_patch_directory, split_dataset, Slide, Split};
use msdamil::eval::{
    evaluate_predictor, format_predictions, render_attention_heatmap, BagSampling, Evaluation, Predictor,
};
use msdamil::pipeline::select_alpha;
use msdamil::train::{
    patch_train, stage1_train, stage2_train, write_history, Checkpoint, EpochRecord, Mode, TrainConfig,
};
use msdamil::verify::run_gradcheck;
use msdamil::{Error, OpKind, Result};

use crate::config::RunConfig;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    fs::write(path, contents).map_err(io(path))
}

/// File stem of a checkpoint: `{mode}_scale{s}` for one scale, `msdamil` for the multi-scale model.
pub fn checkpoint_stem(mode: Mode, scale: Option<usize>) -> String {
    match scale {
        Some(s) => format!("{mode}_scale{s}"),
        None => mode.to_string(),
    }
}

pub fn checkpoint_path(dir: &Path, mode: Mode, scale: Option<usize>) -> PathBuf {
    dir.join(format!("{}.ckpt", checkpoint_stem(mode, scale)))
}

fn epoch_path(dir: &Path, stem: &str, epoch: usize) -> PathBuf {
    dir.join("epochs").join(format!("{stem}_epoch{epoch:03}.ckpt"))
}

/// Generates the synthetic corpus and exports it. Returns the summary line.
pub fn synth(cfg: &RunConfig) -> Result<String> {
    let dir = cfg.corpus_dir()?;
    let slides = generate_synthetic_corpus(&cfg.corpus)?;
    let rows = export_corpus(&slides, dir)?;
    let bags: usize = slides
        .iter()
        .map(|s| extract_bags(s, cfg.corpus.bag_size, cfg.corpus.max_bags, cfg.seed).map(|b| b.len()))
        .sum::<Result<usize>>()?;
    Ok(format!(
        "wrote {} slides, {bags} bags, {rows} patches to {}",
        slides.len(),
        dir.display()
    ))
}

/// The corpus and its train/validation/test partition.
pub struct Corpus {
    pub slides: Vec<Slide>,
    pub split: Split,
}

impl Corpus {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let slides = ingest_patch_directory(cfg.corpus_dir()?, None)?;
        let split = split_dataset(&slides, cfg.split, cfg.seed)?;
        Ok(Corpus { slides, split })
    }

    pub fn train(&self) -> Vec<&Slide> {
        Split::select(&self.slides, &self.split.train)
    }

    pub fn val(&self) -> Vec<&Slide> {
        Split::select(&self.slides, &self.split.val)
    }

    pub fn test(&self) -> Vec<&Slide> {
        Split::select(&self.slides, &self.split.test)
    }

    pub fn find(&self, id: &str) -> Result<&Slide> {
        self.slides.iter().find(|s| s.id == id).ok_or_else(|| {
            let ids: Vec<&str> = self.slides.iter().map(|s| s.id.as_str()).collect();
            Error::Data(format!("unknown slide {id:?}; available: {}", ids.join(", ")))
        })
    }
}

fn validation_accuracy(predictor: &Predictor, mode: Mode, val: &[&Slide], cfg: &TrainConfig) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    Ok(Some(evaluate_predictor(predictor, mode, val, &BagSampling::from(cfg))?.metrics.accuracy))
}

fn summary(stage: usize, stem: &str, history: &[EpochRecord], alpha: Option<f64>, val: Option<f64>) -> String {
    let mut line = format!("stage {stage} {stem}:");
    if let Some(a) = alpha {
        let _ = write!(line, " alpha {a}");
    }
    match history.last() {
        Some(r) => {
            let _ = write!(line, " epochs {} final bag loss {:.6}", r.epoch, r.bag_loss);
        }
        None => line.push_str(" no epochs"),
    }
    match val {
        Some(v) => {
            let _ = write!(line, " validation accuracy {v:.4}");
        }
        None => line.push_str(" validation accuracy NA"),
    }
    line
}

/// Stage-1 training of every requested scale (or stage 2 of the multi-scale
/// model). Returns one summary line per trained model.
pub fn train(cfg: &RunConfig, stage: u8, scale: Option<usize>) -> Result<Vec<String>> {
    let dir = cfg.checkpoint_dir()?;
    let corpus = Corpus::load(cfg)?;
    let (train, val) = (corpus.train(), corpus.val());
    match stage {
        1 => {
            let scales = match scale {
                Some(s) if cfg.train_scales.contains(&s) => vec![s],
                Some(s) => return Err(Error::Config(format!("scale {s} not among train_scales {:?}", cfg.train_scales))),
                None => cfg.train_scales.clone(),
            };
            scales.into_iter().map(|s| train_stage1(cfg, dir, &train, &val, s)).collect()
        }
        2 => {
            if cfg.mode != Mode::Msdamil {
                return Err(Error::Config(format!("stage 2 trains the msdamil model, not {}", cfg.mode)));
            }
            Ok(vec![train_stage2(cfg, dir, &train, &val)?])
        }
        other => Err(Error::Config(format!("stage must be 1 or 2, got {other}"))),
    }
}

fn train_stage1(cfg: &RunConfig, dir: &Path, train: &[&Slide], val: &[&Slide], scale: usize) -> Result<String> {
    // The multi-scale model reuses the adversarial stage-1 extractors.
    let mode = if cfg.mode == Mode::Msdamil { Mode::Damil } else { cfg.mode };
    let stem = checkpoint_stem(mode, Some(scale));
    match mode {
        Mode::Patch => {
            let out = patch_train(train, scale, &cfg.model, &cfg.train, |r, m| {
                Checkpoint::from_patch(m, r.epoch, &cfg.train).save(&epoch_path(dir, &stem, r.epoch))
            })?;
            Checkpoint::from_patch(&out.model, cfg.train.epochs, &cfg.train).save(&checkpoint_path(dir, mode, Some(scale)))?;
            write_history(&dir.join(format!("{stem}_history.tsv")), &out.history)?;
            let val_acc = validation_accuracy(&Predictor::Patch(out.model), mode, val, &cfg.train)?;
            Ok(summary(1, &stem, &out.history, None, val_acc))
        }
        Mode::Mil | Mode::Damil => {
            let adversarial = mode == Mode::Damil;
            let mut train_cfg = cfg.train.clone();
            let alphas = cfg.alphas();
            if adversarial && alphas.len() > 1 {
                train_cfg.alpha = select_alpha(train, val, scale, &cfg.model, &cfg.train, &alphas)?.alpha;
            } else if adversarial {
                train_cfg.alpha = alphas[0];
            }
            let out = stage1_train(train, scale, &cfg.model, &train_cfg, adversarial, |r, m| {
                Checkpoint::from_stage1(m, mode, r.epoch, &train_cfg)?.save(&epoch_path(dir, &stem, r.epoch))
            })?;
            Checkpoint::from_stage1(&out.model, mode, train_cfg.epochs, &train_cfg)?
                .save(&checkpoint_path(dir, mode, Some(scale)))?;
            write_history(&dir.join(format!("{stem}_history.tsv")), &out.history)?;
            let val_acc = validation_accuracy(&Predictor::SingleScale(out.model), mode, val, &cfg.train)?;
            Ok(summary(1, &stem, &out.history, adversarial.then_some(train_cfg.alpha), val_acc))
        }
        Mode::Msdamil => unreachable!("mapped to damil above"),
    }
}

fn train_stage2(cfg: &RunConfig, dir: &Path, train: &[&Slide], val: &[&Slide]) -> Result<String> {
    let extractors = cfg
        .train_scales
        .iter()
        .map(|&s| {
            let path = checkpoint_path(dir, Mode::Damil, Some(s));
            if !path.is_file() {
                return Err(Error::MissingScale(s));
            }
            Checkpoint::load(&path)?.extractor(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let stem = checkpoint_stem(Mode::Msdamil, None);
    let out = stage2_train(train, &extractors, &cfg.train_scales, &cfg.model, &cfg.train, |r, m| {
        Checkpoint::from_multiscale(m, r.epoch, &cfg.train)?.save(&epoch_path(dir, &stem, r.epoch))
    })?;
    Checkpoint::from_multiscale(&out.model, cfg.train.epochs, &cfg.train)?.save(&checkpoint_path(dir, Mode::Msdamil, None))?;
    write_history(&dir.join(format!("{stem}_history.tsv")), &out.history)?;
    let val_acc = validation_accuracy(&Predictor::MultiScale(out.model), Mode::Msdamil, val, &cfg.train)?;
    Ok(summary(2, &stem, &out.history, None, val_acc))
}

pub const METRICS_HEADER: &str = "metric\tvalue";
pub const ATTENTION_HEADER: &str = "slide_id\tscale\tmean_attention_mass";

/// Per-slide mean attention mass of every scale, then the corpus means.
pub fn attention_table(eval: &Evaluation) -> (String, Vec<(usize, f64)>) {
    let mut out = format!("{ATTENTION_HEADER}\n");
    let mut totals: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for p in &eval.predictions {
        let mut per_slide: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
        for bag in &p.bags {
            for (s, m) in bag.attention_mass() {
                let e = per_slide.entry(s).or_default();
                e.0 += m;
                e.1 += 1;
            }
        }
        for (s, (sum, n)) in per_slide {
            let mean = sum / n as f64;
            let _ = writeln!(out, "{}\t{s}\t{mean}", p.slide_id);
            let t = totals.entry(s).or_default();
            t.0 += mean;
            t.1 += 1;
        }
    }
    let means = totals.into_iter().map(|(s, (sum, n))| (s, sum / n as f64)).collect();
    (out, means)
}

/// Evaluates on the test split and writes predictions and metrics.
/// Returns the text echoed to standard output.
pub fn eval(cfg: &RunConfig, mode: Mode, scale: Option<usize>, checkpoint: Option<&Path>) -> Result<String> {
    let out_dir = cfg.output_dir()?;
    let corpus = Corpus::load(cfg)?;
    let test = corpus.test();
    let sampling = BagSampling::from(&cfg.train);
    let targets: Vec<(PathBuf, String)> = match (checkpoint, mode) {
        (Some(p), Mode::Msdamil) => vec![(p.to_path_buf(), checkpoint_stem(mode, None))],
        (Some(p), _) => vec![(p.to_path_buf(), checkpoint_stem(mode, Some(scale.unwrap_or(cfg.train_scales[0]))))],
        (None, Mode::Msdamil) => vec![(checkpoint_path(cfg.checkpoint_dir()?, mode, None), checkpoint_stem(mode, None))],
        (None, _) => {
            let scales = scale.map_or_else(|| cfg.train_scales.clone(), |s| vec![s]);
            let dir = cfg.checkpoint_dir()?;
            scales
                .into_iter()
                .map(|s| (checkpoint_path(dir, mode, Some(s)), checkpoint_stem(mode, Some(s))))
                .collect()
        }
    };
    let mut echo = String::new();
    for (path, stem) in targets {
        let ckpt = Checkpoint::load(&path)?;
        let predictor = Predictor::from_checkpoint(&ckpt, mode)?;
        let evaluation = evaluate_predictor(&predictor, mode, &test, &sampling)?;
        write_file(&out_dir.join(format!("{stem}_predictions.tsv")), format_predictions(&evaluation))?;
        let metrics = format!("{METRICS_HEADER}\n{}\n", evaluation.metrics);
        write_file(&out_dir.join(format!("{stem}_metrics.tsv")), &metrics)?;
        let _ = writeln!(echo, "# {stem} on {} test slides", test.len());
        echo.push_str(&metrics);
        if mode == Mode::Msdamil {
            let (table, means) = attention_table(&evaluation);
            write_file(&out_dir.join(format!("{stem}_attention.tsv")), table)?;
            for (s, m) in means {
                let _ = writeln!(echo, "attention_mass_scale{s}\t{m}");
            }
        }
    }
    Ok(echo)
}

pub const HEATMAP_INDEX_HEADER: &str = "bag_id\tscale\tfile\tP_pos";

/// Renders one raster per bag and scale of `slide_id` and an index file.
/// Returns the paths written, index last.
pub fn heatmap(cfg: &RunConfig, slide_id: &str, mode: Mode, scale: Option<usize>) -> Result<Vec<PathBuf>> {
    let out_dir = cfg.output_dir()?.join("heatmaps").join(slide_id);
    let corpus = Corpus::load(cfg)?;
    let slide = corpus.find(slide_id)?;
    let path = match mode {
        Mode::Patch => return Err(Error::Config("the patch baseline has no attention to draw".into())),
        Mode::Msdamil => checkpoint_path(cfg.checkpoint_dir()?, mode, None),
        _ => checkpoint_path(cfg.checkpoint_dir()?, mode, Some(scale.unwrap_or(cfg.train_scales[0]))),
    };
    let predictor = Predictor::from_checkpoint(&Checkpoint::load(&path)?, mode)?;
    let grid = slide
        .grid_extent()
        .ok_or_else(|| Error::Data(format!("slide {slide_id} has no grid positions; cannot draw a heatmap")))?;
    let sampling = BagSampling::from(&cfg.train);
    let bags = extract_bags(slide, sampling.bag_size, sampling.max_bags, sampling.seed)?;
    let mut written = Vec::new();
    let mut index = format!("{HEATMAP_INDEX_HEADER}\n");
    for (b, bag) in bags.iter().enumerate() {
        let pred = predictor.predict_bag(bag)?;
        for map in render_attention_heatmap(&pred.heat_cells(), grid, cfg.heatmap_cell_px)? {
            let name = format!("bag{b:02}_scale{}.ppm", map.scale);
            let file = out_dir.join(&name);
            write_ppm(&file, map.width, map.height, &map.rgb)?;
            let _ = writeln!(index, "{}\t{}\t{name}\t{}", bag.id, map.scale, pred.probs[1]);
            written.push(file);
        }
    }
    let index_path = out_dir.join("index.tsv");
    write_file(&index_path, index)?;
    written.push(index_path);
    Ok(written)
}

/// Runs the finite-difference suite; a failing check is a numeric failure.
pub fn gradcheck(fault: Option<OpKind>) -> Result<String> {
    let report = run_gradcheck(fault)?;
    if report.passed() {
        Ok(report.to_string())
    } else {
        Err(Error::Numeric(format!("gradient check failed\n{report}")))
    }
}
