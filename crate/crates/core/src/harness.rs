//! End-to-end workflows behind the command-line subcommands. Diagnostics go
//! to stderr; every result lands in a file under the output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::is_adapter_param;
use crate::checkpoint;
use crate::dataset::{encode_ppm, generate_dataset, read_meta, read_split, write_atomic, SceneSample};
use crate::error::{Error, Result};
use crate::geometry::Box3D;
use crate::gradsuite::{gradient_suite, SuiteEntry};
use crate::heads::{DecodeOptions, LossConfig};
use crate::metrics::{evaluate, match_predictions, MetricsReport, TP_THRESHOLD};
use crate::model::{CounterSnapshot, Model, Prepared};
use crate::params::ParamStore;
use crate::scene::{RgbImage, CLASS_NAMES, METEOR};
use crate::train::{batch_loss, train, History, RunConfig};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Invalid(e.to_string()))?;
    write_atomic(path, &bytes)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Loads a config (defaults when `path` is `None`); `seed` overrides both
/// the scene seed and the training seed.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.gen.scene.seed = s;
        cfg.train.seed = s;
    }
    Ok(cfg)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenSummary {
    pub root: PathBuf,
    pub samples: usize,
    pub train: usize,
    pub val: usize,
    pub objects: usize,
    pub seconds: f64,
}

pub fn gen_run(cfg: &RunConfig, root: &Path) -> Result<GenSummary> {
    let t = Instant::now();
    let samples = generate_dataset(root, &cfg.gen)?;
    let s = GenSummary {
        root: root.to_path_buf(),
        samples: samples.len(),
        train: samples.len() - cfg.gen.val_scenes,
        val: cfg.gen.val_scenes,
        objects: samples.iter().map(|s| s.annotations.len()).sum(),
        seconds: t.elapsed().as_secs_f64(),
    };
    eprintln!(
        "gen: {} samples ({} objects) -> {}",
        s.samples,
        s.objects,
        root.display()
    );
    Ok(s)
}

pub fn prepare_all(model: &Model, samples: &[SceneSample]) -> Result<Vec<Prepared>> {
    samples.iter().map(|s| model.prepare(s)).collect()
}

fn load_prepared(model: &Model, root: &Path, split: &str) -> Result<Vec<Prepared>> {
    let samples = read_split(root, split)?;
    if samples.is_empty() {
        return Err(Error::Invalid(format!("{}: split `{split}` is empty", root.display())));
    }
    prepare_all(model, &samples)
}

/// Sample-weighted mean detection loss over `data`.
pub fn mean_det_loss(
    model: &Model,
    store: &ParamStore<f32>,
    data: &[Prepared],
    loss: &LossConfig,
    batch: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in data.chunks(batch.max(1)) {
        let refs: Vec<&Prepared> = chunk.iter().collect();
        sum += batch_loss(model, store, &refs, loss)?.det * chunk.len() as f64;
    }
    Ok(sum / data.len().max(1) as f64)
}

pub fn predict_all(
    model: &Model,
    store: &ParamStore<f32>,
    data: &[Prepared],
    opts: &DecodeOptions,
) -> Result<Vec<Vec<Box3D>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(4) {
        let refs: Vec<&Prepared> = chunk.iter().collect();
        out.extend(model.predict(store, &refs, opts)?);
    }
    Ok(out)
}

pub fn evaluate_model(
    name: &str,
    model: &Model,
    store: &ParamStore<f32>,
    data: &[Prepared],
    opts: &DecodeOptions,
) -> Result<MetricsReport> {
    let preds = predict_all(model, store, data, opts)?;
    let gts: Vec<Vec<Box3D>> = data.iter().map(|p| p.gt.clone()).collect();
    evaluate(name, &preds, &gts, &CLASS_NAMES)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamSummary {
    pub total: usize,
    pub trainable: usize,
    pub adapter: usize,
    pub inference: usize,
    pub fused_stage: usize,
    pub sca: usize,
}

impl ParamSummary {
    pub fn of(store: &ParamStore<f32>) -> Self {
        Self {
            total: store.total_count(),
            trainable: store.count_where(|p| p.trainable),
            adapter: store.count_where(|p| is_adapter_param(&p.name)),
            inference: Model::inference_params(store),
            fused_stage: Model::fused_stage_params(store),
            sca: store.count_where(|p| p.name.starts_with("sca.")),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub seconds: f64,
    pub initial_det_loss: f64,
    pub final_det_loss: f64,
    pub final_total_loss: f64,
    pub train_counters: CounterSnapshot,
    pub eval_counters: CounterSnapshot,
    pub params: ParamSummary,
    pub map: f64,
    pub nds: f64,
}

pub struct TrainOutcome {
    pub summary: TrainSummary,
    pub report: MetricsReport,
    pub history: History,
    pub model: Model,
    pub store: ParamStore<f32>,
}

/// Trains and evaluates; `name` labels the metrics report. With
/// `snapshots`, periodic checkpoints go to `checkpoint-<step>` under it.
pub fn train_model(cfg: &RunConfig, name: &str, quiet: bool, snapshots: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (model, mut store) = Model::new(&cfg.model, cfg.train.seed)?;
    let data = load_prepared(&model, &cfg.dataset, "train")?;
    let eval_data = if cfg.eval_split == "train" {
        None
    } else {
        Some(load_prepared(&model, &cfg.dataset, &cfg.eval_split)?)
    };
    let eval_ref = eval_data.as_deref().unwrap_or(&data);
    let batch = cfg.train.batch_size;
    let initial = mean_det_loss(&model, &store, &data, &cfg.loss, batch)?;
    if !quiet {
        eprintln!("train: {name}: {} samples, initial det loss {initial:.4}", data.len());
    }
    model.counters.reset();
    let t = Instant::now();
    let steps = cfg.train.steps;
    let history = train(&model, &mut store, &data, cfg, |r, ps| {
        let n = r.step + 1;
        if !quiet && cfg.train.log_every > 0 && (n % cfg.train.log_every == 0 || n == steps) {
            eprintln!(
                "step {n:>5} total {:.4} det {:.4} heat {:.4} reg {:.4} aux {:.4} align {:.4}",
                r.total, r.det, r.heatmap, r.regression, r.aux, r.align
            );
        }
        if let Some(dir) = snapshots {
            if cfg.train.checkpoint_every > 0 && n % cfg.train.checkpoint_every == 0 && n < steps {
                checkpoint::save(&dir.join(format!("checkpoint-{n:06}")), ps, cfg)?;
            }
        }
        if cfg.train.eval_every > 0 && n % cfg.train.eval_every == 0 && n < steps {
            let rep = evaluate_model(name, &model, ps, eval_ref, &cfg.decode)?;
            if !quiet {
                eprintln!("step {n:>5} eval mAP {:.4} NDS {:.4}", rep.map, rep.nds);
            }
        }
        Ok(())
    })?;
    let seconds = t.elapsed().as_secs_f64();
    let train_counters = model.counters.snapshot();
    let final_det = mean_det_loss(&model, &store, &data, &cfg.loss, batch)?;
    model.counters.reset();
    let report = evaluate_model(name, &model, &store, eval_ref, &cfg.decode)?;
    let eval_counters = model.counters.snapshot();
    if !quiet {
        eprintln!(
            "train: {name}: {steps} steps in {seconds:.1}s, det loss {initial:.4} -> {final_det:.4}, mAP {:.4} NDS {:.4}",
            report.map, report.nds
        );
    }
    let summary = TrainSummary {
        steps,
        seconds,
        initial_det_loss: initial,
        final_det_loss: final_det,
        final_total_loss: history.last().map_or(f64::NAN, |r| r.total),
        train_counters,
        eval_counters,
        params: ParamSummary::of(&store),
        map: report.map,
        nds: report.nds,
    };
    Ok(TrainOutcome {
        summary,
        report,
        history,
        model,
        store,
    })
}

/// `train`: writes `history.csv`, `checkpoint/`, `report.{json,csv}` and
/// `summary.json` under `out`.
pub fn train_run(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    ensure_dir(out)?;
    let every = cfg.train.checkpoint_every;
    let ckpt = out.join("checkpoint");
    let outcome = train_model(cfg, "scafusion", false, (every > 0).then_some(out))?;
    outcome.history.write_csv(&out.join("history.csv"))?;
    checkpoint::save(&ckpt, &outcome.store, cfg)?;
    outcome.report.write(out)?;
    write_json(&out.join("summary.json"), &outcome.summary)?;
    Ok(outcome)
}

/// Builds the model described by `cfg` and loads `ckpt` into it.
pub fn load_model(cfg: &RunConfig, ckpt: &Path) -> Result<(Model, ParamStore<f32>)> {
    let (model, mut store) = Model::new(&cfg.model, cfg.train.seed)?;
    checkpoint::load_into(ckpt, &mut store)?;
    Ok((model, store))
}

/// Config for `eval`/`infer`: the given file, or the checkpoint's snapshot.
pub fn config_for_checkpoint(path: Option<&Path>, seed: Option<u64>, ckpt: &Path) -> Result<RunConfig> {
    match path {
        Some(_) => load_config(path, seed),
        None => Ok(checkpoint::read_manifest(ckpt)?.config),
    }
}

pub fn eval_run(cfg: &RunConfig, ckpt: &Path, out: &Path) -> Result<MetricsReport> {
    let (model, store) = load_model(cfg, ckpt)?;
    let data = load_prepared(&model, &cfg.dataset, &cfg.eval_split)?;
    model.counters.reset();
    let report = evaluate_model("scafusion", &model, &store, &data, &cfg.decode)?;
    let c = model.counters.snapshot();
    report.write(out)?;
    eprintln!(
        "eval: {} samples of `{}`: mAP {:.4} NDS {:.4} (align runs {}, aux runs {})",
        data.len(),
        cfg.eval_split,
        report.map,
        report.nds,
        c.align,
        c.aux
    );
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Verdict {
    TruePositive,
    FalsePositive,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub class_name: String,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InferOutput {
    pub token: String,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<Box3D>,
    pub counters: CounterSnapshot,
}

/// Labels each prediction TP/FP with the metric matcher at the TP
/// threshold.
pub fn classify(preds: &[Box3D], gts: &[Box3D]) -> Vec<Verdict> {
    let mut v = vec![Verdict::FalsePositive; preds.len()];
    for c in 0..CLASS_NAMES.len() {
        let m = match_predictions(&[preds.to_vec()], &[gts.to_vec()], TP_THRESHOLD, c);
        for e in m.entries.iter().filter(|e| e.gt.is_some()) {
            v[e.pred] = Verdict::TruePositive;
        }
    }
    v
}

pub const GT_COLOR: [u8; 3] = [0, 200, 0];
pub const TP_COLOR: [u8; 3] = [255, 220, 0];
pub const FP_COLOR: [u8; 3] = [230, 0, 0];
const PX_PER_CELL: usize = 8;

struct Canvas<'a> {
    img: RgbImage,
    grid: &'a crate::geometry::BEVGridSpec,
}

impl Canvas<'_> {
    /// +x to the right, +y up.
    fn pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let s = PX_PER_CELL as f64 / self.grid.cell;
        ((x - self.grid.x_range[0]) * s, (self.grid.y_range[1] - y) * s)
    }

    fn put(&mut self, px: i64, py: i64, c: [u8; 3]) {
        if px >= 0 && py >= 0 && (px as usize) < self.img.width && (py as usize) < self.img.height {
            let k = (py as usize * self.img.width + px as usize) * 3;
            self.img.data[k..k + 3].copy_from_slice(&c);
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), c: [u8; 3]) {
        let n = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
        for k in 0..=n {
            let t = k as f64 / n as f64;
            let x = a.0 + t * (b.0 - a.0);
            let y = a.1 + t * (b.1 - a.1);
            self.put(x.floor() as i64, y.floor() as i64, c);
        }
    }

    fn outline(&mut self, b: &Box3D, c: [u8; 3]) {
        let p: Vec<(f64, f64)> = b.corners_2d().iter().map(|q| self.pixel(q[0], q[1])).collect();
        for k in 0..4 {
            self.line(p[k], p[(k + 1) % 4], c);
        }
        let (hx, hy) = (
            b.center[0] + 0.5 * b.size[0] * b.yaw.cos(),
            b.center[1] + 0.5 * b.size[0] * b.yaw.sin(),
        );
        let from = self.pixel(b.center[0], b.center[1]);
        let to = self.pixel(hx, hy);
        self.line(from, to, c);
    }
}

/// BEV raster: LiDAR returns in gray, ground truth green, true positives
/// yellow, false positives red.
pub fn render_bev(
    sample: &SceneSample,
    grid: &crate::geometry::BEVGridSpec,
    gts: &[Box3D],
    dets: &[Detection],
) -> Result<RgbImage> {
    let (h, w) = grid.dims()?;
    let mut canvas = Canvas {
        img: RgbImage {
            width: w * PX_PER_CELL,
            height: h * PX_PER_CELL,
            data: vec![0; w * h * PX_PER_CELL * PX_PER_CELL * 3],
        },
        grid,
    };
    for p in &sample.points.points {
        let (x, y) = canvas.pixel(p[0] as f64, p[1] as f64);
        canvas.put(x.floor() as i64, y.floor() as i64, [110, 110, 110]);
    }
    for b in gts {
        canvas.outline(b, GT_COLOR);
    }
    for d in dets {
        let c = match d.verdict {
            Verdict::TruePositive => TP_COLOR,
            Verdict::FalsePositive => FP_COLOR,
        };
        canvas.outline(&d.bbox, c);
    }
    Ok(canvas.img)
}

/// `infer`: boxes for one sample of the eval split (`boxes.json`) and its
/// BEV picture (`bev.ppm`).
pub fn infer_run(cfg: &RunConfig, ckpt: &Path, index: usize, out: &Path) -> Result<InferOutput> {
    let (model, store) = load_model(cfg, ckpt)?;
    let samples = read_split(&cfg.dataset, &cfg.eval_split)?;
    let sample = samples.get(index).ok_or_else(|| {
        Error::Invalid(format!(
            "sample index {index} out of range: split `{}` has {} samples",
            cfg.eval_split,
            samples.len()
        ))
    })?;
    let prep = model.prepare(sample)?;
    model.counters.reset();
    let preds = model.predict(&store, &[&prep], &cfg.decode)?.remove(0);
    let verdicts = classify(&preds, &prep.gt);
    let detections: Vec<Detection> = preds
        .into_iter()
        .zip(verdicts)
        .map(|(b, verdict)| Detection {
            class_name: CLASS_NAMES[b.class_id].to_string(),
            bbox: b,
            verdict,
        })
        .collect();
    let result = InferOutput {
        token: sample.token.clone(),
        detections,
        ground_truth: prep.gt.clone(),
        counters: model.counters.snapshot(),
    };
    ensure_dir(out)?;
    write_json(&out.join("boxes.json"), &result)?;
    let img = render_bev(sample, &cfg.model.grid, &prep.gt, &result.detections)?;
    write_atomic(&out.join("bev.ppm"), &encode_ppm(&img))?;
    let tp = result
        .detections
        .iter()
        .filter(|d| d.verdict == Verdict::TruePositive)
        .count();
    eprintln!(
        "infer: {}: {} detections ({tp} TP), {} ground-truth boxes",
        result.token,
        result.detections.len(),
        result.ground_truth.len()
    );
    Ok(result)
}

pub const GRADCHECK_INSTANCES: usize = 5;

/// `gradcheck`: runs the suite, writes `gradcheck.txt`, returns whether
/// every entry passed.
pub fn gradcheck_run(out: &Path) -> Result<(bool, Vec<SuiteEntry>)> {
    let t = Instant::now();
    let entries = gradient_suite(GRADCHECK_INSTANCES, |e| eprintln!("{e}"))?;
    let ok = entries.iter().all(|e| e.passed());
    let mut text = String::new();
    for e in &entries {
        text.push_str(&format!("{e}\n"));
        for r in &e.reports {
            text.push_str(&format!("    {r}\n"));
        }
    }
    let failed = entries.iter().filter(|e| !e.passed()).count();
    text.push_str(&format!(
        "{} ops, {failed} failed, {:.1}s\n",
        entries.len(),
        t.elapsed().as_secs_f64()
    ));
    ensure_dir(out)?;
    write_atomic(&out.join("gradcheck.txt"), text.as_bytes())?;
    eprintln!("gradcheck: {} ops, {failed} failed", entries.len());
    Ok((ok, entries))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub cam_align: bool,
    pub aux: bool,
    pub sca: bool,
    pub mona: bool,
}

impl Toggles {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.model.camera_branch = true;
        c.model.cam_align.enabled = self.cam_align;
        c.model.aux.enabled = self.aux;
        c.model.sca.enabled = self.sca;
        c.model.backbone.mona = self.mona;
        c
    }
}

/// The seven rows of the toggle matrix, in table order.
pub fn ablation_variants() -> Vec<(&'static str, Toggles)> {
    let t = |cam_align, aux, sca, mona| Toggles {
        cam_align,
        aux,
        sca,
        mona,
    };
    vec![
        ("baseline", t(false, false, false, false)),
        ("+CAM", t(true, false, false, false)),
        ("+CATB", t(false, true, false, false)),
        ("+SCA", t(false, false, true, false)),
        ("+CAM+CATB", t(true, true, false, false)),
        ("+CAM+CATB+SCA", t(true, true, true, false)),
        ("+CAM+CATB+SCA+Mona", t(true, true, true, true)),
    ]
}

pub const NO_SCA: Toggles = Toggles {
    cam_align: true,
    aux: true,
    sca: false,
    mona: true,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub toggles: Toggles,
    pub map: f64,
    pub nds: f64,
    pub ap_meteor: Option<f64>,
    pub ap_platform: Option<f64>,
    pub inference_params: usize,
    pub infer_ms_per_sample: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeteorComparison {
    pub seeds: Vec<u64>,
    pub full: Vec<f64>,
    pub no_sca: Vec<f64>,
    pub full_mean: f64,
    pub no_sca_mean: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Overhead {
    pub baseline_inference_params: usize,
    pub full_inference_params: usize,
    pub sca_params: usize,
    pub mona_params: usize,
    /// `(sca + mona) / baseline` inference parameters.
    pub sca_mona_param_ratio: f64,
    pub fused_stage_params: usize,
    pub sca_fraction_of_fused_stage: f64,
    pub baseline_infer_ms_per_sample: f64,
    pub full_infer_ms_per_sample: f64,
    /// Relative wall-clock increase of inference, full over baseline.
    pub compute_overhead: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
    pub meteor: MeteorComparison,
    pub overhead: Overhead,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "config,cam_align,aux,sca,mona,mAP,NDS,AP_Meteor,AP_Platform,inference_params,infer_ms_per_sample\n",
    );
    let opt = |v: Option<f64>| v.map(|a| format!("{a:.6}")).unwrap_or_default();
    for r in rows {
        let t = r.toggles;
        s.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{},{},{},{:.3}\n",
            r.config,
            t.cam_align as u8,
            t.aux as u8,
            t.sca as u8,
            t.mona as u8,
            r.map,
            r.nds,
            opt(r.ap_meteor),
            opt(r.ap_platform),
            r.inference_params,
            r.infer_ms_per_sample
        ));
    }
    s
}

fn infer_ms(model: &Model, store: &ParamStore<f32>, data: &[Prepared], opts: &DecodeOptions) -> Result<f64> {
    let t = Instant::now();
    predict_all(model, store, data, opts)?;
    Ok(t.elapsed().as_secs_f64() * 1e3 / data.len().max(1) as f64)
}

/// `ablate`: generates (or reuses) the shared dataset under `out/data`, trains
/// every variant from the same seed, then repeats full vs no-attention over
/// the extra seeds. Writes `ablation.csv`, `meteor.csv`, `overhead.json` and
/// `ablation.json`.
pub fn ablate_run(base: &RunConfig, out: &Path) -> Result<AblationSummary> {
    base.validate()?;
    let a = &base.ablate;
    let root = out.join("data");
    let mut cfg = base.clone();
    cfg.gen.num_scenes = a.num_scenes;
    cfg.gen.val_scenes = a.val_scenes;
    cfg.dataset = root.clone();
    cfg.train.steps = a.steps;
    cfg.eval_split = if a.val_scenes > 0 { "val" } else { "train" }.into();
    let reuse = read_meta(&root).is_ok()
        && crate::dataset::read_splits(&root)
            .is_ok_and(|s| s.train.len() + s.val.len() == a.num_scenes && s.val.len() == a.val_scenes);
    if reuse {
        eprintln!("ablate: reusing dataset {}", root.display());
    } else {
        gen_run(&cfg, &root)?;
    }
    let mut rows = Vec::new();
    let mut stores = Vec::new();
    for (name, t) in ablation_variants() {
        let c = t.apply(&cfg);
        let o = train_model(&c, name, true, None)?;
        let eval = load_prepared(&o.model, &c.dataset, &c.eval_split)?;
        let ms = infer_ms(&o.model, &o.store, &eval, &c.decode)?;
        let row = AblationRow {
            config: name.to_string(),
            toggles: t,
            map: o.report.map,
            nds: o.report.nds,
            ap_meteor: o.report.class_ap(CLASS_NAMES[METEOR]),
            ap_platform: o.report.class_ap(CLASS_NAMES[1 - METEOR]),
            inference_params: Model::inference_params(&o.store),
            infer_ms_per_sample: ms,
        };
        eprintln!(
            "ablate: {name:<20} mAP {:.4} NDS {:.4} ({:.0}s)",
            row.map, row.nds, o.summary.seconds
        );
        rows.push(row);
        stores.push((o.store, o.report));
    }
    let full_toggles = ablation_variants().last().expect("seven variants").1;
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|k| cfg.train.seed + k).collect();
    let meteor = |r: &MetricsReport| r.class_ap(CLASS_NAMES[METEOR]).unwrap_or(0.0);
    let mut full = vec![meteor(&stores.last().expect("seven variants").1)];
    let mut no_sca = Vec::new();
    for (k, &seed) in seeds.iter().enumerate() {
        if k > 0 {
            let mut c = full_toggles.apply(&cfg);
            c.train.seed = seed;
            full.push(meteor(&train_model(&c, "full", true, None)?.report));
        }
        let mut c = NO_SCA.apply(&cfg);
        c.train.seed = seed;
        no_sca.push(meteor(&train_model(&c, "no-sca", true, None)?.report));
        eprintln!(
            "ablate: seed {seed}: Meteor AP full {:.4} vs no-SCA {:.4}",
            full[k], no_sca[k]
        );
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let meteor = MeteorComparison {
        full_mean: mean(&full),
        no_sca_mean: mean(&no_sca),
        seeds,
        full,
        no_sca,
    };
    let full_store = &stores.last().expect("seven variants").0;
    let sca_params = full_store.count_where(|p| p.name.starts_with("sca."));
    let mona_params = full_store.count_where(|p| is_adapter_param(&p.name));
    let (base_row, full_row) = (&rows[0], rows.last().expect("seven variants"));
    let fused = Model::fused_stage_params(full_store);
    let overhead = Overhead {
        baseline_inference_params: base_row.inference_params,
        full_inference_params: full_row.inference_params,
        sca_params,
        mona_params,
        sca_mona_param_ratio: (sca_params + mona_params) as f64 / base_row.inference_params as f64,
        fused_stage_params: fused,
        sca_fraction_of_fused_stage: sca_params as f64 / fused as f64,
        baseline_infer_ms_per_sample: base_row.infer_ms_per_sample,
        full_infer_ms_per_sample: full_row.infer_ms_per_sample,
        compute_overhead: full_row.infer_ms_per_sample / base_row.infer_ms_per_sample - 1.0,
    };
    ensure_dir(out)?;
    write_atomic(&out.join("ablation.csv"), ablation_csv(&rows).as_bytes())?;
    let mut m = String::from("seed,full_meteor_ap,no_sca_meteor_ap\n");
    for (k, s) in meteor.seeds.iter().enumerate() {
        m.push_str(&format!("{s},{:.6},{:.6}\n", meteor.full[k], meteor.no_sca[k]));
    }
    m.push_str(&format!("mean,{:.6},{:.6}\n", meteor.full_mean, meteor.no_sca_mean));
    write_atomic(&out.join("meteor.csv"), m.as_bytes())?;
    write_json(&out.join("overhead.json"), &overhead)?;
    let summary = AblationSummary { rows, meteor, overhead };
    write_json(&out.join("ablation.json"), &summary)?;
    eprintln!(
        "ablate: mean Meteor AP over {} seeds: full {:.4}, no-SCA {:.4}; SCA+Mona params {:.2}% of baseline, SCA {:.3}% of fused stage",
        summary.meteor.seeds.len(),
        summary.meteor.full_mean,
        summary.meteor.no_sca_mean,
        100.0 * summary.overhead.sca_mona_param_ratio,
        100.0 * summary.overhead.sca_fraction_of_fused_stage
    );
    Ok(summary)
}
