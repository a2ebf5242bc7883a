use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, DVector};
use relate::datagen::{
    apply_whitening, fit_whitening, read_batch, shift_image, write_batch, BatchManifest, GeneratorSpec, Label, PairBatch,
    Shape, WhiteningTransform,
};
use relate::energy_isa::{self, EnergyModel};
use relate::gae::{self, GaeModel};
use relate::grbm::{self, GbmModel};
use relate::infer::{self, FlowField, FlowOptions};
use relate::render::{self, AnalogyRow};
use relate::spectral::{self, WarpMatrix};
use relate::tensor_core::{load_params, save_params, FactoredParams};
use relate::training::{TraceRecord, TrainConfig, TrainReport};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ModelConfig, ModelKind, Preprocess};
use crate::error::CliError;

pub const RUN_MANIFEST: &str = "run.json";
pub const CHECKPOINT: &str = "model.relw";
pub const TRACE: &str = "trace.jsonl";
pub const WHITENING: &str = "whitening.json";

/// Written next to every checkpoint; enough to resume or analyze the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub isa: energy_isa::IsaConfig,
    pub dataset: PathBuf,
    pub preprocess: Preprocess,
    pub x_shape: Shape,
    pub y_shape: Shape,
    pub epochs_completed: usize,
    pub norm_running_avg: f64,
    pub checkpoint: String,
    pub trace: String,
    pub final_loss: Option<f64>,
    /// File holding the whitening transform, for runs trained on components.
    #[serde(default)]
    pub whitening: Option<String>,
    pub created_unix: u64,
}

/// Column-major serialization of a [`WhiteningTransform`].
#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredWhitening {
    dim: usize,
    components: usize,
    retained_variance: f64,
    mean: Vec<f64>,
    projection: Vec<f64>,
    inverse_projection: Vec<f64>,
}

impl StoredWhitening {
    fn from_transform(t: &WhiteningTransform) -> Self {
        StoredWhitening {
            dim: t.mean.len(),
            components: t.components(),
            retained_variance: t.retained_variance,
            mean: t.mean.as_slice().to_vec(),
            projection: t.projection.as_slice().to_vec(),
            inverse_projection: t.inverse_projection.as_slice().to_vec(),
        }
    }

    fn into_transform(self) -> Result<WhiteningTransform, CliError> {
        let (d, k) = (self.dim, self.components);
        if self.mean.len() != d || self.projection.len() != d * k || self.inverse_projection.len() != d * k {
            return Err(CliError::Data("whitening file has inconsistent sizes".into()));
        }
        Ok(WhiteningTransform {
            mean: DVector::from_vec(self.mean),
            projection: DMatrix::from_vec(k, d, self.projection),
            inverse_projection: DMatrix::from_vec(d, k, self.inverse_projection),
            retained_variance: self.retained_variance,
        })
    }
}

/// Filters as seen from pixel space: a filter `w` on whitened input
/// responds to `Pᵀw`.
fn pixel_filters(params: &FactoredParams, whitening: Option<&WhiteningTransform>) -> FactoredParams {
    let Some(t) = whitening else {
        return params.clone();
    };
    let mut out = params.clone();
    out.wx = t.projection.tr_mul(&params.wx);
    if params.wy.nrows() > 0 {
        out.wy = t.projection.tr_mul(&params.wy);
    }
    out
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    render::write_json(path, value).map_err(CliError::from)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// generate

/// Generates the configured dataset into `out` (default
/// `<output_dir>/dataset.relb`) with its JSON sidecar.
pub fn generate(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf, CliError> {
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.dataset_path());
    write_generated(&cfg.dataset.generator, &path)?;
    Ok(path)
}

/// Regenerates a dataset from the generator recorded in a sidecar manifest.
pub fn regenerate(manifest: &Path, out: &Path) -> Result<(), CliError> {
    let m: BatchManifest = read_json(manifest)?;
    let spec = m
        .generator
        .ok_or_else(|| CliError::Data(format!("{}: no generator recorded", manifest.display())))?;
    write_generated(&spec, out)
}

fn write_generated(spec: &GeneratorSpec, path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    let batch = spec.generate()?;
    let mut manifest = BatchManifest::for_batch(&batch, Some(spec.clone()));
    manifest.created = Some(now_unix().to_string());
    write_batch(path, &batch, Some(&manifest))?;
    log::info!("wrote {} pairs to {}", batch.len(), path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train

enum Model {
    Gae(GaeModel),
    Grbm(GbmModel),
    Isa(EnergyModel),
}

impl Model {
    fn init(cfg: &ExperimentConfig, i: usize, j: usize) -> Result<Self, CliError> {
        let m = &cfg.model;
        Ok(match m.kind {
            ModelKind::Gae => Model::Gae(GaeModel::new(i, j, m.mapping_units, m.factors, m.tied, cfg.seed)?),
            ModelKind::Grbm => Model::Grbm(GbmModel::new(i, j, m.mapping_units, m.factors, cfg.seed)?),
            ModelKind::Isa => {
                let dim_y = if m.tied { 0 } else { j };
                Model::Isa(EnergyModel::random(i, dim_y, m.factors, cfg.isa.subspace_size, cfg.seed)?)
            }
        })
    }

    fn restore(kind: ModelKind, tied: bool, params: FactoredParams, norm_avg: f64) -> Result<Self, CliError> {
        Ok(match kind {
            ModelKind::Gae => {
                let mut m = GaeModel::from_params(params, tied)?;
                m.norm_running_avg = norm_avg;
                Model::Gae(m)
            }
            ModelKind::Grbm => {
                let mut m = GbmModel::from_params(params)?;
                m.norm_running_avg = norm_avg;
                Model::Grbm(m)
            }
            ModelKind::Isa => Model::Isa(EnergyModel::from_gated(&params)?),
        })
    }

    fn params(&self) -> FactoredParams {
        match self {
            Model::Gae(m) => m.params.clone(),
            Model::Grbm(m) => m.params.clone(),
            Model::Isa(m) => m.to_gated(),
        }
    }

    fn norm_avg(&self) -> f64 {
        match self {
            Model::Gae(m) => m.norm_running_avg,
            Model::Grbm(m) => m.norm_running_avg,
            Model::Isa(_) => 1.0,
        }
    }

    fn train(&mut self, batch: &PairBatch, cfg: &ExperimentConfig, first_epoch: usize) -> relate::Result<TrainReport> {
        let mut log_progress = |r: &TraceRecord| {
            if r.batch == 0 {
                log::debug!("epoch {} loss {:.6}", r.epoch, r.loss);
            }
        };
        match self {
            Model::Gae(m) => gae::train_from_epoch(m, batch, &cfg.train, first_epoch, &mut log_progress),
            Model::Grbm(m) => grbm::train_from_epoch(m, batch, &cfg.train, first_epoch, &mut log_progress),
            Model::Isa(m) => energy_isa::train_isa_from_epoch(m, batch, &cfg.isa, first_epoch, &mut log_progress),
        }
    }
}

/// Loads a dataset and applies the model-specific preprocessing.
fn load_training_data(path: &Path, preprocess: Preprocess, kind: ModelKind) -> Result<PairBatch, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!(
            "{}: dataset not found (run `relate generate` first)",
            path.display()
        )));
    }
    let (batch, _) = read_batch(path)?;
    let batch = preprocess.apply(&batch);
    Ok(if kind == ModelKind::Grbm { grbm::binarize_median(&batch) } else { batch })
}

pub struct TrainOutcome {
    pub epochs_completed: usize,
    pub final_loss: Option<f64>,
}

/// Trains (or resumes) the configured model and writes checkpoint,
/// manifest, trace and filter grids into the output directory.
pub fn train(cfg: &ExperimentConfig, dataset: Option<&Path>, resume: bool) -> Result<TrainOutcome, CliError> {
    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    let data_path = dataset.map(Path::to_path_buf).unwrap_or_else(|| cfg.dataset_path());
    let pixels = load_training_data(&data_path, cfg.dataset.preprocess, cfg.model.kind)?;
    let whitening = cfg.dataset.whiten.map(|keep| fit_whitening(&pixels, keep)).transpose()?;
    let batch = match &whitening {
        Some(t) => {
            log::info!("whitened to {} components", t.components());
            apply_whitening(&pixels, t)?
        }
        None => pixels.clone(),
    };
    cfg.check_dims(batch.x_dim(), batch.y_dim())?;

    let trace_path = dir.join(TRACE);
    let (mut model, first_epoch) = if resume {
        let prev: RunManifest = read_json(&dir.join(RUN_MANIFEST))?;
        if prev.kind != cfg.model.kind || prev.model.factors != cfg.model.factors {
            return Err(CliError::Config(format!(
                "checkpoint holds a {:?} model with {} factors, config asks for {:?} with {}",
                prev.kind, prev.model.factors, cfg.model.kind, cfg.model.factors
            )));
        }
        let params = load_params(&dir.join(&prev.checkpoint))?;
        let model = Model::restore(prev.kind, prev.model.tied, params, prev.norm_running_avg)?;
        (model, prev.epochs_completed)
    } else {
        (Model::init(cfg, batch.x_dim(), batch.y_dim())?, 0)
    };

    let report = model.train(&batch, cfg, first_epoch)?;
    let epochs = match cfg.model.kind {
        ModelKind::Isa => cfg.isa.epochs,
        _ => cfg.train.epochs,
    };

    let mut trace = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume)
        .truncate(!resume)
        .open(&trace_path)
        .map_err(|e| CliError::io(&trace_path, e))?;
    let mut lines = String::new();
    for r in &report.records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    trace.write_all(lines.as_bytes()).map_err(|e| CliError::io(&trace_path, e))?;

    let params = model.params();
    save_params(&dir.join(CHECKPOINT), &params)?;
    if let Some(t) = &whitening {
        write_json(&dir.join(WHITENING), &StoredWhitening::from_transform(t))?;
    }
    export_grids(
        &pixel_filters(&params, whitening.as_ref()),
        pixels.x_shape,
        pixels.y_shape,
        dir,
        "png",
        None,
        3,
    )?;

    let final_loss = report.epoch_losses.last().copied();
    let manifest = RunManifest {
        format: "relate-run".into(),
        kind: cfg.model.kind,
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        isa: cfg.isa.clone(),
        dataset: data_path,
        preprocess: cfg.dataset.preprocess,
        x_shape: pixels.x_shape,
        y_shape: pixels.y_shape,
        epochs_completed: first_epoch + epochs,
        norm_running_avg: model.norm_avg(),
        checkpoint: CHECKPOINT.into(),
        trace: TRACE.into(),
        final_loss,
        whitening: whitening.as_ref().map(|_| WHITENING.to_string()),
        created_unix: now_unix(),
    };
    write_json(&dir.join(RUN_MANIFEST), &manifest)?;
    Ok(TrainOutcome {
        epochs_completed: manifest.epochs_completed,
        final_loss,
    })
}

// ---------------------------------------------------------------------------
// export-filters

fn grid_columns(n: usize) -> usize {
    ((n as f64).sqrt().ceil() as usize).max(1)
}

/// Writes `filters_x.<ext>` and (when present) `filters_y.<ext>`.
pub fn export_grids(
    params: &FactoredParams,
    x_shape: Shape,
    y_shape: Shape,
    dir: &Path,
    ext: &str,
    columns: Option<usize>,
    scale: u32,
) -> Result<Vec<PathBuf>, CliError> {
    let mut written = Vec::new();
    let cols = columns.unwrap_or_else(|| grid_columns(params.wx.ncols()));
    for (name, w, shape) in [("filters_x", &params.wx, x_shape), ("filters_y", &params.wy, y_shape)] {
        if w.nrows() == 0 {
            continue;
        }
        let img = render::filter_grid(w, shape, cols, scale)?;
        let path = dir.join(format!("{name}.{ext}"));
        render::save_image(&img, &path)?;
        written.push(path);
    }
    Ok(written)
}

pub struct LoadedRun {
    pub manifest: RunManifest,
    pub params: FactoredParams,
    pub whitening: Option<WhiteningTransform>,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun, CliError> {
    let manifest: RunManifest = read_json(&dir.join(RUN_MANIFEST))?;
    let params = load_params(&dir.join(&manifest.checkpoint))?;
    let whitening = match &manifest.whitening {
        Some(file) => Some(read_json::<StoredWhitening>(&dir.join(file))?.into_transform()?),
        None => None,
    };
    Ok(LoadedRun {
        manifest,
        params,
        whitening,
    })
}

pub fn export_filters(
    run: &Path,
    out: &Path,
    ext: &str,
    columns: Option<usize>,
    scale: u32,
) -> Result<Vec<PathBuf>, CliError> {
    let loaded = load_run(run)?;
    ensure_dir(out)?;
    let m = &loaded.manifest;
    let params = pixel_filters(&loaded.params, loaded.whitening.as_ref());
    export_grids(&params, m.x_shape, m.y_shape, out, ext, columns, scale)
}

// ---------------------------------------------------------------------------
// analyze

/// Parses `identity:N`, `cyclic:N:S`, `shift2d:H:W:DX:DY`,
/// `split:H:W:TDX:TDY:BDX:BDY` or `rotation:H:W:DEGREES`.
pub fn parse_warp(spec: &str) -> Result<WarpMatrix, CliError> {
    let bad = || CliError::Config(format!("bad warp spec {spec:?}"));
    let mut parts = spec.split(':');
    let kind = parts.next().ok_or_else(bad)?;
    let nums: Vec<f64> = parts.map(|p| p.parse::<f64>().map_err(|_| bad())).collect::<Result<_, _>>()?;
    let int = |i: usize| -> Result<i64, CliError> {
        let v = *nums.get(i).ok_or_else(bad)?;
        if v.fract() == 0.0 {
            Ok(v as i64)
        } else {
            Err(bad())
        }
    };
    let size = |i: usize| -> Result<usize, CliError> { usize::try_from(int(i)?).map_err(|_| bad()) };
    let wrapped = |d: i64, n: usize| d.rem_euclid(n as i64) as usize;
    let warp = match (kind, nums.len()) {
        ("identity", 1) => WarpMatrix::identity(size(0)?),
        ("cyclic", 2) => {
            let n = size(0)?;
            spectral::make_cyclic_shift(n, wrapped(int(1)?, n.max(1)))?
        }
        ("shift2d", 4) => {
            let (h, w) = (size(0)?, size(1)?);
            spectral::make_2d_shift(h, w, wrapped(int(3)?, h.max(1)), wrapped(int(2)?, w.max(1)))?
        }
        ("split", 6) => {
            let (h, w) = (size(0)?, size(1)?);
            let half = (h / 2).max(1);
            let top = (wrapped(int(3)?, half), wrapped(int(2)?, w.max(1)));
            let bottom = (wrapped(int(5)?, half), wrapped(int(4)?, w.max(1)));
            spectral::make_split_shift(h, w, top, bottom)?
        }
        ("rotation", 3) => spectral::make_rotation(
            size(0)?,
            size(1)?,
            nums[2].to_radians(),
            relate::datagen::Interpolation::default(),
        )
        .orthogonalized(),
        _ => return Err(bad()),
    };
    Ok(warp)
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleReport {
    pub index: usize,
    pub label: Option<Label>,
    pub median_dx: f64,
    pub median_dy: f64,
    pub uniformity: f64,
    /// Correlation of the analogy prediction with the true warped new input,
    /// when the label determines it.
    pub analogy_correlation: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnergySummary {
    /// Mean over samples of the summed cross terms.
    pub mean_cross: f64,
    /// Mean over samples of the summed quadratic terms.
    pub mean_quadratic: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct AnalysisReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eigen: Option<spectral::EigenSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub filters_x: Option<spectral::FilterReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub filters_y: Option<spectral::FilterReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<SampleReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_analogy_correlation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub code_clustering: Option<infer::CodeClustering>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energy: Option<EnergySummary>,
}

pub struct AnalyzeRequest<'a> {
    pub run: Option<&'a Path>,
    pub dataset: Option<&'a Path>,
    pub warps: &'a [String],
    pub samples: usize,
    pub out: &'a Path,
}

fn truth_for(label: Option<Label>, x_new: &DVector<f64>, shape: Shape) -> Option<DVector<f64>> {
    match label? {
        Label::Shift { dx, dy } if shape.frames == 1 => Some(DVector::from_vec(shift_image(
            x_new.as_slice(),
            shape.height,
            shape.width,
            dx,
            dy,
            true,
        ))),
        _ => None,
    }
}

pub fn analyze(req: &AnalyzeRequest) -> Result<AnalysisReport, CliError> {
    ensure_dir(req.out)?;
    let mut report = AnalysisReport::default();
    let run = req.run.map(load_run).transpose()?;

    if !req.warps.is_empty() {
        let warps = req.warps.iter().map(|s| parse_warp(s)).collect::<Result<Vec<_>, _>>()?;
        let structure = spectral::shared_eigenbasis(&warps)?;
        report.eigen = Some(structure.summary());
        if let Some(run) = &run {
            let p = &pixel_filters(&run.params, run.whitening.as_ref());
            let n = structure.dim();
            if p.wx.nrows() != n {
                return Err(CliError::Config(format!(
                    "warps act on {n} pixels but the model has {} inputs",
                    p.wx.nrows()
                )));
            }
            let fx = spectral::filter_diagnostics(&p.wx, &structure)?;
            fs::write(req.out.join("filters_x.csv"), fx.to_csv()).map_err(|e| CliError::io(req.out, e))?;
            report.filters_x = Some(fx);
            if p.wy.nrows() == n {
                report.filters_y = Some(spectral::filter_diagnostics(&p.wy, &structure)?);
            }
        }
    }

    if let (Some(run), Some(data)) = (&run, req.dataset) {
        let m = &run.manifest;
        let (batch, _) = read_batch(data)?;
        let mut batch = m.preprocess.apply(&batch);
        let p = &run.params;
        if let Some(t) = &run.whitening {
            if m.kind != ModelKind::Isa {
                return Err(CliError::Config(
                    "flow and analogy analysis needs a run trained on pixels, not whitened components".into(),
                ));
            }
            batch = apply_whitening(&batch, t)?;
        }
        if m.kind == ModelKind::Isa {
            let model = EnergyModel::from_gated(p)?;
            let count = req.samples.min(batch.len());
            let (mut cross, mut quad) = (0.0, 0.0);
            for a in 0..count {
                let x = batch.x.column(a).into_owned();
                let y = if model.dim_y() > 0 { batch.y.column(a).into_owned() } else { DVector::zeros(0) };
                let e = energy_isa::expand_energy(&model, &x, &y)?;
                cross += e.cross.sum();
                quad += e.quadratic.sum();
            }
            report.energy = Some(EnergySummary {
                mean_cross: cross / count.max(1) as f64,
                mean_quadratic: quad / count.max(1) as f64,
            });
        } else {
            analyze_pairs(p, &batch, req, &mut report)?;
        }
    }
    write_json(&req.out.join("analysis.json"), &report)?;
    Ok(report)
}

fn analyze_pairs(
    p: &FactoredParams,
    batch: &PairBatch,
    req: &AnalyzeRequest,
    report: &mut AnalysisReport,
) -> Result<(), CliError> {
    if batch.x_dim() != p.wx.nrows() || batch.y_dim() != p.wy.nrows() {
        return Err(CliError::Config(format!(
            "dataset has {}/{} inputs, model expects {}/{}",
            batch.x_dim(),
            batch.y_dim(),
            p.wx.nrows(),
            p.wy.nrows()
        )));
    }
    let n = req.samples.min(batch.len());
    if n == 0 {
        return Ok(());
    }
    let shape = batch.x_shape;
    let flows_possible = shape.frames == 1 && batch.x_shape == batch.y_shape && shape.len() <= infer::MAX_FLOW_PIXELS;
    let cols = |m: &DMatrix<f64>, a: usize| m.column(a).into_owned();
    let mut flows: Vec<FlowField> = Vec::new();
    let mut preds = Vec::new();
    let mut corr_sum = (0.0, 0usize);
    for a in 0..n {
        let (x, y) = (cols(&batch.x, a), cols(&batch.y, a));
        let next = (a + 1) % batch.len();
        let x_new = cols(&batch.x, next);
        let y_pred = infer::analogy(p, &x, &y, &x_new)?;
        let label = batch.label(a);
        let analogy_correlation = truth_for(label, &x_new, shape).map(|t| infer::correlation(&y_pred, &t));
        if let Some(c) = analogy_correlation {
            corr_sum = (corr_sum.0 + c, corr_sum.1 + 1);
        }
        let (mut median_dx, mut median_dy, mut uniformity) = (f64::NAN, f64::NAN, f64::NAN);
        if flows_possible {
            let flow = infer::infer_flow(p, &x, &y, shape, FlowOptions::default())?;
            (median_dx, median_dy) = flow.median_displacement();
            uniformity = flow.uniformity();
            render::save_image(&render::flow_image(&flow, 9)?, &req.out.join(format!("flow_{a:03}.png")))?;
            flows.push(flow);
        }
        preds.push((x, y, x_new, y_pred));
        report.samples.push(SampleReport {
            index: a,
            label,
            median_dx,
            median_dy,
            uniformity,
            analogy_correlation,
        });
    }
    if corr_sum.1 > 0 {
        report.mean_analogy_correlation = Some(corr_sum.0 / corr_sum.1 as f64);
    }
    if batch.labels.is_some() {
        report.code_clustering = Some(infer::code_clustering(p, &batch.select(&(0..n).collect::<Vec<_>>()))?);
    }
    if flows_possible {
        let rows: Vec<AnalogyRow> = preds
            .iter()
            .zip(&flows)
            .map(|((x, y, xn, yp), flow)| AnalogyRow {
                x_src: x.as_slice(),
                y_src: y.as_slice(),
                flow,
                x_new: xn.as_slice(),
                y_pred: yp.as_slice(),
            })
            .collect();
        render::save_image(&render::analogy_strip(&rows, shape, 4)?, &req.out.join("analogies.png"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck

pub fn gradcheck(repeats: u64) -> Result<(f64, Vec<gae::GradCheckCase>), CliError> {
    let cases = gae::gradcheck_suite(repeats)?;
    let worst = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok((worst, cases))
}
