//! Stage orchestration: configuration, content-addressed stage directories,
//! the in-memory run used by `end2end` and the sweep, and the disk-backed
//! single-stage runs used by the per-stage commands.
//!
//! Every stage writes to `<out>/<stage>-<hash>`, where the hash covers the
//! stage's own settings and its upstream stage's hash. Running the stages one
//! by one and running them all at once therefore produce the same files in
//! the same places.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{self, TrainConfig, Trained, VoxelFeatureField};
use crate::liftfuse::{self, FeatureLibrary, SbffParams, ViewContribution};
use crate::metrics::{self, Evaluation, SweepCell, SweepGrid, SweepOutcome, SweepRow};
use crate::query::{self, FusionMode, FusionParams, Lexicon, QueryResult, Variant, UNPREDICTED};
use crate::render::{self, Coverage, RenderedView, DEFAULT_EPS_REL, DEFAULT_SPLAT_PX};
use crate::rng::{self, tag};
use crate::scene::{generate_scene, SceneSpec};
use crate::scene::{load_cloud, write_cloud, PlyFormat};
use crate::scene::{bounding_box, PointCloud};
use crate::viewgen::{all_rigs, CameraRig, RigBundle, ViewParams};
use crate::vlmio::{
    maskset_path, read_maskset, synthetic_text_table, write_maskset, MaskSet, OracleParams, TableMode,
    TextEmbeddingTable, DEFAULT_DIM,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenScene,
    Render,
    Extract,
    Lift,
    Distill,
    Segment,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenScene,
        Stage::Render,
        Stage::Extract,
        Stage::Lift,
        Stage::Distill,
        Stage::Segment,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenScene => "gen-scene",
            Stage::Render => "render",
            Stage::Extract => "extract",
            Stage::Lift => "lift",
            Stage::Distill => "distill",
            Stage::Segment => "segment",
            Stage::Eval => "eval",
        }
    }

    fn dir_prefix(self) -> &'static str {
        match self {
            Stage::GenScene => "scene",
            other => other.name(),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("{stage}: missing input {path}; run `{needs}` first")]
    MissingInput { stage: Stage, path: PathBuf, needs: Stage },
    #[error("segment: no distilled field at {path}; run `distill` first or set alpha to 0")]
    MissingCheckpoint { path: PathBuf },
    #[error("invalid config: {0}")]
    Config(String),
}

impl PipelineError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Stage { stage, .. } | PipelineError::MissingInput { stage, .. } => Some(*stage),
            PipelineError::MissingCheckpoint { .. } => Some(Stage::Segment),
            PipelineError::Config(_) => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Stage { .. } => "stage_failed",
            PipelineError::MissingInput { .. } => "missing_input",
            PipelineError::MissingCheckpoint { .. } => "missing_checkpoint",
            PipelineError::Config(_) => "invalid_config",
        }
    }
}

fn at<E: std::error::Error + Send + Sync + 'static>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        source: Box::new(e),
    }
}

fn io_at(stage: Stage, path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Stage {
        stage,
        source: format!("{}: {e}", path.display()).into(),
    }
}

/// Where the point cloud comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneSource {
    /// Procedural urban block of `side` meters at `density` points per m².
    Urban { side: f64, density: f64 },
    /// Fully specified procedural scene; its own seed is replaced by the
    /// run seed.
    Spec { spec: SceneSpec },
    /// Labeled PLY file.
    File { path: PathBuf },
}

impl Default for SceneSource {
    fn default() -> Self {
        SceneSource::Urban {
            side: 64.0,
            density: 27.0,
        }
    }
}

/// Where mask-level 2D features come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provider {
    /// Ground-truth masks with optionally perturbed class embeddings.
    Oracle(OracleParams),
    /// `view_<id>.ou3d` files produced by an external model.
    Files { dir: PathBuf },
}

impl Default for Provider {
    fn default() -> Self {
        Provider::Oracle(OracleParams::default())
    }
}

/// Where the class text embeddings come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TextSource {
    /// Generated for the cloud's class names.
    Synthetic { dim: usize, mode: TableMode },
    /// `OU3T` file.
    File { path: PathBuf },
}

impl Default for TextSource {
    fn default() -> Self {
        TextSource::Synthetic {
            dim: DEFAULT_DIM,
            mode: TableMode::Orthogonal,
        }
    }
}

/// One run's settings. Every randomized component draws its seed from
/// `seed`; the `seed` fields of the nested settings are overwritten by
/// [`PipelineConfig::resolved`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub scene: SceneSource,
    pub out: PathBuf,
    pub views: ViewParams,
    pub splat_px: u32,
    /// Relative depth tolerance of the visibility test.
    pub eps_rel: f64,
    pub sbff: SbffParams,
    pub train: TrainConfig,
    pub fusion: FusionParams,
    pub provider: Provider,
    pub text: TextSource,
    /// JSON phrase-to-classes map for queries; class names always match
    /// themselves.
    pub lexicon: Option<PathBuf>,
    /// Free-text query restricting the classes scored by `segment`.
    pub query: Option<String>,
    pub seed: u64,
    pub threads: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scene: SceneSource::default(),
            out: PathBuf::from("runs"),
            views: ViewParams::default(),
            splat_px: DEFAULT_SPLAT_PX,
            eps_rel: DEFAULT_EPS_REL,
            sbff: SbffParams::default(),
            train: TrainConfig::default(),
            fusion: FusionParams::default(),
            provider: Provider::default(),
            text: TextSource::default(),
            lexicon: None,
            query: None,
            seed: 0,
            threads: None,
        }
    }
}

/// Stage settings that feed each content hash.
#[derive(Serialize)]
struct SceneKey<'a> {
    scene: &'a SceneSource,
    text: &'a TextSource,
    seed: u64,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Copy with the derived per-stage seeds filled in.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.views.seed = rng::derive(self.seed, &[tag::VIEWS]);
        c.sbff.seed = rng::derive(self.seed, &[tag::SBFF]);
        c.train.seed = rng::derive(self.seed, &[tag::TRAIN_INIT]);
        if let SceneSource::Spec { spec } = &mut c.scene {
            spec.seed = rng::derive(self.seed, &[tag::SCENE]);
        }
        c
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |e: String| PipelineError::Config(e);
        self.views.validate().map_err(|e| cfg(e.to_string()))?;
        render::check_splat(self.splat_px).map_err(|e| cfg(e.to_string()))?;
        self.train.validate().map_err(|e| cfg(e.to_string()))?;
        self.fusion.validate().map_err(|e| cfg(e.to_string()))?;
        if !(self.eps_rel > 0.0 && self.eps_rel.is_finite()) {
            return Err(cfg("eps_rel must be positive".into()));
        }
        if self.sbff.k == 0 {
            return Err(cfg("sbff.k must be positive".into()));
        }
        if let SceneSource::Urban { side, density } = self.scene {
            if !(side > 16.0 && density > 0.0) {
                return Err(cfg("urban scene needs side > 16 and a positive density".into()));
            }
        }
        if let Provider::Oracle(p) = &self.provider {
            if !(p.noise >= 0.0 && p.noise.is_finite()) {
                return Err(cfg("oracle noise must be finite and non-negative".into()));
            }
        }
        Ok(())
    }

    fn oracle_seed(&self) -> u64 {
        rng::derive(self.seed, &[tag::ORACLE])
    }

    fn text_seed(&self) -> u64 {
        rng::derive(self.seed, &[tag::TEXT])
    }

    /// Content-addressed directory of every stage.
    pub fn stage_dirs(&self) -> StageDirs {
        let c = self.resolved();
        let json = |v: &dyn erased::Json| v.to_json();
        let chain = |prev: u64, body: String| rng::fnv1a(format!("{prev:016x}|{body}").as_bytes());
        let scene = chain(
            0,
            json(&SceneKey {
                scene: &c.scene,
                text: &c.text,
                seed: c.seed,
            }),
        );
        let render = chain(scene, json(&(&c.views, c.splat_px)));
        let extract = chain(render, json(&(&c.provider, c.oracle_seed())));
        let lift = chain(extract, json(&(&c.sbff, c.eps_rel)));
        let distill = chain(lift, json(&c.train));
        let segment = chain(distill, json(&(&c.fusion, &c.query, &c.lexicon)));
        let eval = chain(segment, String::new());
        let dir = |s: Stage, h: u64| c.out.join(format!("{}-{h:016x}", s.dir_prefix()));
        StageDirs {
            scene: dir(Stage::GenScene, scene),
            render: dir(Stage::Render, render),
            extract: dir(Stage::Extract, extract),
            lift: dir(Stage::Lift, lift),
            distill: dir(Stage::Distill, distill),
            segment: dir(Stage::Segment, segment),
            eval: dir(Stage::Eval, eval),
        }
    }
}

mod erased {
    pub trait Json {
        fn to_json(&self) -> String;
    }
    impl<T: serde::Serialize> Json for T {
        fn to_json(&self) -> String {
            serde_json::to_string(self).expect("config is serializable")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageDirs {
    pub scene: PathBuf,
    pub render: PathBuf,
    pub extract: PathBuf,
    pub lift: PathBuf,
    pub distill: PathBuf,
    pub segment: PathBuf,
    pub eval: PathBuf,
}

impl StageDirs {
    pub fn get(&self, stage: Stage) -> &Path {
        match stage {
            Stage::GenScene => &self.scene,
            Stage::Render => &self.render,
            Stage::Extract => &self.extract,
            Stage::Lift => &self.lift,
            Stage::Distill => &self.distill,
            Stage::Segment => &self.segment,
            Stage::Eval => &self.eval,
        }
    }
}

pub const CLOUD_FILE: &str = "cloud.ply";
pub const TEXT_FILE: &str = "text_table.ou3t";
pub const RIGS_FILE: &str = "rigs.json";
pub const LIBRARY_FILE: &str = "features.ou3f";
pub const COVERAGE_FILE: &str = "coverage.json";
pub const VISIBLE_FILE: &str = "visible.bin";
pub const FIELD_FILE: &str = "field.ou3v";
pub const LOSS_FILE: &str = "loss.csv";
pub const RESULT_FILE: &str = "result.json";
pub const LABELS_FILE: &str = "labels.bin";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_ECHO: &str = "config.json";

/// The cloud and text table every later stage works on.
#[derive(Debug, Clone)]
pub struct SceneArtifacts {
    pub cloud: PointCloud,
    pub table: TextEmbeddingTable,
}

pub fn build_scene(cfg: &PipelineConfig) -> Result<SceneArtifacts, PipelineError> {
    let c = cfg.resolved();
    let s = Stage::GenScene;
    let cloud = match &c.scene {
        SceneSource::Urban { side, density } => {
            generate_scene(&SceneSpec::urban(rng::derive(c.seed, &[tag::SCENE]), *side, *density)).map_err(at(s))?
        }
        SceneSource::Spec { spec } => generate_scene(spec).map_err(at(s))?,
        SceneSource::File { path } => load_cloud(path).map_err(at(s))?,
    };
    let table = match &c.text {
        TextSource::Synthetic { dim, mode } => {
            synthetic_text_table(cloud.class_names(), *dim, *mode, c.text_seed()).map_err(at(s))?
        }
        TextSource::File { path } => TextEmbeddingTable::read(path).map_err(at(s))?,
    };
    Ok(SceneArtifacts { cloud, table })
}

/// Rigs and rendered views.
pub fn render_stage(cfg: &PipelineConfig, cloud: &PointCloud) -> Result<(Vec<CameraRig>, Vec<RenderedView>), PipelineError> {
    let c = cfg.resolved();
    let rigs = all_rigs(&bounding_box(cloud), &c.views).map_err(at(Stage::Render))?;
    let views = render::render_all(cloud, &rigs, c.splat_px).map_err(at(Stage::Render))?;
    Ok((rigs, views))
}

/// Mask sets for every view, from the oracle or from files.
pub fn extract_stage(
    cfg: &PipelineConfig,
    cloud: &PointCloud,
    views: &[RenderedView],
    table: &TextEmbeddingTable,
) -> Result<Vec<MaskSet>, PipelineError> {
    let c = cfg.resolved();
    let s = Stage::Extract;
    let sets: Vec<MaskSet> = match &c.provider {
        Provider::Oracle(params) => views
            .par_iter()
            .map(|v| crate::vlmio::oracle_masks(v, cloud, table, params, c.oracle_seed()).map_err(at(s)))
            .collect::<Result<_, _>>()?,
        Provider::Files { dir } => views
            .iter()
            .map(|v| {
                let path = maskset_path(dir, v.rig_id);
                if !path.exists() {
                    return Err(PipelineError::Stage {
                        stage: s,
                        source: format!("missing mask file {}", path.display()).into(),
                    });
                }
                read_maskset(&path).map_err(at(s))
            })
            .collect::<Result<_, _>>()?,
    };
    for (m, v) in sets.iter().zip(views) {
        if (m.height, m.width) != (v.height, v.width) {
            return Err(PipelineError::Stage {
                stage: s,
                source: format!(
                    "view {}: masks are {}x{} but the view is {}x{}",
                    v.rig_id, m.height, m.width, v.height, v.width
                )
                .into(),
            });
        }
        if m.num_masks > 0 && m.dim as usize != table.dim() {
            return Err(PipelineError::Stage {
                stage: s,
                source: format!("view {}: feature dim {} but text dim {}", v.rig_id, m.dim, table.dim()).into(),
            });
        }
    }
    Ok(sets)
}

#[derive(Debug, Clone)]
pub struct LiftOutput {
    pub library: FeatureLibrary,
    pub coverage: Coverage,
}

/// Lift every view's masks onto its visible points, balance them and fuse.
pub fn lift_stage(
    cfg: &PipelineConfig,
    cloud: &PointCloud,
    rigs: &[CameraRig],
    views: &[RenderedView],
    masks: &[MaskSet],
) -> Result<LiftOutput, PipelineError> {
    let c = cfg.resolved();
    let s = Stage::Lift;
    let lifts: Vec<Vec<liftfuse::Lift>> = views
        .par_iter()
        .zip(masks.par_iter())
        .map(|(v, m)| {
            let rig = rigs
                .iter()
                .find(|r| r.id == v.rig_id)
                .ok_or_else(|| PipelineError::Stage {
                    stage: s,
                    source: format!("no rig for view {}", v.rig_id).into(),
                })?;
            let l = liftfuse::valid_projections(cloud, v, rig, m, c.eps_rel).map_err(at(s))?;
            Ok(liftfuse::balance_view(l, m.num_masks, v.rig_id, &c.sbff))
        })
        .collect::<Result<_, PipelineError>>()?;
    let contributions: Vec<ViewContribution<'_>> = lifts
        .iter()
        .zip(masks)
        .filter(|(_, m)| m.num_masks > 0)
        .map(|(l, m)| ViewContribution { lifts: l, masks: m })
        .collect();
    let mut library = liftfuse::fuse(cloud.len(), &contributions).map_err(at(s))?;
    if contributions.is_empty() {
        library = FeatureLibrary::uncovered(cloud.len(), masks.first().map_or(0, |m| m.dim as usize));
    }
    let coverage = render::coverage_ratio_with(cloud, views, rigs, c.eps_rel).map_err(at(s))?;
    Ok(LiftOutput { library, coverage })
}

pub fn distill_stage(cfg: &PipelineConfig, cloud: &PointCloud, library: &FeatureLibrary) -> Result<Trained, PipelineError> {
    let c = cfg.resolved();
    let t = &c.train;
    let field = VoxelFeatureField::for_cloud(cloud, t.voxel_size, library.dim(), t.init_std, t.seed);
    log::info!(
        "distilling {} covered points into {} voxels",
        library.covered_count(),
        field.active_voxels()
    );
    distill::train(field, cloud, library, t).map_err(at(Stage::Distill))
}

/// Scoring output; `f3d` holds the student features used, if any.
#[derive(Debug, Clone)]
pub struct SegmentOutput {
    pub result: QueryResult,
    pub table: TextEmbeddingTable,
    pub f3d: Option<Vec<f32>>,
}

/// Classes named by the configured query, or the whole table.
pub fn query_table(cfg: &PipelineConfig, table: &TextEmbeddingTable) -> Result<TextEmbeddingTable, PipelineError> {
    let s = Stage::Segment;
    let Some(text) = cfg.query.as_deref() else {
        return Ok(table.clone());
    };
    let lexicon = match &cfg.lexicon {
        Some(p) => Lexicon::read(p).map_err(at(s))?,
        None => Lexicon::new(),
    }
    .with_class_names(table.names());
    let classes = query::parse_query(text, &lexicon);
    if classes.is_empty() {
        return Err(PipelineError::Stage {
            stage: s,
            source: format!("query `{text}` matched no known class").into(),
        });
    }
    query::subset_table(table, &classes).map_err(at(s))
}

pub fn segment_stage(
    cfg: &PipelineConfig,
    cloud: &PointCloud,
    library: &FeatureLibrary,
    field: Option<&VoxelFeatureField>,
    table: &TextEmbeddingTable,
) -> Result<SegmentOutput, PipelineError> {
    let table = query_table(cfg, table)?;
    let f3d = field.map(|f| f.field_features(cloud.positions()));
    let result = query::segment(
        library,
        f3d.as_deref(),
        &table,
        &cfg.fusion,
        cfg.query.as_deref().unwrap_or(""),
    )
    .map_err(at(Stage::Segment))?;
    Ok(SegmentOutput { result, table, f3d })
}

/// Metrics of one labeling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(rename = "mIoU")]
    pub miou: f64,
    #[serde(rename = "mAcc")]
    pub macc: f64,
    #[serde(rename = "OA")]
    pub oa: f64,
    pub evaluated: usize,
    pub per_class_iou: BTreeMap<String, Option<f64>>,
}

impl Summary {
    fn new(e: &Evaluation, names: &[String]) -> Self {
        Self {
            miou: e.miou,
            macc: e.macc,
            oa: e.oa,
            evaluated: e.evaluated,
            per_class_iou: names.iter().cloned().zip(e.per_class_iou.iter().copied()).collect(),
        }
    }
}

/// Evaluation report written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub query: String,
    pub classes: Vec<String>,
    #[serde(rename = "S_R")]
    pub s_r: f64,
    pub points: usize,
    pub covered_points: usize,
    /// Headline numbers: all points when every point was labeled, otherwise
    /// the covered points.
    #[serde(rename = "mIoU")]
    pub miou: f64,
    #[serde(rename = "mAcc")]
    pub macc: f64,
    #[serde(rename = "OA")]
    pub oa: f64,
    pub covered: Summary,
    pub all: Option<Summary>,
    /// The four feature ablations, when a student is available.
    pub variants: BTreeMap<String, Summary>,
}

/// Map result class indices onto the cloud's label ids.
fn to_cloud_labels(result: &QueryResult, cloud: &PointCloud) -> Result<Vec<u32>, PipelineError> {
    let map: Vec<u32> = result
        .classes
        .iter()
        .map(|n| {
            cloud
                .class_names()
                .iter()
                .position(|c| c == n)
                .map(|i| i as u32)
                .ok_or_else(|| PipelineError::Stage {
                    stage: Stage::Eval,
                    source: format!("class `{n}` is not a class of the cloud").into(),
                })
        })
        .collect::<Result<_, _>>()?;
    Ok(result
        .predicted
        .iter()
        .map(|&p| if p == UNPREDICTED { UNPREDICTED } else { map[p as usize] })
        .collect())
}

pub fn eval_stage(
    cfg: &PipelineConfig,
    cloud: &PointCloud,
    lift: &LiftOutput,
    seg: &SegmentOutput,
) -> Result<Report, PipelineError> {
    let s = Stage::Eval;
    let truth = cloud.labels().ok_or_else(|| PipelineError::Stage {
        stage: s,
        source: "the cloud has no ground-truth labels".into(),
    })?;
    let n_classes = cloud.class_names().len();
    let names = cloud.class_names();
    let covered = lift.library.covered();
    let eval = |res: &QueryResult, filter: Option<&[bool]>| -> Result<Summary, PipelineError> {
        let pred = to_cloud_labels(res, cloud)?;
        let e = metrics::evaluate(&pred, truth, n_classes, filter).map_err(at(s))?;
        Ok(Summary::new(&e, names))
    };
    let covered_summary = eval(&seg.result, Some(covered))?;
    let complete = seg.result.predicted.iter().all(|&p| p != UNPREDICTED);
    let all = if complete { Some(eval(&seg.result, None)?) } else { None };

    let mut variants = BTreeMap::new();
    if let Some(f3d) = &seg.f3d {
        for v in Variant::ALL {
            let res = v
                .segment(&lift.library, f3d, &seg.table, cfg.fusion.alpha)
                .map_err(at(s))?;
            let filter = v.covered_only().then_some(covered);
            variants.insert(v.name().to_owned(), eval(&res, filter)?);
        }
    }
    let head = all.as_ref().unwrap_or(&covered_summary);
    Ok(Report {
        query: seg.result.query.clone(),
        classes: seg.result.classes.clone(),
        s_r: lift.coverage.ratio,
        points: cloud.len(),
        covered_points: lift.library.covered_count(),
        miou: head.miou,
        macc: head.macc,
        oa: head.oa,
        covered: covered_summary,
        all,
        variants,
    })
}

/// Everything an in-memory run produces, apart from the rendered views.
#[derive(Debug, Clone)]
pub struct Upstream {
    pub rigs: Vec<CameraRig>,
    pub lift: LiftOutput,
    pub trained: Trained,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub upstream: Upstream,
    pub segment: SegmentOutput,
    pub report: Report,
}

fn echo(cfg: &PipelineConfig, dir: &Path, stage: Stage) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(io_at(stage, dir))?;
    let path = dir.join(CONFIG_ECHO);
    let text = serde_json::to_string_pretty(&cfg.resolved()).expect("config is serializable");
    std::fs::write(&path, text).map_err(io_at(stage, &path))
}

pub fn write_scene(cfg: &PipelineConfig, dirs: &StageDirs, scene: &SceneArtifacts) -> Result<(), PipelineError> {
    let s = Stage::GenScene;
    echo(cfg, &dirs.scene, s)?;
    write_cloud(dirs.scene.join(CLOUD_FILE), &scene.cloud, PlyFormat::BinaryLittleEndian).map_err(at(s))?;
    scene.table.write(dirs.scene.join(TEXT_FILE)).map_err(at(s))
}

fn write_render(cfg: &PipelineConfig, dirs: &StageDirs, rigs: &[CameraRig], views: &[RenderedView]) -> Result<(), PipelineError> {
    let s = Stage::Render;
    echo(cfg, &dirs.render, s)?;
    RigBundle::new(&cfg.resolved().views, rigs)
        .write(dirs.render.join(RIGS_FILE))
        .map_err(at(s))?;
    views
        .par_iter()
        .try_for_each(|v| render::write_view(&dirs.render, v))
        .map_err(at(s))
}

fn write_extract(cfg: &PipelineConfig, dirs: &StageDirs, masks: &[MaskSet]) -> Result<(), PipelineError> {
    let s = Stage::Extract;
    echo(cfg, &dirs.extract, s)?;
    masks
        .par_iter()
        .try_for_each(|m| write_maskset(maskset_path(&dirs.extract, m.view_id), m))
        .map_err(at(s))
}

#[derive(Serialize, Deserialize)]
struct CoverageRecord {
    #[serde(rename = "S_R")]
    s_r: f64,
    visible: usize,
    points: usize,
}

fn write_lift(cfg: &PipelineConfig, dirs: &StageDirs, lift: &LiftOutput) -> Result<(), PipelineError> {
    let s = Stage::Lift;
    echo(cfg, &dirs.lift, s)?;
    lift.library.write(dirs.lift.join(LIBRARY_FILE)).map_err(at(s))?;
    let rec = CoverageRecord {
        s_r: lift.coverage.ratio,
        visible: lift.coverage.count(),
        points: lift.coverage.visible.len(),
    };
    let path = dirs.lift.join(COVERAGE_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&rec).expect("serializable")).map_err(io_at(s, &path))?;
    let bits: Vec<u8> = lift.coverage.visible.iter().map(|&v| u8::from(v)).collect();
    let path = dirs.lift.join(VISIBLE_FILE);
    std::fs::write(&path, bits).map_err(io_at(s, &path))
}

fn write_distill(cfg: &PipelineConfig, dirs: &StageDirs, trained: &Trained) -> Result<(), PipelineError> {
    let s = Stage::Distill;
    echo(cfg, &dirs.distill, s)?;
    trained.field.write(dirs.distill.join(FIELD_FILE)).map_err(at(s))?;
    distill::write_loss_csv(dirs.distill.join(LOSS_FILE), &trained.loss_curve).map_err(at(s))
}

#[derive(Serialize, Deserialize)]
struct ResultRecord {
    query: String,
    classes: Vec<String>,
    points: usize,
    labels_file: String,
    heatmaps: Vec<String>,
}

fn write_segment(cfg: &PipelineConfig, dirs: &StageDirs, cloud: &PointCloud, lib: &FeatureLibrary, seg: &SegmentOutput) -> Result<(), PipelineError> {
    let s = Stage::Segment;
    echo(cfg, &dirs.segment, s)?;
    let path = dirs.segment.join(LABELS_FILE);
    let bytes: Vec<u8> = seg.result.predicted.iter().flat_map(|p| p.to_le_bytes()).collect();
    std::fs::write(&path, bytes).map_err(io_at(s, &path))?;
    let mut heatmaps = Vec::new();
    if cfg.query.is_some() {
        let dim = seg.table.dim();
        let fused: Vec<f32> = match (&seg.f3d, cfg.fusion.mode) {
            (Some(f3d), FusionMode::Fusion) => (0..cloud.len())
                .into_par_iter()
                .flat_map_iter(|p| {
                    query::fuse_features(lib.feature(p), &f3d[p * dim..(p + 1) * dim], lib.is_covered(p), cfg.fusion.alpha)
                        .unwrap_or_else(|_| vec![0.0; dim])
                })
                .collect(),
            (Some(f3d), FusionMode::Ensemble) => f3d.clone(),
            (None, _) => lib.features().to_vec(),
        };
        for (k, name) in seg.table.names().iter().enumerate() {
            let (_, colored) = query::heatmap(cloud, &fused, seg.table.embedding(k)).map_err(at(s))?;
            let file = format!("heatmap_{}.ply", sanitize(name));
            query::write_heatmap(dirs.segment.join(&file), &colored).map_err(at(s))?;
            heatmaps.push(file);
        }
    }
    let rec = ResultRecord {
        query: seg.result.query.clone(),
        classes: seg.result.classes.clone(),
        points: seg.result.len(),
        labels_file: LABELS_FILE.into(),
        heatmaps,
    };
    let path = dirs.segment.join(RESULT_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&rec).expect("serializable")).map_err(io_at(s, &path))
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_alphanumeric() { c } else { '_' }).collect()
}

fn write_eval(cfg: &PipelineConfig, dirs: &StageDirs, report: &Report) -> Result<PathBuf, PipelineError> {
    let s = Stage::Eval;
    echo(cfg, &dirs.eval, s)?;
    let path = dirs.eval.join(METRICS_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(report).expect("serializable")).map_err(io_at(s, &path))?;
    Ok(path)
}

/// Render, extract, lift and distill in memory, optionally persisting each
/// stage's outputs.
pub fn run_upstream(cfg: &PipelineConfig, scene: &SceneArtifacts, dirs: Option<&StageDirs>) -> Result<Upstream, PipelineError> {
    cfg.validate()?;
    let t = Instant::now();
    let (rigs, views) = render_stage(cfg, &scene.cloud)?;
    log::info!("rendered {} views in {:.2?}", views.len(), t.elapsed());
    if let Some(d) = dirs {
        write_render(cfg, d, &rigs, &views)?;
    }
    let masks = extract_stage(cfg, &scene.cloud, &views, &scene.table)?;
    if let Some(d) = dirs {
        write_extract(cfg, d, &masks)?;
    }
    let lift = lift_stage(cfg, &scene.cloud, &rigs, &views, &masks)?;
    drop(views);
    drop(masks);
    log::info!(
        "lifted features onto {} of {} points (S_R {:.4}) after {:.2?}",
        lift.library.covered_count(),
        scene.cloud.len(),
        lift.coverage.ratio,
        t.elapsed()
    );
    if let Some(d) = dirs {
        write_lift(cfg, d, &lift)?;
    }
    let trained = distill_stage(cfg, &scene.cloud, &lift.library)?;
    log::info!(
        "distilled: loss {:.4} -> {:.4} after {:.2?}",
        trained.initial_loss,
        trained.loss_curve.last().copied().unwrap_or(f64::NAN),
        t.elapsed()
    );
    if let Some(d) = dirs {
        write_distill(cfg, d, &trained)?;
    }
    Ok(Upstream { rigs, lift, trained })
}

/// Segment and evaluate on top of an upstream run.
pub fn run_scoring(
    cfg: &PipelineConfig,
    scene: &SceneArtifacts,
    up: &Upstream,
    dirs: Option<&StageDirs>,
) -> Result<(SegmentOutput, Report), PipelineError> {
    let seg = segment_stage(cfg, &scene.cloud, &up.lift.library, Some(&up.trained.field), &scene.table)?;
    if let Some(d) = dirs {
        write_segment(cfg, d, &scene.cloud, &up.lift.library, &seg)?;
    }
    let report = eval_stage(cfg, &scene.cloud, &up.lift, &seg)?;
    if let Some(d) = dirs {
        write_eval(cfg, d, &report)?;
    }
    Ok((seg, report))
}

/// Whole pipeline in memory on a given scene.
pub fn run_from_scene(cfg: &PipelineConfig, scene: &SceneArtifacts, dirs: Option<&StageDirs>) -> Result<RunOutput, PipelineError> {
    let upstream = run_upstream(cfg, scene, dirs)?;
    let (segment, report) = run_scoring(cfg, scene, &upstream, dirs)?;
    Ok(RunOutput {
        upstream,
        segment,
        report,
    })
}

/// Run every stage, writing all artifacts under `cfg.out`. Returns the
/// report and the path of the metrics file.
pub fn end2end(cfg: &PipelineConfig) -> Result<(Report, PathBuf), PipelineError> {
    cfg.validate()?;
    let dirs = cfg.stage_dirs();
    std::fs::create_dir_all(&cfg.out).map_err(io_at(Stage::GenScene, &cfg.out))?;
    let echo_path = cfg.out.join(CONFIG_ECHO);
    std::fs::write(&echo_path, serde_json::to_string_pretty(&cfg.resolved()).expect("serializable"))
        .map_err(io_at(Stage::GenScene, &echo_path))?;
    let scene = build_scene(cfg)?;
    write_scene(cfg, &dirs, &scene)?;
    let out = run_from_scene(cfg, &scene, Some(&dirs))?;
    Ok((out.report, dirs.eval.join(METRICS_FILE)))
}

fn need(stage: Stage, path: PathBuf, needs: Stage) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingInput { stage, path, needs })
    }
}

fn load_scene(dirs: &StageDirs, stage: Stage) -> Result<SceneArtifacts, PipelineError> {
    let cloud = load_cloud(need(stage, dirs.scene.join(CLOUD_FILE), Stage::GenScene)?).map_err(at(stage))?;
    let table = TextEmbeddingTable::read(need(stage, dirs.scene.join(TEXT_FILE), Stage::GenScene)?).map_err(at(stage))?;
    Ok(SceneArtifacts { cloud, table })
}

fn load_render(dirs: &StageDirs, stage: Stage) -> Result<(Vec<CameraRig>, Vec<RenderedView>), PipelineError> {
    let bundle = RigBundle::read(need(stage, dirs.render.join(RIGS_FILE), Stage::Render)?).map_err(at(stage))?;
    let rigs = bundle.camera_rigs().map_err(at(stage))?;
    let views = rigs
        .par_iter()
        .map(|r| render::read_view(&dirs.render, r.id))
        .collect::<Result<Vec<_>, _>>()
        .map_err(at(stage))?;
    Ok((rigs, views))
}

fn load_masks(dirs: &StageDirs, rigs: &[CameraRig], stage: Stage) -> Result<Vec<MaskSet>, PipelineError> {
    rigs.par_iter()
        .map(|r| {
            let p = need(stage, maskset_path(&dirs.extract, r.id), Stage::Extract)?;
            read_maskset(p).map_err(at(stage))
        })
        .collect()
}

fn load_lift(dirs: &StageDirs, stage: Stage) -> Result<LiftOutput, PipelineError> {
    let library = FeatureLibrary::read(need(stage, dirs.lift.join(LIBRARY_FILE), Stage::Lift)?).map_err(at(stage))?;
    let path = need(stage, dirs.lift.join(VISIBLE_FILE), Stage::Lift)?;
    let bits = std::fs::read(&path).map_err(io_at(stage, &path))?;
    let coverage = Coverage::from_visible(bits.iter().map(|&b| b != 0).collect());
    Ok(LiftOutput { library, coverage })
}

fn load_labels(dirs: &StageDirs, stage: Stage) -> Result<QueryResult, PipelineError> {
    let path = need(stage, dirs.segment.join(LABELS_FILE), Stage::Segment)?;
    let bytes = std::fs::read(&path).map_err(io_at(stage, &path))?;
    let rec_path = need(stage, dirs.segment.join(RESULT_FILE), Stage::Segment)?;
    let rec: ResultRecord = serde_json::from_slice(&std::fs::read(&rec_path).map_err(io_at(stage, &rec_path))?).map_err(at(stage))?;
    Ok(QueryResult {
        query: rec.query,
        classes: rec.classes,
        predicted: bytes.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect(),
        scores: Vec::new(),
    })
}

/// Run one stage from its upstream artifacts on disk.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<PathBuf, PipelineError> {
    cfg.validate()?;
    let dirs = cfg.stage_dirs();
    match stage {
        Stage::GenScene => {
            let scene = build_scene(cfg)?;
            write_scene(cfg, &dirs, &scene)?;
        }
        Stage::Render => {
            let scene = load_scene(&dirs, stage)?;
            let (rigs, views) = render_stage(cfg, &scene.cloud)?;
            write_render(cfg, &dirs, &rigs, &views)?;
        }
        Stage::Extract => {
            let scene = load_scene(&dirs, stage)?;
            let (_, views) = load_render(&dirs, stage)?;
            let masks = extract_stage(cfg, &scene.cloud, &views, &scene.table)?;
            write_extract(cfg, &dirs, &masks)?;
        }
        Stage::Lift => {
            let scene = load_scene(&dirs, stage)?;
            let (rigs, views) = load_render(&dirs, stage)?;
            let masks = load_masks(&dirs, &rigs, stage)?;
            let lift = lift_stage(cfg, &scene.cloud, &rigs, &views, &masks)?;
            write_lift(cfg, &dirs, &lift)?;
        }
        Stage::Distill => {
            let scene = load_scene(&dirs, stage)?;
            let lift = load_lift(&dirs, stage)?;
            let trained = distill_stage(cfg, &scene.cloud, &lift.library)?;
            write_distill(cfg, &dirs, &trained)?;
        }
        Stage::Segment => {
            let scene = load_scene(&dirs, stage)?;
            let lift = load_lift(&dirs, stage)?;
            let ckpt = dirs.distill.join(FIELD_FILE);
            let needs_field = cfg.fusion.alpha > 0.0 || cfg.fusion.mode == FusionMode::Ensemble;
            let field = if ckpt.exists() {
                Some(VoxelFeatureField::read(&ckpt).map_err(at(stage))?)
            } else if needs_field {
                return Err(PipelineError::MissingCheckpoint { path: ckpt });
            } else {
                None
            };
            let seg = segment_stage(cfg, &scene.cloud, &lift.library, field.as_ref(), &scene.table)?;
            write_segment(cfg, &dirs, &scene.cloud, &lift.library, &seg)?;
        }
        Stage::Eval => {
            let scene = load_scene(&dirs, stage)?;
            let lift = load_lift(&dirs, stage)?;
            let table = query_table(cfg, &scene.table)?;
            let mut result = load_labels(&dirs, stage)?;
            let ckpt = dirs.distill.join(FIELD_FILE);
            let f3d = if ckpt.exists() {
                let field = VoxelFeatureField::read(&ckpt).map_err(at(stage))?;
                Some(field.field_features(scene.cloud.positions()))
            } else {
                None
            };
            result.scores = Vec::new();
            let seg = SegmentOutput { result, table, f3d };
            return write_eval(cfg, &dirs, &eval_stage(cfg, &scene.cloud, &lift, &seg)?);
        }
    }
    Ok(dirs.get(stage).to_path_buf())
}

/// Apply a sweep cell's settings to a base configuration.
pub fn cell_config(base: &PipelineConfig, cell: &SweepCell, seed: u64) -> PipelineConfig {
    let mut c = base.clone();
    c.views.k = cell.k;
    c.views.a_deg = cell.a_deg;
    c.views.r = cell.r;
    c.fusion.alpha = cell.alpha;
    c.sbff.enabled = cell.sbff;
    c.sbff.k = cell.k_topk;
    c.splat_px = cell.splat_px;
    c.seed = seed;
    c
}

/// Run `grid` on the scene of `base`, writing `sweep.csv` and its reports
/// into `dir`. The scene and text table come from the base seed and are
/// shared by every cell; each cell group draws the rest of its randomness
/// from its own seed.
pub fn sweep(base: &PipelineConfig, grid: &SweepGrid, dir: &Path, max_concurrent: usize) -> Result<SweepOutcome, PipelineError> {
    base.validate()?;
    let scene = build_scene(base)?;
    sweep_on_scene(base, &scene, grid, dir, max_concurrent)
}

pub fn sweep_on_scene(
    base: &PipelineConfig,
    scene: &SceneArtifacts,
    grid: &SweepGrid,
    dir: &Path,
    max_concurrent: usize,
) -> Result<SweepOutcome, PipelineError> {
    let runner = |cells: &[SweepCell], seed: u64| -> Vec<Result<SweepRow, String>> {
        let start = Instant::now();
        let up_cfg = cell_config(base, &cells[0], seed);
        let up = match run_upstream(&up_cfg, scene, None) {
            Ok(u) => u,
            Err(e) => return cells.iter().map(|_| Err(e.to_string())).collect(),
        };
        let upstream_secs = start.elapsed().as_secs_f64();
        cells
            .iter()
            .map(|cell| {
                let t = Instant::now();
                let cfg = cell_config(base, cell, seed);
                let (_, report) = run_scoring(&cfg, scene, &up, None).map_err(|e| e.to_string())?;
                Ok(row_from_report(cell, &report, upstream_secs + t.elapsed().as_secs_f64()))
            })
            .collect()
    };
    metrics::run_sweep(grid, dir, base.seed, max_concurrent, &runner).map_err(at(Stage::Eval))
}

pub fn row_from_report(cell: &SweepCell, report: &Report, wall_seconds: f64) -> SweepRow {
    SweepRow {
        cell: *cell,
        s_r: report.s_r,
        miou: report.miou,
        macc: report.macc,
        oa: report.oa,
        wall_seconds,
        per_class_iou: report.all.as_ref().unwrap_or(&report.covered).per_class_iou.clone(),
    }
}
