//! Command-line driver. Seven subcommands tie scene rendering,
//! triangulation, occlusion masks, the loss stack, the optimizer, and the
//! metrics into file-level experiments: everything an invocation emits is
//! a pure function of (config, seed, input files).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{DriftError, Result};
use crate::field::{DepthMap, Field, FlowField, Image, MaskMap, SceneFlowField};
use crate::geom::{Intrinsics, PoseTransform};
use crate::io::{
    fmt_f64, read_depth_drft, read_depth_png16, read_image_png16, read_kitti_flow_png,
    read_mask_png, record_from_report, write_depth_drft, write_depth_png16, write_image_png16,
    write_kitti_flow_png, write_mask_png, write_record, write_trace_csv, RunConfig, TensorFile,
};
use crate::metrics::{depth_metrics, flow_metrics, sceneflow_metrics};
use crate::optim::{
    init_from_triangulation, objective, run, ObjectiveInputs, StopReason, VariationalState,
};
use crate::sampler::occlusion_mask;
use crate::scene::{render, RenderedFrame, SceneSpec};
use crate::selftest::run_selftest;
use crate::triangulate::triangulate_depth_map;

#[derive(Parser)]
#[command(
    name = "drift",
    version,
    about = "depth and scene flow from optical flow and camera motion",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene into a dataset directory
    Gen(CommonArgs),
    /// Recover depth from flow and camera motion in closed form
    Triangulate(CommonArgs),
    /// Estimate occlusion masks from forward/backward flow
    Masks(CommonArgs),
    /// Evaluate the loss stack once and write a record
    Losses(CommonArgs),
    /// Fit depth (and scene flow) by first-order optimization
    Optimize(CommonArgs),
    /// Score predictions against ground truth
    Eval(CommonArgs),
    /// Run the built-in invariant suite
    Selftest(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed recorded into outputs; overrides the config value
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config value
    #[arg(long)]
    out: Option<PathBuf>,
    /// Encoding for image-like artifacts (3-vector fields always use drft)
    #[arg(long, value_enum, default_value_t = OutputFormat::Drft)]
    format: OutputFormat,
}

#[derive(Debug, Copy, Clone, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Drft,
    Png,
}

/// Parses argv and runs one subcommand. Exit status: 0 on success, 1 on
/// usage or validation errors, 2 on I/O and file-format errors.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            };
        }
    };
    let (args, cmd): (&CommonArgs, fn(&Job) -> Result<()>) = match &cli.command {
        Command::Gen(a) => (a, cmd_gen),
        Command::Triangulate(a) => (a, cmd_triangulate),
        Command::Masks(a) => (a, cmd_masks),
        Command::Losses(a) => (a, cmd_losses),
        Command::Optimize(a) => (a, cmd_optimize),
        Command::Eval(a) => (a, cmd_eval),
        Command::Selftest(a) => {
            let _ = a;
            return match run_selftest(&mut std::io::stdout()) {
                Ok(0) => 0,
                Ok(_) => 1,
                Err(_) => 2,
            };
        }
    };
    match Job::prepare(args).and_then(|job| cmd(&job)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &DriftError) -> i32 {
    match e {
        DriftError::Io(_) | DriftError::Format(_) => 2,
        _ => 1,
    }
}

/// A resolved invocation: config with CLI overrides applied.
struct Job {
    cfg: RunConfig,
    out: PathBuf,
    seed: u64,
    format: OutputFormat,
}

impl Job {
    fn prepare(args: &CommonArgs) -> Result<Job> {
        let mut cfg = match &args.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = args.seed {
            cfg.seed = Some(seed);
        }
        let out = args
            .out
            .clone()
            .or_else(|| cfg.output_dir.clone().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok(Job {
            seed: cfg.seed.unwrap_or(0),
            cfg,
            out,
            format: args.format,
        })
    }

    fn ensure_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        Ok(())
    }

    fn ext(&self) -> &'static str {
        match self.format {
            OutputFormat::Drft => "drft",
            OutputFormat::Png => "png",
        }
    }

    fn path(&self, stem: &str, ext: &str) -> PathBuf {
        self.out.join(format!("{stem}.{ext}"))
    }

    /// Scene from the config with camera/ego overrides folded in.
    fn scene_spec(&self) -> Result<SceneSpec> {
        let scene = self.cfg.scene.as_ref().ok_or_else(|| {
            DriftError::invalid("no [scene] section and no input files; nothing to work on")
        })?;
        let mut spec = scene.to_spec()?;
        if let Some(cam) = &self.cfg.camera {
            spec.camera = cam.to_intrinsics()?;
        }
        if let Some(ego) = &self.cfg.ego {
            spec.ego_motion = ego.to_pose();
        }
        Ok(spec)
    }

    fn camera_and_ego(&self) -> Result<(Intrinsics, PoseTransform)> {
        match (&self.cfg.camera, &self.cfg.ego) {
            (Some(cam), Some(ego)) => Ok((cam.to_intrinsics()?, ego.to_pose())),
            _ => {
                let spec = self.scene_spec().map_err(|_| {
                    DriftError::invalid(
                        "camera and motion unknown: add [camera]+[ego] or a [scene] section",
                    )
                })?;
                Ok((spec.camera, spec.ego_motion))
            }
        }
    }
}

fn is_png(path: &str) -> bool {
    Path::new(path)
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn load_depth(path: &str) -> Result<DepthMap> {
    if is_png(path) {
        read_depth_png16(path)
    } else {
        read_depth_drft(path)
    }
}

fn load_flow(path: &str) -> Result<FlowField> {
    if is_png(path) {
        Ok(read_kitti_flow_png(path)?.0)
    } else {
        FlowField::new(TensorFile::read(path)?.to_field()?)
    }
}

fn load_image(path: &str) -> Result<Image> {
    if is_png(path) {
        read_image_png16(path)
    } else {
        Image::new(TensorFile::read(path)?.to_field()?)
    }
}

fn load_mask(path: &str) -> Result<MaskMap> {
    if is_png(path) {
        read_mask_png(path)
    } else {
        TensorFile::read(path)?.to_mask()
    }
}

fn load_sceneflow(path: &str) -> Result<SceneFlowField> {
    SceneFlowField::new(TensorFile::read(path)?.to_field()?)
}

fn save_depth(job: &Job, stem: &str, depth: &DepthMap) -> Result<()> {
    let p = job.path(stem, job.ext());
    match job.format {
        OutputFormat::Drft => write_depth_drft(p, depth),
        OutputFormat::Png => write_depth_png16(p, depth),
    }
}

fn save_flow(job: &Job, stem: &str, flow: &FlowField, valid: &MaskMap) -> Result<()> {
    let p = job.path(stem, job.ext());
    match job.format {
        OutputFormat::Drft => TensorFile::from_field(&flow.values).write(p),
        OutputFormat::Png => write_kitti_flow_png(p, flow, valid),
    }
}

fn save_image(job: &Job, stem: &str, img: &Image) -> Result<()> {
    let p = job.path(stem, job.ext());
    match job.format {
        OutputFormat::Drft => TensorFile::from_field(&img.values).write(p),
        OutputFormat::Png => write_image_png16(p, img),
    }
}

fn save_mask(job: &Job, stem: &str, mask: &MaskMap) -> Result<()> {
    let p = job.path(stem, job.ext());
    match job.format {
        OutputFormat::Drft => TensorFile::from_mask(mask).write(p),
        OutputFormat::Png => write_mask_png(p, mask),
    }
}

fn save_field(job: &Job, stem: &str, field: &Field) -> Result<()> {
    TensorFile::from_field(field).write(job.path(stem, "drft"))
}

fn record(job: &Job, name: &str, entries: &BTreeMap<String, String>) -> Result<()> {
    write_record(job.out.join(name), entries)
}

fn cmd_gen(job: &Job) -> Result<()> {
    let spec = job.scene_spec()?;
    let (t, t1) = render(&spec)?;
    job.ensure_out()?;
    let all = MaskMap::new_filled(spec.height, spec.width, true);
    save_image(job, "image_t", &t.image)?;
    save_image(job, "image_next", &t1.image)?;
    save_depth(job, "depth_t", &t.depth)?;
    save_depth(job, "depth_next", &t1.depth)?;
    save_flow(job, "flow_fwd", &t.flow_fwd, &all)?;
    save_flow(job, "flow_bwd", &t.flow_bwd, &all)?;
    save_field(job, "sceneflow_fwd", &t.sceneflow_fwd.values)?;
    save_field(job, "sceneflow_bwd", &t.sceneflow_bwd.values)?;
    save_mask(job, "occlusion_fwd", &t.occlusion_fwd)?;
    save_mask(job, "occlusion_bwd", &t.occlusion_bwd)?;
    save_field(job, "normals_t", &t.normals.values)?;
    save_mask(job, "normals_valid", &t.normals.validity)?;
    let mut m = BTreeMap::new();
    m.insert("height".into(), spec.height.to_string());
    m.insert("width".into(), spec.width.to_string());
    m.insert(
        "scene".into(),
        job.cfg.scene.as_ref().map(|s| s.kind.clone()).unwrap_or_default(),
    );
    m.insert("seed".into(), job.seed.to_string());
    m.insert("format".into(), job.ext().into());
    record(job, "manifest.txt", &m)
}

fn cmd_triangulate(job: &Job) -> Result<()> {
    let (camera, ego) = job.camera_and_ego()?;
    let flow = match &job.cfg.inputs.flow_fwd {
        Some(path) => load_flow(path)?,
        None => render(&job.scene_spec()?)?.0.flow_fwd,
    };
    let tri = triangulate_depth_map(&flow, &ego, &camera, job.cfg.masks.tau_parallax)?;
    job.ensure_out()?;
    save_depth(job, "depth_tri", &tri.depth)?;
    save_field(job, "parallax", &tri.parallax)?;
    save_mask(job, "validity", &tri.validity)?;
    let total = tri.depth.height() * tri.depth.width();
    let mut m = BTreeMap::new();
    m.insert("valid_pixels".into(), tri.validity.count().to_string());
    m.insert("total_pixels".into(), total.to_string());
    m.insert(
        "valid_fraction".into(),
        fmt_f64(tri.validity.count() as f64 / total as f64),
    );
    m.insert("seed".into(), job.seed.to_string());
    record(job, "triangulate.txt", &m)
}

fn cmd_masks(job: &Job) -> Result<()> {
    let (flow_fwd, flow_bwd, analytic) = match (&job.cfg.inputs.flow_fwd, &job.cfg.inputs.flow_bwd)
    {
        (Some(f), Some(b)) => (load_flow(f)?, load_flow(b)?, None),
        (None, None) => {
            let (t, _) = render(&job.scene_spec()?)?;
            let reference = t.occlusion_fwd.clone();
            (t.flow_fwd, t.flow_bwd, Some(reference))
        }
        _ => {
            return Err(DriftError::invalid(
                "masks needs both flow_fwd and flow_bwd inputs, or a [scene] section",
            ))
        }
    };
    let visible = occlusion_mask(
        &flow_fwd,
        &flow_bwd,
        job.cfg.masks.alpha1,
        job.cfg.masks.alpha2,
    )?;
    job.ensure_out()?;
    save_mask(job, "occlusion", &visible)?;
    let total = visible.height() * visible.width();
    let mut m = BTreeMap::new();
    m.insert(
        "visible_fraction".into(),
        fmt_f64(visible.count() as f64 / total as f64),
    );
    m.insert("seed".into(), job.seed.to_string());
    if let Some(reference) = analytic {
        m.insert("iou_vs_analytic".into(), fmt_f64(visible.iou(&reference)));
    }
    record(job, "masks.txt", &m)
}

/// Everything `losses` and `optimize` need, owned so [`ObjectiveInputs`]
/// can borrow it uniformly for the scene and file paths cases.
struct Problem {
    image_t: Image,
    image_next: Image,
    pose: PoseTransform,
    intrinsics: Intrinsics,
    mask: MaskMap,
    flow_ref: Option<FlowField>,
    flow_ref_bwd: Option<FlowField>,
    depth_next_ref: Option<DepthMap>,
    gt_depth: Option<DepthMap>,
    gt_flow: Option<FlowField>,
    gt_sceneflow: Option<SceneFlowField>,
    gt_normals: Option<crate::field::NormalMap>,
    /// Starting point for `optimize`; ground truth for `losses` in scene mode.
    state: VariationalState,
}

impl Problem {
    fn inputs(&self) -> ObjectiveInputs<'_> {
        ObjectiveInputs {
            image_t: &self.image_t,
            image_next: &self.image_next,
            pose: &self.pose,
            intrinsics: &self.intrinsics,
            mask: &self.mask,
            flow_ref: self.flow_ref.as_ref(),
            flow_ref_bwd: self.flow_ref_bwd.as_ref(),
            depth_next_ref: self.depth_next_ref.as_ref(),
            gt_depth: self.gt_depth.as_ref(),
            gt_flow: self.gt_flow.as_ref(),
            gt_sceneflow: self.gt_sceneflow.as_ref(),
            gt_normals: self.gt_normals.as_ref(),
        }
    }
}

fn scene_problem(job: &Job, spec: &SceneSpec) -> Result<Problem> {
    let (t, t1): (RenderedFrame, RenderedFrame) = render(spec)?;
    let mask = match &job.cfg.inputs.valid_mask {
        Some(path) => load_mask(path)?,
        None => t.occlusion_fwd.clone(),
    };
    let log_depth = Field::from_fn(spec.height, spec.width, 1, |y, x, _| t.depth.get(y, x).ln());
    let state = VariationalState::new(log_depth, t.sceneflow_fwd.clone())?;
    Ok(Problem {
        image_t: t.image,
        image_next: t1.image,
        pose: spec.ego_motion.clone(),
        intrinsics: spec.camera,
        mask,
        flow_ref: Some(t.flow_fwd.clone()),
        flow_ref_bwd: Some(t.flow_bwd),
        depth_next_ref: Some(t1.depth),
        gt_depth: Some(t.depth),
        gt_flow: Some(t.flow_fwd),
        gt_sceneflow: Some(t.sceneflow_fwd),
        gt_normals: Some(t.normals),
        state,
    })
}

fn file_problem(job: &Job) -> Result<Problem> {
    let inputs = &job.cfg.inputs;
    let need = |path: &Option<String>, what: &str| -> Result<String> {
        path.clone()
            .ok_or_else(|| DriftError::invalid(format!("missing inputs.{what}")))
    };
    let image_t = load_image(&need(&inputs.image_t, "image_t")?)?;
    let image_next = load_image(&need(&inputs.image_next, "image_next")?)?;
    let (camera, ego) = job.camera_and_ego()?;
    let (h, w) = (image_t.height(), image_t.width());
    let mask = match &inputs.valid_mask {
        Some(path) => load_mask(path)?,
        None => MaskMap::new_filled(h, w, true),
    };
    let pred_depth = match &inputs.pred_depth {
        Some(path) => Some(load_depth(path)?),
        None => None,
    };
    let state = match (&pred_depth, &inputs.sceneflow) {
        (Some(d), sf) => {
            let ld = Field::from_fn(h, w, 1, |y, x, _| {
                if d.is_valid(y, x) {
                    d.get(y, x).ln()
                } else {
                    0.0
                }
            });
            let sceneflow = match sf {
                Some(path) => load_sceneflow(path)?,
                None => SceneFlowField::zeros(h, w),
            };
            VariationalState::new(ld, sceneflow)?
        }
        (None, _) => VariationalState::constant(h, w, job.cfg.optimizer.init_fill_depth)?,
    };
    Ok(Problem {
        image_t,
        image_next,
        pose: ego,
        intrinsics: camera,
        mask,
        flow_ref: inputs.flow_fwd.as_deref().map(load_flow).transpose()?,
        flow_ref_bwd: inputs.flow_bwd.as_deref().map(load_flow).transpose()?,
        depth_next_ref: inputs.depth_next.as_deref().map(load_depth).transpose()?,
        gt_depth: inputs.gt_depth.as_deref().map(load_depth).transpose()?,
        gt_flow: inputs.gt_flow.as_deref().map(load_flow).transpose()?,
        gt_sceneflow: None,
        gt_normals: None,
        state,
    })
}

fn build_problem(job: &Job) -> Result<Problem> {
    if job.cfg.inputs.image_t.is_some() {
        file_problem(job)
    } else {
        let spec = job.scene_spec()?;
        scene_problem(job, &spec)
    }
}

fn cmd_losses(job: &Job) -> Result<()> {
    let problem = build_problem(job)?;
    let report = objective(
        &problem.state,
        &problem.inputs(),
        &job.cfg.terms.to_toggles(),
        &job.cfg.weights.to_weights(),
    )?;
    job.ensure_out()?;
    record(job, "losses.txt", &record_from_report(&report))
}

fn stop_name(stop: &StopReason) -> &'static str {
    match stop {
        StopReason::GradientBelowTolerance => "gradient_below_tolerance",
        StopReason::ObjectivePlateau => "objective_plateau",
        StopReason::IterationBudget => "iteration_budget",
    }
}

fn cmd_optimize(job: &Job) -> Result<()> {
    let problem = build_problem(job)?;
    let (h, w) = (problem.image_t.height(), problem.image_t.width());
    let fill = job.cfg.optimizer.init_fill_depth;
    let start = match job.cfg.optimizer.init.as_str() {
        "triangulation" => {
            let flow = problem.flow_ref.as_ref().ok_or_else(|| {
                DriftError::invalid("triangulation init needs a forward reference flow")
            })?;
            let tri = triangulate_depth_map(
                flow,
                &problem.pose,
                &problem.intrinsics,
                job.cfg.masks.tau_parallax,
            )?;
            let fill_map = DepthMap::dense(Field::from_fn(h, w, 1, |_, _, _| fill))?;
            init_from_triangulation(&tri, &fill_map)?
        }
        "constant" => VariationalState::constant(h, w, fill)?,
        other => {
            return Err(DriftError::invalid(format!(
                "optimizer.init must be \"triangulation\" or \"constant\", got {other:?}"
            )))
        }
    };
    let cfg = job
        .cfg
        .optimizer
        .to_config(job.cfg.terms.to_toggles(), job.cfg.weights.to_weights());
    let outcome = run(start, &problem.inputs(), &cfg)?;
    job.ensure_out()?;
    let final_depth = outcome.state.depth_map()?;
    save_depth(job, "depth_final", &final_depth)?;
    save_field(job, "sceneflow_final", &outcome.state.sceneflow.values)?;
    write_trace_csv(job.out.join("trace.csv"), &outcome.trace)?;
    let last = outcome.trace.last().expect("run always traces");
    let mut m = BTreeMap::new();
    m.insert("iterations".into(), outcome.trace.len().to_string());
    m.insert("stop".into(), stop_name(&outcome.stop).into());
    m.insert("final_total".into(), fmt_f64(last.weighted_total));
    m.insert("final_grad_norm".into(), fmt_f64(last.grad_norm));
    m.insert("seed".into(), job.seed.to_string());
    if let Some(gt) = &problem.gt_depth {
        let dm = depth_metrics(&final_depth, gt, job.cfg.metrics.cap, false, None)?;
        m.insert("abs_rel_vs_gt".into(), fmt_f64(dm.abs_rel));
    }
    record(job, "optimize.txt", &m)
}

fn cmd_eval(job: &Job) -> Result<()> {
    let inputs = &job.cfg.inputs;
    let settings = &job.cfg.metrics;
    job.ensure_out()?;
    let mut wrote = false;
    if let (Some(p), Some(g)) = (&inputs.pred_depth, &inputs.gt_depth) {
        let dm = depth_metrics(
            &load_depth(p)?,
            &load_depth(g)?,
            settings.cap,
            settings.median_scale,
            settings.eval_crop()?,
        )?;
        record(job, "metrics_depth.txt", &pairs_record(&dm.pairs()))?;
        wrote = true;
    }
    if let (Some(p), Some(g)) = (&inputs.pred_flow, &inputs.gt_flow) {
        let pred = load_flow(p)?;
        let (gt, gt_valid) = if is_png(g) {
            read_kitti_flow_png(g)?
        } else {
            let f = load_flow(g)?;
            let all = MaskMap::new_filled(f.height(), f.width(), true);
            (f, all)
        };
        let valid = match &inputs.valid_mask {
            Some(path) => load_mask(path)?.and(&gt_valid),
            None => gt_valid,
        };
        let fm = flow_metrics(&pred, &gt, &valid)?;
        record(job, "metrics_flow.txt", &pairs_record(&fm.pairs()))?;
        wrote = true;
    }
    let sf_inputs = (
        &inputs.pred_depth,
        &inputs.gt_depth,
        &inputs.pred_depth_next,
        &inputs.gt_depth_next,
        &inputs.pred_flow,
        &inputs.gt_flow,
    );
    if let (Some(dp), Some(dg), Some(dp1), Some(dg1), Some(fp), Some(fg)) = sf_inputs {
        let (gt_flow, gt_valid) = if is_png(fg) {
            read_kitti_flow_png(fg)?
        } else {
            let f = load_flow(fg)?;
            let all = MaskMap::new_filled(f.height(), f.width(), true);
            (f, all)
        };
        let valid = match &inputs.valid_mask {
            Some(path) => load_mask(path)?.and(&gt_valid),
            None => gt_valid,
        };
        let sm = sceneflow_metrics(
            &load_depth(dp)?,
            &load_depth(dg)?,
            &load_depth(dp1)?,
            &load_depth(dg1)?,
            &load_flow(fp)?,
            &gt_flow,
            &valid,
            settings.disparity_scale,
        )?;
        record(job, "metrics_sceneflow.txt", &pairs_record(&sm.pairs()))?;
        wrote = true;
    }
    if !wrote {
        return Err(DriftError::invalid(
            "eval needs pred/gt path pairs: (pred_depth, gt_depth) and/or (pred_flow, gt_flow)",
        ));
    }
    Ok(())
}

fn pairs_record(pairs: &[(&'static str, f64)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), fmt_f64(*v)))
        .collect()
}
