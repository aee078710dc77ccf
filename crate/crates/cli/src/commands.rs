use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crowdkit::advection::{
    self, advect_video, cluster_tracks, link_tracklets, sources_sinks, tracks_csv, winding_angle,
    AdvectionParams, SourceSinkReport, Track, TrackCluster,
};
use crowdkit::flowseg::{
    self, blob_absorption, count_people, kmeans_flow, optimum_blob_size, segment_records, CountReport,
    SegmentLabeling,
};
use crowdkit::foreground::{fusion_masks, BackgroundModel};
use crowdkit::groups::{self, detect_groups, format_groups, ingest_trajectories};
use crowdkit::motion::{extract_flow_vectors, horn_schunck_sequence, horn_schunck_with, suppress_slow, HsParams};
use crowdkit::raster::{read_frame_dir, write_frame_dir, write_ppm, BinaryMask, Frame};
use crowdkit::simulate::{export_trace, run_scenario, Goal, Scenario};
use crowdkit::Error;
use serde::Serialize;

use crate::config::module_seed;
use crate::{CliError, PipelineConfig, RunReport};

fn output_dir(cfg: &PipelineConfig) -> Result<PathBuf, CliError> {
    let dir = cfg
        .output
        .clone()
        .ok_or_else(|| CliError::Config("output: no output directory given".into()))?;
    fs::create_dir_all(&dir).map_err(|source| CliError::Io { path: dir.clone(), source })?;
    Ok(dir)
}

fn input_path(cfg: &PipelineConfig) -> Result<PathBuf, CliError> {
    cfg.input
        .clone()
        .ok_or_else(|| CliError::Config("input: no input given".into()))
}

fn write(report: &mut RunReport, path: PathBuf, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| CliError::Io { path: parent.to_path_buf(), source })?;
    }
    fs::write(&path, bytes).map_err(|source| CliError::Io { path: path.clone(), source })?;
    report.outputs.push(path);
    Ok(())
}

fn json(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

fn load_frames(dir: &Path) -> Result<Vec<Frame>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a frame directory"),
        });
    }
    Ok(read_frame_dir(dir)?)
}

#[derive(Serialize)]
struct FrameReport {
    t: u64,
    flow_vectors: usize,
    total_people: u64,
    segments: Vec<flowseg::SegmentRecord>,
}

#[derive(Serialize)]
struct SegmentSummary {
    frames: usize,
    segmented_frames: usize,
    a_prime: f64,
    a_prime_sample_frames: Vec<u64>,
    min_area: usize,
    /// Median number of segments over segmented frames.
    dominant_segments: usize,
    mean_people: f64,
    per_frame: Vec<(u64, usize, u64)>,
}

/// One analysed frame. Frames with fewer than K flow vectors carry no
/// segmentation.
#[derive(Debug, Clone)]
pub struct SegmentedFrame {
    pub t: u64,
    pub flow_vectors: usize,
    pub f_out: BinaryMask,
    pub segmentation: Option<(SegmentLabeling, CountReport)>,
}

#[derive(Debug, Clone)]
pub struct SegmentRun {
    pub a_prime: f64,
    /// Frame indices the blob size was estimated from.
    pub a_prime_frames: Vec<u64>,
    pub min_area: usize,
    /// Every frame but the first, which only initializes the background.
    pub frames: Vec<SegmentedFrame>,
}

/// GMM, flow, fused masks, K-means with blob absorption and counting over a
/// sequence. A' is estimated once from the fused masks of all frames.
pub fn segment_sequence(frames: &[Frame], cfg: &PipelineConfig) -> crowdkit::Result<SegmentRun> {
    if frames.len() < 2 {
        return Err(Error::Param(format!("need at least 2 frames, got {}", frames.len())));
    }
    let (w, h) = frames[0].dims();
    let mut model = BackgroundModel::new(w, h, cfg.gmm)?;
    model.update(&frames[0])?;

    let mut f_outs = Vec::with_capacity(frames.len() - 1);
    let mut mffs = Vec::with_capacity(frames.len() - 1);
    for pair in frames.windows(2) {
        let t = pair[1].index();
        let f_g = model.update(&pair[1])?;
        let flow = horn_schunck_with(&pair[0], &pair[1], &cfg.hs)?;
        let masks = fusion_masks(t, f_g, &flow, &cfg.masks)?;
        mffs.push(extract_flow_vectors(&flow, &masks.f_out, cfg.masks.tau_mag, t)?);
        f_outs.push(masks.f_out);
    }
    if mffs.iter().all(|m| m.is_empty()) {
        return Err(Error::NoMotion);
    }

    let seg_cfg = &cfg.segment;
    let (a_prime, a_prime_frames) = match seg_cfg.a_prime {
        Some(a) => (a, Vec::new()),
        None => {
            let est = optimum_blob_size(&f_outs, seg_cfg.sample_count, module_seed(cfg.seed(), "blob_size"))?;
            let idx = est.sample_frames.iter().map(|&i| frames[i + 1].index()).collect();
            (est.a_prime, idx)
        }
    };
    let min_area = seg_cfg.min_area.unwrap_or(((w * h) as f64 * 0.005).ceil() as usize).max(1);
    let max_blob = (seg_cfg.max_blob_factor * a_prime).ceil() as usize;
    let kmeans_seed = module_seed(cfg.seed(), "kmeans");

    let mut out = Vec::with_capacity(mffs.len());
    for (mff, f_out) in mffs.into_iter().zip(f_outs) {
        let t = mff.t;
        let segmentation = if mff.len() >= seg_cfg.k {
            let seg = kmeans_flow(&mff, (w, h), seg_cfg.k, kmeans_seed.wrapping_add(t))?;
            let seg = blob_absorption(&seg, min_area)?;
            let counts = count_people(&seg, &f_out, a_prime, max_blob, t)?;
            Some((seg, counts))
        } else {
            None
        };
        out.push(SegmentedFrame { t, flow_vectors: mff.len(), f_out, segmentation });
    }
    Ok(SegmentRun { a_prime, a_prime_frames, min_area, frames: out })
}

/// Flow segmentation and counting over a frame directory.
pub fn cmd_segment(cfg: &PipelineConfig) -> Result<RunReport, CliError> {
    let start = Instant::now();
    let mut report = RunReport::new("segment");
    let frames = load_frames(&input_path(cfg)?)?;
    let out = output_dir(cfg)?;
    let run = segment_sequence(&frames, cfg)?;
    let (w, h) = frames[0].dims();

    let mut per_frame = Vec::new();
    let mut segment_counts = Vec::new();
    for (sf, frame) in run.frames.iter().zip(&frames[1..]) {
        let t = sf.t;
        let mut fr = FrameReport { t, flow_vectors: sf.flow_vectors, total_people: 0, segments: Vec::new() };
        if let Some((seg, counts)) = &sf.segmentation {
            fr.segments = segment_records(seg, counts);
            fr.total_people = counts.total;
            segment_counts.push(fr.segments.len());
            let ppm = write_ppm(w, h, &flowseg::overlay(frame, seg))?;
            write(&mut report, out.join("overlays").join(format!("frame_{t:06}.ppm")), ppm)?;
        }
        per_frame.push((t, fr.segments.len(), fr.total_people));
        write(&mut report, out.join("reports").join(format!("frame_{t:06}.json")), json(&fr))?;
    }
    let segmented = segment_counts.len();
    segment_counts.sort_unstable();
    let dominant_segments = if segmented == 0 { 0 } else { segment_counts[(segmented - 1) / 2] };
    let total: u64 = per_frame.iter().map(|p| p.2).sum();
    let summary = SegmentSummary {
        frames: frames.len(),
        segmented_frames: segmented,
        a_prime: run.a_prime,
        a_prime_sample_frames: run.a_prime_frames.clone(),
        min_area: run.min_area,
        dominant_segments,
        mean_people: total as f64 / per_frame.len() as f64,
        per_frame,
    };
    write(&mut report, out.join("summary.json"), json(&summary))?;
    report.metric("frames", summary.frames);
    report.metric("dominant_segments", dominant_segments);
    report.metric("total_people", total);
    report.metric("a_prime", run.a_prime);
    report.wall_clock_ms = start.elapsed().as_millis();
    Ok(report)
}

/// Tracks and their clusters for one frame sequence.
#[derive(Debug, Clone)]
pub struct FlowAnalysis {
    pub dims: (usize, usize),
    pub tracks: Vec<Track>,
    pub clusters: Vec<TrackCluster>,
}

/// Warm-started Horn-Schunck over the sequence, the slow-flow floor, then
/// advection, linking and clustering.
pub fn analyse_flows(
    frames: &[Frame],
    hs: &HsParams,
    flow_floor: f64,
    params: &AdvectionParams,
) -> crowdkit::Result<FlowAnalysis> {
    params.validate()?;
    if frames.len() < params.k + 1 {
        return Err(Error::Param(format!(
            "need at least k + 1 = {} frames, got {}",
            params.k + 1,
            frames.len()
        )));
    }
    let mut flows = horn_schunck_sequence(frames, hs)?;
    if flow_floor > 0.0 {
        flows = flows.iter().map(|f| suppress_slow(f, flow_floor)).collect();
    }
    let tracklets = advect_video(&flows, params)?;
    if tracklets.is_empty() {
        return Err(Error::NoMotion);
    }
    let tracks = link_tracklets(&tracklets, params.gap_radius, params.angle_tol)?;
    let clusters = cluster_tracks(&tracks, params)?;
    Ok(FlowAnalysis { dims: frames[0].dims(), tracks, clusters })
}

fn write_flow_artifacts(
    report: &mut RunReport,
    out: &Path,
    analysis: &FlowAnalysis,
    min_members: usize,
    summary: Option<&SourceSinkReport>,
) -> Result<(), CliError> {
    let (w, h) = analysis.dims;
    write(report, out.join("tracks.csv"), tracks_csv(&analysis.tracks))?;
    let ppm = write_ppm(w, h, &advection::overlay(w, h, &analysis.clusters, min_members))?;
    write(report, out.join("clusters.ppm"), ppm)?;
    if let Some(s) = summary {
        write(report, out.join("sources_sinks.json"), json(s))?;
    }
    Ok(())
}

/// Dominant flows with their sources and sinks.
pub fn cmd_flows(cfg: &PipelineConfig) -> Result<RunReport, CliError> {
    let start = Instant::now();
    let mut report = RunReport::new("flows");
    let frames = load_frames(&input_path(cfg)?)?;
    let out = output_dir(cfg)?;
    let params = &cfg.flows.advection;
    let analysis = analyse_flows(&frames, &cfg.hs, cfg.flows.flow_floor, params)?;
    let summary = sources_sinks(&analysis.clusters, params.min_members)?;
    write_flow_artifacts(&mut report, &out, &analysis, params.min_members, Some(&summary))?;
    report.metric("tracks", analysis.tracks.len());
    report.metric("clusters", analysis.clusters.len());
    report.metric("dominant_flows", summary.flows.len());
    report.wall_clock_ms = start.elapsed().as_millis();
    Ok(report)
}

#[derive(Serialize)]
struct Partition<'a> {
    groups: &'a [Vec<u64>],
    singletons: &'a [u64],
    dropped: usize,
}

/// Group detection over a `ped_id,x,y,t` CSV, given directly or as
/// `trajectories.csv` inside a directory.
pub fn cmd_groups(cfg: &PipelineConfig) -> Result<RunReport, CliError> {
    let start = Instant::now();
    let mut report = RunReport::new("groups");
    let mut path = input_path(cfg)?;
    if path.is_dir() {
        path = path.join("trajectories.csv");
    }
    let file = fs::File::open(&path).map_err(|source| CliError::Io { path: path.clone(), source })?;
    let ingested = ingest_trajectories(std::io::BufReader::new(file))?;
    let trajs = &ingested.trajectories;
    let groups = detect_groups(trajs, &cfg.groups)?;
    let out = output_dir(cfg)?;
    write(&mut report, out.join("groups.txt"), format_groups(&groups))?;
    let partition = Partition { groups: &groups.groups, singletons: &groups.singletons, dropped: ingested.dropped };
    write(&mut report, out.join("partition.json"), json(&partition))?;
    let extent = |f: fn(&groups::TrajPoint) -> f64| {
        trajs.iter().flat_map(|t| &t.points).map(f).fold(0.0f64, f64::max).ceil() as usize + 1
    };
    let (w, h) = (extent(|p| p.x), extent(|p| p.y));
    write(&mut report, out.join("groups.ppm"), write_ppm(w, h, &groups::overlay(w, h, trajs, &groups))?)?;
    report.metric("pedestrians", trajs.len());
    report.metric("groups", &groups.groups);
    report.metric("singletons", groups.singletons.len());
    report.wall_clock_ms = start.elapsed().as_millis();
    Ok(report)
}

/// `--input` names the scenario for the simulator commands; otherwise the
/// section's own path, otherwise the built-in spiral.
fn load_scenario(cfg: &PipelineConfig, section: &Option<PathBuf>) -> Result<Scenario, CliError> {
    let mut scenario = match cfg.input.as_ref().or(section.as_ref()) {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("scenario {}: {e}", p.display())))?;
            Scenario::from_toml(&text).map_err(|e| CliError::Config(format!("scenario {}: {e}", p.display())))?
        }
        None => Scenario::default_spiral(),
    };
    if let Some(seed) = cfg.seed {
        scenario.seed = seed;
    }
    Ok(scenario)
}

/// Run a scenario and write its frames and ground-truth trajectories.
pub fn cmd_simulate(cfg: &PipelineConfig) -> Result<RunReport, CliError> {
    let start = Instant::now();
    let mut report = RunReport::new("simulate");
    let scenario = load_scenario(cfg, &cfg.simulate.scenario)?;
    let out = output_dir(cfg)?;
    let run = run_scenario(&scenario)?;
    report.outputs.extend(write_frame_dir(&out.join("frames"), &run.frames)?);
    write(&mut report, out.join("trajectories.csv"), export_trace(&run.trace, scenario.cell_size))?;
    write(&mut report, out.join("scenario.toml"), scenario.to_toml())?;
    report.metric("agents", run.world.agents.len());
    report.metric("frames", run.frames.len());
    report.wall_clock_ms = start.elapsed().as_millis();
    Ok(report)
}

/// Simulate, analyse the rendered frames, and check that the recovered
/// motion is one closed circulation. Check failures land in
/// [`RunReport::failures`]; artifacts are written only with `--output`.
pub fn cmd_validate(cfg: &PipelineConfig) -> Result<RunReport, CliError> {
    let start = Instant::now();
    let mut report = RunReport::new("validate");
    let v = &cfg.validate;
    let scenario = load_scenario(cfg, &v.scenario)?;
    let run = run_scenario(&scenario)?;
    let cs = scenario.cell_size as f64;
    let center = match &scenario.goal {
        Goal::Spiral { center, .. } => ((center.0 + 0.5) * cs, (center.1 + 0.5) * cs),
        Goal::Exits { .. } => (scenario.cols as f64 * cs / 2.0, scenario.rows as f64 * cs / 2.0),
    };
    let out = match cfg.output {
        Some(_) => Some(output_dir(cfg)?),
        None => None,
    };
    if let Some(out) = &out {
        report.outputs.extend(write_frame_dir(&out.join("frames"), &run.frames)?);
        write(&mut report, out.join("trajectories.csv"), export_trace(&run.trace, scenario.cell_size))?;
    }
    report.metric("agents", run.world.agents.len());
    report.metric("frames", run.frames.len());

    let analysis = match analyse_flows(&run.frames, &v.hs, v.flow_floor, &v.advection) {
        Ok(a) => a,
        Err(Error::NoMotion) => {
            report.failures.push("no motion".into());
            report.wall_clock_ms = start.elapsed().as_millis();
            return Ok(report);
        }
        Err(e) => return Err(e.into()),
    };
    let share = (v.dominant_share * analysis.tracks.len() as f64).ceil() as usize;
    let min_members = v.advection.min_members.max(share);
    report.metric("tracks", analysis.tracks.len());
    report.metric("clusters", analysis.clusters.len());
    report.metric("min_members", min_members);

    let summary = match sources_sinks(&analysis.clusters, min_members) {
        Ok(s) => Some(s),
        Err(Error::NoDominantFlows) => None,
        Err(e) => return Err(e.into()),
    };
    if let Some(out) = &out {
        write_flow_artifacts(&mut report, out, &analysis, min_members, summary.as_ref())?;
    }
    let flows = summary.map(|s| s.flows).unwrap_or_default();
    report.metric("dominant_flows", flows.len());
    if flows.len() != 1 {
        report.failures.push(format!("expected exactly one dominant cluster, found {}", flows.len()));
    }
    if let Some(f) = flows.iter().max_by_key(|f| f.members) {
        let winding = winding_angle(&analysis.clusters[f.cluster].center, center);
        let gap = (f.source.0 - f.sink.0).hypot(f.source.1 - f.sink.1);
        let max_gap = 2.0 * v.advection.grid_spacing as f64;
        report.metric("winding_deg", winding);
        report.metric("source_sink_px", gap);
        if winding.abs() < v.min_winding_deg {
            report.failures.push(format!(
                "winding {:.1} deg of the dominant center is below {:.1}",
                winding.abs(),
                v.min_winding_deg
            ));
        }
        if gap > max_gap {
            report.failures.push(format!("source and sink {gap:.1} px apart, limit {max_gap:.1}"));
        }
    }
    report.wall_clock_ms = start.elapsed().as_millis();
    Ok(report)
}
