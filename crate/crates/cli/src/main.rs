//! `voxgeo`: command-line front end for the volumetric geometry kernels.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;
use serde_json::json;

use voxgeo_core::anatomy::{self, Structure};
use voxgeo_core::attention::sdmaa_forward_traced;
use voxgeo_core::clinical::{self, MeshMode, PhantomSpec};
use voxgeo_core::io::{self, AnyVolume};
use voxgeo_core::losses::{deep_supervision_loss, LossConfig};
use voxgeo_core::metrics;
use voxgeo_core::params::WeightsBundle;
use voxgeo_core::preprocess::resample_trilinear;
use voxgeo_core::sdm::{sdm_bruteforce_oracle, signed_distance_map, ORACLE_MAX_VOXELS};
use voxgeo_core::stitch::{self, StitchPlan, WeightMode, WeightWindow};
use voxgeo_core::uncertainty::{active_band, ambiguity_field, foreground_prob, gating_mask};
use voxgeo_core::{selftest, Grid, LabelVolume, ProbVolume};

use config::{ConfigFile, Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "voxgeo", version, about = "Volumetric geometry and uncertainty kernels for 3D segmentation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON file with default parameters; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (falls back to VOXGEO_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log filter for standard error, e.g. `warn` or `debug`.
    #[arg(long, global = true)]
    log_level: Option<String>,
    /// Seed recorded in metadata for reproducibility.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ambiguity field and gating mask from foreground probabilities.
    Ambiguity {
        /// Single-channel foreground probability.
        #[arg(long, conflicts_with_all = ["upper", "lower"])]
        fg: Option<PathBuf>,
        /// Upper-arch probability; combined with --lower as max(p_up, p_low).
        #[arg(long, requires = "lower")]
        upper: Option<PathBuf>,
        #[arg(long, requires = "upper")]
        lower: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        /// Ambiguity field output (float32).
        #[arg(long)]
        out: PathBuf,
        /// Binary gating mask output.
        #[arg(long)]
        mask_out: Option<PathBuf>,
    },
    /// Exact signed distance map of one class or the foreground union.
    Sdm {
        #[arg(long)]
        labels: PathBuf,
        /// Comma-separated class ids, or `foreground` for every nonzero class.
        #[arg(long, default_value = "foreground")]
        classes: String,
        #[arg(long)]
        out: PathBuf,
        /// Also compare against the brute-force oracle (small volumes only).
        #[arg(long)]
        verify: bool,
    },
    /// Distance-guided channel attention over a feature map.
    Sdmaa {
        /// Raw float32 feature map.
        #[arg(long)]
        features: PathBuf,
        /// Signed distance prior; resampled to the feature grid if needed.
        #[arg(long)]
        prior: PathBuf,
        /// Weight bundle manifest (JSON + .bin).
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Combined CE + soft Dice loss, optionally over several scales.
    Loss {
        /// Prediction per scale, finest first.
        #[arg(long, required = true)]
        pred: Vec<PathBuf>,
        /// Ground truth per scale, in the same order.
        #[arg(long, required = true)]
        gt: Vec<PathBuf>,
        #[arg(long)]
        lambda_ce: Option<f64>,
        #[arg(long)]
        lambda_dc: Option<f64>,
        #[arg(long)]
        eps: Option<f64>,
        /// Comma-separated scale weights; default halves per scale.
        #[arg(long, value_parser = parse_f64_list)]
        ds_weights: Option<Vec<f64>>,
        #[arg(long)]
        exclude_background: bool,
        #[arg(long)]
        ignore_label: Option<u16>,
        /// JSON report path; printed to standard output when absent.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// DSC, sensitivity, HD95 and ASSD per class.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Comma-separated class ids or `all` (every foreground class).
        #[arg(long, default_value = "all")]
        classes: String,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Export a sliding-window plan.
    Stitch {
        #[arg(long, value_parser = parse_dims)]
        dims: [usize; 3],
        #[arg(long, value_parser = parse_dims)]
        window: [usize; 3],
        #[arg(long)]
        overlap: Option<f64>,
        /// Allow windows larger than the volume (treated as padded).
        #[arg(long)]
        allow_pad: bool,
        #[arg(long)]
        plan_json: PathBuf,
    },
    /// Stitch a directory of origin-tagged patches into one volume.
    StitchRun {
        #[arg(long)]
        plan: PathBuf,
        /// Directory of `.raw` patch files with `patch_origin` sidecars.
        #[arg(long)]
        patches: PathBuf,
        #[arg(long, value_parser = parse_weight_mode)]
        blend: Option<WeightMode>,
        /// Volume whose spacing and origin the output adopts.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Argmax label output.
        #[arg(long)]
        labels_out: Option<PathBuf>,
    },
    /// Tooth-to-structure proximity report.
    Proximity {
        #[arg(long)]
        labels: PathBuf,
        /// FDI codes such as `14-18,24-28`.
        #[arg(long)]
        teeth: String,
        /// `sinus` or `iac`.
        #[arg(long)]
        structure: String,
        /// Separate structure segmentation; defaults to --labels.
        #[arg(long)]
        structure_labels: Option<PathBuf>,
        /// CSV of tooth_id,structure,d_ref_mm.
        #[arg(long)]
        refs: Option<PathBuf>,
        #[arg(long, value_parser = parse_mesh_mode)]
        mesh: Option<MeshMode>,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Rasterise a sphere/capsule phantom.
    Phantom {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the embedded oracle suite.
    Selftest {
        /// Comma-separated criterion ids; all when absent.
        #[arg(long)]
        only: Option<String>,
    },
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| "expected three comma-separated integers".to_string())
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"))).collect()
}

fn parse_weight_mode(s: &str) -> Result<WeightMode, String> {
    match s {
        "uniform" => Ok(WeightMode::Uniform),
        "gaussian" => Ok(WeightMode::Gaussian),
        _ => Err("expected uniform or gaussian".into()),
    }
}

fn parse_mesh_mode(s: &str) -> Result<MeshMode, String> {
    match s {
        "iso-surface" => Ok(MeshMode::IsoSurface),
        "voxel-centers" => Ok(MeshMode::VoxelCenters),
        _ => Err("expected iso-surface or voxel-centers".into()),
    }
}

fn parse_classes(s: &str) -> Result<Vec<u16>> {
    s.split(',')
        .map(|p| p.trim().parse::<u16>().with_context(|| format!("bad class id {p:?}")))
        .collect()
}

/// Metadata written next to every output file.
#[derive(Serialize)]
struct Meta<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: &'a RunConfig,
    inputs: BTreeMap<&'static str, String>,
    details: serde_json::Value,
}

struct Run {
    cfg: RunConfig,
    command: &'static str,
    inputs: BTreeMap<&'static str, String>,
}

impl Run {
    fn input(&mut self, key: &'static str, p: &Path) {
        self.inputs.insert(key, p.display().to_string());
    }

    fn meta(&self, output: &Path, details: serde_json::Value) -> Result<()> {
        let m = Meta {
            tool: "voxgeo",
            version: voxgeo_core::VERSION,
            command: self.command,
            config: &self.cfg,
            inputs: self.inputs.clone(),
            details,
        };
        let mut name = output.as_os_str().to_owned();
        name.push(".meta.json");
        std::fs::write(PathBuf::from(name), serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn overrides(g: &Global, cmd: &Command) -> Overrides {
    let mut o = Overrides { seed: g.seed, threads: g.threads, log_level: g.log_level.clone(), ..Default::default() };
    match cmd {
        Command::Ambiguity { tau, .. } => o.tau = *tau,
        Command::Sdmaa { eps, .. } => o.awp_eps = *eps,
        Command::Loss { lambda_ce, lambda_dc, eps, ds_weights, .. } => {
            o.lambda_ce = *lambda_ce;
            o.lambda_dc = *lambda_dc;
            o.dice_eps = *eps;
            o.ds_weights = ds_weights.clone();
        }
        Command::Stitch { overlap, .. } => o.overlap = *overlap,
        Command::StitchRun { blend, .. } => o.blend = *blend,
        Command::Proximity { mesh, .. } => o.mesh = *mesh,
        _ => {}
    }
    o
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Ambiguity { .. } => "ambiguity",
        Command::Sdm { .. } => "sdm",
        Command::Sdmaa { .. } => "sdmaa",
        Command::Loss { .. } => "loss",
        Command::Metrics { .. } => "metrics",
        Command::Stitch { .. } => "stitch",
        Command::StitchRun { .. } => "stitch-run",
        Command::Proximity { .. } => "proximity",
        Command::Phantom { .. } => "phantom",
        Command::Selftest { .. } => "selftest",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let file = ConfigFile::load(cli.global.config.as_deref())?;
    let env_threads = match std::env::var("VOXGEO_THREADS") {
        Ok(v) => Some(v.trim().parse::<usize>().context("VOXGEO_THREADS must be a positive integer")?),
        Err(_) => None,
    };
    let cfg = RunConfig::resolve(overrides(&cli.global, &cli.command), file, env_threads)?;
    env_logger::Builder::new()
        .parse_filters(&cfg.log_level)
        .target(env_logger::Target::Stderr)
        .format_timestamp(None)
        .init();
    #[cfg(feature = "parallel")]
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let mut run = Run { cfg, command: command_name(&cli.command), inputs: BTreeMap::new() };
    match cli.command {
        Command::Ambiguity { fg, upper, lower, out, mask_out, .. } => cmd_ambiguity(&mut run, fg, upper, lower, &out, mask_out.as_deref()),
        Command::Sdm { labels, classes, out, verify } => cmd_sdm(&mut run, &labels, &classes, &out, verify),
        Command::Sdmaa { features, prior, weights, out, .. } => cmd_sdmaa(&mut run, &features, &prior, &weights, &out),
        Command::Loss { pred, gt, exclude_background, ignore_label, json, .. } => {
            cmd_loss(&mut run, &pred, &gt, exclude_background, ignore_label, json.as_deref())
        }
        Command::Metrics { pred, gt, classes, csv, json } => cmd_metrics(&mut run, &pred, &gt, &classes, &csv, json.as_deref()),
        Command::Stitch { dims, window, allow_pad, plan_json, .. } => cmd_plan(&mut run, dims, window, allow_pad, &plan_json),
        Command::StitchRun { plan, patches, reference, out, labels_out, .. } => {
            cmd_stitch_run(&mut run, &plan, &patches, reference.as_deref(), &out, labels_out.as_deref())
        }
        Command::Proximity { labels, teeth, structure, structure_labels, refs, csv, .. } => {
            cmd_proximity(&mut run, &labels, &teeth, &structure, structure_labels.as_deref(), refs.as_deref(), &csv)
        }
        Command::Phantom { spec, out } => cmd_phantom(&mut run, &spec, &out),
        Command::Selftest { only } => return cmd_selftest(only.as_deref()),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_ambiguity(
    run: &mut Run,
    fg: Option<PathBuf>,
    upper: Option<PathBuf>,
    lower: Option<PathBuf>,
    out: &Path,
    mask_out: Option<&Path>,
) -> Result<()> {
    let p_fg = match (fg, upper, lower) {
        (Some(f), _, _) => {
            run.input("fg", &f);
            io::read_prob(&f)?
        }
        (None, Some(u), Some(l)) => {
            run.input("upper", &u);
            run.input("lower", &l);
            foreground_prob(&io::read_prob(&u)?, &io::read_prob(&l)?)?
        }
        _ => bail!("give --fg or both --upper and --lower"),
    };
    let tau = run.cfg.tau;
    let field = ambiguity_field(&p_fg)?;
    let mask = gating_mask(&field, tau)?;
    let (lo, hi) = active_band(tau)?;
    let summary = json!({ "voxels": mask.data.len(), "active": mask.active(), "band": [lo, hi] });
    info!("tau {tau}: {} of {} voxels active", mask.active(), mask.data.len());
    io::write_volume(&AnyVolume::Scalar(voxgeo_core::Volume { grid: field.grid, data: field.data }), out)?;
    run.meta(out, summary.clone())?;
    if let Some(m) = mask_out {
        let labels = LabelVolume::new(mask.grid, mask.data.iter().map(|&b| b as u16).collect(), 2)?;
        io::write_volume(&labels.into(), m)?;
        run.meta(m, summary.clone())?;
    }
    println!("{summary}");
    Ok(())
}

fn cmd_sdm(run: &mut Run, labels_path: &Path, classes: &str, out: &Path, verify: bool) -> Result<()> {
    run.input("labels", labels_path);
    let labels = io::read_labels(labels_path)?;
    let target: Vec<u16> = if classes == "foreground" { (1..labels.num_classes).collect() } else { parse_classes(classes)? };
    let sdm = signed_distance_map(&labels, &target)?;
    let (min, max) = sdm.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut details = json!({ "classes": target, "min_mm": min, "max_mm": max });
    if verify {
        if labels.grid.len() > ORACLE_MAX_VOXELS {
            warn!("volume too large for the oracle ({} voxels); skipping verification", labels.grid.len());
        } else {
            let oracle = sdm_bruteforce_oracle(&labels, &target)?;
            let exact = oracle.squared == sdm.squared;
            details["oracle_exact"] = json!(exact);
            if !exact {
                bail!("signed distance map disagrees with the brute-force oracle");
            }
        }
    }
    io::write_volume(&sdm.to_scalar().into(), out)?;
    run.meta(out, details.clone())?;
    println!("{details}");
    Ok(())
}

fn cmd_sdmaa(run: &mut Run, features: &Path, prior: &Path, weights: &Path, out: &Path) -> Result<()> {
    run.input("features", features);
    run.input("prior", prior);
    run.input("weights", weights);
    let x = io::read_feature_map(features)?;
    let mut s = io::read_scalar(prior)?;
    if s.grid.dims != x.dims {
        info!("resampling prior {:?} -> {:?}", s.grid.dims, x.dims);
        s = resample_trilinear(&s, x.dims)?;
    }
    let bundle = WeightsBundle::read(weights)?;
    let tr = sdmaa_forward_traced(&x, &s, &bundle.adapter()?, &bundle.channel_attention()?, run.cfg.awp_eps)?;
    io::write_feature_map(&tr.output, out)?;
    let details = json!({ "descriptor": tr.descriptor });
    run.meta(out, details.clone())?;
    println!("{details}");
    Ok(())
}

fn cmd_loss(run: &mut Run, pred: &[PathBuf], gt: &[PathBuf], exclude_bg: bool, ignore: Option<u16>, out: Option<&Path>) -> Result<()> {
    if pred.len() != gt.len() {
        bail!("{} --pred but {} --gt", pred.len(), gt.len());
    }
    let preds = pred.iter().map(|p| io::read_prob(p)).collect::<voxgeo_core::Result<Vec<ProbVolume>>>()?;
    let gts = gt.iter().map(|p| io::read_labels(p)).collect::<voxgeo_core::Result<Vec<LabelVolume>>>()?;
    if let Some(p) = pred.first() {
        run.input("pred", p);
    }
    if let Some(g) = gt.first() {
        run.input("gt", g);
    }
    let ds_weights = run.cfg.ds_weights.clone().unwrap_or_else(|| LossConfig::halving_weights(preds.len()));
    let cfg = LossConfig {
        lambda_ce: run.cfg.lambda_ce,
        lambda_dc: run.cfg.lambda_dc,
        eps: run.cfg.dice_eps,
        ds_weights,
        include_background: !exclude_bg,
        exclude_absent: false,
        ignore_label: ignore,
    };
    let (report, _) = deep_supervision_loss(&preds, &gts, &cfg)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match out {
        Some(p) => {
            write_text(p, &text)?;
            run.meta(p, json!({ "scales": preds.len(), "ds_weights": cfg.ds_weights }))?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_metrics(run: &mut Run, pred: &Path, gt: &Path, classes: &str, csv: &Path, json_out: Option<&Path>) -> Result<()> {
    run.input("pred", pred);
    run.input("gt", gt);
    let p = io::read_labels(pred)?;
    let g = io::read_labels(gt)?;
    let classes = if classes == "all" { (1..p.num_classes.max(g.num_classes)).collect() } else { parse_classes(classes)? };
    let report = metrics::evaluate(&p, &g, &classes)?;
    for m in report.per_class.iter().filter(|m| m.empty_pred || m.empty_gt) {
        warn!("class {}: {}", m.class, m.flags());
    }
    write_text(csv, &metrics::report_csv(&report))?;
    let details = json!({ "classes": classes, "averaging": "macro over classes present in the ground truth" });
    run.meta(csv, details.clone())?;
    if let Some(j) = json_out {
        write_text(j, &(serde_json::to_string_pretty(&report)? + "\n"))?;
        run.meta(j, details)?;
    }
    Ok(())
}

fn cmd_plan(run: &mut Run, dims: [usize; 3], window: [usize; 3], allow_pad: bool, out: &Path) -> Result<()> {
    let plan = stitch::plan_windows(dims, window, run.cfg.overlap, allow_pad)?;
    info!("{} windows, stride {:?}", plan.origins.len(), plan.stride);
    write_text(out, &(serde_json::to_string_pretty(&plan)? + "\n"))?;
    run.meta(out, json!({ "windows": plan.origins.len() }))
}

fn cmd_stitch_run(
    run: &mut Run,
    plan_path: &Path,
    dir: &Path,
    reference: Option<&Path>,
    out: &Path,
    labels_out: Option<&Path>,
) -> Result<()> {
    run.input("plan", plan_path);
    run.input("patches", dir);
    let plan: StitchPlan = serde_json::from_str(&std::fs::read_to_string(plan_path)?).context("parsing the plan")?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "raw"));
    files.sort();
    if files.is_empty() {
        bail!("no .raw patches in {}", dir.display());
    }
    let patches = files.iter().map(|f| io::read_patch(f)).collect::<voxgeo_core::Result<Vec<_>>>()?;
    let grid = match reference {
        Some(r) => {
            run.input("reference", r);
            let g = io::read_scalar(r)?.grid;
            if g.dims != plan.dims {
                bail!("reference dims {:?} differ from plan {:?}", g.dims, plan.dims);
            }
            g
        }
        None => Grid::new(plan.dims, patches[0].1.grid.spacing)?,
    };
    let weights = WeightWindow::new(run.cfg.blend, plan.window);
    let prob = stitch::stitch(&patches, &plan, &weights, grid)?;
    let details = json!({ "patches": patches.len(), "blend": run.cfg.blend });
    io::write_volume(&prob.clone().into(), out)?;
    run.meta(out, details.clone())?;
    if let Some(l) = labels_out {
        io::write_volume(&stitch::argmax_labels(&prob)?.into(), l)?;
        run.meta(l, details)?;
    }
    Ok(())
}

fn cmd_proximity(
    run: &mut Run,
    labels_path: &Path,
    teeth: &str,
    structure: &str,
    structure_labels: Option<&Path>,
    refs: Option<&Path>,
    csv: &Path,
) -> Result<()> {
    run.input("labels", labels_path);
    let labels = io::read_labels(labels_path)?;
    let teeth = anatomy::parse_tooth_set(teeth)?;
    let structure: Structure = structure.parse()?;
    let svol = match structure_labels {
        Some(p) => {
            run.input("structure_labels", p);
            Some(io::read_labels(p)?)
        }
        None => None,
    };
    let refs = match refs {
        Some(p) => {
            run.input("refs", p);
            clinical::parse_refs_csv(&std::fs::read_to_string(p)?)?
        }
        None => Default::default(),
    };
    let report = clinical::proximity_report(&labels, &teeth, structure, svol.as_ref(), &refs, run.cfg.mesh)?;
    for (t, why) in &report.omitted {
        warn!("tooth {t} omitted: {why}");
    }
    write_text(csv, &clinical::report_csv(&report))?;
    run.meta(
        csv,
        json!({
            "mesh": report.mode,
            "omitted": report.omitted,
            "mean_delta_e_mm": report.mean_delta_e,
            "sign": "negative values are penetration depth of overlapping regions",
        }),
    )
}

fn cmd_phantom(run: &mut Run, spec_path: &Path, out: &Path) -> Result<()> {
    run.input("spec", spec_path);
    let spec: PhantomSpec = serde_json::from_str(&std::fs::read_to_string(spec_path)?).context("parsing the phantom spec")?;
    let labels = clinical::make_phantom(&spec)?;
    let counts: BTreeMap<u16, usize> = labels.present_classes().into_iter().map(|c| (c, labels.count(c))).collect();
    io::write_volume(&labels.into(), out)?;
    run.meta(out, json!({ "voxel_counts": counts }))
}

fn cmd_selftest(only: Option<&str>) -> Result<ExitCode> {
    let ids: Vec<u8> = match only {
        Some(s) => s
            .split(',')
            .map(|p| p.trim().parse::<u8>().with_context(|| format!("bad criterion id {p:?}")))
            .collect::<Result<_>>()?,
        None => selftest::criterion_ids(),
    };
    let mut all = true;
    for id in ids {
        let r = selftest::run_criterion(id).with_context(|| format!("no criterion {id}"))?;
        println!("{r}");
        all &= r.passed;
    }
    Ok(if all { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
