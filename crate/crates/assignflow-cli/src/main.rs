//! Command-line runner for assignment-flow labeling.
//!
//! `assignflow run` integrates one configuration (built-in scenario or P6
//! image input) and writes its artifacts to the output directory: the label
//! map as a pixmap and as integer CSV, the step trace as CSV, a summary, the
//! resolved configuration, and — for 1D three-label runs — per-node simplex
//! trajectories. `assignflow compare` diffs two label CSVs and writes a
//! difference mask.
//!
//! Configuration comes from flags or a `key=value` file (flags win). All
//! outputs are byte-reproducible for identical configurations; `ASSIGNFLOW_THREADS`
//! caps internal parallelism without affecting results.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use assignflow::flow::build_distances;
use assignflow::geometry::AssignmentState;
use assignflow::harness::{
    entropy_avg, gen_colorquant, label_differences, LabelingResult, Scenario, ScenarioData,
};
use assignflow::linearflow::{build_operator, RelinearizationControl};
use assignflow::linsolve::{
    exponential_integrator, integrate_linear_adaptive_observed, integrate_linear_implicit,
    integrate_linear_implicit_observed, LinearIntegrateOptions,
};
use assignflow::rkmk::{
    integrate_observed, ButcherTableau, IntegrateOptions, StepControl, StepPolicy,
};

type CliError = Box<dyn std::error::Error>;

fn msg(s: impl Into<String>) -> CliError {
    s.into().into()
}

#[derive(Parser)]
#[command(name = "assignflow", about = "Assignment-flow image labeling runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one configuration and write its artifacts.
    Run(RunArgs),
    /// Diff two label CSVs and write a difference mask.
    Compare(CompareArgs),
}

#[derive(Args, Debug, Default, Clone)]
struct RunArgs {
    /// key=value configuration file; explicit flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in scenario: signal1d | vertex31 | colorquant.
    #[arg(long)]
    scenario: Option<String>,
    /// P6 pixmap to label instead of a built-in scenario.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Label count for image input (quantization prototypes).
    #[arg(long)]
    labels: Option<usize>,
    /// Selectivity of the data term.
    #[arg(long)]
    rho: Option<f64>,
    /// Odd neighborhood side length.
    #[arg(long)]
    window: Option<usize>,
    /// be | fe | h2 | h3 | rk4 | rkmk12 | rkmk32 | linear-be | linear-rk1 |
    /// linear-rk4 | expint.
    #[arg(long)]
    integrator: Option<String>,
    /// Error tolerance of adaptive schemes.
    #[arg(long)]
    tau: Option<f64>,
    /// Step-growth margin of embedded schemes.
    #[arg(long = "n-tau")]
    n_tau: Option<f64>,
    /// Fixed step size, or initial step of embedded schemes.
    #[arg(long)]
    h0: Option<f64>,
    /// Relinearization threshold divisor for linear-be (1 = never rebuild).
    #[arg(long)]
    c: Option<f64>,
    /// Krylov subspace dimension for expint.
    #[arg(long)]
    m: Option<usize>,
    /// Final time for expint.
    #[arg(long = "T")]
    t_final: Option<f64>,
    /// Scenario noise seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// labels.csv to report agreement against.
    #[arg(long)]
    oracle: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// First labels.csv.
    a: PathBuf,
    /// Second labels.csv.
    b: PathBuf,
    /// Directory for the difference mask (default: out).
    #[arg(long)]
    out: Option<PathBuf>,
}

const INTEGRATORS: [&str; 11] = [
    "be", "fe", "h2", "h3", "rk4", "rkmk12", "rkmk32", "linear-be", "linear-rk1", "linear-rk4",
    "expint",
];

/// Fully resolved run configuration (defaults < config file < flags).
#[derive(Debug, Clone)]
struct RunConfig {
    scenario: Option<String>,
    input: Option<PathBuf>,
    labels: usize,
    rho: Option<f64>,
    window: Option<usize>,
    integrator: String,
    tau: f64,
    n_tau: f64,
    h0: Option<f64>,
    c: Option<f64>,
    m: usize,
    t_final: f64,
    seed: Option<u64>,
    out: PathBuf,
    oracle: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: None,
            input: None,
            labels: 4,
            rho: None,
            window: None,
            integrator: "rkmk12".to_string(),
            tau: 0.01,
            n_tau: 20.0,
            h0: None,
            c: None,
            m: 5,
            t_final: 20.0,
            seed: None,
            out: PathBuf::from("out"),
            oracle: None,
        }
    }
}

impl RunConfig {
    /// Step size: explicit `h0`, else 0.5 for the implicit schemes and 0.01
    /// for everything else.
    fn step_size(&self) -> f64 {
        self.h0.unwrap_or(match self.integrator.as_str() {
            "be" | "linear-be" => 0.5,
            _ => 0.01,
        })
    }
}

fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| msg(format!("cannot read config {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| msg(format!("{}:{}: expected key=value", path.display(), lineno + 1)))?;
        map.insert(key.trim().replace('-', "_"), value.trim().to_string());
    }
    Ok(map)
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| msg(format!("invalid value for {key}: '{value}'")))
}

/// Layer defaults, config file, and flags into one configuration.
fn resolve_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let map = parse_config_file(path)?;
        for (key, value) in &map {
            match key.as_str() {
                "scenario" => cfg.scenario = Some(value.clone()),
                "input" => cfg.input = Some(PathBuf::from(value)),
                "labels" => cfg.labels = parse_num(key, value)?,
                "rho" => cfg.rho = Some(parse_num(key, value)?),
                "window" => cfg.window = Some(parse_num(key, value)?),
                "integrator" => cfg.integrator = value.clone(),
                "tau" => cfg.tau = parse_num(key, value)?,
                "n_tau" => cfg.n_tau = parse_num(key, value)?,
                "h0" => cfg.h0 = Some(parse_num(key, value)?),
                "c" => cfg.c = Some(parse_num(key, value)?),
                "m" => cfg.m = parse_num(key, value)?,
                "t" => cfg.t_final = parse_num(key, value)?,
                "seed" => cfg.seed = Some(parse_num(key, value)?),
                "out" => cfg.out = PathBuf::from(value),
                "oracle" => cfg.oracle = Some(PathBuf::from(value)),
                other => return Err(msg(format!("unknown config key '{other}'"))),
            }
        }
    }
    if let Some(v) = &args.scenario {
        cfg.scenario = Some(v.clone());
    }
    if let Some(v) = &args.input {
        cfg.input = Some(v.clone());
    }
    if let Some(v) = args.labels {
        cfg.labels = v;
    }
    if let Some(v) = args.rho {
        cfg.rho = Some(v);
    }
    if let Some(v) = args.window {
        cfg.window = Some(v);
    }
    if let Some(v) = &args.integrator {
        cfg.integrator = v.clone();
    }
    if let Some(v) = args.tau {
        cfg.tau = v;
    }
    if let Some(v) = args.n_tau {
        cfg.n_tau = v;
    }
    if let Some(v) = args.h0 {
        cfg.h0 = Some(v);
    }
    if let Some(v) = args.c {
        cfg.c = Some(v);
    }
    if let Some(v) = args.m {
        cfg.m = v;
    }
    if let Some(v) = args.t_final {
        cfg.t_final = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = Some(v);
    }
    if let Some(v) = &args.out {
        cfg.out = v.clone();
    }
    if let Some(v) = &args.oracle {
        cfg.oracle = Some(v.clone());
    }
    validate_config(&cfg)?;
    Ok(cfg)
}

fn validate_config(cfg: &RunConfig) -> Result<(), CliError> {
    if !INTEGRATORS.contains(&cfg.integrator.as_str()) {
        return Err(msg(format!(
            "unknown integrator '{}' (known: {})",
            cfg.integrator,
            INTEGRATORS.join(", ")
        )));
    }
    match (&cfg.scenario, &cfg.input) {
        (None, None) => return Err(msg("one of --scenario or --input is required")),
        (Some(_), Some(_)) => return Err(msg("--scenario and --input are mutually exclusive")),
        _ => {}
    }
    if let Some(s) = &cfg.scenario {
        if !["signal1d", "vertex31", "colorquant"].contains(&s.as_str()) {
            return Err(msg(format!(
                "unknown scenario '{s}' (known: signal1d, vertex31, colorquant)"
            )));
        }
    }
    if !(cfg.tau > 0.0) || !(cfg.n_tau >= 1.0) {
        return Err(msg("tau must be positive and n-tau at least 1"));
    }
    if let Some(h0) = cfg.h0 {
        if !(h0 > 0.0) {
            return Err(msg("h0 must be positive"));
        }
    }
    if let Some(c) = cfg.c {
        if !(c >= 1.0) {
            return Err(msg("c must be at least 1"));
        }
    }
    if cfg.m == 0 || cfg.labels == 0 {
        return Err(msg("m and labels must be positive"));
    }
    if !(cfg.t_final > 0.0) {
        return Err(msg("T must be positive"));
    }
    if let Some(w) = cfg.window {
        if w == 0 || w % 2 == 0 {
            return Err(msg("window must be odd and positive"));
        }
    }
    Ok(())
}

/// Builds the labeling instance the run integrates.
fn build_data(cfg: &RunConfig) -> Result<ScenarioData, CliError> {
    if let Some(name) = &cfg.scenario {
        let mut scenario = match name.as_str() {
            "signal1d" => Scenario::signal1d(),
            "vertex31" => Scenario::vertex31(),
            "colorquant" => Scenario::colorquant(),
            _ => unreachable!("validated"),
        };
        if let Some(rho) = cfg.rho {
            scenario = scenario.with_rho(rho);
        }
        if let Some(window) = cfg.window {
            scenario = scenario.with_window(window);
        }
        if let Some(seed) = cfg.seed {
            scenario = scenario.with_seed(seed);
        }
        return scenario.build().map_err(|e| msg(format!("scenario build failed: {e}")));
    }
    let path = cfg.input.as_ref().expect("validated");
    let (width, height, bytes) = read_ppm(path)?;
    let mut image = Array2::zeros((width * height, 3));
    for i in 0..width * height {
        for c in 0..3 {
            image[[i, c]] = bytes[3 * i + c] as f64 / 255.0;
        }
    }
    let seed = cfg.seed.unwrap_or(7000);
    let (features, label_set) = gen_colorquant(&image, cfg.labels, seed);
    let distances = build_distances(features.view(), &label_set)
        .map_err(|e| msg(format!("distance build failed: {e}")))?;
    let graph = assignflow::flow::LabelingGraph::grid(
        width,
        height,
        cfg.window.unwrap_or(3),
        distances,
        cfg.rho.unwrap_or(0.5),
    )
    .map_err(|e| msg(format!("graph build failed: {e}")))?;
    Ok(ScenarioData { graph, features, label_set, truth: None, width, height })
}

#[derive(Debug, Clone, Copy)]
struct TraceRow {
    t: f64,
    h: f64,
    entropy: f64,
    estimate: Option<f64>,
}

struct RunOutcome {
    state: AssignmentState,
    trace: Vec<TraceRow>,
    rejected: usize,
    converged: bool,
    linearizations: usize,
    /// (t, node, simplex row) samples for 1D three-label runs.
    trajectory: Vec<(f64, usize, [f64; 3])>,
}

/// Dispatches the configured integrator over the instance.
fn execute(cfg: &RunConfig, data: &ScenarioData) -> Result<RunOutcome, CliError> {
    let graph = &data.graph;
    let nodes = graph.node_count();
    let labels = graph.label_count();
    let want_trajectory = data.height == 1 && labels == 3;
    let mut trajectory = Vec::new();
    let mut observe = |t: f64, w: &AssignmentState| {
        if want_trajectory {
            for i in 0..nodes {
                let r = w.row(i);
                trajectory.push((t, i, [r[0], r[1], r[2]]));
            }
        }
    };
    let h = cfg.step_size();
    match cfg.integrator.as_str() {
        name @ ("be" | "fe" | "h2" | "h3" | "rk4" | "rkmk12" | "rkmk32") => {
            let tableau = ButcherTableau::by_name(name).expect("registered");
            let policy = if matches!(name, "rkmk12" | "rkmk32") {
                StepPolicy::Adaptive(StepControl {
                    tau: cfg.tau,
                    n_tau: cfg.n_tau,
                    h0: h,
                    ..StepControl::default()
                })
            } else {
                StepPolicy::Fixed { h }
            };
            let w0 = AssignmentState::uniform(nodes, labels);
            let trace = integrate_observed(
                &tableau,
                &w0,
                graph,
                &policy,
                &IntegrateOptions::default(),
                &mut observe,
            )
            .map_err(|e| msg(format!("integration failed: {e}")))?;
            Ok(RunOutcome {
                state: trace.final_state.clone(),
                trace: trace
                    .entries
                    .iter()
                    .map(|e| TraceRow {
                        t: e.t,
                        h: e.h,
                        entropy: e.entropy,
                        estimate: e.error_estimate,
                    })
                    .collect(),
                rejected: trace.rejected_steps,
                converged: trace.converged,
                linearizations: 0,
                trajectory,
            })
        }
        "linear-be" => {
            let opts = LinearIntegrateOptions::default();
            let relin = match cfg.c {
                None => None,
                Some(c) => {
                    // Pilot run at a fixed linearization measures the tangent
                    // excursion; the observed rerun uses threshold V_max / c.
                    let pilot_op = build_operator(AssignmentState::uniform(nodes, labels), graph);
                    let pilot = integrate_linear_implicit(pilot_op, h, &opts, None)
                        .map_err(|e| msg(format!("pilot run failed: {e}")))?;
                    Some(RelinearizationControl::new(c, pilot.max_row_norm_seen))
                }
            };
            let op = build_operator(AssignmentState::uniform(nodes, labels), graph);
            let run = integrate_linear_implicit_observed(op, h, &opts, relin, &mut observe)
                .map_err(|e| msg(format!("integration failed: {e}")))?;
            Ok(RunOutcome {
                state: run.state.clone(),
                trace: run
                    .entries
                    .iter()
                    .map(|e| TraceRow { t: e.t, h: e.h, entropy: e.entropy, estimate: e.bound })
                    .collect(),
                rejected: 0,
                converged: run.converged,
                linearizations: run.linearizations,
                trajectory,
            })
        }
        name @ ("linear-rk1" | "linear-rk4") => {
            let q = if name == "linear-rk1" { 1 } else { 4 };
            let op = build_operator(AssignmentState::uniform(nodes, labels), graph);
            let run = integrate_linear_adaptive_observed(
                op,
                q,
                cfg.tau,
                &LinearIntegrateOptions::default(),
                &mut observe,
            );
            Ok(RunOutcome {
                state: run.state.clone(),
                trace: run
                    .entries
                    .iter()
                    .map(|e| TraceRow { t: e.t, h: e.h, entropy: e.entropy, estimate: e.bound })
                    .collect(),
                rejected: 0,
                converged: run.converged,
                linearizations: 1,
                trajectory,
            })
        }
        "expint" => {
            let op = build_operator(AssignmentState::uniform(nodes, labels), graph);
            observe(0.0, op.base());
            let (_, state) = exponential_integrator(&op, cfg.t_final, cfg.m)
                .map_err(|e| msg(format!("integration failed: {e}")))?;
            observe(cfg.t_final, &state);
            let entropy = entropy_avg(&state);
            Ok(RunOutcome {
                state,
                trace: vec![TraceRow { t: cfg.t_final, h: cfg.t_final, entropy, estimate: None }],
                rejected: 0,
                converged: entropy < 1e-3,
                linearizations: 1,
                trajectory,
            })
        }
        other => Err(msg(format!("unknown integrator '{other}'"))),
    }
}

fn run(args: &RunArgs) -> Result<(), CliError> {
    let cfg = resolve_config(args)?;
    let data = build_data(&cfg)?;
    let start = Instant::now();
    let outcome = execute(&cfg, &data)?;
    let wall = start.elapsed().as_secs_f64();
    let result = LabelingResult::from_state(&outcome.state, outcome.trace.len(), wall);

    fs::create_dir_all(&cfg.out)
        .map_err(|e| msg(format!("cannot create {}: {e}", cfg.out.display())))?;
    write_labels_ppm(
        &cfg.out.join("labels.ppm"),
        data.width,
        data.height,
        &result.labels,
        data.graph.label_count(),
    )?;
    write_labels_csv(&cfg.out.join("labels.csv"), data.width, data.height, &result.labels)?;
    write_trace_csv(&cfg.out.join("trace.csv"), &outcome.trace)?;
    if !outcome.trajectory.is_empty() {
        write_trajectory_csv(&cfg.out.join("trajectory.csv"), &outcome.trajectory)?;
    }
    let oracle_report = match &cfg.oracle {
        None => None,
        Some(path) => {
            let (ow, oh, oracle_labels) = read_labels_csv(path)?;
            if (ow, oh) != (data.width, data.height) {
                return Err(msg(format!(
                    "oracle dimensions {ow}x{oh} do not match run {}x{}",
                    data.width, data.height
                )));
            }
            let differing = label_differences(&result.labels, &oracle_labels);
            Some((differing, differing as f64 / oracle_labels.len() as f64))
        }
    };
    write_summary(&cfg, &data, &outcome, &result, oracle_report)?;
    write_config_echo(&cfg)?;

    let entropy = outcome.trace.last().map_or(f64::NAN, |r| r.entropy);
    println!(
        "{} on {}x{} ({} labels): {} steps, entropy {entropy:.3e}, wall {wall:.2}s -> {}",
        cfg.integrator,
        data.width,
        data.height,
        data.graph.label_count(),
        outcome.trace.len(),
        cfg.out.display()
    );
    if let Some((differing, fraction)) = oracle_report {
        println!("oracle agreement: {differing} differing ({:.4} of nodes)", fraction);
    }
    Ok(())
}

fn compare(args: &CompareArgs) -> Result<(), CliError> {
    let (wa, ha, la) = read_labels_csv(&args.a)?;
    let (wb, hb, lb) = read_labels_csv(&args.b)?;
    if (wa, ha) != (wb, hb) {
        return Err(msg(format!("dimension mismatch: {wa}x{ha} vs {wb}x{hb}")));
    }
    let differing = label_differences(&la, &lb);
    let fraction = differing as f64 / la.len() as f64;
    println!("{differing} of {} labels differ ({fraction:.4})", la.len());
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out).map_err(|e| msg(format!("cannot create {}: {e}", out.display())))?;
    let mask: Vec<u8> = la
        .iter()
        .zip(&lb)
        .flat_map(|(x, y)| if x == y { [0u8, 0, 0] } else { [255, 255, 255] })
        .collect();
    let path = out.join("diff.ppm");
    write_ppm(&path, wa, ha, &mask)?;
    println!("difference mask -> {}", path.display());
    Ok(())
}

// ---- artifact writers ----------------------------------------------------

/// Well-separated label colors: golden-angle hue walk, fixed for all runs.
fn palette(count: usize) -> Vec<[u8; 3]> {
    (0..count)
        .map(|j| {
            let hue = (j as f64 * 0.618_033_988_749_895).fract();
            hsv_to_rgb(hue, 0.65, 0.95)
        })
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), CliError> {
    assert_eq!(rgb.len(), width * height * 3);
    let file = fs::File::create(path)
        .map_err(|e| msg(format!("cannot write {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    write!(w, "P6\n{width} {height}\n255\n").and_then(|_| w.write_all(rgb))
        .map_err(|e| msg(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>), CliError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| msg(format!("cannot read {}: {e}", path.display())))?;
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String, CliError> {
        // Skip whitespace and '#' comments between header tokens.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(msg(format!("{}: truncated header", path.display())));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P6" {
        return Err(msg(format!("{}: only binary P6 pixmaps are supported", path.display())));
    }
    let width: usize = parse_num("width", &token(&bytes)?)?;
    let height: usize = parse_num("height", &token(&bytes)?)?;
    let maxval: usize = parse_num("maxval", &token(&bytes)?)?;
    if maxval == 0 || maxval > 255 {
        return Err(msg(format!("{}: unsupported maxval {maxval}", path.display())));
    }
    pos += 1; // single whitespace byte after maxval
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(msg(format!("{}: pixel data truncated", path.display())));
    }
    let mut rgb = bytes[pos..pos + need].to_vec();
    if maxval != 255 {
        for v in &mut rgb {
            *v = ((*v as usize * 255) / maxval) as u8;
        }
    }
    Ok((width, height, rgb))
}

fn write_labels_ppm(
    path: &Path,
    width: usize,
    height: usize,
    labels: &[usize],
    label_count: usize,
) -> Result<(), CliError> {
    let colors = palette(label_count);
    let rgb: Vec<u8> = labels.iter().flat_map(|&l| colors[l]).collect();
    write_ppm(path, width, height, &rgb)
}

fn write_labels_csv(
    path: &Path,
    width: usize,
    height: usize,
    labels: &[usize],
) -> Result<(), CliError> {
    let mut text = String::new();
    for y in 0..height {
        let row: Vec<String> =
            (0..width).map(|x| labels[y * width + x].to_string()).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| msg(format!("cannot write {}: {e}", path.display())))
}

fn read_labels_csv(path: &Path) -> Result<(usize, usize, Vec<usize>), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| msg(format!("cannot read {}: {e}", path.display())))?;
    let mut labels = Vec::new();
    let mut width = 0usize;
    let mut height = 0usize;
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let row: Vec<usize> = line
            .split(',')
            .map(|v| parse_num("label", v.trim()))
            .collect::<Result<_, _>>()?;
        if width == 0 {
            width = row.len();
        } else if row.len() != width {
            return Err(msg(format!("{}: ragged rows", path.display())));
        }
        labels.extend(row);
        height += 1;
    }
    if labels.is_empty() {
        return Err(msg(format!("{}: no labels", path.display())));
    }
    Ok((width, height, labels))
}

fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<(), CliError> {
    let mut text = String::from("k,t,h,entropy,error_estimate\n");
    for (k, row) in rows.iter().enumerate() {
        let est = row.estimate.map_or(String::new(), |e| format!("{e}"));
        writeln!(text, "{},{},{},{},{est}", k + 1, row.t, row.h, row.entropy).unwrap();
    }
    fs::write(path, text).map_err(|e| msg(format!("cannot write {}: {e}", path.display())))
}

fn write_trajectory_csv(
    path: &Path,
    rows: &[(f64, usize, [f64; 3])],
) -> Result<(), CliError> {
    let mut text = String::from("t,node,w1,w2,w3\n");
    for (t, node, w) in rows {
        writeln!(text, "{t},{node},{},{},{}", w[0], w[1], w[2]).unwrap();
    }
    fs::write(path, text).map_err(|e| msg(format!("cannot write {}: {e}", path.display())))
}

fn write_summary(
    cfg: &RunConfig,
    data: &ScenarioData,
    outcome: &RunOutcome,
    result: &LabelingResult,
    oracle: Option<(usize, f64)>,
) -> Result<(), CliError> {
    let mut text = String::new();
    if let Some(s) = &cfg.scenario {
        writeln!(text, "scenario: {s}").unwrap();
    }
    if let Some(p) = &cfg.input {
        writeln!(text, "input: {}", p.display()).unwrap();
    }
    writeln!(text, "integrator: {}", cfg.integrator).unwrap();
    writeln!(text, "nodes: {}", data.graph.node_count()).unwrap();
    writeln!(text, "labels: {}", data.graph.label_count()).unwrap();
    writeln!(text, "steps: {}", outcome.trace.len()).unwrap();
    writeln!(text, "rejected_steps: {}", outcome.rejected).unwrap();
    writeln!(text, "converged: {}", outcome.converged).unwrap();
    if let Some(last) = outcome.trace.last() {
        writeln!(text, "final_time: {}", last.t).unwrap();
        writeln!(text, "final_entropy: {}", last.entropy).unwrap();
    }
    if outcome.linearizations > 0 {
        writeln!(text, "linearizations: {}", outcome.linearizations).unwrap();
    }
    if let Some(truth) = &data.truth {
        let errs = label_differences(&result.labels, truth);
        writeln!(text, "truth_differing: {errs}").unwrap();
        writeln!(text, "truth_error_fraction: {}", errs as f64 / truth.len() as f64).unwrap();
    }
    if let Some((differing, fraction)) = oracle {
        writeln!(text, "oracle: {}", cfg.oracle.as_ref().unwrap().display()).unwrap();
        writeln!(text, "oracle_differing: {differing}").unwrap();
        writeln!(text, "oracle_differing_fraction: {fraction}").unwrap();
    }
    writeln!(text, "wall_seconds: {}", result.wall_seconds).unwrap();
    let path = cfg.out.join("summary.txt");
    fs::write(&path, text).map_err(|e| msg(format!("cannot write {}: {e}", path.display())))
}

/// Echoes the resolved configuration as a reusable key=value file.
fn write_config_echo(cfg: &RunConfig) -> Result<(), CliError> {
    let mut text = String::new();
    if let Some(s) = &cfg.scenario {
        writeln!(text, "scenario={s}").unwrap();
    }
    if let Some(p) = &cfg.input {
        writeln!(text, "input={}", p.display()).unwrap();
        writeln!(text, "labels={}", cfg.labels).unwrap();
    }
    if let Some(rho) = cfg.rho {
        writeln!(text, "rho={rho}").unwrap();
    }
    if let Some(window) = cfg.window {
        writeln!(text, "window={window}").unwrap();
    }
    writeln!(text, "integrator={}", cfg.integrator).unwrap();
    writeln!(text, "tau={}", cfg.tau).unwrap();
    writeln!(text, "n_tau={}", cfg.n_tau).unwrap();
    writeln!(text, "h0={}", cfg.step_size()).unwrap();
    if let Some(c) = cfg.c {
        writeln!(text, "c={c}").unwrap();
    }
    writeln!(text, "m={}", cfg.m).unwrap();
    writeln!(text, "t={}", cfg.t_final).unwrap();
    if let Some(seed) = cfg.seed {
        writeln!(text, "seed={seed}").unwrap();
    }
    writeln!(text, "out={}", cfg.out.display()).unwrap();
    let path = cfg.out.join("config.txt");
    fs::write(&path, text).map_err(|e| msg(format!("cannot write {}: {e}", path.display())))
}

fn init_threads() {
    if let Ok(v) = std::env::var("ASSIGNFLOW_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                // Ignore failure: the global pool may already exist in tests.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn main() -> ExitCode {
    init_threads();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Compare(args) => compare(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
