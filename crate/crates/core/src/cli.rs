//! `crane` command line.

use crate::collision::{CollisionWorld, Scene};
use crate::config::{load_json, ConfigError, LinkSpec, Scenario};
use crate::kinematics::{NeedlePose, Vec3, DOF};
use crate::link::{listen_controller, ControllerLink, DirectLink, StreamLink};
use crate::planning::PlanningContext;
use crate::registration::{register, FiducialSet, Registration, TransformJson};
use crate::service::bridge::{serve, spawn_actor};
use crate::service::{
    compute_plan, is_infeasible, read_log, replay_log, run_script, run_until, PlanMode, PlanRequest, Session,
    SessionConfig, SessionIo, SessionOptions,
};
use clap::{Args, Parser, Subcommand};
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::Ordering;

pub const EXIT_OK: u8 = 0;
/// Scripted terminal state not reached, or replay diverged.
pub const EXIT_MISMATCH: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_INFEASIBLE: u8 = 3;
pub const EXIT_MONITOR: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "crane", version, about = "CT-guided needle robot simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run a scripted scenario headlessly in virtual time.
    Simulate(SimulateArgs),
    /// Optimize a setup pose, plan a path to it and write the trajectory CSV.
    Plan(PlanArgs),
    /// Fit the robot-to-scanner transform from paired fiducials.
    Register(RegisterArgs),
    /// Run the session with the WebSocket bridge for an operator console.
    Serve(ServeArgs),
    /// Re-run a session event log and compare its telemetry.
    Replay(ReplayArgs),
    /// Run the low-level controller behind a TCP socket.
    Controller(ControllerArgs),
    /// Draw columns of a CSV log as an SVG line chart.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Replace the scenario's scene file.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for events.jsonl and joints.csv.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    pub scene: Option<PathBuf>,
    /// Target point, scanner frame, `x,y,z` in meters. Defaults to the scene's.
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    pub target: Option<[f64; 3]>,
    /// A point on the needle line outside the patient. Defaults to the
    /// scene's entry hint, else straight up the scanner z axis.
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    pub entry: Option<[f64; 3]>,
    #[arg(long)]
    pub standoff_mm: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trajectory CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    /// JSON `{ "robot": [[x,y,z]...], "scanner": [[x,y,z]...] }`.
    pub fiducials: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pace virtual time to the wall clock.
    #[arg(long)]
    pub realtime: bool,
    /// Address the bridge binds to.
    #[arg(long, default_value = "127.0.0.1")]
    pub listen: String,
    #[arg(long, default_value_t = 8080)]
    pub ui_port: u16,
    /// Static console files served next to `/ws`.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
    /// Directory for the session logs.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub log: PathBuf,
    /// Largest accepted difference in joint, setpoint and pose values.
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct ControllerArgs {
    #[arg(long, default_value = "127.0.0.1:7420")]
    pub listen: String,
    /// Scenario whose `controller` section configures the simulator.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Exit after this many sessions.
    #[arg(long)]
    pub sessions: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    pub csv: PathBuf,
    /// Columns to draw against the first one; all when absent.
    #[arg(long, value_delimiter = ',')]
    pub columns: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_point(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match v.as_slice() {
        [x, y, z] if v.iter().all(|c| c.is_finite()) => Ok([*x, *y, *z]),
        _ => Err("expected three finite numbers `x,y,z`".into()),
    }
}

/// Error carrying the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::new(EXIT_CONFIG, format!("config error: {e}"))
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::new(EXIT_CONFIG, format!("i/o error: {e}"))
    }
}

type CmdResult = Result<u8, Failure>;

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CRANE_LOG", "warn")).init();
    let cli = Cli::parse();
    ExitCode::from(run(cli))
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> u8 {
    let r = match cli.command {
        Cmd::Simulate(a) => simulate(a),
        Cmd::Plan(a) => plan(a),
        Cmd::Register(a) => register_cmd(a),
        Cmd::Serve(a) => serve_cmd(a),
        Cmd::Replay(a) => replay(a),
        Cmd::Controller(a) => controller(a),
        Cmd::Plot(a) => plot(a),
    };
    match r {
        Ok(code) => code,
        Err(f) => {
            eprintln!("crane: {}", f.message);
            f.code
        }
    }
}

fn load_scenario(config: &Path, scene: Option<&Path>, seed: Option<u64>) -> Result<Scenario, Failure> {
    let cfg = load_json(config)?;
    let mut s = Scenario::resolve(config, cfg, scene)?;
    if let Some(seed) = seed {
        s.set_seed(seed);
    }
    Ok(s)
}

fn open_link(spec: &LinkSpec, cfg: &SessionConfig) -> io::Result<Box<dyn ControllerLink>> {
    Ok(match spec {
        LinkSpec::Direct => Box::new(DirectLink::new(cfg.controller.clone())),
        LinkSpec::Pipe => Box::new(StreamLink::spawn_local(cfg.controller.clone())?),
        LinkSpec::Tcp(addr) => Box::new(connect_with_retry(addr)?),
    })
}

/// The controller may still be starting; retry for about two seconds.
fn connect_with_retry(addr: &str) -> io::Result<StreamLink<std::net::TcpStream>> {
    let mut attempt = 0;
    loop {
        match StreamLink::connect(addr) {
            Err(e) if e.kind() == io::ErrorKind::ConnectionRefused && attempt < 20 => {
                attempt += 1;
                std::thread::sleep(std::time::Duration::from_millis(100));
            }
            r => return r,
        }
    }
}

fn log_files(dir: &Path) -> io::Result<SessionIo> {
    std::fs::create_dir_all(dir)?;
    let open = |name: &str| -> io::Result<Box<dyn Write + Send>> {
        Ok(Box::new(BufWriter::new(File::create(dir.join(name))?)))
    };
    Ok(SessionIo {
        event_log: Some(open("events.jsonl")?),
        joint_log: Some(open("joints.csv")?),
        keep_records: false,
    })
}

fn simulate(a: SimulateArgs) -> CmdResult {
    let sc = load_scenario(&a.config, a.scene.as_deref(), a.seed)?;
    let link = open_link(&sc.config.link, &sc.session)?;
    let io = log_files(&a.out)?;
    let mut s = Session::new(sc.session.clone(), link, PlanMode::Inline, io)
        .map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
    let max_ticks = sc.max_ticks();
    let run = if sc.config.script.is_empty() {
        run_until(&mut s, max_ticks, |_| false)?;
        Default::default()
    } else {
        run_script(&mut s, &sc.config.script, max_ticks)?
    };
    s.flush()?;

    let wf = s.workflow();
    println!("ticks: {} ({:.3} s virtual)", s.tick(), s.tick() as f64 * 1e-3);
    println!("workflow: {}{}", wf.step, if wf.halted { " (halted)" } else { "" });
    println!("script: {}/{} steps{}", run.completed, sc.config.script.len(), if run.timed_out { ", timed out" } else { "" });
    println!("faults: {}", serde_json::to_string(&s.stats.faults).expect("serializable"));
    if let Some(scan) = s.last_scan() {
        println!("last scan: tip {:.3} mm from target, within={}", scan.tip_error * 1e3, scan.within);
    }
    println!("max tracking error: {:.5}", s.stats.max_tracking_error);
    println!("logs: {}", a.out.display());

    if !s.stats.monitor.is_empty() {
        for m in &s.stats.monitor {
            eprintln!("monitor tripped at tick {}: {}", m.tick, m.message);
        }
        return Ok(EXIT_MONITOR);
    }
    if s.stats.faults != sc.config.expect.faults {
        eprintln!("faults {:?}, expected {:?}", s.stats.faults, sc.config.expect.faults);
        return Ok(EXIT_MONITOR);
    }
    let reached = sc.config.expect.final_state.is_none_or(|st| st == wf.step && !wf.halted);
    if !reached || run.timed_out {
        if s.stats.infeasible {
            eprintln!("planning failed: {}", s.stats.plan_failures.join("; "));
            return Ok(EXIT_INFEASIBLE);
        }
        if let Some(st) = sc.config.expect.final_state {
            eprintln!("expected final state {st}, ended in {}", wf.step);
        }
        return Ok(EXIT_MISMATCH);
    }
    Ok(EXIT_OK)
}

fn plan(a: PlanArgs) -> CmdResult {
    let (cfg, file) = match &a.config {
        Some(c) => (load_scenario(c, a.scene.as_deref(), a.seed)?.session, c.clone()),
        None => {
            let path = a.scene.clone().expect("clap requires --scene without --config");
            let scene: Scene = load_json(&path).map_err(|e| ConfigError {
                key: if e.key.is_empty() { "scene".into() } else { format!("scene.{}", e.key) },
                ..e
            })?;
            let fids = scene.fiducials.clone();
            let mut cfg = SessionConfig::new(scene, fids);
            if let Some(seed) = a.seed {
                cfg.seed = seed;
                cfg.setup.seed = seed;
                cfg.planner.seed = seed;
            }
            (cfg, path)
        }
    };
    cfg.validate().map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", file.display())))?;
    let cal = calibrate(&cfg)?;
    let target = a.target.map(Vec3::from).unwrap_or(cfg.scene.target);
    let axis = match a.entry.map(Vec3::from).or(cfg.scene.entry_hint) {
        Some(entry) => target - entry,
        None => Vec3::z(),
    };
    if !(axis.norm() > 1e-9) {
        return Err(Failure::new(EXIT_CONFIG, "entry point coincides with the target"));
    }
    let axis = axis.normalize();
    let standoff = a.standoff_mm.map(|mm| mm * 1e-3).unwrap_or(SessionOptions::default().standoff);
    let setup_scanner = NeedlePose::new(target - axis * standoff, axis);
    let mut ctx = PlanningContext::new(
        cfg.robot.model(),
        CollisionWorld::from_scene(&cfg.scene, &cal.transform),
        cfg.robot.shape,
    );
    let start = cfg.controller.initial;
    ctx.collision.needle_exempt_length = start[DOF - 1];
    let req = PlanRequest {
        ctx,
        setup_pose: cal.transform.inverse().apply_pose(&setup_scanner),
        start,
        weights: cfg.weights,
        setup: cfg.setup,
        planner: cfg.planner,
        limits: cfg.motion_limits,
    };
    let outcome = match compute_plan(&req, None) {
        Ok(o) => o,
        Err(e) if is_infeasible(&e) => return Err(Failure::new(EXIT_INFEASIBLE, format!("infeasible: {e}"))),
        Err(crate::planning::PlanningError::AuditFailed(m)) => {
            return Err(Failure::new(EXIT_MONITOR, format!("plan failed its audit: {m}")))
        }
        Err(e) => return Err(Failure::new(EXIT_INFEASIBLE, format!("planning failed: {e}"))),
    };
    let r = &outcome.setup;
    let summary = format!(
        "U={:.9} manipulability={:.6e} clearance={:.6} m waypoints={} duration={:.3} s audit=pass",
        r.objective,
        r.manipulability,
        r.clearance,
        outcome.path.waypoints.len(),
        outcome.trajectory.duration()
    );
    match &a.out {
        Some(p) => {
            outcome.trajectory.write_csv(BufWriter::new(File::create(p)?))?;
            println!("{summary}");
        }
        None => {
            outcome.trajectory.write_csv(io::stdout().lock())?;
            eprintln!("{summary}");
        }
    }
    Ok(EXIT_OK)
}

fn calibrate(cfg: &SessionConfig) -> Result<Registration, Failure> {
    let fid = FiducialSet {
        robot: cfg.robot_fiducials.clone(),
        scanner: cfg.scene.fiducials.clone(),
    };
    register(&fid).map_err(|e| Failure::new(EXIT_CONFIG, format!("registration: {e}")))
}

#[derive(serde::Serialize)]
struct RegisterOutput {
    transform: TransformJson,
    fre: f64,
}

fn register_cmd(a: RegisterArgs) -> CmdResult {
    let fid: FiducialSet = load_json(&a.fiducials)?;
    if fid.len() < 4 {
        eprintln!("warning: fewer than 4 fiducials, FRE is not meaningful");
    }
    let reg = register(&fid).map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", a.fiducials.display())))?;
    let out = RegisterOutput {
        transform: TransformJson::from(&reg.transform),
        fre: reg.fre,
    };
    let text = serde_json::to_string_pretty(&out).expect("serializable");
    match a.out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(EXIT_OK)
}

fn serve_cmd(a: ServeArgs) -> CmdResult {
    let sc = load_scenario(&a.config, a.scene.as_deref(), a.seed)?;
    let link = open_link(&sc.config.link, &sc.session)?;
    let io = match &a.out {
        Some(dir) => log_files(dir)?,
        None => SessionIo::default(),
    };
    let session = Session::new(sc.session.clone(), link, PlanMode::Background, io)
        .map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
    let (handle, actor) = spawn_actor(session, a.realtime);
    let rt = tokio::runtime::Runtime::new()?;
    let addr = format!("{}:{}", a.listen, a.ui_port);
    let stop = handle.stop.clone();
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr).await?;
        println!("bridge listening on ws://{}/ws", listener.local_addr()?);
        serve(listener, handle, a.ui_dir.clone(), async {
            tokio::signal::ctrl_c().await.ok();
        })
        .await
    })?;
    stop.store(true, Ordering::Relaxed);
    let s = actor
        .join()
        .map_err(|_| Failure::new(EXIT_MONITOR, "session thread panicked"))??;
    if !s.stats.monitor.is_empty() {
        return Ok(EXIT_MONITOR);
    }
    Ok(EXIT_OK)
}

fn replay(a: ReplayArgs) -> CmdResult {
    let text = std::fs::read_to_string(&a.log)?;
    let records = read_log(&text).map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", a.log.display())))?;
    let rep = replay_log(&records, a.tol)?;
    println!("compared {} telemetry snapshots", rep.compared);
    if rep.matches() {
        println!("replay matches");
        return Ok(EXIT_OK);
    }
    for d in rep.divergences.iter().take(20) {
        println!("divergence: {d}");
    }
    if rep.divergences.len() > 20 {
        println!("... {} more", rep.divergences.len() - 20);
    }
    Ok(EXIT_MISMATCH)
}

fn controller(a: ControllerArgs) -> CmdResult {
    let cfg = match &a.config {
        Some(c) => load_scenario(c, None, None)?.session.controller,
        None => Default::default(),
    };
    println!("controller listening on {}", a.listen);
    listen_controller(a.listen.as_str(), cfg, a.sessions)?;
    Ok(EXIT_OK)
}

fn plot(a: PlotArgs) -> CmdResult {
    let mut rdr = csv::Reader::from_path(&a.csv).map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let cols: Vec<usize> = if a.columns.is_empty() {
        (1..headers.len()).collect()
    } else {
        a.columns
            .iter()
            .map(|c| {
                headers
                    .iter()
                    .position(|h| h == c)
                    .ok_or_else(|| Failure::new(EXIT_CONFIG, format!("no column `{c}` in {}", a.csv.display())))
            })
            .collect::<Result<_, _>>()?
    };
    let mut xs = vec![];
    let mut series: Vec<Vec<f64>> = vec![vec![]; cols.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
        let num = |i: usize| rec.get(i).and_then(|v| v.parse::<f64>().ok()).unwrap_or(f64::NAN);
        xs.push(num(0));
        for (k, &c) in cols.iter().enumerate() {
            series[k].push(num(c));
        }
    }
    let names: Vec<&str> = cols.iter().map(|&c| headers[c].as_str()).collect();
    let svg = line_chart(&headers[0], &xs, &names, &series);
    let out = a.out.unwrap_or_else(|| a.csv.with_extension("svg"));
    std::fs::write(&out, svg)?;
    println!("wrote {}", out.display());
    Ok(EXIT_OK)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Minimal SVG line chart, one polyline per series.
pub fn line_chart(x_label: &str, xs: &[f64], names: &[&str], series: &[Vec<f64>]) -> String {
    use std::fmt::Write as _;
    let (w, h, m) = (800.0, 420.0, 50.0);
    let finite = |v: &&f64| v.is_finite();
    let range = |it: &mut dyn Iterator<Item = &f64>| {
        let (lo, hi) = it.filter(finite).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = range(&mut xs.iter());
    let (y0, y1) = range(&mut series.iter().flatten());
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, w / 2.0, h - 12.0);
    for (v, y) in [(y0, py(y0)), (y1, py(y1))] {
        let _ = writeln!(s, r#"<text x="{}" y="{y}" text-anchor="end">{v:.4}</text>"#, m - 4.0);
    }
    for (v, x) in [(x0, px(x0)), (x1, px(x1))] {
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{v:.3}</text>"#, h - m + 14.0);
    }
    for (k, (name, ys)) in names.iter().zip(series).enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = xs
            .iter()
            .zip(ys)
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#,
            w - m + 4.0,
            m + 14.0 * k as f64
        );
    }
    s.push_str("</svg>\n");
    s
}
