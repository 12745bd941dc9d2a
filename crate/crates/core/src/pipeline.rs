//! Solve -> forward equation -> diagnostics orchestration and file emission.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::calibration::CalibrationError;
use crate::diagnostics::{DiagnosticsError, DiagnosticsReport, RegimeClass};
use crate::grid::{Grid, Triple};
use crate::hjb::{self, HjbError, HjbSolution, PolicyTriple, SignalRegion};
use crate::kfe::{self, DensityTriple, KfeError};
use crate::mc::{self, McError, SimConfig};
use crate::Calibration;

/// Environment variable holding the sweep worker count.
pub const WORKERS_ENV: &str = "TWINPEAKS_WORKERS";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] CalibrationError),
    #[error(transparent)]
    Hjb(#[from] HjbError),
    #[error(transparent)]
    Kfe(#[from] KfeError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Mc(#[from] McError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad solve artifact {path}: {reason}")]
    Artifact { path: String, reason: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    pub fn is_config(&self) -> bool {
        matches!(self, PipelineError::Config(_))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

/// Locale-independent rendering with 12 significant digits (C `%.12g`).
pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.11e}", x);
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-4..12).contains(&exp) {
        trim(&format!("{:.*}", (11 - exp) as usize, x))
    } else {
        format!("{}e{}{:02}", trim(mant), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn round_json(v: &mut serde_json::Value) {
    use serde_json::Value;
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().unwrap_or(f64::NAN);
            if let Some(r) = fmt_num(x).parse::<f64>().ok().and_then(serde_json::Number::from_f64) {
                *n = r;
            }
        }
        Value::Array(a) => a.iter_mut().for_each(round_json),
        Value::Object(o) => o.values_mut().for_each(round_json),
        _ => {}
    }
}

/// Pretty JSON with every float cut to 12 significant digits.
pub fn json_text<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    let mut v = serde_json::to_value(value)?;
    round_json(&mut v);
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn config_hash(cal: &Calibration) -> String {
    sha256_hex(serde_json::to_string(cal).expect("calibration serializes").as_bytes())
}

/// Everything computed for one calibration.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub grid: Grid,
    pub hjb: HjbSolution,
    pub density: DensityTriple,
    pub report: DiagnosticsReport,
    pub max_column_sum: f64,
    pub hjb_seconds: f64,
    pub kfe_seconds: f64,
}

pub fn run_model(cal: &Calibration) -> Result<SolveOutcome, PipelineError> {
    cal.validate()?;
    let grid = Grid::from_calibration(cal);
    let t0 = Instant::now();
    let hjb = hjb::solve_hjb(cal)?;
    let hjb_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let sys = kfe::assemble_kfe(&hjb, cal, &grid)?;
    let density = kfe::solve_stationary(&sys, &grid)?;
    let kfe_seconds = t1.elapsed().as_secs_f64();
    let report = DiagnosticsReport::compute(&hjb, &density, cal, &grid)?;
    Ok(SolveOutcome { grid, hjb, density, report, max_column_sum: sys.max_column_sum, hjb_seconds, kfe_seconds })
}

#[derive(Debug, Clone, Serialize)]
pub struct EmittedFile {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: String,
    pub config_hash: String,
    pub output_dir: String,
    pub files: Vec<EmittedFile>,
    pub timings_seconds: BTreeMap<String, f64>,
    pub iterations: BTreeMap<String, usize>,
    pub converged: bool,
}

struct Writer {
    dir: PathBuf,
    files: Vec<EmittedFile>,
}

impl Writer {
    fn new(dir: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn write(&mut self, name: &str, content: &str) -> Result<(), PipelineError> {
        let path = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.tmp"));
        fs::write(&tmp, content).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        self.files.push(EmittedFile {
            name: name.into(),
            sha256: sha256_hex(content.as_bytes()),
            bytes: content.len(),
        });
        Ok(())
    }

    fn finish(self, mut manifest: RunManifest) -> Result<RunManifest, PipelineError> {
        manifest.files = self.files;
        manifest.output_dir = self.dir.display().to_string();
        let text = json_text(&manifest)?;
        let path = self.dir.join("manifest.json");
        fs::write(&path, text).map_err(io_err(&path))?;
        Ok(manifest)
    }
}

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

const SOLUTION_HEADER: [&str; 12] =
    ["k", "V_L", "V_W", "V_H", "c_L", "c_W", "c_H", "mu_L", "mu_W", "mu_H", "signal_flag", "D"];
const DISTRIBUTION_HEADER: [&str; 5] = ["k", "g_L", "g_W", "g_H", "g_total"];

pub fn solution_csv(out: &SolveOutcome, cal: &Calibration) -> String {
    let (v, p) = (&out.hjb.values, &out.hjb.policies);
    let d = hjb::surplus(v, cal, &out.grid);
    let rows = out.grid.nodes.iter().enumerate().map(|(i, k)| {
        let mut f: Vec<String> =
            [*k, v.l[i], v.w[i], v.h[i], p.c.l[i], p.c.w[i], p.c.h[i], p.mu.l[i], p.mu.w[i], p.mu.h[i]]
                .iter()
                .map(|x| fmt_num(*x))
                .collect();
        f.push(if out.hjb.region.flags[i] { "1" } else { "0" }.into());
        f.push(d[i].map(fmt_num).unwrap_or_default());
        f
    });
    csv_text(&SOLUTION_HEADER, rows)
}

pub fn distribution_csv(grid: &Grid, g: &Triple<Vec<f64>>, counts: Option<&[u64]>) -> String {
    let mut header = DISTRIBUTION_HEADER.to_vec();
    if counts.is_some() {
        header.push("sample_count");
    }
    let rows = grid.nodes.iter().enumerate().map(|(i, k)| {
        let mut f: Vec<String> =
            [*k, g.l[i], g.w[i], g.h[i], g.l[i] + g.w[i] + g.h[i]].iter().map(|x| fmt_num(*x)).collect();
        if let Some(c) = counts {
            f.push(c[i].to_string());
        }
        f
    });
    csv_text(&header, rows)
}

#[derive(Serialize)]
struct SharesJson {
    #[serde(rename = "pi_L")]
    pi_l: f64,
    #[serde(rename = "pi_W")]
    pi_w: f64,
    #[serde(rename = "pi_H")]
    pi_h: f64,
    mass_error: f64,
    max_negativity: f64,
}

#[derive(Serialize)]
struct GridInfo {
    #[serde(rename = "N")]
    n: usize,
    k_min: f64,
    k_max: f64,
    dk: f64,
}

#[derive(Serialize)]
struct Provenance<'a> {
    config_hash: String,
    grid: GridInfo,
    iterations: usize,
    converged: bool,
    errors: &'a [f64],
    kfe_max_column_sum: f64,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    #[serde(flatten)]
    report: &'a DiagnosticsReport,
    provenance: Provenance<'a>,
}

fn emit_solve(w: &mut Writer, out: &SolveOutcome, cal: &Calibration) -> Result<(), PipelineError> {
    w.write("solution.csv", &solution_csv(out, cal))?;
    w.write("distribution.csv", &distribution_csv(&out.grid, &out.density.g, None))?;
    let s = out.density.shares(&out.grid);
    let shares = SharesJson {
        pi_l: s.l,
        pi_w: s.w,
        pi_h: s.h,
        mass_error: out.density.mass_error,
        max_negativity: out.density.max_negativity,
    };
    w.write("shares.json", &json_text(&shares)?)?;
    let rep = ReportJson {
        report: &out.report,
        provenance: Provenance {
            config_hash: config_hash(cal),
            grid: GridInfo { n: cal.n, k_min: cal.k_min, k_max: cal.k_max, dk: out.grid.dk },
            iterations: out.hjb.report.iterations,
            converged: out.hjb.report.converged,
            errors: &out.hjb.report.errors,
            kfe_max_column_sum: out.max_column_sum,
        },
    };
    w.write("report.json", &json_text(&rep)?)?;
    Ok(())
}

fn manifest(command: &str, config_path: &Path, cal: &Calibration) -> RunManifest {
    RunManifest {
        command: command.into(),
        config_path: config_path.display().to_string(),
        config_hash: config_hash(cal),
        output_dir: String::new(),
        files: Vec::new(),
        timings_seconds: BTreeMap::new(),
        iterations: BTreeMap::new(),
        converged: true,
    }
}

fn solve_into(
    cal: &Calibration,
    config_path: &Path,
    out_dir: &Path,
) -> Result<(RunManifest, SolveOutcome), PipelineError> {
    let t = Instant::now();
    let out = run_model(cal)?;
    let mut w = Writer::new(out_dir)?;
    emit_solve(&mut w, &out, cal)?;
    let mut m = manifest("solve", config_path, cal);
    m.timings_seconds.insert("hjb".into(), out.hjb_seconds);
    m.timings_seconds.insert("kfe".into(), out.kfe_seconds);
    m.timings_seconds.insert("total".into(), t.elapsed().as_secs_f64());
    m.iterations.insert("hjb".into(), out.hjb.report.iterations);
    m.converged = out.hjb.report.converged;
    Ok((w.finish(m)?, out))
}

/// Load a config and run the full solve into `out_dir`.
pub fn cmd_solve(config_path: &Path, out_dir: &Path) -> Result<RunManifest, PipelineError> {
    let cal = Calibration::from_path(config_path)?;
    Ok(solve_into(&cal, config_path, out_dir)?.0)
}

pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub param_value: f64,
    pub outcome: Result<SweepPoint, String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub kstar: Option<f64>,
    pub kss_l: Option<f64>,
    pub kss_h: Option<f64>,
    pub pi_l: f64,
    pub pi_w: f64,
    pub pi_h: f64,
    pub gini: f64,
    pub mean_wealth: f64,
    pub regime_class: RegimeClass,
    pub converged: bool,
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_num).unwrap_or_default()
}

pub fn sweep_summary_csv(rows: &[SweepRow]) -> String {
    let header =
        ["param_value", "kstar", "kss_L", "kss_H", "pi_L", "pi_W", "pi_H", "gini", "mean_wealth", "regime_class"];
    let body = rows.iter().map(|r| match &r.outcome {
        Ok(p) => vec![
            fmt_num(r.param_value),
            opt(p.kstar),
            opt(p.kss_l),
            opt(p.kss_h),
            fmt_num(p.pi_l),
            fmt_num(p.pi_w),
            fmt_num(p.pi_h),
            fmt_num(p.gini),
            fmt_num(p.mean_wealth),
            p.regime_class.label().to_string(),
        ],
        Err(_) => {
            let mut v = vec![fmt_num(r.param_value)];
            v.extend(std::iter::repeat_n(String::new(), 8));
            v.push("failed".into());
            v
        }
    });
    csv_text(&header, body)
}

/// One full solve per value, each in its own sub-directory, run concurrently.
pub fn cmd_sweep(
    config_path: &Path,
    param: &str,
    values: &[f64],
    out_dir: &Path,
    workers: usize,
) -> Result<(RunManifest, Vec<SweepRow>), PipelineError> {
    let base = Calibration::from_path(config_path)?;
    // reject unknown parameter names before spawning anything
    base.clone().set_param(param, values.first().copied().unwrap_or(0.0)).or_else(|e| match e {
        CalibrationError::Invalid { field: "param", .. } => Err(e),
        _ => Ok(()),
    })?;
    let t = Instant::now();
    let mut w = Writer::new(out_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| PipelineError::Artifact { path: "thread pool".into(), reason: e.to_string() })?;
    let rows: Vec<SweepRow> = pool.install(|| {
        values
            .par_iter()
            .map(|&v| {
                let sub = out_dir.join(format!("{param}={}", fmt_num(v)));
                let outcome = (|| -> Result<SweepPoint, PipelineError> {
                    let mut cal = base.clone();
                    cal.set_param(param, v)?;
                    let staging = out_dir.join(format!(".{param}={}.partial", fmt_num(v)));
                    let _ = fs::remove_dir_all(&staging);
                    let (_, o) = solve_into(&cal, config_path, &staging)?;
                    let cfg = serde_json::to_string_pretty(&cal)? + "\n";
                    fs::write(staging.join("config.json"), cfg).map_err(io_err(&staging))?;
                    let _ = fs::remove_dir_all(&sub);
                    fs::rename(&staging, &sub).map_err(io_err(&sub))?;
                    let r = &o.report;
                    Ok(SweepPoint {
                        kstar: r.kstar,
                        kss_l: r.kss_l,
                        kss_h: r.kss_h,
                        pi_l: r.shares.pi_l,
                        pi_w: r.shares.pi_w,
                        pi_h: r.shares.pi_h,
                        gini: r.gini,
                        mean_wealth: r.mean_wealth,
                        regime_class: r.regime_class,
                        converged: o.hjb.report.converged,
                    })
                })();
                SweepRow { param_value: v, outcome: outcome.map_err(|e| e.to_string()) }
            })
            .collect()
    });
    w.write("sweep_summary.csv", &sweep_summary_csv(&rows))?;
    let mut m = manifest("sweep", config_path, &base);
    m.timings_seconds.insert("total".into(), t.elapsed().as_secs_f64());
    m.converged = rows.iter().all(|r| matches!(&r.outcome, Ok(p) if p.converged));
    Ok((w.finish(m)?, rows))
}

/// Policies, threshold and density read back from a solve directory.
#[derive(Debug, Clone)]
pub struct StoredSolve {
    pub policies: PolicyTriple,
    pub region: SignalRegion,
    pub density: DensityTriple,
}

fn read_table(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>, PipelineError> {
    let bad = |reason: String| PipelineError::Artifact { path: path.display().to_string(), reason };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let head = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    if head.len() < header.len() || head.iter().zip(header).any(|(a, b)| a != *b) {
        return Err(bad(format!("unexpected header `{}`", head.iter().collect::<Vec<_>>().join(","))));
    }
    rdr.records().collect::<Result<_, _>>().map_err(|e| bad(e.to_string()))
}

fn parse_num(path: &Path, s: &str) -> Result<f64, PipelineError> {
    s.parse::<f64>().map_err(|_| PipelineError::Artifact {
        path: path.display().to_string(),
        reason: format!("not a number: `{s}`"),
    })
}

pub fn load_solve(dir: &Path, cal: &Calibration) -> Result<StoredSolve, PipelineError> {
    let grid = Grid::from_calibration(cal);
    let sol = dir.join("solution.csv");
    let rows = read_table(&sol, &SOLUTION_HEADER)?;
    if rows.len() != grid.len() {
        return Err(PipelineError::Artifact {
            path: sol.display().to_string(),
            reason: format!("{} rows for a grid of {} nodes", rows.len(), grid.len()),
        });
    }
    let col = |j: usize| -> Result<Vec<f64>, PipelineError> { rows.iter().map(|r| parse_num(&sol, &r[j])).collect() };
    let k = col(0)?;
    if k.iter().zip(&grid.nodes).any(|(a, b)| (a - b).abs() > 1e-9 * b.abs().max(1.0)) {
        return Err(PipelineError::Artifact {
            path: sol.display().to_string(),
            reason: "grid differs from config".into(),
        });
    }
    let policies =
        PolicyTriple { c: Triple::new(col(4)?, col(5)?, col(6)?), mu: Triple::new(col(7)?, col(8)?, col(9)?) };
    let flags: Vec<bool> = rows
        .iter()
        .map(|r| match &r[10] {
            "1" => Ok(true),
            "0" => Ok(false),
            s => Err(PipelineError::Artifact { path: sol.display().to_string(), reason: format!("bad flag `{s}`") }),
        })
        .collect::<Result<_, _>>()?;
    let region = SignalRegion::from_flags(flags, &grid);

    let dpath = dir.join("distribution.csv");
    let drows = read_table(&dpath, &DISTRIBUTION_HEADER)?;
    if drows.len() != grid.len() {
        return Err(PipelineError::Artifact { path: dpath.display().to_string(), reason: "row count".into() });
    }
    let dcol =
        |j: usize| -> Result<Vec<f64>, PipelineError> { drows.iter().map(|r| parse_num(&dpath, &r[j])).collect() };
    let density = DensityTriple {
        g: Triple::new(dcol(1)?, dcol(2)?, dcol(3)?),
        mass_error: 0.0,
        max_negativity: 0.0,
        clipped_mass: 0.0,
        flux_residual: 0.0,
    };
    Ok(StoredSolve { policies, region, density })
}

#[derive(Serialize)]
struct McCompareJson<'a> {
    #[serde(flatten)]
    comparison: &'a mc::Comparison,
    sim: &'a SimConfig,
    transitions: &'a mc::Transitions,
    w_samples_above_kstar: u64,
    kstar: Option<f64>,
}

pub fn cmd_simulate(
    config_path: &Path,
    solve_dir: &Path,
    sim: &SimConfig,
    out_dir: &Path,
) -> Result<(RunManifest, mc::Comparison), PipelineError> {
    let cal = Calibration::from_path(config_path)?;
    sim.validate()?;
    let grid = Grid::from_calibration(&cal);
    let stored = load_solve(solve_dir, &cal)?;
    let t = Instant::now();
    let emp = mc::simulate(&cal, &stored.policies, &stored.region, sim)?;
    let elapsed = t.elapsed().as_secs_f64();
    let cmp = mc::compare(&emp, &stored.density, &grid);
    let mut w = Writer::new(out_dir)?;
    let masses = emp.masses();
    let g = masses.map(|_, m| m.iter().map(|v| v / grid.dk).collect::<Vec<f64>>());
    let counts: Vec<u64> = (0..grid.len()).map(|i| emp.counts.l[i] + emp.counts.w[i] + emp.counts.h[i]).collect();
    w.write("mc_distribution.csv", &distribution_csv(&grid, &g, Some(&counts)))?;
    let doc = McCompareJson {
        comparison: &cmp,
        sim,
        transitions: &emp.transitions,
        w_samples_above_kstar: emp.w_above_kstar,
        kstar: stored.region.kstar.is_finite().then_some(stored.region.kstar),
    };
    w.write("mc_compare.json", &json_text(&doc)?)?;
    let mut m = manifest("simulate", config_path, &cal);
    m.timings_seconds.insert("simulation".into(), elapsed);
    Ok((w.finish(m)?, cmp))
}
