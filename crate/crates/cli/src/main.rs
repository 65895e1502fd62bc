//! `commonfeat` command-line tool.
//!
//! Exit codes: 0 success, 1 verification failure, 2 input error, 3 capacity,
//! 4 numerical failure. Errors are printed to stderr as
//! `{"error": {"kind": ..., "message": ...}}`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use commonfeat::bits::{bits_features_k, bits_joint, BitsInstance};
use commonfeat::complexity::{self, MonteCarloConfig};
use commonfeat::dataset::DistributionExport;
use commonfeat::features::FeatureSetExport;
use commonfeat::mace::{self, MaceConfig};
use commonfeat::mhscore::{self, HTrainConfig};
use commonfeat::preprocess::{self, PatchGrid, PatchOptions};
use commonfeat::theory::{self, DEFAULT_DELTAS};
use commonfeat::{
    build_b, check_lemma1, eigendecompose, estimate_distributions, features_from_spectrum, json as cfjson, linalg,
    CsvOptions, DistributionSet, Error, EstimateOptions, FeatureSet,
};

#[derive(Parser, Debug)]
#[command(name = "commonfeat", version, about = "Informative features of discrete multivariate data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone, Serialize)]
struct InputArgs {
    /// CSV dataset, distribution JSON (from `estimate`), or bits instance JSON {r, index_sets}
    input: PathBuf,
    #[arg(long, default_value_t = ',')]
    delimiter: char,
    /// The CSV has no header row; variables are named X1..Xd
    #[arg(long)]
    no_header: bool,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Load a CSV and summarize its alphabets
    Ingest {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Estimate marginal and pairwise distributions
    Estimate {
        #[command(flatten)]
        input: InputArgs,
        /// Add-alpha pseudo-count on every cell of the product space
        #[arg(long, default_value_t = 0.0)]
        smoothing: f64,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Fit the top-k features
    Fit {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, value_enum, default_value_t = Method::Eig)]
        method: Method,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// MACE iteration limit
        #[arg(long, default_value_t = 500)]
        max_iters: usize,
        /// MACE stopping tolerance
        #[arg(long, default_value_t = 1e-9)]
        rel_tol: f64,
        /// MH-score gradient steps
        #[arg(long, default_value_t = 5000)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        learning_rate: f64,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Run a verification suite; exits 1 if it fails
    Verify {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Feature JSON to check instead of the dense eigen-features (mh-identity)
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Spectrum and analytic features of a uniform-bits instance
    Bits {
        #[arg(long)]
        r: usize,
        /// Index sets, e.g. "1,2;2,3;1,3"
        #[arg(long)]
        sets: String,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Sample-complexity exponent and Monte Carlo exceedance curve
    Complexity {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, value_delimiter = ',', default_value = "25,50,100,200,400")]
        n_grid: Vec<usize>,
        /// Monte Carlo trials per grid point; 0 skips the simulation
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Turn grayscale images into a patch dataset
    Preprocess {
        /// PGM (P5/P2) files or raw MCRW containers
        #[arg(long, num_args = 1.., required = true)]
        images: Vec<PathBuf>,
        #[arg(long, default_value_t = preprocess::DEFAULT_THRESHOLD)]
        threshold: u16,
        #[arg(long, default_value_t = preprocess::DEFAULT_RADIUS)]
        radius: usize,
        #[arg(long, default_value_t = 6)]
        patch: usize,
        #[arg(long, default_value_t = 3)]
        stride: usize,
        /// Output CSV; the alphabet sidecar goes next to it
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Method {
    Eig,
    Mace,
    Mh,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum Suite {
    Lemma1,
    Theorem1,
    Theorem2,
    MhIdentity,
    Bits,
}

#[derive(Deserialize)]
struct BitsSpec {
    r: usize,
    index_sets: Vec<Vec<usize>>,
}

enum Failure {
    Verification,
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type CmdResult<T> = std::result::Result<T, Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Capacity(_) => 3,
        Error::Divergence(_) | Error::Degeneracy(_) | Error::DegenerateInit(_) => 4,
        _ => 2,
    }
}

fn print_error(kind: &str, message: &str) {
    let body = json!({ "error": { "kind": kind, "message": message } });
    eprint!("{}", dump(&body));
}

fn format_error(message: impl Into<String>) -> Error {
    Error::Format {
        row: None,
        message: message.into(),
    }
}

fn read_file(path: &Path) -> commonfeat::Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_file(path: &Path, contents: &[u8]) -> commonfeat::Result<()> {
    std::fs::write(path, contents).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// `dir/name.json` -> `dir/name.<tag>.<ext>`
fn sidecar(out: &Path, tag: &str, ext: &str) -> PathBuf {
    out.with_extension(format!("{tag}.{ext}"))
}

struct Run {
    started: Instant,
    inputs: BTreeMap<String, String>,
    seed: Option<u64>,
}

impl Run {
    fn new() -> Self {
        Self {
            started: Instant::now(),
            inputs: BTreeMap::new(),
            seed: None,
        }
    }

    fn hash(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs
            .insert(path.display().to_string(), hex::encode(Sha256::digest(bytes)));
    }

    /// Write `value` to `out` (with its manifest) or to stdout.
    fn emit(&self, cmd: &Command, out: Option<&Path>, value: &impl Serialize) -> CmdResult<()> {
        let text = dump(value);
        match out {
            Some(path) => {
                write_file(path, text.as_bytes())?;
                self.manifest(cmd, path)?;
            }
            None => print!("{text}"),
        }
        Ok(())
    }

    fn manifest(&self, cmd: &Command, out: &Path) -> CmdResult<()> {
        let config = serde_json::to_value(cmd).unwrap_or(Value::Null);
        let name = config
            .as_object()
            .and_then(|o| o.keys().next().cloned())
            .unwrap_or_default();
        let manifest = json!({
            "command": name,
            "config": config,
            "inputs": self.inputs,
            "seed": self.seed,
            "version": env!("CARGO_PKG_VERSION"),
            "wall_time_seconds": self.started.elapsed().as_secs_f64(),
        });
        write_file(&sidecar(out, "manifest", "json"), dump(&manifest).as_bytes())?;
        Ok(())
    }
}

struct Loaded {
    dist: DistributionSet,
    bits: Option<BitsInstance>,
    n: Option<usize>,
}

fn csv_options(a: &InputArgs) -> commonfeat::Result<CsvOptions> {
    if !a.delimiter.is_ascii() {
        return Err(Error::Validation(format!("delimiter {:?} is not a single byte", a.delimiter)));
    }
    Ok(CsvOptions {
        delimiter: a.delimiter as u8,
        has_header: !a.no_header,
    })
}

fn load_input(run: &mut Run, a: &InputArgs, with_full_joint: bool, smoothing: f64) -> commonfeat::Result<Loaded> {
    let bytes = read_file(&a.input)?;
    run.hash(&a.input, &bytes);
    let is_json = a.input.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        let value: Value =
            serde_json::from_slice(&bytes).map_err(|e| format_error(format!("{}: {e}", a.input.display())))?;
        if value.get("index_sets").is_some() {
            let spec: BitsSpec = serde_json::from_value(value).map_err(|e| format_error(e.to_string()))?;
            let inst = BitsInstance::new(spec.r, spec.index_sets)?;
            return Ok(Loaded {
                dist: bits_joint(&inst)?,
                bits: Some(inst),
                n: None,
            });
        }
        let export: DistributionExport = serde_json::from_value(value).map_err(|e| format_error(e.to_string()))?;
        let dist = DistributionSet::from_export(&export)?;
        if with_full_joint {
            dist.require_full_joint()?;
        }
        return Ok(Loaded {
            n: dist.n_samples(),
            dist,
            bits: None,
        });
    }
    let ds = commonfeat::read_csv(bytes.as_slice(), &csv_options(a)?)?;
    let opts = EstimateOptions {
        with_full_joint,
        smoothing_alpha: smoothing,
        ..Default::default()
    };
    Ok(Loaded {
        dist: estimate_distributions(&ds, &opts)?,
        bits: None,
        n: Some(ds.n()),
    })
}

fn cmd_ingest(run: &mut Run, cmd: &Command, input: &InputArgs, out: Option<&Path>) -> CmdResult<()> {
    let bytes = read_file(&input.input)?;
    run.hash(&input.input, &bytes);
    let ds = commonfeat::read_csv(bytes.as_slice(), &csv_options(input)?)?;
    let vars: Vec<Value> = ds
        .names()
        .iter()
        .zip(ds.alphabets())
        .map(|(n, a)| json!({ "name": n, "size": a.size(), "symbols": a.symbols() }))
        .collect();
    run.emit(cmd, out, &json!({ "n": ds.n(), "d": ds.d(), "variables": vars }))
}

fn cmd_estimate(run: &mut Run, cmd: &Command, input: &InputArgs, smoothing: f64, out: Option<&Path>) -> CmdResult<()> {
    let loaded = load_input(run, input, false, smoothing)?;
    run.emit(cmd, out, &loaded.dist.to_export())
}

#[allow(clippy::too_many_arguments)]
fn cmd_fit(
    run: &mut Run,
    cmd: &Command,
    input: &InputArgs,
    method: Method,
    k: usize,
    seed: u64,
    mace_cfg: MaceConfig,
    mh_cfg: HTrainConfig,
    out: Option<&Path>,
) -> CmdResult<()> {
    run.seed = Some(seed);
    let dist = load_input(run, input, false, 0.0)?.dist;
    let (fs, mut trace) = match method {
        Method::Eig => {
            let spec = eigendecompose(&build_b(&dist)?)?;
            let fs = features_from_spectrum(&spec, &dist, k)?;
            (fs, json!({ "method": "eig", "k": k }))
        }
        Method::Mace => {
            let (fs, traces) = mace::mace_fit_k(&dist, &mace_cfg)?;
            (fs, json!({ "method": "mace", "config": mace_cfg, "columns": traces }))
        }
        Method::Mh => {
            let fit = mhscore::mh_train(&dist, &mh_cfg)?;
            let fs = mhscore::whiten(&fit.tables, &dist)?;
            if let Some(path) = out {
                let mut csv = String::from("step,mh_score\n");
                for (s, v) in fit.curve.iter().enumerate() {
                    csv.push_str(&format!("{s},{v:.16e}\n"));
                }
                write_file(&sidecar(path, "curve", "csv"), csv.as_bytes())?;
            }
            let trace = json!({
                "method": "mh",
                "config": mh_cfg,
                "final_score": fit.curve.last(),
                "maximum": mhscore::mh_maximum(&dist, k)?,
                "final_learning_rate": fit.final_learning_rate,
                "steps": fit.curve.len() - 1,
            });
            (fs, trace)
        }
    };
    trace["eigenvalues_hint"] = json!(fs.eigenvalues_hint());
    trace["joint_correlation"] = json!(mace::joint_correlation(&fs, &dist)?);
    if let Some(path) = out {
        write_file(&sidecar(path, "trace", "json"), dump(&trace).as_bytes())?;
    }
    run.emit(cmd, out, &fs.to_export())
}

fn bits_check(inst: &BitsInstance, dist: &DistributionSet) -> commonfeat::Result<(bool, Value)> {
    let spec = eigendecompose(&build_b(dist)?)?;
    let analytic = commonfeat::bits::bits_spectrum(inst);
    let eig_err = spec
        .eigenvalues()
        .iter()
        .zip(&analytic)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    // compare eigenspaces cluster by cluster (clusters are exact integer weights)
    let modes = inst.modes();
    let informative: Vec<usize> = (1..modes.len()).filter(|&l| modes[l].weight > 0).collect();
    let features = bits_features_k(inst, &informative)?;
    let psi = features.to_psi(dist);
    let mut worst = 0.0f64;
    let mut start = 0;
    while start < informative.len() {
        let w = modes[informative[start]].weight;
        let end = (start..informative.len())
            .find(|&c| modes[informative[c]].weight != w)
            .unwrap_or(informative.len());
        let numeric = spec.eigenvectors().columns(1 + start, end - start).into_owned();
        let exact = psi.columns(start, end - start).into_owned();
        worst = worst.max(linalg::projector_distance(&numeric, &exact));
        start = end;
    }
    let passed = eig_err <= 1e-9 && worst <= 1e-9;
    Ok((
        passed,
        json!({
            "eigenvalues": spec.eigenvalues().as_slice(),
            "analytic_spectrum": analytic,
            "max_eigenvalue_error": eig_err,
            "max_projector_distance": worst,
        }),
    ))
}

fn cmd_verify(
    run: &mut Run,
    cmd: &Command,
    input: &InputArgs,
    suite: Suite,
    k: usize,
    features: Option<&Path>,
    out: Option<&Path>,
) -> CmdResult<()> {
    let needs_joint = matches!(suite, Suite::Theorem1 | Suite::Theorem2);
    let loaded = load_input(run, input, needs_joint, 0.0)?;
    let dist = &loaded.dist;
    let (passed, details) = match suite {
        Suite::Lemma1 => {
            let b = build_b(dist)?;
            let spec = eigendecompose(&b)?;
            let rep = check_lemma1(&b, &spec, dist);
            (rep.passed(), serde_json::to_value(&rep).unwrap_or(Value::Null))
        }
        Suite::Theorem1 | Suite::Theorem2 => {
            let k = if suite == Suite::Theorem1 { 1 } else { k };
            let rep = theory::verify_theorem(dist, k, &DEFAULT_DELTAS)?;
            (rep.passed, serde_json::to_value(&rep).unwrap_or(Value::Null))
        }
        Suite::MhIdentity => {
            let fs = match features {
                Some(path) => {
                    let bytes = read_file(path)?;
                    run.hash(path, &bytes);
                    let export: FeatureSetExport = serde_json::from_slice(&bytes)
                        .map_err(|e| format_error(format!("{}: {e}", path.display())))?;
                    FeatureSet::from_export(&export)?.aligned_to(dist)?
                }
                None => features_from_spectrum(&eigendecompose(&build_b(dist)?)?, dist, k)?,
            };
            let id = mhscore::mh_identity(&fs, dist)?;
            let check = fs.check(dist);
            let passed = id.residual <= 1e-9 * id.lhs.abs().max(1.0) && check.passed();
            (passed, json!({ "identity": id, "feature_check": check }))
        }
        Suite::Bits => {
            let inst = loaded
                .bits
                .as_ref()
                .ok_or_else(|| Error::Domain("the bits suite needs a bits instance JSON {r, index_sets}".into()))?;
            bits_check(inst, dist)?
        }
    };
    let report = json!({ "suite": suite, "passed": passed, "details": details });
    run.emit(cmd, out, &report)?;
    if passed {
        Ok(())
    } else {
        Err(Failure::Verification)
    }
}

fn cmd_bits(run: &mut Run, cmd: &Command, r: usize, sets: &str, k: usize, out: Option<&Path>) -> CmdResult<()> {
    let inst = BitsInstance::parse(r, sets)?;
    let dist = bits_joint(&inst)?;
    let spec = eigendecompose(&build_b(&dist)?)?;
    let modes = inst.modes();
    let ls: Vec<usize> = (1..=k).collect();
    let features = bits_features_k(&inst, &ls)?;
    let mode_list: Vec<Value> = modes
        .iter()
        .enumerate()
        .map(|(l, m)| json!({ "index": l, "subset": m.subset, "weight": m.weight }))
        .collect();
    let body = json!({
        "r": inst.r,
        "index_sets": inst.index_sets,
        "spectrum": spec.eigenvalues().as_slice(),
        "analytic_spectrum": commonfeat::bits::bits_spectrum(&inst),
        "modes": mode_list,
        "features": features.to_export(),
    });
    run.emit(cmd, out, &body)
}

fn cmd_complexity(run: &mut Run, cmd: &Command, input: &InputArgs, mc: MonteCarloConfig, out: Option<&Path>) -> CmdResult<()> {
    run.seed = Some(mc.seed);
    let loaded = load_input(run, input, true, 0.0)?;
    let exponent = complexity::error_exponent(&loaded.dist, mc.k)?;
    let monte_carlo = if mc.trials > 0 {
        Some(complexity::monte_carlo_check(&loaded.dist, &mc)?)
    } else {
        None
    };
    run.emit(
        cmd,
        out,
        &json!({ "n_samples": loaded.n, "exponent": exponent, "monte_carlo": monte_carlo }),
    )
}

fn cmd_preprocess(run: &mut Run, cmd: &Command, images: &[PathBuf], opts: PatchOptions, out: &Path) -> CmdResult<()> {
    let mut all = Vec::new();
    for path in images {
        let bytes = read_file(path)?;
        run.hash(path, &bytes);
        let imgs = if bytes.starts_with(preprocess::RAW_MAGIC) {
            preprocess::parse_raw(&bytes)?
        } else {
            vec![preprocess::parse_pgm(&bytes)?]
        };
        all.extend(imgs);
    }
    let pd = preprocess::build_patch_dataset(&all, &opts)?;
    let mut csv = Vec::new();
    commonfeat::write_csv(&pd.dataset, &mut csv, b',')?;
    write_file(out, &csv)?;
    let variables: Vec<Value> = pd
        .dataset
        .names()
        .iter()
        .zip(&pd.representatives)
        .map(|(name, reps)| {
            let map: serde_json::Map<String, Value> = reps
                .iter()
                .enumerate()
                .map(|(id, r)| (id.to_string(), Value::String(r.to_string())))
                .collect();
            json!({ "name": name, "representatives": map })
        })
        .collect();
    let sidecar_body = json!({
        "grid": pd.grid,
        "threshold": opts.threshold,
        "radius": opts.radius,
        "n": pd.dataset.n(),
        "variables": variables,
    });
    write_file(&sidecar(out, "alphabet", "json"), dump(&sidecar_body).as_bytes())?;
    run.manifest(cmd, out)
}

fn dispatch(cmd: &Command) -> CmdResult<()> {
    let mut run = Run::new();
    match cmd {
        Command::Ingest { input, out } => cmd_ingest(&mut run, cmd, input, out.as_deref()),
        Command::Estimate { input, smoothing, out } => cmd_estimate(&mut run, cmd, input, *smoothing, out.as_deref()),
        Command::Fit {
            input,
            method,
            k,
            seed,
            max_iters,
            rel_tol,
            steps,
            learning_rate,
            out,
        } => {
            let mace_cfg = MaceConfig {
                k: *k,
                seed: *seed,
                max_iters: *max_iters,
                rel_tol: *rel_tol,
                ..Default::default()
            };
            let mh_cfg = HTrainConfig {
                k: *k,
                seed: *seed,
                steps: *steps,
                learning_rate: *learning_rate,
                ..Default::default()
            };
            cmd_fit(&mut run, cmd, input, *method, *k, *seed, mace_cfg, mh_cfg, out.as_deref())
        }
        Command::Verify {
            input,
            suite,
            k,
            features,
            out,
        } => cmd_verify(&mut run, cmd, input, *suite, *k, features.as_deref(), out.as_deref()),
        Command::Bits { r, sets, k, out } => cmd_bits(&mut run, cmd, *r, sets, *k, out.as_deref()),
        Command::Complexity {
            input,
            k,
            n_grid,
            trials,
            eps,
            seed,
            out,
        } => {
            let mc = MonteCarloConfig {
                k: *k,
                n_grid: n_grid.clone(),
                trials: *trials,
                eps: *eps,
                seed: *seed,
            };
            cmd_complexity(&mut run, cmd, input, mc, out.as_deref())
        }
        Command::Preprocess {
            images,
            threshold,
            radius,
            patch,
            stride,
            out,
        } => {
            let first = images.first().expect("clap requires one image");
            // the grid is fixed by the first image's size
            let bytes = read_file(first)?;
            let img = if bytes.starts_with(preprocess::RAW_MAGIC) {
                preprocess::parse_raw(&bytes)?.into_iter().next()
            } else {
                Some(preprocess::parse_pgm(&bytes)?)
            }
            .ok_or_else(|| Error::EmptyInput("no images in the first input".into()))?;
            let opts = PatchOptions {
                grid: PatchGrid::new(img.height, img.width, *patch, *stride)?,
                threshold: *threshold,
                radius: *radius,
            };
            cmd_preprocess(&mut run, cmd, images, opts, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            print_error("usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification) => ExitCode::from(1),
        Err(Failure::Error(e)) => {
            print_error(e.kind(), &e.to_string());
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dump(value: &impl Serialize) -> String {
    cfjson::to_string(value).expect("report values serialize")
}
