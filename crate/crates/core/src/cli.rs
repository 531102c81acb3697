//! Command-line surface: score → prune → eval, plus comparison sweeps,
//! gradient checks and synthetic fixture generators.
//!
//! Every command writes a `<out>.manifest.json` next to its main output.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backprop::{backward_to_hidden, gradient_check_with, GradCheckReport};
use crate::criteria::CriterionKind;
use crate::error::{Error, Result};
use crate::evaluation::{distribution_fidelity, perplexity, random_plan_fidelity, rows_csv, Positions, DEFAULT_TOP_K};
use crate::model::{load_model, load_tokens, save_model, save_tokens, Model, ModelConfig, TokenFile};
use crate::pruning::{apply_plan, make_plan, rho_from_overall};
use crate::scoring::{accumulate_scores, Aggregation, ImportanceReport, TOOLKIT_VERSION};

pub const EXIT_GRADCHECK: i32 = 5;
pub const THREADS_ENV: &str = "HFPRUNE_THREADS";

/// Scores at or below this are treated as "no signal".
const DEGENERATE_SCORE: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(name = "hfprune", version, about = "Entropy-guided Taylor pruning of transformer MLP neurons")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Accumulate per-neuron importance scores over a calibration set.
    Score(ScoreArgs),
    /// Remove the lowest-scoring neurons and write the smaller model.
    Prune(PruneArgs),
    /// Compare next-token distributions of an original and a pruned model.
    Eval(EvalArgs),
    /// Run score → prune → eval for every (criterion, ratio) pair.
    Compare(CompareArgs),
    /// Check hidden-activation gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a randomly initialized model.
    GenModel(GenModelArgs),
    /// Write uniformly random token sequences.
    GenTokens(GenTokensArgs),
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long, default_value = "ie")]
    pub criterion: CriterionKind,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "abs-pos")]
    pub agg: Aggregation,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Fraction of hidden neurons removed from every layer.
    #[arg(long, required_unless_present = "overall", conflicts_with = "overall")]
    pub rho: Option<f64>,
    /// Fraction of all parameters to remove, taken from the MLPs.
    #[arg(long)]
    pub overall: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the plan [default: <out>.plan.json]
    #[arg(long)]
    pub plan_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub original: PathBuf,
    #[arg(long)]
    pub pruned: PathBuf,
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Average over every prompt position instead of the final one.
    #[arg(long)]
    pub all_positions: bool,
    /// Also write per-prompt rows as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    /// Held-out prompts [default: the calibration set]
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "ie,ce,sd")]
    pub criteria: Vec<CriterionKind>,
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.3")]
    pub rhos: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub k: usize,
    /// Add a random-plan row per ratio, drawn from --seed.
    #[arg(long)]
    pub random_baseline: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "ie")]
    pub criterion: CriterionKind,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    /// Token file; the first sequence is used [default: random tokens]
    #[arg(long)]
    pub tokens: Option<PathBuf>,
    /// Optional JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Test fixture: perturb the computed gradient of this layer.
    #[arg(long, hide = true)]
    pub corrupt_layer: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub d_hidden: usize,
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
    #[arg(long, default_value_t = 64)]
    pub max_seq: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenTokensArgs {
    #[arg(long)]
    pub vocab: usize,
    #[arg(long)]
    pub seq_len: usize,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Input name → SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output name → SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub criterion: Option<CriterionKind>,
    pub rho: Option<f64>,
    pub overall: Option<f64>,
    pub seed: u64,
    pub toolkit_version: String,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    fn new(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            criterion: None,
            rho: None,
            overall: None,
            seed,
            toolkit_version: TOOLKIT_VERSION.into(),
            wall_clock_seconds: 0.0,
        }
    }

    fn write(mut self, out: &Path, started: Instant) -> Result<()> {
        self.wall_clock_seconds = started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes") + "\n";
        write_text(&manifest_path(out), &text)
    }
}

pub fn manifest_path(out: &Path) -> PathBuf {
    with_suffix(out, ".manifest.json")
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(crate::digest::sha256_hex(&bytes))
}

fn warn_if_degenerate(report: &ImportanceReport) {
    if report.max_score() <= DEGENERATE_SCORE {
        eprintln!(
            "warning: all {} scores are <= {DEGENERATE_SCORE:e}; with the unpruned model as its \
             own teacher the criterion and its gradient are zero, so the ranking carries no signal",
            report.criterion
        );
    }
}

pub fn cmd_score(args: &ScoreArgs) -> Result<()> {
    let started = Instant::now();
    let model = load_model(&args.model)?;
    let calib = load_tokens(&args.calib)?;
    if args.criterion == CriterionKind::SelfDistillation {
        eprintln!(
            "warning: sd scoring uses the model itself as teacher; KL(teacher || student) has a \
             zero gradient there, so scores will vanish"
        );
    }
    let report = accumulate_scores(&model, &calib, args.criterion, args.agg)?;
    warn_if_degenerate(&report);
    let json = report.to_json();
    write_text(&args.out, &json)?;

    let mut m = RunManifest::new("score", args.seed);
    m.inputs.insert("model".into(), report.model_digest.clone());
    m.inputs.insert("calib".into(), report.calib_digest.clone());
    m.outputs.insert("report".into(), crate::digest::sha256_hex(json.as_bytes()));
    m.criterion = Some(args.criterion);
    m.write(&args.out, started)?;
    println!(
        "scored {} neurons over {} tokens ({}); max score {:.6e}",
        report.layers.iter().map(Vec::len).sum::<usize>(),
        report.token_count,
        args.criterion,
        report.max_score()
    );
    Ok(())
}

pub fn cmd_prune(args: &PruneArgs) -> Result<()> {
    let started = Instant::now();
    let model = load_model(&args.model)?;
    let report = ImportanceReport::from_json(&read_text(&args.report)?)?;
    report.check_model(&model)?;
    let model_digest = model.digest();
    if report.model_digest != model_digest {
        eprintln!("warning: report was computed on a different model (digest mismatch)");
    }
    let rho = match (args.rho, args.overall) {
        (Some(r), None) => r,
        (None, Some(o)) => rho_from_overall(&model, o)?,
        _ => unreachable!("clap enforces exactly one of --rho/--overall"),
    };
    let plan = make_plan(&report, rho)?;
    let pruned = apply_plan(&model, &plan)?;
    save_model(&pruned, &args.out)?;
    let plan_path = args.plan_out.clone().unwrap_or_else(|| with_suffix(&args.out, ".plan.json"));
    let plan_json = plan.to_json();
    write_text(&plan_path, &plan_json)?;

    let mut m = RunManifest::new("prune", args.seed);
    m.inputs.insert("model".into(), model_digest);
    m.inputs.insert("report".into(), plan.report_digest.clone());
    m.outputs.insert("model".into(), pruned.digest());
    m.outputs.insert("plan".into(), crate::digest::sha256_hex(plan_json.as_bytes()));
    m.criterion = Some(report.criterion);
    m.rho = Some(rho);
    m.overall = args.overall;
    m.write(&args.out, started)?;
    let before = model.param_counts();
    let after = pruned.param_counts();
    println!(
        "rho {rho:.6}: removed {} neurons; parameters {} -> {}",
        plan.removed_total(),
        before.total,
        after.total
    );
    Ok(())
}

/// Warns unless the pruned model's manifest names `original` as its source.
fn check_digest_chain(original_digest: &str, pruned_path: &Path) {
    let path = manifest_path(pruned_path);
    let source = std::fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str::<RunManifest>(&t).ok())
        .and_then(|m| m.inputs.get("model").cloned());
    match source {
        Some(d) if d == original_digest => {}
        Some(_) => eprintln!("warning: pruned model was not derived from --original (digest mismatch)"),
        None => eprintln!("warning: no readable manifest at {}; provenance not verified", path.display()),
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let started = Instant::now();
    let original = load_model(&args.original)?;
    let pruned = load_model(&args.pruned)?;
    let prompts = load_tokens(&args.prompts)?;
    let original_digest = original.digest();
    check_digest_chain(&original_digest, &args.pruned);
    let positions = if args.all_positions { Positions::All } else { Positions::Final };
    let (report, rows) = distribution_fidelity(&original, &pruned, &prompts, args.k, positions)?;
    let json = report.to_json();
    write_text(&args.out, &json)?;
    if let Some(csv) = &args.csv {
        write_text(csv, &rows_csv(&rows))?;
    }

    let mut m = RunManifest::new("eval", args.seed);
    m.inputs.insert("original".into(), original_digest);
    m.inputs.insert("pruned".into(), report.pruned_digest.clone());
    m.inputs.insert("prompts".into(), report.prompts_digest.clone());
    m.outputs.insert("fidelity".into(), crate::digest::sha256_hex(json.as_bytes()));
    m.write(&args.out, started)?;
    println!(
        "js {:.6}  top-{} jaccard {:.6}  ppl {:.4} -> {:.4}",
        report.mean_js, report.k, report.mean_topk_jaccard, report.ppl_original, report.ppl_pruned
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareCell {
    /// Criterion tag, or "random" for the baseline rows.
    pub criterion: String,
    pub rho: f64,
    pub removed: usize,
    pub mean_js: f64,
    pub mean_topk_jaccard: f64,
    pub ppl: f64,
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub model_digest: String,
    pub calib_digest: String,
    pub prompts_digest: String,
    pub k: usize,
    pub ppl_original: f64,
    pub seed: u64,
    pub toolkit_version: String,
    pub cells: Vec<CompareCell>,
}

pub fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let started = Instant::now();
    let model = load_model(&args.model)?;
    let calib = load_tokens(&args.calib)?;
    let prompts = match &args.prompts {
        Some(p) => load_tokens(p)?,
        None => calib.clone(),
    };
    for &rho in &args.rhos {
        crate::pruning::check_rho(rho)?;
    }
    let ppl_original = perplexity(&model, &prompts)?;
    let mut cells = Vec::new();
    for &kind in &args.criteria {
        let report = accumulate_scores(&model, &calib, kind, Aggregation::default())?;
        let flag = (report.max_score() <= DEGENERATE_SCORE).then(|| "degenerate: zero scores".to_string());
        for &rho in &args.rhos {
            let plan = make_plan(&report, rho)?;
            let pruned = apply_plan(&model, &plan)?;
            let (fid, _) = distribution_fidelity(&model, &pruned, &prompts, args.k, Positions::Final)?;
            cells.push(CompareCell {
                criterion: kind.tag().into(),
                rho,
                removed: plan.removed_total(),
                mean_js: fid.mean_js,
                mean_topk_jaccard: fid.mean_topk_jaccard,
                ppl: fid.ppl_pruned,
                flag: flag.clone(),
            });
        }
    }
    if args.random_baseline {
        for &rho in &args.rhos {
            let (plan, fid) = random_plan_fidelity(&model, &prompts, rho, args.seed, args.k)?;
            cells.push(CompareCell {
                criterion: "random".into(),
                rho,
                removed: plan.removed_total(),
                mean_js: fid.mean_js,
                mean_topk_jaccard: fid.mean_topk_jaccard,
                ppl: fid.ppl_pruned,
                flag: None,
            });
        }
    }
    let table = CompareTable {
        model_digest: model.digest(),
        calib_digest: calib.digest(),
        prompts_digest: prompts.digest(),
        k: args.k,
        ppl_original,
        seed: args.seed,
        toolkit_version: TOOLKIT_VERSION.into(),
        cells,
    };
    let json = serde_json::to_string_pretty(&table).expect("table serializes") + "\n";
    write_text(&args.out, &json)?;

    let mut m = RunManifest::new("compare", args.seed);
    m.inputs.insert("model".into(), table.model_digest.clone());
    m.inputs.insert("calib".into(), table.calib_digest.clone());
    m.inputs.insert("prompts".into(), table.prompts_digest.clone());
    m.outputs.insert("table".into(), crate::digest::sha256_hex(json.as_bytes()));
    m.write(&args.out, started)?;
    println!("{:<8} {:>6} {:>10} {:>10} {:>10}", "crit", "rho", "js", "jaccard", "ppl");
    for c in &table.cells {
        println!(
            "{:<8} {:>6.3} {:>10.6} {:>10.6} {:>10.4} {}",
            c.criterion,
            c.rho,
            c.mean_js,
            c.mean_topk_jaccard,
            c.ppl,
            c.flag.as_deref().unwrap_or("")
        );
    }
    Ok(())
}

/// Returns `Ok(true)` when the check passed.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let started = Instant::now();
    if args.samples == 0 {
        return Err(Error::InvalidArgument("--samples must be at least 1".into()));
    }
    let model = load_model(&args.model)?;
    let tokens = match &args.tokens {
        Some(p) => load_tokens(p)?
            .sequences()
            .first()
            .cloned()
            .ok_or_else(|| Error::InvalidArgument("token file is empty".into()))?,
        None => {
            let len = model.config.max_seq.min(8);
            TokenFile::random(model.config.vocab_size, len, 1, args.seed).sequences()[0].clone()
        }
    };
    if let Some(l) = args.corrupt_layer {
        if l >= model.config.n_layers {
            return Err(Error::InvalidArgument(format!("--corrupt-layer {l} out of range")));
        }
    }
    let corrupt = args.corrupt_layer;
    let report: GradCheckReport = gradient_check_with(
        &model,
        &tokens,
        args.criterion,
        args.samples,
        args.eps,
        args.seed,
        |m, cache, g| {
            let mut grads = backward_to_hidden(m, cache, g)?;
            if let Some(l) = corrupt {
                grads.layers[l] = grads.layers[l].scale(1.5);
            }
            Ok(grads)
        },
    )?;
    let passed = report.passed(args.tol);
    if let Some(out) = &args.out {
        let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
        write_text(out, &json)?;
        let mut m = RunManifest::new("gradcheck", args.seed);
        m.inputs.insert("model".into(), model.digest());
        m.criterion = Some(args.criterion);
        m.write(out, started)?;
    }
    let w = &report.worst;
    println!(
        "{} samples ({}), max relative error {:.3e} at layer {} neuron {} position {} \
         (analytic {:.6e}, numeric {:.6e})",
        report.samples, report.criterion, report.max_rel_error, w.layer, w.neuron, w.position, w.analytic, w.numeric
    );
    if !passed {
        eprintln!(
            "error: gradient check failed in layer {}: relative error {:.3e} exceeds {:.1e}",
            w.layer, report.max_rel_error, args.tol
        );
    }
    Ok(passed)
}

pub fn cmd_gen_model(args: &GenModelArgs) -> Result<()> {
    let config = ModelConfig::uniform(args.d_model, args.layers, args.heads, args.d_hidden, args.vocab, args.max_seq);
    let model = Model::random(config, args.seed)?;
    save_model(&model, &args.out)?;
    let mut m = RunManifest::new("gen-model", args.seed);
    m.outputs.insert("model".into(), file_digest(&args.out)?);
    m.write(&args.out, Instant::now())
}

pub fn cmd_gen_tokens(args: &GenTokensArgs) -> Result<()> {
    if args.vocab == 0 || args.vocab > u32::MAX as usize {
        return Err(Error::InvalidArgument("--vocab must be in 1..=2^32-1".into()));
    }
    let tokens = TokenFile::random(args.vocab, args.seq_len, args.count, args.seed);
    save_tokens(&tokens, &args.out)?;
    let mut m = RunManifest::new("gen-tokens", args.seed);
    m.outputs.insert("tokens".into(), tokens.digest());
    m.write(&args.out, Instant::now())
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<i32> {
    configure_threads()?;
    match &cli.command {
        Command::Score(a) => cmd_score(a)?,
        Command::Prune(a) => cmd_prune(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Compare(a) => cmd_compare(a)?,
        Command::Gradcheck(a) => return Ok(if cmd_gradcheck(a)? { 0 } else { EXIT_GRADCHECK }),
        Command::GenModel(a) => cmd_gen_model(a)?,
        Command::GenTokens(a) => cmd_gen_tokens(a)?,
    }
    Ok(0)
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
