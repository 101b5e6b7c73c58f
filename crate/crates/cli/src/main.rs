//! `dpt`: data generation, training, pivoting, restoration, evaluation and
//! the scripted experiments, driven by a TOML run config plus flag overrides.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use dpt_core::degrade::degrade;
use dpt_core::facegen::{make_dataset, Dataset, Split};
use dpt_core::harness::{
    file_hash, with_workers, write_sidecar, ExperimentKind, Pipeline, Provenance, RunConfig,
};
use dpt_core::metrics::{id_similarity, psnr, ssim, summarize, train_embedder, IdentityEmbedder};
use dpt_core::nets::{load_system, save_system, RestorationSystem, NULL_TOKEN};
use dpt_core::pivot::{out_of_context_pivot, stage_a_textual_pivot, stage_b_model_pivot, train_base, ImageSet, PriorSet};
use dpt_core::rng::stream;
use dpt_core::sampler::{restore_passes, RestoreConfig};
use dpt_core::schedule::make_schedule;
use dpt_core::{Error, Image, Result};

#[derive(Parser, Debug)]
#[command(name = "dpt", version, about = "Personalized blind face restoration with dual-pivot tuning")]
struct Cli {
    /// Run configuration (TOML). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic identity dataset.
    GenData(GenData),
    /// Apply the configured two-stage degradation to images.
    Degrade(DegradeCmd),
    /// Train the blind restoration system.
    TrainBase(TrainBaseCmd),
    /// Textual pivot: tune the denoiser on one identity's references.
    PivotText(PivotTextCmd),
    /// Model-based pivot: retarget the encoder to a personalized denoiser.
    PivotModel(PivotModelCmd),
    /// Restore degraded images.
    Restore(RestoreCmd),
    /// Score restored images against references.
    Evaluate(EvaluateCmd),
    /// Run a scripted experiment.
    Exp(ExpCmd),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    ids: Option<usize>,
    #[arg(long)]
    per_id: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DegradeCmd {
    /// PNG file or directory of PNG files.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainBaseCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PivotTextCmd {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    identity: u32,
    #[arg(long)]
    out: PathBuf,
    /// Tune without guidance features (ablation).
    #[arg(long)]
    out_of_context: bool,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_pr: Option<f64>,
}

#[derive(Args, Debug)]
struct PivotModelCmd {
    #[arg(long)]
    system: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    identity: u32,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct RestoreCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PNG file or directory of PNG files.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    w: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    passes: Option<usize>,
    /// Prompt token name, e.g. `face` or `<v0>`.
    #[arg(long)]
    prompt: Option<String>,
    /// Blind restoration: null token, no guidance scale.
    #[arg(long, conflicts_with_all = ["w", "gamma", "prompt"])]
    blind: bool,
}

#[derive(Args, Debug)]
struct EvaluateCmd {
    /// Directory of restored PNGs.
    #[arg(long)]
    restored: PathBuf,
    /// Directory of ground-truth PNGs with matching file names.
    #[arg(long)]
    reference: PathBuf,
    /// Identity embedder; trained from `--data` and saved here if missing.
    #[arg(long)]
    embedder: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExpCmd {
    /// seed-variation, gamma-ablation, cfg-sweep, encoder-swap,
    /// main-benchmark, out-of-context, prior-drift or multipass.
    name: String,
    /// Cache directory for datasets and checkpoints.
    #[arg(long, default_value = "work")]
    work: PathBuf,
    #[arg(long, default_value = "reports")]
    out: PathBuf,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!("no PNG files in {}", input.display())));
    }
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn report(value: serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn gen_data(cfg: &mut RunConfig, a: &GenData) -> Result<()> {
    let d = &mut cfg.data;
    d.ids = a.ids.unwrap_or(d.ids);
    d.per_id = a.per_id.unwrap_or(d.per_id);
    d.size = a.size.unwrap_or(d.size);
    d.seed = a.seed.unwrap_or(d.seed);
    let ds = make_dataset(&a.out, d.ids, d.per_id, d.size, d.seed)?;
    let d = &cfg.data;
    let seed = d.seed;
    let prov = Provenance::new("gen-data", &cfg.content_hash()?).seed("data", seed);
    write_sidecar(a.out.join("manifest.json"), &prov)?;
    report(json!({"images": ds.len(), "identities": cfg.data.ids, "out": a.out}))
}

fn degrade_cmd(cfg: &RunConfig, a: &DegradeCmd) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let files = png_inputs(&a.input)?;
    let hash = cfg.content_hash()?;
    for (i, f) in files.iter().enumerate() {
        let img = Image::load(f)?;
        let out = degrade(&img, &cfg.degrade, &mut stream(a.seed, &[i as u64]))?;
        let dst = a.out.join(file_name(f));
        out.save_png(&dst)?;
        let prov = Provenance::new("degrade", &hash)
            .input("image", file_hash(f)?)
            .seed("degrade", a.seed)
            .param("index", i);
        write_sidecar(&dst, &prov)?;
    }
    report(json!({"degraded": files.len(), "out": a.out}))
}

fn save_with_log(
    sys: &RestorationSystem,
    out: &Path,
    prov: Provenance,
    log: &dpt_core::pivot::TrainLog,
) -> Result<serde_json::Value> {
    save_system(sys, out)?;
    write_sidecar(out, &prov)?;
    let mut log_path = out.as_os_str().to_owned();
    log_path.push(".log.jsonl");
    let log_path = PathBuf::from(log_path);
    if log_path.exists() {
        std::fs::remove_file(&log_path)?;
    }
    log.append_jsonl(&log_path)?;
    let (head, tail) = log.quartile_means();
    Ok(json!({"checkpoint": out, "steps": log.rows.len(), "loss_first_quartile": head, "loss_last_quartile": tail}))
}

fn train_base_cmd(cfg: &mut RunConfig, a: &TrainBaseCmd) -> Result<()> {
    let t = &mut cfg.train;
    t.steps = a.steps.unwrap_or(t.steps);
    t.lr = a.lr.unwrap_or(t.lr);
    t.seed = a.seed.unwrap_or(t.seed);
    let ds = Dataset::load(&a.data)?;
    let arch = dpt_core::nets::ArchConfig {
        image_size: ds.size(),
        ..cfg.arch.clone()
    };
    let held_out = cfg.pivot.identities.clone();
    let data = ImageSet::from_dataset(&ds, None, |l| !held_out.contains(&l));
    let mut sys = RestorationSystem::init(&arch, make_schedule(cfg.schedule.steps, cfg.schedule.kind)?, cfg.train.seed)?;
    let log = train_base(&mut sys, &data, &cfg.train)?;
    let prov = Provenance::new("train-base", &cfg.content_hash()?)
        .input("dataset", file_hash(a.data.join("manifest.json"))?)
        .seed("train", cfg.train.seed);
    report(save_with_log(&sys, &a.out, prov, &log)?)
}

fn pivot_text_cmd(cfg: &mut RunConfig, a: &PivotTextCmd) -> Result<()> {
    let t = &mut cfg.pivot.text;
    t.steps = a.steps.unwrap_or(t.steps);
    t.lr = a.lr.unwrap_or(t.lr);
    t.lambda_pr = a.lambda_pr.unwrap_or(t.lambda_pr);
    let ds = Dataset::load(&a.data)?;
    let mut sys = load_system(&a.base)?;
    let name = format!("<v{}>", a.identity);
    let token = sys.add_identity_token(&name, cfg.pivot.token_init, &mut stream(t.seed, &[0x70C, a.identity as u64]))?;
    let refs = ds.images_of(a.identity, Some(Split::Reference));
    if refs.is_empty() {
        return Err(Error::Precondition(format!("identity {} has no reference images", a.identity)));
    }
    let ids = cfg.pivot.identities.clone();
    let pivot = a.identity;
    let prior = PriorSet::new(
        ImageSet::from_dataset(&ds, Some(Split::Reference), |l| l != pivot && !ids.contains(&l)),
        pivot,
    )?;
    let hyper = cfg.pivot.text.clone();
    let log = if a.out_of_context {
        out_of_context_pivot(&mut sys, token, &refs, &prior, &hyper)?
    } else {
        stage_a_textual_pivot(&mut sys, token, &refs, &prior, &hyper)?
    };
    let prov = Provenance::new("pivot-text", &cfg.content_hash()?)
        .input("base", file_hash(&a.base)?)
        .input("dataset", file_hash(a.data.join("manifest.json"))?)
        .seed("pivot", hyper.seed)
        .param("identity", a.identity)
        .param("token", &name)
        .param("in_context", !a.out_of_context);
    let mut v = save_with_log(&sys, &a.out, prov, &log)?;
    v["token"] = json!(name);
    report(v)
}

fn pivot_model_cmd(cfg: &mut RunConfig, a: &PivotModelCmd) -> Result<()> {
    let m = &mut cfg.pivot.model;
    m.steps = a.steps.unwrap_or(m.steps);
    m.lr = a.lr.unwrap_or(m.lr);
    let ds = Dataset::load(&a.data)?;
    let mut sys = load_system(&a.system)?;
    let ids = cfg.pivot.identities.clone();
    let pivot = a.identity;
    let generic_labels: Vec<u32> = ds
        .labels()
        .into_iter()
        .filter(|&l| l != pivot && !ids.contains(&l))
        .take(cfg.pivot.generic_identities.max(1))
        .collect();
    let generic = ImageSet::from_dataset(&ds, Some(Split::Reference), |l| generic_labels.contains(&l));
    let log = stage_b_model_pivot(&mut sys, &generic, pivot, &cfg.pivot.model)?;
    let prov = Provenance::new("pivot-model", &cfg.content_hash()?)
        .input("system", file_hash(&a.system)?)
        .input("dataset", file_hash(a.data.join("manifest.json"))?)
        .seed("pivot", cfg.pivot.model.seed)
        .param("identity", a.identity);
    report(save_with_log(&sys, &a.out, prov, &log)?)
}

fn restore_cmd(cfg: &mut RunConfig, a: &RestoreCmd) -> Result<()> {
    let sys = load_system(&a.checkpoint)?;
    let r = &mut cfg.restore;
    r.w = a.w.unwrap_or(r.w);
    r.gamma = a.gamma.unwrap_or(r.gamma);
    r.steps = a.steps.unwrap_or(r.steps);
    r.seed = a.seed.unwrap_or(r.seed);
    r.passes = a.passes.unwrap_or(r.passes);
    if let Some(p) = &a.prompt {
        r.prompt = sys.token(p)?;
    }
    if a.blind {
        *r = RestoreConfig {
            w: 0.0,
            gamma: 1.0,
            prompt: NULL_TOKEN,
            ..r.clone()
        };
    }
    let files = png_inputs(&a.input)?;
    let lq = files.iter().map(Image::load).collect::<Result<Vec<_>>>()?;
    // per-file seeds derived from the root seed and the file's position
    let seeds: Vec<u64> = (0..lq.len()).map(|i| dpt_core::rng::derive_seed(r.seed, &[i as u64])).collect();
    let outs = restore_passes(&sys, &lq, &seeds, r)?.pop().unwrap_or_default();
    std::fs::create_dir_all(&a.out)?;
    let hash = cfg.content_hash()?;
    let ckpt = file_hash(&a.checkpoint)?;
    for ((f, img), seed) in files.iter().zip(&outs).zip(&seeds) {
        let dst = a.out.join(file_name(f));
        img.save_png(&dst)?;
        let prov = Provenance::new("restore", &hash)
            .input("checkpoint", ckpt.clone())
            .input("image", file_hash(f)?)
            .seed("sampler", *seed);
        write_sidecar(&dst, &prov)?;
    }
    report(json!({"restored": outs.len(), "out": a.out}))
}

fn evaluate_cmd(cfg: &RunConfig, a: &EvaluateCmd) -> Result<()> {
    let emb = if a.embedder.exists() {
        IdentityEmbedder::load(&a.embedder)?
    } else {
        let data = a
            .data
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("embedder not found and no --data to train one".into()))?;
        let e = train_embedder(&Dataset::load(data)?, &cfg.embedder)?;
        e.save(&a.embedder)?;
        e
    };
    let files = png_inputs(&a.restored)?;
    let mut rows = Vec::new();
    for f in &files {
        let out = Image::load(f)?;
        let gt = Image::load(a.reference.join(file_name(f)))?;
        rows.push(json!({
            "file": file_name(f),
            "psnr_db": psnr(&out, &gt)?,
            "ssim": ssim(&out, &gt)?,
            "id_sim": id_similarity(&emb, &out, &gt)?,
        }));
    }
    let col = |k: &str| summarize(&rows.iter().filter_map(|r| r[k].as_f64()).collect::<Vec<_>>());
    let value = json!({
        "rows": rows,
        "psnr_db": col("psnr_db"),
        "ssim": col("ssim"),
        "id_sim": col("id_sim"),
    });
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&a.out, serde_json::to_string_pretty(&value)?)?;
    let prov = Provenance::new("evaluate", &cfg.content_hash()?).input("embedder", file_hash(&a.embedder)?);
    write_sidecar(&a.out, &prov)?;
    report(json!({"images": files.len(), "psnr_db": value["psnr_db"], "id_sim": value["id_sim"], "out": a.out}))
}

fn exp_cmd(cfg: RunConfig, a: &ExpCmd) -> Result<()> {
    let kind = ExperimentKind::from_name(&a.name).ok_or_else(|| {
        let names: Vec<&str> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
        Error::InvalidArgument(format!("unknown experiment {:?}; expected one of {}", a.name, names.join(", ")))
    })?;
    let pipeline = Pipeline::new(cfg, &a.work)?;
    let dir = a.out.join(kind.name());
    let rep = pipeline.run_and_write(kind, &dir)?;
    for line in rep.summary_lines() {
        log::info!("{line}");
    }
    report(json!({
        "experiment": kind.name(),
        "passed": rep.passed(),
        "verdicts": rep.verdicts,
        "report": dir.join("report.json"),
        "wall_ms": rep.wall_ms,
    }))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::GenData(a) => gen_data(&mut cfg, a),
        Command::Degrade(a) => degrade_cmd(&cfg, a),
        Command::TrainBase(a) => train_base_cmd(&mut cfg, a),
        Command::PivotText(a) => pivot_text_cmd(&mut cfg, a),
        Command::PivotModel(a) => pivot_model_cmd(&mut cfg, a),
        Command::Restore(a) => restore_cmd(&mut cfg, a),
        Command::Evaluate(a) => evaluate_cmd(&cfg, a),
        Command::Exp(a) => exp_cmd(cfg, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help and version exit 0; usage errors exit 2
            e.exit();
        }
    };
    match with_workers(|| run(cli)).and_then(|r| r) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = json!({"error": {"kind": e.kind(), "message": e.to_string()}});
            eprintln!("{body}");
            ExitCode::from(1)
        }
    }
}
