use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anrl::bundle::{LoadedModel, ModelBundle, ModelKind};
use anrl::calib::{collect_ranges, quantize_model, CalibMethod, Calibrate, PrecisionPlan, RangeBook};
use anrl::data::{read_raw_tensor, synthetic_image, write_raw_tensor, ImageKind};
use anrl::encoder::EncoderConfig;
use anrl::experiments::{brittleness_experiment, OutlierInjection};
use anrl::params::Params;
use anrl::perf::{decode_step_traffic, instrumented_generate, instrumented_run, kv_comparison, roofline_latency, HardwareProfile, MemoryModel, PhaseLatency};
use anrl::probe::{NoObserver, Observer};
use anrl::report::{canonical_compact, canonical_json, sha256_hex, RunReport};
use anrl::vit::VitConfig;
use anrl::vlm::{evaluate_pair, synthetic_prompt, Vlm, VlmConfig, VlmInput};
use anrl::Tensor;
use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "anrl", version, about = "Quantized VLM engine and analysis toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Seed for weights and synthetic inputs.
    #[arg(long, env = "ANRL_SEED", default_value_t = 0)]
    seed: u64,
    /// Record the wall-clock time in the report (makes output run-dependent).
    #[arg(long)]
    timestamp: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct PromptArgs {
    /// Prompt tokens appended after the visual tokens.
    #[arg(long, default_value_t = 8)]
    prompt_len: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print a model, hardware or plan config as JSON.
    Config {
        /// toy, paper-shape, vit, hw, or plan:<preset>
        name: String,
    },
    /// Write seeded synthetic images as raw tensor files.
    GenInputs {
        #[arg(long, default_value = "structured")]
        kind: ImageKind,
        #[arg(long, default_value_t = 8)]
        count: u64,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        /// Index of the first image.
        #[arg(long, default_value_t = 0)]
        start: u64,
        #[arg(long, env = "ANRL_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a seeded model from a config file and write its bundle.
    InitModel {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Collect activation ranges over a directory of raw tensors.
    Calibrate {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        /// minmax or percentile:<p>
        #[arg(long, default_value = "minmax")]
        method: CalibMethod,
        /// Greedy steps after each prompt, so decode positions are covered.
        #[arg(long, default_value_t = 16)]
        decode_steps: usize,
        #[arg(long)]
        ranges: PathBuf,
        #[command(flatten)]
        prompt: PromptArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Merge range books collected over disjoint inputs.
    MergeRanges {
        #[arg(required = true)]
        books: Vec<PathBuf>,
        #[arg(long)]
        ranges: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Quantize a float bundle with a range book and precision plan.
    Quantize {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        ranges: PathBuf,
        /// Preset name (paper, fp-ref, w8a16, w4a16) or a plan JSON file.
        #[arg(long, default_value = "paper")]
        plan: String,
        #[arg(long)]
        quantized: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare a test bundle against a float bundle on raw-tensor inputs.
    Eval {
        #[arg(long)]
        float: PathBuf,
        #[arg(long)]
        quant: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        /// Generated tokens per input.
        #[arg(long, default_value_t = 16)]
        steps: usize,
        #[command(flatten)]
        prompt: PromptArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Greedy decode on a synthetic input; reports state sizes and modeled throughput.
    BenchDecode {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value_t = 128)]
        steps: usize,
        /// Hardware profile JSON; defaults to the built-in edge NPU.
        #[arg(long)]
        hw: Option<PathBuf>,
        /// Also measure host tokens per second (not reproducible).
        #[arg(long)]
        wall_clock: bool,
        #[command(flatten)]
        prompt: PromptArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Decode-traffic accounting and roofline latency; optional per-layer CSV.
    Traffic {
        #[arg(long)]
        bundle: PathBuf,
        /// Cached positions for the analytic decode-step comparison.
        #[arg(long, default_value_t = 4096)]
        seq_len: usize,
        /// Decode steps in the instrumented run.
        #[arg(long, default_value_t = 16)]
        decode_steps: usize,
        #[arg(long)]
        hw: Option<PathBuf>,
        /// Precision used for byte counts; defaults to the bundle's plan, else "paper".
        #[arg(long)]
        plan: Option<String>,
        /// Treat weights as resident on chip.
        #[arg(long)]
        resident_weights: bool,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        prompt: PromptArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Quantization-robustness comparison of the conv encoder and a ViT.
    CompareEncoders {
        /// VLM bundle whose encoder is compared.
        #[arg(long)]
        conv: PathBuf,
        #[arg(long)]
        vit: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long, default_value = "w8a16")]
        plan: String,
        #[arg(long, default_value = "minmax")]
        method: CalibMethod,
        /// Add heavy-tailed noise to a quarter of the sites during calibration.
        #[arg(long)]
        inject: bool,
        #[command(flatten)]
        common: Common,
    },
}

/// A usage mistake that clap cannot catch.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<anrl::Error>() {
            return match err {
                anrl::Error::ContextOverflow { .. } | anrl::Error::AccumulatorOverflow { .. } => 3,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Config { name } => cmd_config(&name),
        Cmd::GenInputs {
            kind,
            count,
            size,
            channels,
            start,
            seed,
            out,
        } => cmd_gen_inputs(kind, count, size, channels, start, seed, &out),
        Cmd::InitModel { config, bundle, common } => cmd_init_model(&config, &bundle, &common),
        Cmd::Calibrate {
            bundle,
            inputs,
            method,
            decode_steps,
            ranges,
            prompt,
            common,
        } => cmd_calibrate(&bundle, &inputs, method, decode_steps, &ranges, &prompt, &common),
        Cmd::MergeRanges { books, ranges, common } => cmd_merge(&books, &ranges, &common),
        Cmd::Quantize {
            bundle,
            ranges,
            plan,
            quantized,
            common,
        } => cmd_quantize(&bundle, &ranges, &plan, &quantized, &common),
        Cmd::Eval {
            float,
            quant,
            inputs,
            steps,
            prompt,
            common,
        } => cmd_eval(&float, &quant, &inputs, steps, &prompt, &common),
        Cmd::BenchDecode {
            bundle,
            steps,
            hw,
            wall_clock,
            prompt,
            common,
        } => cmd_bench(&bundle, steps, hw.as_deref(), wall_clock, &prompt, &common),
        Cmd::Traffic {
            bundle,
            seq_len,
            decode_steps,
            hw,
            plan,
            resident_weights,
            csv,
            prompt,
            common,
        } => cmd_traffic(&bundle, seq_len, decode_steps, hw.as_deref(), plan.as_deref(), resident_weights, csv.as_deref(), &prompt, &common),
        Cmd::CompareEncoders {
            conv,
            vit,
            calib,
            inputs,
            plan,
            method,
            inject,
            common,
        } => cmd_compare(&conv, &vit, &calib, &inputs, &plan, method, inject, &common),
    }
}

/// File contents of `{"kind": ..., "config": ...}` as accepted by `init-model`.
fn config_doc(kind: ModelKind, config: Value) -> Value {
    json!({ "kind": kind, "config": config })
}

fn cmd_config(name: &str) -> Result<()> {
    let v = match name {
        "toy" => config_doc(ModelKind::Vlm, serde_json::to_value(VlmConfig::toy())?),
        "paper-shape" => config_doc(
            ModelKind::Vlm,
            serde_json::to_value(VlmConfig {
                encoder: EncoderConfig::paper_shape(),
                ..VlmConfig::toy()
            })?,
        ),
        "vit" => config_doc(ModelKind::Vit, serde_json::to_value(VitConfig::toy())?),
        "hw" => serde_json::to_value(HardwareProfile::edge_npu())?,
        other => match other.strip_prefix("plan:") {
            Some(p) => serde_json::to_value(PrecisionPlan::preset(p).map_err(|e| usage(e.to_string()))?)?,
            None => return Err(usage(format!("unknown config `{other}` (toy, paper-shape, vit, hw, plan:<preset>)"))),
        },
    };
    print_stdout(&canonical_json(&v)?)
}

fn cmd_gen_inputs(kind: ImageKind, count: u64, size: usize, channels: usize, start: u64, seed: u64, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for i in start..start + count {
        let path = out.join(format!("input_{i:05}.bin"));
        write_raw_tensor(&path, &synthetic_image(kind, seed, i, channels, size)).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn emit(report: RunReport, common: &Common) -> Result<()> {
    let mut report = report;
    if common.timestamp {
        report.provenance.timestamp = Some(SystemTime::now().duration_since(UNIX_EPOCH)?.as_secs());
    }
    let s = report.to_json()?;
    match &common.out {
        Some(p) => std::fs::write(p, s + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => print_stdout(&s)?,
    }
    Ok(())
}

/// A closed pipe on stdout (`anrl ... | head`) is not an error.
fn print_stdout(s: &str) -> Result<()> {
    use std::io::Write;
    match writeln!(std::io::stdout().lock(), "{s}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn digest(configs: &[&Value]) -> Result<String> {
    let parts = configs.iter().map(|v| canonical_compact(v)).collect::<Result<Vec<_>, _>>()?;
    Ok(sha256_hex(parts.join("\n").as_bytes()))
}

fn load_bundle(p: &Path) -> Result<ModelBundle> {
    ModelBundle::load(p).with_context(|| format!("reading bundle {}", p.display()))
}

fn cmd_init_model(config: &Path, out: &Path, common: &Common) -> Result<()> {
    let text = std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let doc: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
    let kind: ModelKind = serde_json::from_value(doc.get("kind").cloned().unwrap_or(Value::Null))
        .map_err(|_| anrl::Error::Config {
            field: "kind".into(),
            reason: "must be \"vlm\" or \"vit\"".into(),
        })?;
    let cfg = doc.get("config").cloned().ok_or_else(|| anrl::Error::Config {
        field: "config".into(),
        reason: "missing".into(),
    })?;
    let (bundle, extra) = match kind {
        ModelKind::Vlm => {
            let c: VlmConfig = serde_json::from_value(cfg).context("invalid vlm config")?;
            let m = Vlm::new(&c, common.seed)?;
            let extra = json!({
                "visual_tokens": c.encoder.num_tokens(),
                "token_dim": c.encoder.msfa_out_channels,
                "attention_layers": c.backbone.count(anrl::backbone::LayerKind::Attn),
                "conv_layers": c.backbone.count(anrl::backbone::LayerKind::Conv),
            });
            (ModelBundle::from_vlm(&m, common.seed)?, extra)
        }
        ModelKind::Vit => {
            let c: VitConfig = serde_json::from_value(cfg).context("invalid vit config")?;
            let m = anrl::vit::Vit::new(c, common.seed)?;
            (ModelBundle::from_vit(&m, common.seed)?, json!({ "visual_tokens": c.num_tokens(), "token_dim": c.output_dim() }))
        }
    };
    let bytes = bundle.to_bytes()?;
    std::fs::write(out, &bytes).with_context(|| format!("writing {}", out.display()))?;
    let params: usize = bundle.tensors.iter().map(|(_, s)| s.shape().iter().product::<usize>()).sum();
    let mut metrics = json!({
        "kind": kind,
        "params": params,
        "bundle_bytes": bytes.len(),
        "crc32": bundle.payload_crc(),
    });
    merge_into(&mut metrics, extra);
    emit(RunReport::new("init-model", digest(&[&bundle.header.config])?, metrics, Some(common.seed)), common)
}

fn merge_into(dst: &mut Value, src: Value) {
    if let (Some(d), Value::Object(s)) = (dst.as_object_mut(), src) {
        d.extend(s);
    }
}

/// Regular files of `dir` sorted by name, each read as a raw tensor.
fn read_inputs(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading input directory {}", dir.display()))? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(anyhow!(anrl::Error::Empty("input directory")).context(format!("no inputs in {}", dir.display())));
    }
    names
        .into_iter()
        .map(|n| {
            let p = dir.join(&n);
            let t = read_raw_tensor(&p).with_context(|| format!("unreadable input {}", p.display()))?;
            Ok((n, t))
        })
        .collect()
}

/// FNV-1a of the file name, so an input's prompt does not depend on which
/// other files share its directory.
fn name_index(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn vlm_inputs(files: Vec<(String, Tensor)>, m: &Vlm, seed: u64, prompt_len: usize, decode_steps: usize) -> Vec<VlmInput> {
    files
        .into_iter()
        .map(|(name, image)| VlmInput {
            image,
            prompt: synthetic_prompt(seed, name_index(&name), prompt_len, m.lm.cfg.vocab_size),
            decode_steps,
        })
        .collect()
}

fn float_vlm(b: &ModelBundle) -> Result<Vlm> {
    match b.load_model()? {
        LoadedModel::Vlm(m) => Ok(m),
        LoadedModel::QuantVlm(_) | LoadedModel::QuantVit(_) => Err(usage("expected a float bundle, got a quantized one")),
        LoadedModel::Vit(_) => Err(usage("expected a vlm bundle, got a vit")),
    }
}

fn cmd_calibrate(bundle: &Path, inputs: &Path, method: CalibMethod, decode_steps: usize, out: &Path, prompt: &PromptArgs, common: &Common) -> Result<()> {
    let b = load_bundle(bundle)?;
    let files = read_inputs(inputs)?;
    let n = files.len();
    let book = match b.load_model()? {
        LoadedModel::Vlm(m) => {
            let xs = vlm_inputs(files, &m, common.seed, prompt.prompt_len, decode_steps);
            collect_ranges(&m, &xs, method)?
        }
        LoadedModel::Vit(v) => {
            let xs: Vec<Tensor> = files.into_iter().map(|(_, t)| t).collect();
            collect_ranges(&v, &xs, method)?
        }
        _ => return Err(usage("calibrate needs a float bundle")),
    };
    std::fs::write(out, book.to_json()? + "\n").with_context(|| format!("writing {}", out.display()))?;
    let metrics = json!({ "inputs": n, "sites": book.sites.len(), "method": method.to_string() });
    emit(RunReport::new("calibrate", digest(&[&b.header.config])?, metrics, Some(common.seed)), common)
}

fn read_book(p: &Path) -> Result<RangeBook> {
    let s = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    RangeBook::from_json(&s).with_context(|| format!("parsing range book {}", p.display()))
}

fn cmd_merge(books: &[PathBuf], out: &Path, common: &Common) -> Result<()> {
    let mut merged = read_book(&books[0])?;
    for p in &books[1..] {
        merged.merge(&read_book(p)?).with_context(|| format!("merging {}", p.display()))?;
    }
    std::fs::write(out, merged.to_json()? + "\n").with_context(|| format!("writing {}", out.display()))?;
    let metrics = json!({ "books": books.len(), "sites": merged.sites.len(), "method": merged.method.to_string() });
    emit(RunReport::new("merge-ranges", sha256_hex(merged.to_json()?.as_bytes()), metrics, Some(common.seed)), common)
}

fn read_plan(s: &str) -> Result<PrecisionPlan> {
    let plan = if Path::new(s).is_file() {
        let text = std::fs::read_to_string(s)?;
        serde_json::from_str(&text).with_context(|| format!("parsing plan {s}"))?
    } else {
        PrecisionPlan::preset(s).map_err(|e| usage(e.to_string()))?
    };
    plan.validate()?;
    Ok(plan)
}

fn check_coverage<M: Calibrate>(m: &M, book: &RangeBook) -> Result<()> {
    let missing: Vec<String> = m.sites()?.into_iter().filter(|s| !book.sites.contains_key(s)).collect();
    if missing.is_empty() {
        return Ok(());
    }
    let shown = missing.iter().take(20).cloned().collect::<Vec<_>>().join(", ");
    let more = if missing.len() > 20 { format!(" and {} more", missing.len() - 20) } else { String::new() };
    Err(anyhow!(anrl::Error::MissingRange(missing[0].clone())).context(format!("ranges miss {} sites: {shown}{more}", missing.len())))
}

fn cmd_quantize(bundle: &Path, ranges: &Path, plan: &str, out: &Path, common: &Common) -> Result<()> {
    let b = load_bundle(bundle)?;
    let book = read_book(ranges)?;
    let plan = read_plan(plan)?;
    let q = match b.load_model()? {
        LoadedModel::Vlm(m) => {
            check_coverage(&m, &book)?;
            ModelBundle::from_quantized_vlm(&quantize_model(&m, &plan, &book)?, b.header.seed)?
        }
        LoadedModel::Vit(v) => {
            check_coverage(&v, &book)?;
            ModelBundle::from_quantized_vit(&quantize_model(&v, &plan, &book)?, b.header.seed)?
        }
        _ => return Err(usage("bundle is already quantized")),
    };
    let bytes = q.to_bytes()?;
    std::fs::write(out, &bytes).with_context(|| format!("writing {}", out.display()))?;
    let mut dtypes = std::collections::BTreeMap::<String, usize>::new();
    for (_, s) in &q.tensors {
        *dtypes.entry(format!("{:?}", s.dtype()).to_lowercase()).or_default() += 1;
    }
    let metrics = json!({
        "plan": plan.name,
        "tensors_by_dtype": dtypes,
        "bundle_bytes": bytes.len(),
        "crc32": q.payload_crc(),
        "activation_sites": q.header.activations.len(),
    });
    emit(RunReport::new("quantize", digest(&[&b.header.config])?, metrics, Some(common.seed)), common)
}

fn cmd_eval(float: &Path, test: &Path, inputs: &Path, steps: usize, prompt: &PromptArgs, common: &Common) -> Result<()> {
    let fb = load_bundle(float)?;
    let tb = load_bundle(test)?;
    let f = float_vlm(&fb)?;
    let files = read_inputs(inputs)?;
    let xs = vlm_inputs(files, &f, common.seed, prompt.prompt_len, 0);
    let report = match tb.load_model()? {
        LoadedModel::Vlm(t) => evaluate_pair(&f, &t, None, &xs, steps)?,
        LoadedModel::QuantVlm(q) => evaluate_pair(&f, &q.model, Some(&q.activations), &xs, steps)?,
        _ => return Err(usage("eval compares two vlm bundles")),
    };
    let mut metrics = serde_json::to_value(&report)?;
    merge_into(&mut metrics, json!({ "plan": tb.header.plan.as_ref().map(|p| p.name.clone()) }));
    emit(RunReport::new("eval", digest(&[&fb.header.config, &tb.header.config])?, metrics, Some(common.seed)), common)
}

fn read_hw(p: Option<&Path>) -> Result<HardwareProfile> {
    let hw = match p {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing hardware profile {}", p.display()))?,
        None => HardwareProfile::edge_npu(),
    };
    hw.validate()?;
    Ok(hw)
}

fn synthetic_input(m: &Vlm, seed: u64, prompt_len: usize) -> VlmInput {
    let e = &m.enc.cfg;
    VlmInput {
        image: synthetic_image(ImageKind::Structured, seed, 0, e.in_channels, e.input_size),
        prompt: synthetic_prompt(seed, 0, prompt_len, m.lm.cfg.vocab_size),
        decode_steps: 0,
    }
}

fn cmd_bench(bundle: &Path, steps: usize, hw: Option<&Path>, wall_clock: bool, prompt: &PromptArgs, common: &Common) -> Result<()> {
    let b = load_bundle(bundle)?;
    let hw = read_hw(hw)?;
    let (model, mut qobs, plan) = match b.load_model()? {
        LoadedModel::Vlm(m) => (m, None, PrecisionPlan::preset("paper")?),
        LoadedModel::QuantVlm(q) => {
            let obs = q.observer();
            (q.model, Some(obs), q.plan)
        }
        _ => return Err(usage("bench-decode needs a vlm bundle")),
    };
    let mem = MemoryModel::new(&plan, hw.onchip_buffer_bytes)?;
    let input = synthetic_input(&model, common.seed, prompt.prompt_len);
    let started = Instant::now();
    let extra: &mut dyn Observer = match qobs.as_mut() {
        Some(o) => o,
        None => &mut NoObserver,
    };
    let run = instrumented_generate(&model, &input, steps, mem, extra)?;
    let elapsed = started.elapsed().as_secs_f64();
    if let Some(o) = qobs.as_mut() {
        o.take_missing()?;
    }
    let roof = roofline_latency(&run.ledger, &hw)?;
    let act_bytes = mem.act_bytes(anrl::probe::Scope::Lm) as usize;
    let ids: Vec<u8> = run.ids.iter().flat_map(|i| i.to_le_bytes()).collect();
    let mut metrics = json!({
        "prompt_len": prompt.prompt_len,
        "visual_tokens": model.enc.cfg.num_tokens(),
        "steps": steps,
        "final_position": run.session.position,
        "max_context": model.lm.cfg.max_context,
        "rolling_state_bytes": run.session.rolling_state_bytes(act_bytes),
        "kv_bytes": run.session.kv_bytes(act_bytes),
        "modeled_decode_step_s": roof.decode_step_s,
        "modeled_tokens_per_s": if roof.decode_step_s > 0.0 { 1.0 / roof.decode_step_s } else { 0.0 },
        "ids_sha256": sha256_hex(&ids),
        "plan": plan.name,
        "hw": hw,
    });
    if wall_clock {
        merge_into(&mut metrics, json!({ "wall_tokens_per_s": steps as f64 / elapsed.max(1e-9) }));
    }
    emit(RunReport::new("bench-decode", digest(&[&b.header.config])?, metrics, Some(common.seed)), common)
}

#[allow(clippy::too_many_arguments)]
fn cmd_traffic(
    bundle: &Path,
    seq_len: usize,
    decode_steps: usize,
    hw: Option<&Path>,
    plan: Option<&str>,
    resident: bool,
    csv: Option<&Path>,
    prompt: &PromptArgs,
    common: &Common,
) -> Result<()> {
    let b = load_bundle(bundle)?;
    let hw = read_hw(hw)?;
    let plan = match (plan, &b.header.plan) {
        (Some(p), _) => read_plan(p)?,
        (None, Some(p)) => p.clone(),
        (None, None) => PrecisionPlan::preset("paper")?,
    };
    let model = match b.load_model()? {
        LoadedModel::Vlm(m) => m,
        LoadedModel::QuantVlm(q) => q.model,
        _ => return Err(usage("traffic needs a vlm bundle")),
    };
    let mem = MemoryModel::new(&plan, hw.onchip_buffer_bytes)?.with_resident_weights(resident);
    let cfg = &model.lm.cfg;
    let kv = kv_comparison(cfg, seq_len, &mem);
    let step: anrl::perf::Counters = decode_step_traffic(cfg, seq_len, &mem).iter().map(|l| l.counters).sum();
    let pure_step: anrl::perf::Counters = decode_step_traffic(&cfg.pure_transformer(), seq_len, &mem).iter().map(|l| l.counters).sum();
    let ledger = instrumented_run(&model, &synthetic_input(&model, common.seed, prompt.prompt_len), decode_steps, mem)?;
    if let Some(p) = csv {
        std::fs::write(p, ledger.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    let metrics = json!({
        "seq_len": seq_len,
        "kv_reduction_vs_pure": kv.kv_only_reduction,
        "weights_included_reduction": kv.weights_included_reduction,
        "kv": kv,
        "analytic_decode_step": {
            "hybrid": PhaseLatency::of(&step, &hw),
            "pure": PhaseLatency::of(&pure_step, &hw),
        },
        "ledger": ledger.summary(),
        "roofline": roofline_latency(&ledger, &hw)?,
        "memory": mem,
        "hw": hw,
        "plan": plan.name,
    });
    emit(RunReport::new("traffic", digest(&[&b.header.config])?, metrics, Some(common.seed)), common)
}

#[allow(clippy::too_many_arguments)]
fn cmd_compare(conv: &Path, vit: &Path, calib: &Path, inputs: &Path, plan: &str, method: CalibMethod, inject: bool, common: &Common) -> Result<()> {
    let cb = load_bundle(conv)?;
    let vb = load_bundle(vit)?;
    let enc = float_vlm(&cb)?.enc;
    let v = match vb.load_model()? {
        LoadedModel::Vit(v) => v,
        _ => return Err(usage("--vit must be a float vit bundle")),
    };
    let plan = read_plan(plan)?;
    let c: Vec<Tensor> = read_inputs(calib)?.into_iter().map(|(_, t)| t).collect();
    let e: Vec<Tensor> = read_inputs(inputs)?.into_iter().map(|(_, t)| t).collect();
    let injection = inject.then(|| OutlierInjection {
        seed: common.seed,
        ..OutlierInjection::default()
    });
    let r = brittleness_experiment(&enc, &v, &c, &e, &plan, method, injection)?;
    let (pc, pv) = (enc.param_count() as f64, v.param_count() as f64);
    let mut metrics = serde_json::to_value(&r)?;
    merge_into(&mut metrics, json!({ "param_mismatch": (pv - pc).abs() / pc }));
    emit(RunReport::new("compare-encoders", digest(&[&cb.header.config, &vb.header.config])?, metrics, Some(common.seed)), common)
}
