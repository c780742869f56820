use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use evla_core::action::{denoise_loop, should_recompute, DenoiseOptions};
use evla_core::export::{
    actions_csv, importance_csv, layer_similarity_csv, parse_image, selection_csv, temporal_similarity_csv,
    token_mask_pgm,
};
use evla_core::format::{self, sha256_hex};
use evla_core::layer_prune::{calibration_sample, calibration_traces, layer_importance};
use evla_core::profiler::{
    compare_reports, estimate_breakdown, interlayer_similarity, measure_latency, temporal_similarity,
};
use evla_core::verify::{run_suite, SuiteOptions};
use evla_core::{apply_plan, infer, CachePolicy, InferenceOptions, ModelBundle, ModelConfig, Tensor, TokenPruneConfig};
use serde_json::json;

use crate::run_config::RunConfig;
use crate::{
    AnalyzeArgs, BenchArgs, CalibrationArgs, Failure, GenModelArgs, PlanArgs, Preset, ProfileArgs, PruneArgs, RunArgs,
    TokenBudget, VerifyArgs,
};

type CmdResult = Result<(), Failure>;

const SWEEP_BUDGETS: [usize; 5] = [256, 112, 96, 72, 56];

fn emit(path: Option<&Path>, bytes: &[u8]) -> CmdResult {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|e| Failure::Input(format!("cannot write {}: {e}", p.display()))),
        None => std::io::stdout().write_all(bytes).map_err(Failure::from),
    }
}

fn required(flag: Option<PathBuf>, file: &Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
    flag.or_else(|| file.clone())
        .ok_or_else(|| Failure::Config(format!("no {what} path given (flag or config paths)")))
}

fn load_model(path: &Path) -> Result<ModelBundle, Failure> {
    format::load(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn apply_calibration(cfg: &mut RunConfig, a: &CalibrationArgs) {
    if let Some(n) = a.samples {
        cfg.calibration.samples = n;
    }
    if let Some(s) = a.calib_seed {
        cfg.calibration.seed = s;
    }
}

fn apply_plan_flags(cfg: &mut RunConfig, a: &PlanArgs) {
    let p = &mut cfg.prune;
    if let Some(n) = a.n_drop {
        p.n_drop = Some(n);
        p.drop_layers = None;
    }
    if let Some(list) = &a.drop_layers {
        p.drop_layers = Some(list.clone());
        p.n_drop = None;
    }
    if let Some(v) = a.mlp_sparsity {
        p.mlp_sparsity = v;
    }
    if let Some(v) = a.token_final {
        p.token_final = Some(v);
    }
    if a.no_token_pruning {
        p.token_final = None;
    }
    if let Some(v) = a.token_key {
        p.token_key = v;
    }
    if let Some(v) = a.alpha {
        p.alpha = v;
    }
    if let Some(v) = a.capture_layer {
        p.capture_layer = v;
    }
    if let Some(v) = a.cache_interval {
        p.cache_interval = v;
    }
    if a.greedy_diversity {
        p.greedy_diversity = true;
    }
}

pub fn gen_model(a: GenModelArgs) -> CmdResult {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let mut model_cfg = match a.preset {
        Some(Preset::Default) => ModelConfig::default(),
        Some(Preset::Scaled) => ModelConfig::scaled(),
        Some(Preset::Tiny) => ModelConfig::tiny(),
        None => cfg.model.clone(),
    };
    if let Some(seed) = a.seed {
        model_cfg.seed = seed;
    }
    let out = required(a.out, &cfg.paths.out, "output")?;
    let model = ModelBundle::generate(&model_cfg)?;
    let bytes = format::to_bytes(&model)?;
    fs::write(&out, &bytes).map_err(|e| Failure::Input(format!("cannot write {}: {e}", out.display())))?;
    println!("{}  {}", sha256_hex(&bytes), out.display());
    Ok(())
}

pub fn profile_layers(a: ProfileArgs) -> CmdResult {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    apply_calibration(&mut cfg, &a.calibration);
    cfg.validate()?;
    let model = load_model(&required(a.model, &cfg.paths.model, "model")?)?;
    let traces = calibration_traces(&model, cfg.calibration.samples, cfg.calibration.seed)?;
    let imp = layer_importance(&traces)?;
    emit(a.out.as_deref(), importance_csv(&imp.scores).as_bytes())
}

pub fn prune(a: PruneArgs) -> CmdResult {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    apply_plan_flags(&mut cfg, &a.plan);
    apply_calibration(&mut cfg, &a.calibration);
    cfg.validate()?;
    let model = load_model(&required(a.model, &cfg.paths.model, "model")?)?;
    let out = required(a.out, &cfg.paths.out, "output")?;

    let traces = calibration_traces(&model, cfg.calibration.samples, cfg.calibration.seed)?;
    let imp = layer_importance(&traces)?;
    let pruned = apply_plan(&model, &imp, &cfg.plan_request(&model.config))?;
    let bytes = format::to_bytes(&pruned)?;
    fs::write(&out, &bytes).map_err(|e| Failure::Input(format!("cannot write {}: {e}", out.display())))?;

    let plan = pruned.plan.as_ref().expect("apply_plan records a plan");
    let summary = json!({
        "out": out,
        "sha256": sha256_hex(&bytes),
        "dropped": plan.dropped,
        "retained_layers": pruned.retained_layers(),
        "language_params": pruned.language_param_count(),
        "base_language_params": model.language_param_count(),
    });
    println!("{}", serde_json::to_string_pretty(&summary).unwrap());
    Ok(())
}

fn read_image(path: &Path, model: &ModelBundle) -> Result<Tensor, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::Input(format!("cannot read {}: {e}", path.display())))?;
    parse_image(&bytes, model.config.image_size).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

/// Token pruning at `k_final`, reusing the model's plan settings when it has
/// them and clamping the capture layer to the retained depth.
fn token_config_for(model: &ModelBundle, k_final: usize) -> TokenPruneConfig {
    let base = model.plan.as_ref().and_then(|p| p.token).unwrap_or_default();
    TokenPruneConfig {
        k_final,
        k_key: base.k_key.min(k_final),
        capture_layer: base.capture_layer.min(model.language.layers.len()).max(1),
        ..base
    }
}

pub fn run(a: RunArgs) -> CmdResult {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let model = load_model(&required(a.model, &cfg.paths.model, "model")?)?;
    let image = read_image(&required(a.image, &cfg.paths.image, "image")?, &model)?;

    let mut opts = InferenceOptions::from_plan(&model);
    match a.tokens {
        Some(TokenBudget::All) => opts.token_prune = None,
        Some(TokenBudget::Count(k)) => {
            let mut tp = opts.token_prune.unwrap_or_else(|| token_config_for(&model, k));
            tp.k_final = k;
            opts.token_prune = Some(tp);
        }
        None => {}
    }
    if let Some(n) = a.cache_interval {
        opts.cache = CachePolicy::new(n, model.config.denoise_steps)?;
    }
    if let Some(s) = a.noise_seed {
        opts.noise_seed = s;
    }

    let out = infer(&model, &image, &a.token_ids, &opts)?;
    if let Some(path) = &a.selection_out {
        let sel = out
            .selection
            .as_ref()
            .ok_or_else(|| Failure::Config("--selection-out needs visual token pruning".into()))?;
        emit(Some(path), selection_csv(sel).as_bytes())?;
    }
    emit(a.out.as_deref(), actions_csv(&out.actions).as_bytes())
}

fn bench_inputs(model: &ModelBundle, seed: u64) -> (Tensor, Vec<u32>) {
    calibration_sample(&model.config, seed, 0)
}

pub fn bench(a: BenchArgs) -> CmdResult {
    let base = load_model(&a.base)?;
    let accel = load_model(&a.accel)?;
    if base.config.image_size != accel.config.image_size {
        return Err(Failure::Input("base and accelerated models take different images".into()));
    }
    let (image, ids) = bench_inputs(&base, a.input_seed);

    let measure = |model: &ModelBundle, opts: &InferenceOptions| {
        let times = measure_latency(a.trials, || Ok(infer(model, &image, &ids, opts)?.times))?;
        Ok::<_, Failure>(
            estimate_breakdown(model, ids.len(), opts.token_prune.as_ref(), opts.cache.interval).with_times(&times),
        )
    };
    let base_opts = InferenceOptions::from_plan(&base);
    let accel_opts = InferenceOptions::from_plan(&accel);
    let base_report = measure(&base, &base_opts)?;
    let accel_report = measure(&accel, &accel_opts)?;
    let comparison = compare_reports(&base_report, &accel_report)?;
    let report = json!({
        "base": base_report,
        "accel": accel_report,
        "comparison": comparison,
    });
    emit(a.out.as_deref(), (serde_json::to_string_pretty(&report).unwrap() + "\n").as_bytes())?;

    if a.sweep {
        let mut csv = String::from("tokens,flops,language_flops,time_ms\n");
        for budget in SWEEP_BUDGETS.into_iter().filter(|&b| b <= base.config.n_visual_tokens) {
            let mut opts = base_opts.clone();
            opts.token_prune = (budget < base.config.n_visual_tokens).then(|| token_config_for(&base, budget));
            let r = measure(&base, &opts)?;
            csv.push_str(&format!("{budget},{},{},{:.3}\n", r.total_flops(), r.language.flops, r.total_ms()));
        }
        match &a.sweep_out {
            Some(p) => emit(Some(p), csv.as_bytes())?,
            None => eprint!("{csv}"),
        }
    }
    Ok(())
}

pub fn analyze(a: AnalyzeArgs) -> CmdResult {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    apply_calibration(&mut cfg, &a.calibration);
    cfg.validate()?;
    let model = load_model(&required(a.model, &cfg.paths.model, "model")?)?;
    let (sample_image, sample_ids) = calibration_sample(&model.config, cfg.calibration.seed, 0);
    let image = match a.image.or_else(|| cfg.paths.image.clone()) {
        Some(p) => read_image(&p, &model)?,
        None => sample_image,
    };
    let ids = a.token_ids.unwrap_or(sample_ids);
    fs::create_dir_all(&a.out_dir)?;

    let traces = calibration_traces(&model, cfg.calibration.samples, cfg.calibration.seed)?;
    let cos = interlayer_similarity(&traces)?;
    emit(Some(&a.out_dir.join("interlayer.csv")), layer_similarity_csv(&cos).as_bytes())?;

    let baseline = infer(&model, &image, &ids, &InferenceOptions::baseline(&model))?;
    let record = denoise_loop(
        &baseline.cognition,
        &model.action,
        &model.config,
        CachePolicy::disabled(),
        model.config.seed,
        &DenoiseOptions { record: true },
    )?;
    let temporal = if record.steps.len() >= 2 {
        temporal_similarity(&record.steps)?
    } else {
        Vec::new()
    };
    emit(Some(&a.out_dir.join("temporal.csv")), temporal_similarity_csv(&temporal).as_bytes())?;

    let k = model
        .plan
        .as_ref()
        .and_then(|p| p.token)
        .map_or(TokenPruneConfig::default().k_final, |t| t.k_final)
        .min(model.config.n_visual_tokens);
    let opts = InferenceOptions {
        token_prune: Some(token_config_for(&model, k)),
        ..InferenceOptions::baseline(&model)
    };
    let pruned = infer(&model, &image, &ids, &opts)?;
    let sel = pruned.selection.expect("token pruning was requested");
    emit(Some(&a.out_dir.join("selection.csv")), selection_csv(&sel).as_bytes())?;
    let grid = model.config.patch_grid()?;
    emit(Some(&a.out_dir.join("token_mask.pgm")), &token_mask_pgm(&sel, grid)?)?;
    println!("wrote interlayer.csv, temporal.csv, selection.csv, token_mask.pgm to {}", a.out_dir.display());
    Ok(())
}

fn off_by_one(t: usize, t_start: usize, interval: usize) -> bool {
    t == t_start || (t + 1) % interval == 0
}

pub fn verify(a: VerifyArgs) -> CmdResult {
    let mut opts = SuiteOptions {
        seed: a.seed,
        rule: if a.mutate_recompute { off_by_one } else { should_recompute },
        ..SuiteOptions::default()
    };
    if a.quick {
        opts.importance_traces = 20;
        opts.token_cases = 100;
        opts.cache_cases = 10;
    }
    let results = run_suite(&opts);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&results).unwrap());
    } else {
        for r in &results {
            println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        }
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verify(failed.join(", ")))
    }
}
