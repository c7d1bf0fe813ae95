// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::Serialize;
use serde_json::json;

use super::{sha256_hex, Artifacts, Command, Manifest, RunConfig, RunOutput};
use crate::efficiency::{check_against_masked, run_evicted, savings_formula, CostReport, Equivalence};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::interventions::{InterventionSpec, MaskVariant};
use crate::model::Transformer;
use crate::numerics::SeedRng;
use crate::prompting::Corpus;
use crate::sweeps::{
    ablation_drops, argmax_drop, detect_plateau, episodes_digest, lora_report, model_digest, phase_segments,
    sweep_context_mask, sweep_input, sweep_layer_mask, sweep_prompts, write_gate_grid, Phases, Plateau, SweepKind,
    SweepPoint, SweepReport,
};
use crate::training::{lora_scan, pretrain, save_gates, save_lora, train_gates};

struct Ctx<'a> {
    cfg: &'a RunConfig,
    corpus: Corpus,
    arts: Artifacts,
    summary: Vec<String>,
    checkpoint_hash: Option<String>,
}

/// Runs `cmd` against `cfg`, writing everything under `cfg.out`.
pub fn execute(cmd: Command, cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let out = cfg
        .out
        .as_ref()
        .ok_or_else(|| Error::Config("no output directory (set `out` or pass --out)".into()))?;
    if cmd == Command::BenchEvict && cfg.prompt.from_layer.is_none() {
        return Err(Error::Config("bench-evict needs prompt.from_layer (or --from-layer)".into()));
    }
    let corpus = Corpus::generate(&cfg.corpus, cfg.corpus_seed)?;
    let mut arts = Artifacts::create(out)?;
    arts.write("config.json", cfg.to_json()?.as_bytes())?;
    let mut ctx = Ctx {
        cfg,
        corpus,
        arts,
        summary: Vec::new(),
        checkpoint_hash: None,
    };
    let model = match cmd {
        Command::Pretrain => run_pretrain(&mut ctx)?,
        Command::BenchEvict => {
            let model = bench_model(&mut ctx)?;
            run_bench(&mut ctx, &model)?;
            model
        }
        _ => {
            let model = obtain_model(&mut ctx)?;
            match cmd {
                Command::Eval => run_eval(&mut ctx, &model)?,
                Command::SweepContext => run_sweep_context(&mut ctx, &model, false)?,
                Command::SweepInput => run_sweep_context(&mut ctx, &model, true)?,
                Command::SweepLayers => run_sweep_layers(&mut ctx, &model)?,
                Command::SweepPrompts => run_sweep_prompts(&mut ctx, &model)?,
                Command::LoraScan => run_lora_scan(&mut ctx, &model)?,
                Command::GateTrain => run_gate_train(&mut ctx, &model)?,
                Command::Report => run_report(&mut ctx, &model)?,
                Command::Pretrain | Command::BenchEvict => unreachable!("handled above"),
            }
            model
        }
    };
    let manifest = Manifest {
        command: cmd.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        corpus_seed: cfg.corpus_seed,
        config_hash: cfg.digest()?,
        model_hash: model_digest(&model)?,
        checkpoint_hash: ctx.checkpoint_hash.clone(),
        files: Default::default(),
    };
    let (out_dir, manifest) = ctx.arts.finish(manifest)?;
    Ok(RunOutput {
        out_dir,
        summary: ctx.summary,
        manifest,
    })
}

fn load_checkpoint(ctx: &mut Ctx<'_>) -> Result<Option<Transformer>> {
    let Some(path) = &ctx.cfg.checkpoint else {
        return Ok(None);
    };
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let model = Transformer::load(path)?;
    if model.config.vocab_size != ctx.corpus.vocab().len() {
        return Err(Error::Config(format!(
            "checkpoint vocabulary {} does not match the corpus vocabulary {}",
            model.config.vocab_size,
            ctx.corpus.vocab().len()
        )));
    }
    ctx.checkpoint_hash = Some(sha256_hex(&bytes));
    Ok(Some(model))
}

/// The configured checkpoint, or a model pretrained here from the config.
fn obtain_model(ctx: &mut Ctx<'_>) -> Result<Transformer> {
    if let Some(m) = load_checkpoint(ctx)? {
        return Ok(m);
    }
    let mc = ctx.cfg.model.resolve(ctx.corpus.vocab().len())?;
    Ok(pretrain(&ctx.corpus, &mc, &ctx.cfg.pretrain, ctx.cfg.seed)?.model)
}

/// Counting needs no training; without a checkpoint the model is freshly
/// initialized from the seed.
fn bench_model(ctx: &mut Ctx<'_>) -> Result<Transformer> {
    if let Some(m) = load_checkpoint(ctx)? {
        return Ok(m);
    }
    let mc = ctx.cfg.model.resolve(ctx.corpus.vocab().len())?;
    Transformer::init(mc, &mut SeedRng::new(ctx.cfg.seed).derive_label("init"))
}

fn point(kind: SweepKind, k: usize, instruction: bool, seed: u64, hash: String, metrics: crate::eval::EvalReport) -> SweepPoint {
    SweepPoint {
        kind,
        variant: None,
        layer: None,
        k,
        instruction,
        seed,
        episodes_hash: hash,
        metrics,
    }
}

fn evaluate_point(ctx: &Ctx<'_>, model: &Transformer, k: usize, instruction: bool, spec: &InterventionSpec) -> Result<(String, crate::eval::EvalReport)> {
    let axes = &ctx.cfg.sweep;
    let eps = ctx.corpus.test_episodes(k, instruction, axes.n_test, ctx.cfg.corpus_seed)?;
    let hash = episodes_digest(&eps, ctx.corpus.vocab(), model.config.max_positions)?;
    let report = evaluate(model, &eps, spec, ctx.corpus.vocab(), axes.max_new_tokens)?.report;
    Ok((hash, report))
}

fn write_sweep(ctx: &mut Ctx<'_>, report: &mut SweepReport) -> Result<()> {
    report.config_hash = ctx.cfg.digest()?;
    ctx.arts.write_jsonl("points.jsonl", &report.points)?;
    report.write_csv(&ctx.arts.path("points.csv"))?;
    ctx.arts.record("points.csv")
}

fn run_pretrain(ctx: &mut Ctx<'_>) -> Result<Transformer> {
    let mc = ctx.cfg.model.resolve(ctx.corpus.vocab().len())?;
    let out = pretrain(&ctx.corpus, &mc, &ctx.cfg.pretrain, ctx.cfg.seed)?;
    out.model.save(&ctx.arts.path("model.iclm"))?;
    ctx.arts.record("model.iclm")?;
    let mut losses = String::from("step,loss\n");
    for (i, l) in out.losses.iter().enumerate() {
        losses.push_str(&format!("{i},{l}\n"));
    }
    ctx.arts.write("losses.csv", losses.as_bytes())?;
    let k = ctx.cfg.prompt.k;
    let mut points = Vec::new();
    for (k, instruction) in [(k, true), (k, false), (0, true)] {
        let (hash, metrics) = evaluate_point(ctx, &out.model, k, instruction, &InterventionSpec::none())?;
        ctx.summary.push(format!(
            "k={k} instruction={instruction}: seq_accuracy {:.4} bleu {:.2}",
            metrics.seq_accuracy, metrics.bleu
        ));
        points.push(point(SweepKind::Baseline, k, instruction, ctx.cfg.seed, hash, metrics));
    }
    ctx.arts.write_jsonl("points.jsonl", &points)?;
    let tail = &out.losses[out.losses.len().saturating_sub(100)..];
    let tail_mean = if tail.is_empty() { f64::NAN } else { tail.iter().sum::<f64>() / tail.len() as f64 };
    ctx.arts.write_json(
        "report.json",
        &json!({
            "steps": out.losses.len(),
            "final_loss": out.losses.last(),
            "mean_loss_last_100": tail_mean,
            "points": points,
        }),
    )?;
    ctx.summary.push(format!("mean loss over the last 100 steps {tail_mean:.4}"));
    Ok(out.model)
}

fn run_eval(ctx: &mut Ctx<'_>, model: &Transformer) -> Result<()> {
    let p = ctx.cfg.prompt.clone();
    let mut points = Vec::new();
    let (hash, metrics) = evaluate_point(ctx, model, p.k, p.instruction, &InterventionSpec::none())?;
    points.push(point(SweepKind::Baseline, p.k, p.instruction, ctx.cfg.seed, hash, metrics));
    if let Some(from) = p.from_layer {
        let spec = InterventionSpec::context_mask(p.variant, from);
        let (hash, metrics) = evaluate_point(ctx, model, p.k, p.instruction, &spec)?;
        let mut pt = point(SweepKind::ContextMask, p.k, p.instruction, ctx.cfg.seed, hash, metrics);
        pt.variant = Some(p.variant);
        pt.layer = Some(from);
        points.push(pt);
    }
    for pt in &points {
        ctx.summary.push(format!(
            "{:?} {}: seq_accuracy {:.4} bleu {:.2}",
            pt.kind,
            pt.layer.map(|l| format!("from layer {l}")).unwrap_or_default(),
            pt.metrics.seq_accuracy,
            pt.metrics.bleu
        ));
    }
    let mut report = SweepReport {
        name: "eval".into(),
        n_layers: model.config.n_layers,
        model_hash: model_digest(model)?,
        config_hash: String::new(),
        seed: ctx.cfg.seed,
        points,
    };
    write_sweep(ctx, &mut report)?;
    ctx.arts.write_json("report.json", &report)
}

/// Curve of one `(variant, k)` with its plateau and phases.
#[derive(Debug, Clone, Serialize)]
struct CurveSummary {
    variant: MaskVariant,
    k: usize,
    metric: crate::sweeps::Metric,
    values: Vec<f64>,
    plateau: Plateau,
    phases: Phases,
}

fn summarize(ctx: &Ctx<'_>, report: &SweepReport, variant: MaskVariant, k: usize) -> Result<CurveSummary> {
    let axes = &ctx.cfg.sweep;
    let values = report.curve(variant, k, axes.metric)?;
    Ok(CurveSummary {
        variant,
        k,
        metric: axes.metric,
        plateau: detect_plateau(&values, axes.epsilon())?,
        phases: phase_segments(&values, &axes.phases)?,
        values,
    })
}

/// Concatenates reports of one model, keeping each baseline point once.
fn merge(name: &str, parts: Vec<SweepReport>) -> Result<SweepReport> {
    let mut it = parts.into_iter();
    let mut merged = it
        .next()
        .ok_or_else(|| Error::Contract("nothing to merge".into()))?;
    merged.name = name.to_string();
    for part in it {
        for p in part.points {
            let dup = p.kind == SweepKind::Baseline
                && merged.points.iter().any(|q| q.kind == SweepKind::Baseline && q.k == p.k && q.instruction == p.instruction);
            if !dup {
                merged.points.push(p);
            }
        }
    }
    Ok(merged)
}

fn run_sweep_context(ctx: &mut Ctx<'_>, model: &Transformer, input: bool) -> Result<()> {
    let k = ctx.cfg.prompt.k;
    let opts = ctx.cfg.sweep.options();
    let seed = ctx.cfg.corpus_seed;
    let variants: Vec<MaskVariant> = if input {
        vec![MaskVariant::InputMask]
    } else {
        ctx.cfg.sweep.variants.clone()
    };
    let mut parts = Vec::new();
    for &v in &variants {
        parts.push(if input {
            sweep_input(model, &ctx.corpus, k, seed, &opts)?
        } else {
            sweep_context_mask(model, &ctx.corpus, v, k, seed, &opts)?
        });
    }
    let mut report = merge(if input { "input_mask" } else { "context_mask" }, parts)?;
    let curves = variants
        .iter()
        .map(|&v| summarize(ctx, &report, v, k))
        .collect::<Result<Vec<_>>>()?;
    for c in &curves {
        ctx.summary.push(format!(
            "{} k={}: plateau at layer {}{} curve {:?}",
            c.variant,
            c.k,
            c.plateau.layer,
            if c.plateau.flagged { " (flagged)" } else { "" },
            c.values
        ));
    }
    write_sweep(ctx, &mut report)?;
    ctx.arts.write_json("report.json", &json!({ "report": report, "curves": curves }))
}

fn layer_drops(ctx: &Ctx<'_>, report: &SweepReport) -> Result<Vec<serde_json::Value>> {
    ctx.cfg
        .sweep
        .layer_regimes
        .iter()
        .map(|&(k, instruction)| {
            let drops = ablation_drops(report, k, instruction, ctx.cfg.sweep.metric)?;
            Ok(json!({ "k": k, "instruction": instruction, "drops": drops, "argmax_drop_layer": argmax_drop(&drops) }))
        })
        .collect()
}

fn run_sweep_layers(ctx: &mut Ctx<'_>, model: &Transformer) -> Result<()> {
    let opts = ctx.cfg.sweep.options();
    let mut report = sweep_layer_mask(model, &ctx.corpus, &ctx.cfg.sweep.layer_regimes, ctx.cfg.corpus_seed, &opts)?;
    let drops = layer_drops(ctx, &report)?;
    for d in &drops {
        ctx.summary.push(d.to_string());
    }
    write_sweep(ctx, &mut report)?;
    ctx.arts.write_json("report.json", &json!({ "report": report, "drops": drops }))
}

fn run_sweep_prompts(ctx: &mut Ctx<'_>, model: &Transformer) -> Result<()> {
    let v = ctx.cfg.prompt.variant;
    let opts = ctx.cfg.sweep.options();
    let ks = ctx.cfg.sweep.ks.clone();
    let mut report = sweep_prompts(model, &ctx.corpus, v, &ks, ctx.cfg.corpus_seed, &opts)?;
    let curves = ks.iter().map(|&k| summarize(ctx, &report, v, k)).collect::<Result<Vec<_>>>()?;
    for c in &curves {
        ctx.summary.push(format!("{} k={}: plateau at layer {}", c.variant, c.k, c.plateau.layer));
    }
    write_sweep(ctx, &mut report)?;
    ctx.arts.write_json("report.json", &json!({ "report": report, "curves": curves }))
}

fn run_lora_scan(ctx: &mut Ctx<'_>, model: &Transformer) -> Result<()> {
    let outcomes = lora_scan(model, &ctx.corpus, &ctx.cfg.lora, ctx.cfg.seed)?;
    for o in &outcomes {
        let name = format!("lora_layer{}.iclm", o.layer);
        save_lora(&o.adapter, o.layer, &ctx.arts.path(&name))?;
        ctx.arts.record(&name)?;
    }
    let (_, dev) = ctx.corpus.adapt_split();
    let dev_hash = sha256_hex(serde_json::to_string(dev)?.as_bytes());
    let mut report = lora_report(model, &outcomes, ctx.cfg.seed, &dev_hash)?;
    let metric = ctx.cfg.sweep.metric;
    let best = report
        .points
        .iter()
        .fold(None::<&SweepPoint>, |b, p| match b {
            Some(q) if metric.of(&q.metrics) >= metric.of(&p.metrics) => Some(q),
            _ => Some(p),
        })
        .and_then(|p| p.layer);
    // the task-recognition layer of the same checkpoint, for comparison
    let (v, k) = (ctx.cfg.prompt.variant, ctx.cfg.prompt.k);
    let ctx_report = sweep_context_mask(model, &ctx.corpus, v, k, ctx.cfg.corpus_seed, &ctx.cfg.sweep.options())?;
    let curve = summarize(ctx, &ctx_report, v, k)?;
    ctx.summary.push(format!(
        "best adapter layer {best:?}; plateau at layer {} ({v}, k={k})",
        curve.plateau.layer
    ));
    let training: Vec<_> = outcomes
        .iter()
        .map(|o| json!({ "layer": o.layer, "dev_nll": o.dev_nll, "best_epoch": o.best_epoch }))
        .collect();
    write_sweep(ctx, &mut report)?;
    ctx.arts.write_json(
        "report.json",
        &json!({ "report": report, "best_layer": best, "context_curve": curve, "training": training }),
    )
}

fn run_gate_train(ctx: &mut Ctx<'_>, model: &Transformer) -> Result<()> {
    let gcfg = &ctx.cfg.gates;
    let out = train_gates(model, &ctx.corpus, gcfg, ctx.cfg.seed)?;
    save_gates(&out.gates, &ctx.arts.path("gates.iclm"))?;
    ctx.arts.record("gates.iclm")?;
    write_gate_grid(&out.gates, &ctx.arts.path("gates_grid.csv"))?;
    ctx.arts.record("gates_grid.csv")?;
    let k = gcfg.regime.k();
    let (hash, ungated) = evaluate_point(ctx, model, k, true, &InterventionSpec::none())?;
    let (_, gated) = evaluate_point(ctx, model, k, true, &out.gates.spec())?;
    let seed = ctx.cfg.seed;
    let points = vec![
        point(SweepKind::Baseline, k, true, seed, hash.clone(), ungated.clone()),
        point(SweepKind::Gated, k, true, seed, hash, gated.clone()),
    ];
    let grid = out.gates.eval_gates();
    let min_gate = grid.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    ctx.summary.push(format!(
        "lambda {}: {} of {} heads masked; seq_accuracy {:.4} -> {:.4}; min gate {min_gate:.4}",
        gcfg.lambda,
        out.masked_heads.len(),
        grid.iter().map(Vec::len).sum::<usize>(),
        ungated.seq_accuracy,
        gated.seq_accuracy
    ));
    ctx.arts.write_jsonl("points.jsonl", &points)?;
    ctx.arts.write_json(
        "report.json",
        &json!({
            "lambda": gcfg.lambda,
            "masked_heads": out.masked_heads,
            "expected_l0": out.gates.expected_l0(),
            "min_gate": min_gate,
            "gates": grid,
            "best_epoch": out.best_epoch,
            "dev_objective": out.dev_objective,
            "dev_nll": out.dev_nll,
            "points": points,
        }),
    )
}

#[derive(Debug, Clone, Serialize)]
struct BenchRow {
    item: usize,
    tokens: Vec<u32>,
    equivalence: Equivalence,
    cost: CostReport,
}

fn run_bench(ctx: &mut Ctx<'_>, model: &Transformer) -> Result<()> {
    let p = &ctx.cfg.prompt;
    let r = p.from_layer.expect("checked in execute");
    let n = model.config.n_layers;
    let max_new = ctx.cfg.sweep.max_new_tokens;
    let eps = ctx
        .corpus
        .test_episodes(p.k, p.variant.uses_instruction(), ctx.cfg.sweep.n_test, ctx.cfg.corpus_seed)?;
    let mut rows = Vec::new();
    for (item, ep) in eps.iter().enumerate() {
        let (tokens, spans) = ep.format(ctx.corpus.vocab(), model.config.max_positions)?;
        let run = run_evicted(model, &tokens, &spans, p.variant, r, max_new)?;
        let equivalence = check_against_masked(model, &tokens, &spans, &run, max_new)?;
        rows.push(BenchRow {
            item,
            tokens: run.tokens.clone(),
            equivalence,
            cost: run.cost,
        });
    }
    let formula = if r <= n { savings_formula(n, r, p.k)? } else { 0.0 };
    let base: u64 = rows.iter().map(|x| x.cost.baseline_total()).sum();
    let evicted: u64 = rows.iter().map(|x| x.cost.evicted_total()).sum();
    let kv_base: usize = rows.iter().map(|x| x.cost.baseline_kv_entries.iter().sum::<usize>()).sum();
    let kv_evicted: usize = rows.iter().map(|x| x.cost.evicted_kv_entries.iter().sum::<usize>()).sum();
    let frac = |e: f64, b: f64| if b == 0.0 { 0.0 } else { 1.0 - e / b };
    let measured = frac(evicted as f64, base as f64);
    let kv = frac(kv_evicted as f64, kv_base as f64);
    let identical = rows.iter().all(|x| x.equivalence.tokens_identical);
    let max_diff = rows.iter().map(|x| x.equivalence.max_abs_logit_diff).fold(0.0, f64::max);
    let layer_matched = rows.first().map_or(0.0, |x| x.cost.layer_matched_formula_fraction);
    ctx.summary.push(format!("formula_savings_fraction {formula}"));
    ctx.summary.push(format!("layer_matched_formula_fraction {layer_matched}"));
    ctx.summary.push(format!("measured_savings_fraction {measured:.6}"));
    ctx.summary.push(format!("kv_savings_fraction {kv:.6}"));
    ctx.summary.push(format!("tokens_identical {identical} max_abs_logit_diff {max_diff:e}"));
    ctx.arts.write_jsonl("points.jsonl", &rows)?;
    ctx.arts.write_json(
        "report.json",
        &json!({
            "n_layers": n,
            "from_layer": r,
            "k": p.k,
            "variant": p.variant,
            "items": rows.len(),
            "formula_savings_fraction": formula,
            "layer_matched_formula_fraction": layer_matched,
            "measured_savings_fraction": measured,
            "kv_savings_fraction": kv,
            "baseline_attention_pairs": base,
            "evicted_attention_pairs": evicted,
            "baseline_kv_entries": kv_base,
            "evicted_kv_entries": kv_evicted,
            "tokens_identical": identical,
            "max_abs_logit_diff": max_diff,
        }),
    )
}

fn run_report(ctx: &mut Ctx<'_>, model: &Transformer) -> Result<()> {
    let v = ctx.cfg.prompt.variant;
    let opts = ctx.cfg.sweep.options();
    let ks = ctx.cfg.sweep.ks.clone();
    let seed = ctx.cfg.corpus_seed;
    let prompts = sweep_prompts(model, &ctx.corpus, v, &ks, seed, &opts)?;
    let layers = sweep_layer_mask(model, &ctx.corpus, &ctx.cfg.sweep.layer_regimes, seed, &opts)?;
    let curves = ks.iter().map(|&k| summarize(ctx, &prompts, v, k)).collect::<Result<Vec<_>>>()?;
    let drops = layer_drops(ctx, &layers)?;
    let k = ctx.cfg.prompt.k;
    let main = curves.iter().find(|c| c.k == k);
    let regime_drops = ablation_drops(&layers, k, v.uses_instruction(), ctx.cfg.sweep.metric).ok();
    let critical = regime_drops.as_deref().and_then(argmax_drop);
    let inside_rise = match (main.and_then(|c| c.phases.rise), critical) {
        (Some(rise), Some(layer)) => Some(rise.contains(layer)),
        _ => None,
    };
    let plateaus: Vec<_> = curves.iter().map(|c| json!({ "k": c.k, "layer": c.plateau.layer })).collect();
    ctx.summary.push(format!("plateaus {}", serde_json::to_string(&plateaus)?));
    ctx.summary.push(format!("critical layer {critical:?}; inside steep rise: {inside_rise:?}"));
    let mut all = merge("report", vec![prompts, layers])?;
    write_sweep(ctx, &mut all)?;
    ctx.arts.write_json(
        "report.json",
        &json!({
            "report": all,
            "curves": curves,
            "drops": drops,
            "critical_layer": critical,
            "critical_inside_rise": inside_rise,
        }),
    )
}
