use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::{json, Value};
use segfuse_core::ablation::{ablation_run, AblationConfig, Protocol};
use segfuse_core::attention::AttentionParams;
use segfuse_core::checkpoint::{Checkpoint, CheckpointMeta, SplitRecord};
use segfuse_core::evaluation::{evaluate_with_attention, EvalRegion};
use segfuse_core::labels::Modality;
use segfuse_core::model::{Model, ModelConfig};
use segfuse_core::phantom::{generate_dataset, PhantomRanges, PhantomSpec};
use segfuse_core::prompting::{segment_volume, SegmentOptions, Variant};
use segfuse_core::report::{
    ablation_table, attention_csv, attention_records, attention_summary_table, bar_chart_svg, modality_table,
    parse_attention_csv, parse_report_csv, run_label, subregion_table, summarize, AttentionRecord,
};
use segfuse_core::training::{train, TrainConfig};
use segfuse_core::volume_io::{load_case, load_raw_case, preprocess_case, save_case, save_prediction, PreprocessOptions};
use segfuse_core::Error;

use crate::args::*;
use crate::data::{create_dir, list_cases, load_cases, subset, write};
use crate::error::{CliError, CliResult};
use crate::manifest::{manifest_for_file, Recorder};

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

/// Recursively overlays `patch` onto `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn read_json(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Core(Error::Config(format!("{}: {e}", path.display()))))
}

fn train_config(preset: Preset, patch: Option<Value>) -> CliResult<TrainConfig> {
    let mut base = to_json(&match preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Full => TrainConfig::full_scale(),
    });
    if let Some(p) = patch {
        merge(&mut base, p);
    }
    let cfg: TrainConfig =
        serde_json::from_value(base).map_err(|e| CliError::Core(Error::Config(format!("training config: {e}"))))?;
    cfg.validate()?;
    Ok(cfg)
}

fn model_config(preset: Preset, single: Option<Modality>) -> ModelConfig {
    let cfg = match preset {
        Preset::Desk => ModelConfig::desk(),
        Preset::Full => ModelConfig::full_scale(),
    };
    if single.is_some() {
        cfg.with_in_channels(1)
    } else {
        cfg
    }
}

fn protocol(split: &SplitArgs) -> Option<Protocol> {
    match (split.cv, split.split) {
        (Some(k), _) => Some(Protocol::Cv(k)),
        (None, Some(f)) => Some(Protocol::Split(f)),
        (None, None) => None,
    }
}

fn segment_options(variant: Variant, tau: f64, args: &SegmentArgs) -> CliResult<SegmentOptions> {
    let d = SegmentOptions::default();
    let opts = SegmentOptions {
        tau: args.tau.unwrap_or(tau),
        refine_iters: args.refine_iters.unwrap_or(d.refine_iters),
        margin: args.margin.unwrap_or(d.margin),
        variant,
    };
    opts.validate()?;
    Ok(opts)
}

fn modalities_for(single: Option<Modality>) -> Vec<Modality> {
    match single {
        Some(m) => vec![m],
        None => Modality::ORDER.to_vec(),
    }
}

fn single_of(meta: &CheckpointMeta) -> Option<Modality> {
    (meta.modalities.len() == 1).then(|| meta.modalities[0])
}

pub fn phantom(args: PhantomArgs, rec: &Recorder) -> CliResult<()> {
    if args.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let (d, h, w) = args.size;
    let (tumor_center, radii) = geometry(args.size);
    let base = PhantomSpec {
        size: args.size,
        tumor_center,
        radii,
        noise_sigma: args.noise,
        seed: args.seed,
    };
    let ranges = if args.fixed {
        PhantomRanges::none(args.noise)
    } else {
        PhantomRanges::standard(&base)
    };
    let cases = generate_dataset(args.n, &base, &ranges, args.seed)?;
    create_dir(&args.out)?;
    let width = args.n.to_string().len().max(3);
    let mut outputs = Vec::with_capacity(cases.len());
    for (i, case) in cases.iter().enumerate() {
        let path = args.out.join(format!("case_{i:0width$}.npz"));
        save_case(case, &path)?;
        outputs.push(path);
    }
    eprintln!("wrote {} phantoms to {}", cases.len(), args.out.display());
    let config = json!({
        "n": args.n,
        "size": [d, h, w],
        "noise": args.noise,
        "fixed": args.fixed,
        "radii": [base.radii.0, base.radii.1, base.radii.2],
    });
    rec.finish(&args.out.join("manifest.json"), "phantom", config, Some(args.seed), vec![], outputs)
}

type Triple = (f64, f64, f64);

/// Nominal geometry for the default size; otherwise a centered tumor scaled
/// with the in-plane size and shrunk until a 10% larger ball still fits.
fn geometry(size: (usize, usize, usize)) -> (Triple, Triple) {
    let nominal = PhantomSpec::default();
    if size == nominal.size {
        return (nominal.tumor_center, nominal.radii);
    }
    let (d, h, w) = size;
    let half = |n: usize| n.saturating_sub(1) as f64 / 2.0;
    let room = half(d).min(half(h)).min(half(w));
    let (re, rt, rn) = nominal.radii;
    let f = (h as f64 / nominal.size.1 as f64)
        .min(w as f64 / nominal.size.2 as f64)
        .min(room / (re * 1.1));
    ((half(d), half(h), half(w)), (re * f, rt * f, rn * f))
}

pub fn preprocess(args: PreprocessArgs, rec: &Recorder) -> CliResult<()> {
    use rayon::prelude::*;
    let inputs = list_cases(&args.input)?;
    create_dir(&args.out)?;
    let opts = PreprocessOptions {
        lo_pct: args.lo,
        hi_pct: args.hi,
        single_modality: args.single_modality,
    };
    let outputs: Vec<PathBuf> = inputs
        .par_iter()
        .map(|(id, path)| {
            let raw = load_raw_case(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let (archive, offset) = preprocess_case(&raw, &opts)?;
            let out = args.out.join(format!("{id}.npz"));
            save_case(&archive, &out)?;
            Ok::<_, CliError>((out, offset))
        })
        .collect::<CliResult<Vec<_>>>()?
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    eprintln!("preprocessed {} cases into {}", outputs.len(), args.out.display());
    let config = json!({
        "lo": args.lo,
        "hi": args.hi,
        "single_modality": args.single_modality.map(|m| m.name()),
    });
    let inputs = inputs.into_iter().map(|(_, p)| p).collect();
    rec.finish(&args.out.join("manifest.json"), "preprocess", config, None, inputs, outputs)
}

pub fn train_cmd(args: TrainArgs, rec: &Recorder) -> CliResult<()> {
    let patch = args.config.as_deref().map(read_json).transpose()?;
    let mut cfg = train_config(args.preset, patch)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.base_lr = lr;
    }
    cfg.validate()?;
    let variant = Variant {
        attention: !args.no_attention,
        prompting: !args.no_prompting,
    };
    let single = args.single_modality;
    let model_cfg = model_config(args.preset, single);
    let cases = load_cases(&args.data, single)?;
    let ids: Vec<String> = cases.iter().map(|(id, _)| id.clone()).collect();
    let (train_ids, val_ids, split) = if args.all {
        (ids.clone(), Vec::new(), None)
    } else {
        let protocol = protocol(&args.split).unwrap_or_default();
        let plan = protocol.plan(&ids, cfg.seed)?;
        let fold = match protocol {
            Protocol::Split(_) => 0,
            Protocol::Cv(k) if args.fold < k => args.fold,
            Protocol::Cv(k) => return Err(CliError::Usage(format!("--fold {} out of range for {k} folds", args.fold))),
        };
        let (tr, te) = plan.split.train_test(fold);
        let record = SplitRecord {
            protocol,
            fold,
            seed: cfg.seed,
            hash: plan.split.hash(),
        };
        (tr, te, Some(record))
    };
    let train_cases: Vec<_> = subset(&cases, &train_ids).into_iter().map(|(_, c)| c).collect();
    let val_cases: Vec<_> = subset(&cases, &val_ids).into_iter().map(|(_, c)| c).collect();
    eprintln!(
        "training {} on {} cases ({} held out), {} epochs",
        variant.name(),
        train_cases.len(),
        val_cases.len(),
        cfg.epochs
    );
    let mut model = Model::build(model_cfg.clone(), cfg.seed)?;
    let mut attention = AttentionParams::zeros(model_cfg.prompt_embed_dim);
    let history = train(&mut model, &mut attention, &train_cases, &val_cases, &cfg, variant, |p| {
        let r = p.record;
        eprintln!(
            "epoch {}/{}  lr {:.2e}  ce {:.4}  iou {:.4}  val dice {:.3}/{:.3}/{:.3}",
            r.epoch, p.epochs, r.lr, r.loss_ce, r.loss_iou, r.dice[0], r.dice[1], r.dice[2]
        );
    })?;
    let meta = CheckpointMeta {
        model: model_cfg,
        variant,
        modalities: modalities_for(single),
        seed: cfg.seed,
        split,
    };
    let ckpt = Checkpoint::new(meta.clone(), model, attention)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    ckpt.save(&args.out)?;
    let history_path = args.history.clone().unwrap_or_else(|| args.out.with_extension("history.csv"));
    write(&history_path, &history.to_csv())?;
    eprintln!("saved {}", args.out.display());
    let config = json!({ "train": to_json(&cfg), "checkpoint": to_json(&meta), "data": args.data });
    rec.finish(
        &manifest_for_file(&args.out),
        "train",
        config,
        Some(cfg.seed),
        vec![args.data.clone()],
        vec![args.out.clone(), history_path],
    )
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| match e {
        Error::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => CliError::Usage(format!("{}: {other}", path.display())),
    })
}

pub fn infer(args: InferArgs, rec: &Recorder) -> CliResult<()> {
    let ckpt = load_checkpoint(&args.model)?;
    let single = single_of(&ckpt.meta);
    let case = load_case(&args.case).map_err(|e| CliError::Usage(format!("{}: {e}", args.case.display())))?;
    let case = match single {
        Some(m) => case.select_channel(m)?,
        None => case,
    };
    let opts = segment_options(ckpt.meta.variant, SegmentOptions::default().tau, &args.segment)?;
    let volume = case.volume_with(ckpt.meta.modalities.clone());
    let out = segment_volume(&ckpt.model, &ckpt.attention, &volume, &opts)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_prediction(&out.mask, case.spacing, &args.out)?;
    let mut outputs = vec![args.out.clone()];
    if let Some(path) = &args.attention {
        let id = args.case.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        write(path, &attention_csv(&attention_records(&id, &out.alphas), &ckpt.meta.modalities))?;
        outputs.push(path.clone());
    }
    eprintln!("wrote {}", args.out.display());
    let config = json!({ "segment": to_json(&opts), "checkpoint": to_json(&ckpt.meta) });
    rec.finish(
        &manifest_for_file(&args.out),
        "infer",
        config,
        Some(ckpt.meta.seed),
        vec![args.model.clone(), args.case.clone()],
        outputs,
    )
}

pub fn eval(args: EvalArgs, rec: &Recorder) -> CliResult<()> {
    let ckpt = load_checkpoint(&args.model)?;
    let meta = &ckpt.meta;
    let single = single_of(meta);
    let cases = load_cases(&args.data, single)?;
    let ids: Vec<String> = cases.iter().map(|(id, _)| id.clone()).collect();
    let (test_ids, fold, seed) = if args.all {
        (ids.clone(), 0, args.seed.unwrap_or(meta.seed))
    } else {
        let trained = meta.split.as_ref();
        let protocol = protocol(&args.split)
            .or(trained.map(|s| s.protocol))
            .unwrap_or_default();
        let seed = args.seed.or(trained.map(|s| s.seed)).unwrap_or(meta.seed);
        let fold = match protocol {
            Protocol::Split(_) => 0,
            Protocol::Cv(_) => args.fold.or(trained.map(|s| s.fold)).unwrap_or(0),
        };
        let plan = protocol.plan(&ids, seed)?;
        if fold >= plan.split.k() {
            return Err(CliError::Usage(format!("--fold {fold} out of range")));
        }
        if let Some(t) = trained {
            let same = t.protocol == protocol && t.fold == fold && t.seed == seed && t.hash == plan.split.hash();
            if !same {
                return Err(CliError::Usage(
                    "requested split does not match the split the checkpoint was trained on; \
                     pass --all to score every case"
                        .into(),
                ));
            }
        }
        (plan.split.train_test(fold).1, fold, seed)
    };
    let test = subset(&cases, &test_ids);
    let opts = segment_options(meta.variant, SegmentOptions::default().tau, &args.segment)?;
    let (mut report, alphas) = evaluate_with_attention(&ckpt.model, &ckpt.attention, &test, &opts, fold, seed)?;
    report.variant = run_label(meta.variant, single);
    for (id, why) in &report.failed {
        eprintln!("warning: case {id} failed: {why}");
    }
    if report.cases.is_empty() {
        return Err(CliError::Runtime("every case failed".into()));
    }
    write(&args.out, &report.to_csv())?;
    let attention_path = args.attention.clone().unwrap_or_else(|| args.out.with_extension("attention.csv"));
    let records: Vec<AttentionRecord> = alphas.iter().flat_map(|(id, a)| attention_records(id, a)).collect();
    write(&attention_path, &attention_csv(&records, &meta.modalities))?;
    for r in EvalRegion::ALL {
        let (m, s) = report.dice_summary(r);
        eprintln!("{:>4} dice {m:.4} ± {s:.4}", r.name());
    }
    let config = json!({
        "segment": to_json(&opts),
        "checkpoint": to_json(meta),
        "fold": fold,
        "cases": test_ids,
    });
    rec.finish(
        &manifest_for_file(&args.out),
        "eval",
        config,
        Some(seed),
        vec![args.model.clone(), args.data.clone()],
        vec![args.out.clone(), attention_path],
    )
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AblateFile {
    #[serde(default)]
    train: Option<Value>,
    #[serde(default)]
    model: Option<ModelConfig>,
    #[serde(default)]
    tau: Option<f64>,
    #[serde(default)]
    refine_iters: Option<usize>,
    #[serde(default)]
    margin: Option<usize>,
    #[serde(default)]
    protocol: Option<Protocol>,
}

pub fn ablate(args: AblateArgs, rec: &Recorder) -> CliResult<()> {
    let file: AblateFile = match &args.config {
        Some(p) => serde_json::from_value(read_json(p)?)
            .map_err(|e| CliError::Core(Error::Config(format!("{}: {e}", p.display()))))?,
        None => AblateFile::default(),
    };
    let mut train_cfg = train_config(args.preset, file.train.clone())?;
    if let Some(s) = args.seed {
        train_cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        train_cfg.epochs = e;
    }
    train_cfg.validate()?;
    let single = args.single_modality;
    let mut model_cfg = file.model.clone().unwrap_or_else(|| model_config(args.preset, None));
    if single.is_some() {
        model_cfg = model_cfg.with_in_channels(1);
    }
    let segment = SegmentArgs {
        tau: args.segment.tau.or(file.tau),
        refine_iters: args.segment.refine_iters.or(file.refine_iters),
        margin: args.segment.margin.or(file.margin),
    };
    let segment = segment_options(Variant::FULL, train_cfg.tau, &segment)?;
    let variants = match &args.variants {
        Some(names) => names.iter().map(|n| Variant::from_name(n.trim())).collect::<Result<Vec<_>, _>>()?,
        None => Variant::ALL.to_vec(),
    };
    let protocol = protocol(&args.split).or(file.protocol).unwrap_or_default();
    let cfg = AblationConfig {
        model: model_cfg,
        train: train_cfg,
        segment,
        protocol,
        variants,
    };
    let cases = load_cases(&args.data, single)?;
    let mut result = ablation_run(&cases, &cfg, |v, fold, p| {
        let r = p.record;
        eprintln!(
            "{} fold {fold}: epoch {}/{}  ce {:.4}  iou {:.4}",
            v.name(),
            r.epoch,
            p.epochs,
            r.loss_ce,
            r.loss_iou
        );
    })?;
    for run in &mut result.runs {
        for r in &mut run.reports {
            r.variant = run_label(run.variant, single);
        }
    }
    let csv_path = args.out.with_extension("csv");
    let svg_path = args.out.with_extension("svg");
    write(&args.out, &result.table())?;
    write(&csv_path, &result.to_csv())?;
    let regions = [EvalRegion::Ncr, EvalRegion::Ed, EvalRegion::Et, EvalRegion::Wt];
    write(&svg_path, &bar_chart_svg("Dice by variant", &result.summaries(), &regions))?;
    eprint!("{}", result.table());
    eprintln!("split hash {}", result.split_hash);
    let config = json!({
        "train": to_json(&cfg.train),
        "model": to_json(&cfg.model),
        "segment": to_json(&cfg.segment),
        "protocol": to_json(&cfg.protocol),
        "variants": cfg.variants.iter().map(|v| v.name()).collect::<Vec<_>>(),
        "single_modality": single.map(|m| m.name()),
        "split_hash": result.split_hash,
        "failure": result.failure.as_ref().map(|(v, e)| format!("{}: {e}", v.name())),
    });
    rec.finish(
        &manifest_for_file(&args.out),
        "ablate",
        config,
        Some(cfg.train.seed),
        vec![args.data.clone()],
        vec![args.out.clone(), csv_path, svg_path],
    )?;
    match result.failure {
        Some((v, e)) => Err(CliError::Runtime(format!("variant {} failed: {e}", v.name()))),
        None => Ok(()),
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(CliError::io(path))
}

fn with_path(path: &Path) -> impl FnOnce(Error) -> CliError + '_ {
    move |e| CliError::Usage(format!("{}: {e}", path.display()))
}

pub fn report(args: ReportArgs, rec: &Recorder) -> CliResult<()> {
    let mut rows = Vec::new();
    for p in &args.reports {
        rows.extend(parse_report_csv(&read_text(p)?).map_err(with_path(p))?);
    }
    let runs = summarize(&rows);
    let mut sections = vec![
        ("Ablation", ablation_table(&runs)),
        ("Whole tumor by modality", modality_table(&runs)),
        ("Sub-regions by modality", subregion_table(&runs)),
    ];
    let mut modalities: Option<Vec<String>> = None;
    let mut records = Vec::new();
    for p in &args.attention {
        let (mods, recs) = parse_attention_csv(&read_text(p)?).map_err(with_path(p))?;
        if modalities.as_ref().is_some_and(|m| *m != mods) {
            return Err(CliError::Usage(format!("{}: modality columns differ from earlier files", p.display())));
        }
        modalities = Some(mods);
        records.extend(recs);
    }
    if let Some(mods) = &modalities {
        sections.push(("Attention weights", attention_summary_table(mods, &records)));
    }
    create_dir(&args.out)?;
    let mut outputs = Vec::new();
    let mut combined = String::new();
    for (title, body) in &sections {
        combined.push_str(&format!("## {title}\n\n{body}\n"));
        let name = title.to_lowercase().replace(' ', "_") + ".md";
        let path = args.out.join(name);
        write(&path, body)?;
        outputs.push(path);
    }
    let report_path = args.out.join("report.md");
    write(&report_path, &combined)?;
    outputs.push(report_path);
    let svg = args.out.join("dice.svg");
    write(&svg, &bar_chart_svg("Dice by run", &runs, &EvalRegion::ALL))?;
    outputs.push(svg);
    print!("{combined}");
    let mut inputs = args.reports.clone();
    inputs.extend(args.attention.iter().cloned());
    let config = json!({ "runs": runs.iter().map(|r| r.label.clone()).collect::<Vec<_>>() });
    rec.finish(&args.out.join("manifest.json"), "report", config, None, inputs, outputs)
}
