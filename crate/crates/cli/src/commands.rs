use rayon::prelude::*;
use serde::Serialize;

use ccl::ablation::{loss_config, mean_std, run_cell, CellResult, Mode, Variant};
use ccl::data::{generate_synthetic, save_dataset, SyntheticConfig};
use ccl::eval::{knn_retrieval, per_class_accuracy, predict, top1_accuracy};
use ccl::gradcheck::{grad_check, random_case};
use ccl::model::{load_checkpoint, save_checkpoint};
use ccl::trainer::fit;
use ccl::{Dataset64, Params64};

use crate::config::{read_toml, resolve_train_config, synthetic, DataOrigin};
use crate::record::{create_dir, jsonl, table, write_file, RunRecord};
use crate::{invalid, runtime, AblateArgs, CliResult, EvalArgs, GenDataArgs, GradcheckArgs, TrainArgs};

pub fn gen_data(args: &GenDataArgs) -> CliResult<()> {
    let mut cfg = match &args.config {
        Some(path) => read_toml(path)?,
        None => SyntheticConfig::preset(&args.preset)?,
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.classes {
        cfg.num_classes = v;
    }
    if let Some(v) = args.train_per_class {
        cfg.train_per_class = v;
    }
    if let Some(v) = args.test_per_class {
        cfg.test_per_class = v;
    }
    if let Some(v) = args.noise_scale {
        cfg.noise_scale = v;
    }
    let dataset: Dataset64 = generate_synthetic(&cfg)?;
    // blobs are f32, so the cast is exact
    let manifest = save_dataset(&dataset.cast::<f32>(), &args.out, args.force)?;

    let mut record = RunRecord::new("gen-data");
    if args.config.is_none() {
        record.set("preset", &args.preset);
    }
    record.set("seeds", [cfg.seed]);
    record.set("synthetic", &cfg);
    record.write(&args.out)?;
    println!(
        "wrote {} ({} classes, {} train / {} test rows)",
        manifest.display(),
        dataset.num_classes,
        dataset.train.len(),
        dataset.test.len()
    );
    Ok(())
}

fn record_origin(record: &mut RunRecord, origin: &DataOrigin) {
    match origin {
        DataOrigin::Path(p) => record.set("data", p.display().to_string()),
        DataOrigin::Synthetic(cfg) => record.set("synthetic", cfg),
    }
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let mut cfg = resolve_train_config(args.config.as_deref(), &args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.variant.is_some() || args.mode.is_some() {
        let variant = args.variant.unwrap_or(Variant::Ccl);
        cfg.loss = loss_config(&cfg.loss, variant, args.mode.unwrap_or(Mode::AI));
    }
    cfg.validate()?;
    let (dataset, origin) = match args.data.preset_or(None)? {
        Some(preset) => synthetic(&preset, cfg.seed)?,
        None => args.data.load_path()?,
    };
    create_dir(&args.out)?;

    let (params, history) = fit(&dataset, &cfg)?;
    save_checkpoint(&params, args.out.join("checkpoint"), true)?;
    write_file(&args.out.join("history.jsonl"), &history.to_jsonl())?;
    write_file(&args.out.join("evals.jsonl"), &jsonl(&history.evals))?;

    let mut record = RunRecord::new("train");
    record_origin(&mut record, &origin);
    record.set("seeds", [cfg.seed]);
    record.set("model", params.dims);
    record.set("train", &cfg);
    record.write(&args.out)?;

    let train_top1 = top1_accuracy(&params, &dataset.train)?;
    let test_top1 = if dataset.test.is_empty() {
        "n/a".to_string()
    } else {
        format!("{:.4}", top1_accuracy(&params, &dataset.test)?)
    };
    let final_loss = history.last().map_or("n/a".to_string(), |r| format!("{:.6}", r.loss.l_total));
    println!(
        "{} steps, final loss {final_loss}, train top-1 {train_top1:.4}, test top-1 {test_top1}",
        history.iterations.len()
    );
    Ok(())
}

#[derive(Serialize)]
#[serde(tag = "metric", rename_all = "snake_case")]
enum EvalRecord {
    Top1 { value: f64, rows: usize },
    RecallAtK { k: usize, value: f64, queries: usize, targets: usize },
    ClassTop1 { class: usize, value: f64 },
}

fn check_compatible(params: &Params64, dataset: &Dataset64) -> CliResult<()> {
    let data = dataset.dims();
    let dims = params.dims;
    if dims.input_dim != data.input_dim || dims.num_classes != data.num_classes {
        return Err(invalid(format!(
            "checkpoint expects {} input columns and {} classes, dataset has {} and {}",
            dims.input_dim, dims.num_classes, data.input_dim, data.num_classes
        )));
    }
    Ok(())
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let dataset: Dataset64 = ccl::data::load_dataset(&args.data)?;
    let params: Params64 = load_checkpoint(&args.checkpoint)?;
    check_compatible(&params, &dataset)?;
    if dataset.test.is_empty() {
        return Err(invalid("the dataset has no test rows"));
    }
    let test = &dataset.test;
    let preds = predict(&params, &test.video_inputs)?;
    let top1 = ccl::eval::accuracy(&preds, &test.labels);
    let retrieval = knn_retrieval(&params, &dataset, &args.ks)?;
    let per_class = per_class_accuracy(&preds, &test.labels, dataset.num_classes);
    create_dir(&args.out)?;

    let mut records = vec![EvalRecord::Top1 {
        value: top1,
        rows: test.len(),
    }];
    for (&k, &value) in &retrieval.recall_at {
        records.push(EvalRecord::RecallAtK {
            k,
            value,
            queries: retrieval.num_queries,
            targets: retrieval.num_targets,
        });
    }
    for (class, acc) in per_class.iter().enumerate() {
        if let Some(value) = *acc {
            records.push(EvalRecord::ClassTop1 { class, value });
        }
    }
    write_file(&args.out.join("report.jsonl"), &jsonl(&records))?;

    let mut rows = vec![vec!["top-1".to_string(), format!("{top1:.4}")]];
    for (k, v) in &retrieval.recall_at {
        rows.push(vec![format!("R@{k}"), format!("{v:.4}")]);
    }
    let mut text = table(&["metric".into(), "value".into()], &rows);
    text.push('\n');
    let class_rows: Vec<Vec<String>> = per_class
        .iter()
        .enumerate()
        .filter_map(|(c, a)| a.map(|a| vec![c.to_string(), format!("{a:.4}")]))
        .collect();
    text.push_str(&table(&["class".into(), "top-1".into()], &class_rows));
    for w in &retrieval.warnings {
        text.push_str(&format!("\nwarning: {w}\n"));
        eprintln!("warning: {w}");
    }
    write_file(&args.out.join("report.txt"), &text)?;

    let mut record = RunRecord::new("eval");
    record.set("data", args.data.display().to_string());
    record.set("checkpoint", args.checkpoint.display().to_string());
    record.set("ks", &args.ks);
    record.set("model", params.dims);
    record.write(&args.out)?;

    print!("{}", table(&["metric".into(), "value".into()], &rows));
    Ok(())
}

#[derive(Serialize)]
struct GradcheckRecord<'a> {
    seed: u64,
    passed: bool,
    checks: &'a ccl::gradcheck::StepGradCheck,
}

pub fn gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    if args.seeds == 0 {
        return Err(invalid("--seeds must be at least 1"));
    }
    if !(args.tol > 0.0) {
        return Err(invalid(format!("--tol must be positive, got {}", args.tol)));
    }
    let mut results = Vec::new();
    let mut max_err = 0.0f64;
    for seed in args.first_seed..args.first_seed + args.seeds {
        let case = random_case(seed)?;
        let check = grad_check(&case.params, &case.batch, &case.loss, args.tol)?;
        let worst = check.worst();
        max_err = max_err.max(worst.max_rel_error);
        println!(
            "seed {seed:>4}  {}  max rel err {:.3e}  ({} {})",
            if check.passed() { "ok  " } else { "FAIL" },
            worst.max_rel_error,
            worst.objective,
            worst.worst.as_deref().unwrap_or("-")
        );
        results.push((seed, check));
    }
    let failures = results.iter().filter(|(_, c)| !c.passed()).count();
    if let Some(out) = &args.out {
        create_dir(out)?;
        let rows = results.iter().map(|(seed, c)| GradcheckRecord {
            seed: *seed,
            passed: c.passed(),
            checks: c,
        });
        write_file(&out.join("gradcheck.jsonl"), &jsonl(rows))?;
        let mut record = RunRecord::new("gradcheck");
        record.set("seeds", results.iter().map(|(s, _)| *s).collect::<Vec<_>>());
        record.set("tolerance", args.tol);
        record.set("step", ccl::gradcheck::DEFAULT_STEP);
        record.write(out)?;
    }
    let verdict = if failures == 0 { "PASS" } else { "FAIL" };
    println!(
        "gradcheck: {verdict} ({} cases, {failures} failed, max rel err {max_err:.3e}, tolerance {:.0e})",
        results.len(),
        args.tol
    );
    if failures > 0 {
        return Err(runtime(format!("{failures} of {} cases exceed the tolerance", results.len())));
    }
    Ok(())
}

fn parse_variants(names: &[String]) -> CliResult<Vec<Variant>> {
    if names.iter().any(|n| n == "all") {
        return Ok(Variant::ALL.to_vec());
    }
    names.iter().map(|n| n.parse::<Variant>().map_err(Into::into)).collect()
}

#[derive(Serialize)]
struct SummaryRow {
    variant: Variant,
    mode: Mode,
    seeds: usize,
    test_top1_mean: f64,
    test_top1_std: f64,
    recall_at_1_mean: f64,
    recall_at_1_std: f64,
}

fn summarize(cells: &[CellResult], variants: &[Variant], modes: &[Mode]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for &variant in variants {
        for &mode in modes {
            let group: Vec<&CellResult> = cells.iter().filter(|c| c.variant == variant && c.mode == mode).collect();
            let (t_mean, t_std) = mean_std(&group.iter().map(|c| c.test_top1).collect::<Vec<_>>());
            let (r_mean, r_std) = mean_std(&group.iter().map(|c| c.recall_at_1).collect::<Vec<_>>());
            rows.push(SummaryRow {
                variant,
                mode,
                seeds: group.len(),
                test_top1_mean: t_mean,
                test_top1_std: t_std,
                recall_at_1_mean: r_mean,
                recall_at_1_std: r_std,
            });
        }
    }
    rows
}

/// Variants down, modes across, `mean ± std` per cell.
fn summary_table(title: &str, rows: &[SummaryRow], modes: &[Mode], pick: impl Fn(&SummaryRow) -> (f64, f64)) -> String {
    let mut header = vec![title.to_string()];
    header.extend(modes.iter().map(|m| m.name().to_string()));
    let mut body = Vec::new();
    for chunk in rows.chunks(modes.len()) {
        let mut line = vec![chunk[0].variant.name().to_string()];
        line.extend(chunk.iter().map(|r| {
            let (mean, std) = pick(r);
            format!("{mean:.3} ± {std:.3}")
        }));
        body.push(line);
    }
    table(&header, &body)
}

pub fn ablate(args: &AblateArgs) -> CliResult<()> {
    let variants = parse_variants(&args.variants)?;
    if args.modes.is_empty() || variants.is_empty() {
        return Err(invalid("need at least one variant and one mode"));
    }
    if args.seeds == 0 {
        return Err(invalid("--seeds must be at least 1"));
    }
    let base = resolve_train_config(args.config.as_deref(), &args.overrides)?;
    base.validate()?;
    let threads = match args.threads {
        Some(0) => return Err(invalid("thread count must be at least 1")),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let seeds: Vec<u64> = (args.first_seed..args.first_seed + args.seeds).collect();

    // a dataset on disk is shared; a preset is regenerated with each seed
    let preset = args.data.preset_or(Some("ucf51-gap"))?;
    let mut record = RunRecord::new("ablate");
    let datasets: Vec<Dataset64> = match &preset {
        Some(name) => {
            let mut out = Vec::new();
            for &seed in &seeds {
                let (ds, _) = synthetic(name, seed)?;
                out.push(ds);
            }
            record.set("preset", name);
            record.set("synthetic", SyntheticConfig::preset(name)?);
            record.set("data_seed", "equal to each cell's seed");
            out
        }
        None => {
            let (ds, origin) = args.data.load_path()?;
            record_origin(&mut record, &origin);
            vec![ds]
        }
    };
    create_dir(&args.out)?;
    let dataset_for = |i: usize| &datasets[i.min(datasets.len() - 1)];

    let n = seeds.len();
    let grid: Vec<(Variant, Mode, usize)> = variants
        .iter()
        .flat_map(|&v| args.modes.iter().flat_map(move |&m| (0..n).map(move |i| (v, m, i))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(runtime)?;
    let results: Vec<ccl::Result<CellResult>> = pool.install(|| {
        grid.par_iter()
            .map(|&(v, m, i)| run_cell(dataset_for(i), &base, v, m, seeds[i]))
            .collect()
    });
    let cells = results.into_iter().collect::<ccl::Result<Vec<_>>>()?;
    let summary = summarize(&cells, &variants, &args.modes);

    write_file(&args.out.join("cells.jsonl"), &jsonl(&cells))?;
    write_file(&args.out.join("summary.jsonl"), &jsonl(&summary))?;
    let text = format!(
        "{}\n{}",
        summary_table("test top-1", &summary, &args.modes, |r| (r.test_top1_mean, r.test_top1_std)),
        summary_table("R@1", &summary, &args.modes, |r| (r.recall_at_1_mean, r.recall_at_1_std)),
    );
    write_file(&args.out.join("summary.txt"), &text)?;

    record.set("seeds", &seeds);
    record.set("variants", &variants);
    record.set("modes", &args.modes);
    record.set("threads", threads as i64);
    record.set("train", &base);
    record.write(&args.out)?;

    print!("{text}");
    println!("{} cells ({} seeds) written to {}", cells.len(), seeds.len(), args.out.display());
    Ok(())
}
