use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use imgrisk_core::embed_io::{
    cosine_similarities, filter_min_images, load_embeddings, load_manifest, load_similarities,
    save_similarities, split_by_kind, write_manifest, ImageThreshold,
};
use imgrisk_core::eval::{
    compare_models_ttest, histogram, repeated_splits, roc_curve, split_scores, ComparisonMode, EvalReport,
    LogisticTrainer, SplitPlan,
};
use imgrisk_core::features::{
    build_design_matrix, extract as extract_features, load_user_vectors, users_from_embeddings,
    write_image_features, write_user_vectors, DEFAULT_TEMPERATURE,
};
use imgrisk_core::glm::FitOptions;
use imgrisk_core::schema::load_schema;
use imgrisk_core::stats::{run_stats, write_table, StatsReport, TTestMode};
use imgrisk_core::synth::{
    generate_image_logits, generate_user_vectors, table4_preset, CohortSpec, ImageLevel,
};
use imgrisk_core::{default_schema, TaskSchema};
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, CompareArgs, EvalArgs, ExtractArgs, StatsArgs, SynthArgs};
use crate::Failure;

pub const DEFAULT_LAMBDA: f64 = 1.0;

fn out_dir(out: &Option<PathBuf>) -> Result<PathBuf, Failure> {
    let dir = out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| Failure::internal(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_text(path: &Path, body: &str) -> Result<(), Failure> {
    std::fs::write(path, body).map_err(|e| Failure::internal(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut body = serde_json::to_string_pretty(value).map_err(|e| Failure::internal(e.to_string()))?;
    body.push('\n');
    write_text(path, &body)
}

fn required<'a, T>(value: &'a Option<T>, flag: &str, command: &str) -> Result<&'a T, Failure> {
    value
        .as_ref()
        .ok_or_else(|| Failure::input(format!("{command} needs --{flag}")))
}

fn schema_from(spec: &Option<String>) -> Result<TaskSchema, Failure> {
    match spec.as_deref() {
        None | Some("builtin") => Ok(default_schema()),
        Some(path) => Ok(load_schema(Path::new(path))?),
    }
}

fn positive(name: &str, v: f64) -> Result<f64, Failure> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Failure::input(format!("--{name} must be positive, got {v}")))
    }
}

#[derive(Serialize)]
struct ExtractReport {
    command: &'static str,
    config_hash: String,
    mode: &'static str,
    temperature: Option<f64>,
    n_users: usize,
    n_positive: usize,
    n_images: usize,
    n_features: usize,
    routed_images: BTreeMap<String, usize>,
    notes: Vec<String>,
}

pub fn extract(mut args: ExtractArgs) -> Result<(), Failure> {
    let users = required(&args.users, "users", "extract")?.clone();
    let images = required(&args.images, "images", "extract")?.clone();
    let dense = *args.dense.get_or_insert(false);
    if !dense {
        positive(
            "temperature",
            *args.temperature.get_or_insert(DEFAULT_TEMPERATURE),
        )?;
        args.schema.get_or_insert_with(|| "builtin".into());
    }
    let hash = config_hash("extract", &args);
    let dir = out_dir(&args.out)?;

    let mut manifest = load_manifest(&users, &images)?;
    if let Some(t) = &args.min_images {
        manifest = filter_min_images(&manifest, t.parse::<ImageThreshold>()?)?;
    }
    if manifest.n_images() == 0 {
        return Err(Failure::input("the manifest lists no images"));
    }

    let (column_ids, user_vectors, routed, mode) = if dense {
        let path = required(&args.embeddings, "embeddings", "extract --dense")?;
        let (imgs, _) = split_by_kind(load_embeddings(path)?);
        let (ids, uv) = users_from_embeddings(&manifest, &imgs)?;
        (ids, uv, BTreeMap::new(), "dense")
    } else {
        let schema = schema_from(&args.schema)?;
        let sims = match (&args.similarities, &args.embeddings) {
            (Some(p), _) => load_similarities(p, &schema)?,
            (None, Some(p)) => {
                let (imgs, queries) = split_by_kind(load_embeddings(p)?);
                cosine_similarities(&imgs, &queries)?.to_schema_order(&schema)?
            }
            (None, None) => return Err(Failure::input("extract needs --similarities or --embeddings")),
        };
        let temperature = args.temperature.unwrap_or(DEFAULT_TEMPERATURE);
        let (features, uv) = extract_features(&sims, &schema, temperature, &manifest)?;
        let ids = schema.query_ids();
        write_image_features(&dir.join("image_features.csv"), &ids, &features)?;
        let mut routed: BTreeMap<String, usize> = schema
            .clusters
            .iter()
            .filter(|c| c.is_routed())
            .map(|c| (c.name.clone(), 0))
            .collect();
        for f in &features {
            for c in &f.fired_clusters {
                *routed.entry(c.clone()).or_default() += 1;
            }
        }
        (ids, uv, routed, "zero-shot")
    };
    write_user_vectors(&dir.join("user_vectors.csv"), &column_ids, &user_vectors)?;

    let report = ExtractReport {
        command: "extract",
        config_hash: hash,
        mode,
        temperature: args.temperature,
        n_users: manifest.users.len(),
        n_positive: manifest.n_positive(),
        n_images: manifest.n_images(),
        n_features: column_ids.len(),
        routed_images: routed,
        notes: manifest.notes.clone(),
    };
    write_json(&dir.join("extract_report.json"), &report)?;
    println!(
        "extracted {} features for {} users ({} positive) from {} images",
        report.n_features, report.n_users, report.n_positive, report.n_images
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct EvalFile {
    command: String,
    config_hash: String,
    seed: u64,
    lambda: f64,
    standardize: bool,
    columns: Vec<String>,
    #[serde(flatten)]
    report: EvalReport,
    notes: Vec<String>,
}

pub fn eval(mut args: EvalArgs) -> Result<(), Failure> {
    let path = required(&args.user_vectors, "user-vectors", "eval")?.clone();
    args.name.get_or_insert_with(|| "model".into());
    let seed = *args.seed.get_or_insert(0);
    let repeats = *args.repeats.get_or_insert(1000);
    let fraction = *args.train_fraction.get_or_insert(0.7);
    let lambda = *args.lambda.get_or_insert(DEFAULT_LAMBDA);
    let standardize = *args.standardize.get_or_insert(false);
    let omit_aucs = *args.omit_aucs.get_or_insert(false);
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Failure::input(format!("--lambda must be >= 0, got {lambda}")));
    }
    let plan = SplitPlan {
        master_seed: seed,
        n_repeats: repeats,
        train_fraction: fraction,
    };
    plan.validate()?;

    let (all_ids, users) = load_user_vectors(&path)?;
    let design = build_design_matrix(&users, &all_ids)?;
    let columns = match &args.columns {
        Some(cols) => cols.clone(),
        None => all_ids.clone(),
    };
    let idx = columns
        .iter()
        .map(|c| {
            all_ids
                .iter()
                .position(|a| a == c)
                .ok_or_else(|| Failure::input(format!("unknown column `{c}`")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let x = design.x.select_columns(&idx);
    args.columns = Some(columns.clone());
    let hash = config_hash("eval", &args);
    let dir = out_dir(&args.out)?;

    let trainer = LogisticTrainer {
        options: FitOptions {
            l2_lambda: lambda,
            standardize,
            ..FitOptions::default()
        },
    };
    let name = args.name.clone().unwrap_or_default();
    let mut report = repeated_splits(&name, &x, &design.y, &plan, &trainer)?;

    let mut notes = Vec::new();
    if report.ci95.is_none() {
        notes.push("single repeat: no confidence interval".to_string());
    }
    if report.n_nonconverged > 0 {
        notes.push(format!("{} fit(s) did not converge", report.n_nonconverged));
    }
    if report.n_skipped > 0 {
        notes.push(format!("{} single-class test split(s) redrawn", report.n_skipped));
    }

    if args.plot_data.unwrap_or(false) {
        let (labels, scores, _, _) = split_scores(&x, &design.y, &plan, &trainer, 0)?;
        let mut roc = String::from("threshold,fpr,tpr\n");
        for p in roc_curve(&scores, &labels)? {
            let _ = writeln!(roc, "{},{},{}", p.threshold, p.fpr, p.tpr);
        }
        write_text(&dir.join("roc_run0.csv"), &roc)?;
        let mut hist = String::from("low,high,count\n");
        for b in histogram(&report.aucs, 20) {
            let _ = writeln!(hist, "{},{},{}", b.low, b.high, b.count);
        }
        write_text(&dir.join("auc_histogram.csv"), &hist)?;
    }

    let summary = match report.ci95 {
        Some((lo, hi)) => format!("{}: mean AUC {:.3} ({:.3}, {:.3})", name, report.mean_auc, lo, hi),
        None => format!("{}: AUC {:.3} (single repeat)", name, report.mean_auc),
    };
    if omit_aucs {
        report.aucs.clear();
    }
    let file = EvalFile {
        command: "eval".into(),
        config_hash: hash,
        seed,
        lambda,
        standardize,
        columns,
        report,
        notes,
    };
    write_json(&dir.join("eval_report.json"), &file)?;
    println!("{summary}");
    Ok(())
}

#[derive(Deserialize)]
struct AucSource {
    model_name: String,
    #[serde(default)]
    aucs: Vec<f64>,
}

fn load_aucs(path: &Path) -> Result<AucSource, Failure> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    let src: AucSource =
        serde_json::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    if src.aucs.len() < 2 {
        return Err(Failure::input(format!(
            "{}: report has no per-run AUCs (need at least 2)",
            path.display()
        )));
    }
    Ok(src)
}

#[derive(Serialize)]
struct CompareFile {
    command: &'static str,
    config_hash: String,
    model_a: String,
    model_b: String,
    #[serde(flatten)]
    comparison: imgrisk_core::eval::Comparison,
}

pub fn compare(mut args: CompareArgs) -> Result<(), Failure> {
    let a = load_aucs(required(&args.a, "a", "compare")?)?;
    let b = load_aucs(required(&args.b, "b", "compare")?)?;
    let mode = match args.mode.get_or_insert_with(|| "unpaired".into()).as_str() {
        "unpaired" => ComparisonMode::Unpaired,
        "paired" => ComparisonMode::Paired,
        other => {
            return Err(Failure::input(format!(
                "unknown comparison mode `{other}` (unpaired|paired)"
            )))
        }
    };
    let hash = config_hash("compare", &args);
    let dir = out_dir(&args.out)?;
    let comparison = compare_models_ttest(&a.aucs, &b.aucs, mode)?;
    println!(
        "{} vs {}: delta {:.4}, t = {:.2}, p = {:.3e}",
        a.model_name, b.model_name, comparison.delta, comparison.t, comparison.p
    );
    write_json(
        &dir.join("comparison.json"),
        &CompareFile {
            command: "compare",
            config_hash: hash,
            model_a: a.model_name,
            model_b: b.model_name,
            comparison,
        },
    )
}

#[derive(Serialize)]
struct StatsFile<'a> {
    command: &'static str,
    config_hash: String,
    ttest_note: &'static str,
    alpha: f64,
    #[serde(flatten)]
    report: &'a StatsReport,
}

pub fn stats(mut args: StatsArgs) -> Result<(), Failure> {
    let path = required(&args.user_vectors, "user-vectors", "stats")?.clone();
    args.schema.get_or_insert_with(|| "builtin".into());
    let mode: TTestMode = args.ttest.get_or_insert_with(|| "pooled".into()).parse()?;
    let alpha = *args.alpha.get_or_insert(0.05);
    let hash = config_hash("stats", &args);
    let dir = out_dir(&args.out)?;
    let schema = schema_from(&args.schema)?;
    let (ids, users) = load_user_vectors(&path)?;
    let report = run_stats(&users, &ids, &schema, mode, alpha)?;
    write_table(&dir.join("stats_table.csv"), &report)?;
    let note = match mode {
        TTestMode::Pooled => "pooled-variance Student t-tests (default; Welch available)",
        TTestMode::Welch => "Welch t-tests (pooled is the default)",
    };
    write_json(
        &dir.join("stats_report.json"),
        &StatsFile {
            command: "stats",
            config_hash: hash,
            ttest_note: note,
            alpha,
            report: &report,
        },
    )?;
    println!(
        "{} of {} features FDR-significant at {alpha}; {} retained after pruning",
        report.fdr.n_rejected,
        report.fdr.m,
        report.pruned.kept.iter().filter(|c| c.significant_fdr).count()
    );
    Ok(())
}

#[derive(Serialize)]
struct SynthReport {
    command: &'static str,
    config_hash: String,
    seed: u64,
    level: String,
    n_users: usize,
    n_positive: usize,
    n_images: Option<usize>,
}

pub fn synth(mut args: SynthArgs) -> Result<(), Failure> {
    let mut spec: CohortSpec = match (&args.spec, args.preset.as_deref()) {
        (Some(p), _) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?
        }
        (None, None | Some("table4")) => table4_preset(0),
        (None, Some("null")) => table4_preset(0).zero_effect(),
        (None, Some(other)) => return Err(Failure::input(format!("unknown preset `{other}` (table4|null)"))),
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(n) = args.n_pos {
        spec.n_pos = n;
    }
    if let Some(n) = args.n_neg {
        spec.n_neg = n;
    }
    if let Some(r) = args.correlation {
        spec.correlation = r;
    }
    let level = args.level.get_or_insert_with(|| "user-vectors".into()).clone();
    match level.as_str() {
        "user-vectors" => spec.images = None,
        "image-logits" => {
            let mut img = spec.images.unwrap_or_default();
            if let Some(v) = args.min_images {
                img.min_images = v;
            }
            if let Some(v) = args.max_images {
                img.max_images = v;
            }
            if let Some(v) = args.concentration {
                img.concentration = v;
            }
            spec.images = Some::<ImageLevel>(img);
        }
        other => {
            return Err(Failure::input(format!(
                "unknown level `{other}` (user-vectors|image-logits)"
            )))
        }
    }
    let schema = default_schema();
    spec.validate(&schema)?;
    let spec_toml = toml::to_string(&spec).map_err(|e| Failure::internal(e.to_string()))?;
    #[derive(Serialize)]
    struct Hashed<'a> {
        level: &'a str,
        spec: &'a CohortSpec,
    }
    let hash = config_hash(
        "synth",
        &Hashed {
            level: &level,
            spec: &spec,
        },
    );
    let dir = out_dir(&args.out)?;
    write_text(&dir.join("cohort_spec.toml"), &spec_toml)?;

    let n_images = if spec.images.is_some() {
        let (sims, manifest) = generate_image_logits(&spec, &schema)?;
        save_similarities(&dir.join("similarities.jsonl"), &sims)?;
        write_manifest(&dir.join("users.csv"), &dir.join("images.csv"), &manifest)?;
        Some(manifest.n_images())
    } else {
        let users = generate_user_vectors(&spec, &schema)?;
        write_user_vectors(&dir.join("user_vectors.csv"), &schema.query_ids(), &users)?;
        None
    };
    let report = SynthReport {
        command: "synth",
        config_hash: hash,
        seed: spec.seed,
        level,
        n_users: spec.n_pos + spec.n_neg,
        n_positive: spec.n_pos,
        n_images,
    };
    write_json(&dir.join("synth_report.json"), &report)?;
    println!(
        "generated {} users ({} positive) at level {}",
        report.n_users, report.n_positive, report.level
    );
    Ok(())
}
