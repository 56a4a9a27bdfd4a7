use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kgc_core::embed::{
    densify, load_embeddings, pairwise_topk_by_threshold, read_sim_tsv, select_threshold_cap, select_threshold_tail,
    sidecar_path, write_sim_tsv, NodeEmbeddingTable, ThresholdCriterion,
};
use kgc_core::eval::{density_ablation, evaluate, permutation_test, save_ablation_csv, FilterIndex, Metrics};
use kgc_core::kg::{compute_stats, load_dataset, make_random_split, KnowledgeGraph, Split, TupleFormat};
use kgc_core::model::Model;
use kgc_core::numerics::Checkpoint;
use kgc_core::train::{save_metric_csv, train, TrainConfig};
use serde_json::{json, Map, Value};

use crate::args::*;

/// Bad invocation: missing inputs, unparsable config. Exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Stats(a) => stats(a),
        Command::Split(a) => split(a),
        Command::Densify(a) => densify_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::PermTest(a) => perm_test(a),
        Command::AblateDensity(a) => ablate(a),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn out_dir(path: &Path) -> Result<PathBuf> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(path.to_path_buf())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_graph(data: &Path, format: TupleFormat) -> Result<KnowledgeGraph> {
    if !data.join("train.tsv").is_file() {
        return Err(usage(format!("{} has no train.tsv", data.display())));
    }
    let (graph, report) = load_dataset(data, format).with_context(|| format!("loading {}", data.display()))?;
    if report.rejected_rows > 0 {
        log::warn!("{} of {} rows rejected for an empty phrase", report.rejected_rows, report.rows);
    }
    Ok(graph)
}

fn data_dir(a: &DataArgs) -> Result<PathBuf> {
    a.data.clone().ok_or_else(|| usage("--data is required"))
}

fn format_of(a: &DataArgs) -> TupleFormat {
    a.format.map(Into::into).unwrap_or_default()
}

fn load_text(graph: &KnowledgeGraph, bin: &Path, phrases: Option<&Path>) -> Result<NodeEmbeddingTable> {
    require_file(bin, "embedding file")?;
    let side = phrases.map(Path::to_path_buf).unwrap_or_else(|| sidecar_path(bin));
    require_file(&side, "phrase file")?;
    load_embeddings(bin, &side, graph).with_context(|| format!("loading {}", bin.display()))
}

// ------------------------------------------------------------------ stats

fn stats(a: StatsArgs) -> Result<()> {
    let dir = data_dir(&a.data)?;
    let graph = load_graph(&dir, format_of(&a.data))?;
    let s = compute_stats(&graph);
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| ".".into());
    println!("dataset\tnodes\tedges\trelations\tdensity\tavg_in_degree");
    println!("{name}\t{}\t{}\t{}\t{:.1e}\t{:.2}", s.nodes, s.edges, s.relations, s.density, s.avg_in_degree);
    if let Some(out) = a.out_dir {
        write_json(&out_dir(&out)?.join("stats.json"), &s)?;
    }
    Ok(())
}

// ------------------------------------------------------------------ split

fn split(a: SplitArgs) -> Result<()> {
    let dir = data_dir(&a.data)?;
    let graph = load_graph(&dir, format_of(&a.data))?;
    let ratios = (a.ratios[0], a.ratios[1], a.ratios[2]);
    let assignment = make_random_split(&graph, ratios, a.seed).map_err(|e| usage(e.to_string()))?;
    let graph = graph.with_splits(assignment);
    let out = out_dir(&a.out_dir)?;
    for (split, file) in [(Split::Train, "train.tsv"), (Split::Dev, "dev.tsv"), (Split::Test, "test.tsv")] {
        graph.write_split_tsv(split, &out.join(file))?;
        println!("{split}\t{}", graph.split(split).len());
    }
    Ok(())
}

// ---------------------------------------------------------------- densify

fn densify_cmd(a: DensifyArgs) -> Result<()> {
    let dir = data_dir(&a.data)?;
    let graph = load_graph(&dir, format_of(&a.data))?;
    let table = load_text(&graph, &a.embeddings, a.phrases.as_deref())?;
    let sim = if let Some(tau) = a.tau {
        pairwise_topk_by_threshold(&table, tau, a.block)?
    } else if let Some(cap) = a.cap {
        let choice = select_threshold_cap(&table, cap, a.block)?;
        log::info!("cap {cap}: threshold {:.2} keeps {} pairs", choice.tau, choice.pairs);
        let mut sim = pairwise_topk_by_threshold(&table, choice.tau, a.block)?;
        sim.criterion = ThresholdCriterion::Cap { max_new_edges: cap };
        sim
    } else {
        let est = select_threshold_tail(&table, a.tail_samples, a.tail_k, a.seed)?;
        log::info!(
            "similarity mean {:.4}, std {:.4} over {} samples: threshold {:.4}",
            est.mean,
            est.std,
            est.samples,
            est.tau
        );
        let mut sim = pairwise_topk_by_threshold(&table, est.tau, a.block)?;
        sim.criterion = ThresholdCriterion::Tail {
            k: a.tail_k,
            mean: est.mean,
            std: est.std,
        };
        sim
    };
    let out = out_dir(&a.out_dir)?;
    write_sim_tsv(&graph, &sim, &out.join("sim.tsv"))?;
    let summary = json!({
        "pairs": sim.pairs.len(),
        "directed_edges": 2 * sim.pairs.len(),
        "tau": sim.tau,
        "criterion": sim.criterion,
        "zero_norm_rows": sim.zero_norm_rows,
    });
    write_json(&out.join("sim.json"), &summary)?;
    println!("{} sim pairs at threshold {}", sim.pairs.len(), sim.tau);
    Ok(())
}

// ------------------------------------------------------------------ train

/// Everything a training run needs, after merging config file and flags.
#[derive(Debug, serde::Serialize)]
struct RunPlan {
    data: PathBuf,
    format: TupleFormat,
    embeddings: Option<PathBuf>,
    phrases: Option<PathBuf>,
    sim: Option<PathBuf>,
    out_dir: PathBuf,
    train: TrainConfig,
}

const PATH_KEYS: [&str; 6] = ["data", "format", "embeddings", "phrases", "sim", "out_dir"];

fn resolve(data: &DataArgs, o: &TrainOverrides) -> Result<RunPlan> {
    let mut file_paths = Map::new();
    let mut config = match &o.config {
        Some(path) => {
            require_file(path, "config file")?;
            let text = fs::read_to_string(path)?;
            let mut value: Value =
                serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            let obj = value
                .as_object_mut()
                .ok_or_else(|| usage(format!("{}: expected a JSON object", path.display())))?;
            for key in PATH_KEYS {
                if let Some(v) = obj.remove(key) {
                    file_paths.insert(key.into(), v);
                }
            }
            TrainConfig::from_json(&value.to_string()).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = o.$field.clone() {
                config.$field = v;
            }
        )*};
    }
    set!(
        variant,
        epochs,
        learning_rate,
        l2,
        label_smoothing,
        grad_clip,
        dropout,
        batch_size,
        subgraph_edges,
        eval_every,
        eval_batch_size,
        embedding_dim,
        gcn_layers,
        channels,
        kernel_width,
        conv_activation,
        seed
    );
    if let Some(h) = o.mask_horizon {
        config.mask.horizon = h;
    }
    if let Some(d) = o.mask_direction {
        config.mask.direction = d;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;

    let path_from_file = |key: &str| -> Result<Option<PathBuf>> {
        match file_paths.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(PathBuf::from(s))),
            Some(other) => Err(usage(format!("config field {key:?} must be a path, got {other}"))),
        }
    };
    let format = match (data.format, file_paths.get("format")) {
        (Some(f), _) => f.into(),
        (None, Some(v)) => serde_json::from_value(v.clone()).map_err(|e| usage(format!("config field \"format\": {e}")))?,
        (None, None) => TupleFormat::default(),
    };
    let plan = RunPlan {
        data: data
            .data
            .clone()
            .or(path_from_file("data")?)
            .ok_or_else(|| usage("no dataset: pass --data or set \"data\" in the config"))?,
        format,
        embeddings: o.embeddings.clone().or(path_from_file("embeddings")?),
        phrases: o.phrases.clone().or(path_from_file("phrases")?),
        sim: o.sim.clone().or(path_from_file("sim")?),
        out_dir: o
            .out_dir
            .clone()
            .or(path_from_file("out_dir")?)
            .ok_or_else(|| usage("no output directory: pass --out-dir or set \"out_dir\" in the config"))?,
        train: config,
    };
    validate_inputs(&plan)?;
    Ok(plan)
}

fn validate_inputs(plan: &RunPlan) -> Result<()> {
    require_file(&plan.data.join("train.tsv"), "training file")?;
    let variant = plan.train.variant;
    if variant.uses_text() && plan.embeddings.is_none() {
        return Err(usage(format!("variant {variant} needs --embeddings")));
    }
    if variant.uses_sim() && plan.sim.is_none() {
        return Err(usage(format!("variant {variant} needs --sim (from `kgc densify`)")));
    }
    for (p, what) in [(&plan.embeddings, "embedding file"), (&plan.sim, "sim edge file")] {
        if let Some(p) = p {
            require_file(p, what)?;
        }
    }
    Ok(())
}

struct Inputs {
    graph: KnowledgeGraph,
    text: Option<NodeEmbeddingTable>,
}

fn load_inputs(
    data: &Path,
    format: TupleFormat,
    embeddings: Option<&Path>,
    phrases: Option<&Path>,
    sim: Option<&Path>,
) -> Result<Inputs> {
    let mut graph = load_graph(data, format)?;
    let text = match embeddings {
        Some(bin) => Some(load_text(&graph, bin, phrases)?),
        None => None,
    };
    if let Some(path) = sim {
        let set = read_sim_tsv(&graph, path).with_context(|| format!("reading {}", path.display()))?;
        graph = densify(&graph, &set)?;
        log::info!("added {} sim pairs from {}", set.pairs.len(), path.display());
    }
    Ok(Inputs { graph, text })
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let plan = resolve(&a.data, &a.overrides)?;
    log::info!("resolved config: {}", serde_json::to_string(&plan)?);
    let inputs = load_inputs(
        &plan.data,
        plan.format,
        plan.embeddings.as_deref(),
        plan.phrases.as_deref(),
        plan.sim.as_deref(),
    )?;
    let out = out_dir(&plan.out_dir)?;
    write_json(&out.join("config.json"), &plan)?;

    let outcome = train(&inputs.graph, inputs.text.as_ref(), &plan.train)?;
    save_metric_csv(&outcome.history, &out.join("metrics.csv"))?;
    let mut losses = String::from("epoch,loss\n");
    for (e, l) in outcome.epoch_losses.iter().enumerate() {
        losses.push_str(&format!("{},{l:.6}\n", e + 1));
    }
    fs::write(out.join("losses.csv"), losses)?;

    let extra = json!({
        "train_config": plan.train,
        "data": absolute(&plan.data),
        "format": plan.format,
        "embeddings": plan.embeddings.as_deref().map(absolute),
        "phrases": plan.phrases.as_deref().map(absolute),
        "sim": plan.sim.as_deref().map(absolute),
        "best_epoch": outcome.best_epoch,
    });
    outcome
        .model
        .checkpoint(Some(&outcome.optimizer), extra)
        .save(&out.join("model.ckpt"))?;
    match outcome.history.iter().rev().find(|r| r.split == Split::Test) {
        Some(row) => print_row(&plan.train.variant.to_string(), "test", &row.metrics),
        None => println!("trained {} epochs; no test split", plan.train.epochs),
    }
    Ok(())
}

// ---------------------------------------------------- checkpoint commands

struct Loaded {
    model: Model,
    inputs: Inputs,
}

fn load_checkpoint(a: &CheckpointArgs) -> Result<Loaded> {
    require_file(&a.checkpoint, "checkpoint")?;
    let ckpt = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let model = Model::from_checkpoint(&ckpt)?;
    let extra = ckpt.metadata.get("extra").cloned().unwrap_or(Value::Null);
    let recorded = |key: &str| extra.get(key).and_then(Value::as_str).map(PathBuf::from);
    let data = a
        .data
        .data
        .clone()
        .or_else(|| recorded("data"))
        .ok_or_else(|| usage("no dataset: pass --data"))?;
    let format = match (a.data.format, extra.get("format")) {
        (Some(f), _) => f.into(),
        (None, Some(v)) => serde_json::from_value(v.clone()).unwrap_or_default(),
        (None, None) => TupleFormat::default(),
    };
    let variant = model.variant();
    let embeddings = a.embeddings.clone().or_else(|| recorded("embeddings"));
    let phrases = a.phrases.clone().or_else(|| recorded("phrases"));
    let sim = a.sim.clone().or_else(|| recorded("sim"));
    if variant.uses_text() && embeddings.is_none() {
        return Err(usage(format!("variant {variant} needs --embeddings")));
    }
    if variant.uses_sim() && sim.is_none() {
        return Err(usage(format!("variant {variant} needs --sim")));
    }
    let embeddings = embeddings.filter(|_| variant.uses_text());
    let sim = sim.filter(|_| variant.uses_sim());
    if let Some(p) = &sim {
        require_file(p, "sim edge file")?;
    }
    let inputs = load_inputs(&data, format, embeddings.as_deref(), phrases.as_deref(), sim.as_deref())?;
    Ok(Loaded { model, inputs })
}

fn print_row(model: &str, split: &str, m: &Metrics) {
    println!("model\tsplit\tMRR\tHITS@1\tHITS@3\tHITS@10");
    println!(
        "{model}\t{split}\t{:.2}\t{:.2}\t{:.2}\t{:.2}",
        100.0 * m.mrr,
        100.0 * m.hits1,
        100.0 * m.hits3,
        100.0 * m.hits10
    );
}

fn metrics_csv(rows: &[(&str, &Metrics)]) -> String {
    let mut s = String::from("setting,mrr,hits1,hits3,hits10\n");
    for (name, m) in rows {
        s.push_str(&format!("{name},{:.6},{:.6},{:.6},{:.6}\n", m.mrr, m.hits1, m.hits3, m.hits10));
    }
    s
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let a = a.inputs;
    let loaded = load_checkpoint(&a)?;
    let split: Split = a.split.into();
    let graph = &loaded.inputs.graph;
    if graph.split(split).is_empty() {
        return Err(usage(format!("the {split} split is empty")));
    }
    let filter = FilterIndex::build(graph);
    let report = evaluate(&loaded.model, graph, loaded.inputs.text.as_ref(), split, &filter, a.batch_size)?;
    let out = out_dir(&a.out_dir)?;
    let name = split.to_string();
    fs::write(
        out.join("eval.csv"),
        metrics_csv(&[
            (&format!("{name}_forward"), &report.forward.metrics),
            (&format!("{name}_backward"), &report.backward.metrics),
            (&name, &report.average),
        ]),
    )?;
    write_json(&out.join("eval.json"), &report)?;
    print_row(&loaded.model.variant().to_string(), &name, &report.average);
    Ok(())
}

fn perm_test(a: PermTestArgs) -> Result<()> {
    let seed = a.seed;
    let a = a.inputs;
    let loaded = load_checkpoint(&a)?;
    if !loaded.model.variant().uses_gcn() {
        return Err(usage(format!("variant {} has no graph encoder to permute", loaded.model.variant())));
    }
    let split: Split = a.split.into();
    let graph = &loaded.inputs.graph;
    let filter = FilterIndex::build(graph);
    let r = permutation_test(
        &loaded.model,
        graph,
        loaded.inputs.text.as_ref(),
        split,
        &filter,
        a.batch_size,
        seed,
    )?;
    let out = out_dir(&a.out_dir)?;
    fs::write(out.join("perm.csv"), metrics_csv(&[("base", &r.base), ("shuffled", &r.shuffled)]))?;
    write_json(&out.join("perm.json"), &r)?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "setting\tMRR\tHITS@1\tHITS@3\tHITS@10")?;
    for (name, m) in [("base", &r.base), ("shuffled", &r.shuffled)] {
        writeln!(
            stdout,
            "{name}\t{:.2}\t{:.2}\t{:.2}\t{:.2}",
            100.0 * m.mrr,
            100.0 * m.hits1,
            100.0 * m.hits3,
            100.0 * m.hits10
        )?;
    }
    writeln!(stdout, "delta MRR\t{:.2}", 100.0 * r.delta_mrr)?;
    Ok(())
}

// --------------------------------------------------------------- ablation

fn ablate(a: AblateArgs) -> Result<()> {
    let plan = resolve(&a.data, &a.overrides)?;
    if a.densities.windows(2).any(|w| w[0] < w[1]) {
        bail!(usage("--densities must be listed from highest to lowest"));
    }
    log::info!("resolved config: {}", serde_json::to_string(&plan)?);
    let inputs = load_inputs(
        &plan.data,
        plan.format,
        plan.embeddings.as_deref(),
        plan.phrases.as_deref(),
        plan.sim.as_deref(),
    )?;
    let current = compute_stats(&inputs.graph).density;
    if let Some(&top) = a.densities.first() {
        if top > current {
            return Err(usage(format!("density {top:e} exceeds the graph's density {current:e}")));
        }
    }
    let out = out_dir(&plan.out_dir)?;
    write_json(&out.join("config.json"), &plan)?;
    let rows = density_ablation(&inputs.graph, inputs.text.as_ref(), &a.densities, &plan.train)?;
    save_ablation_csv(&rows, &out.join("ablation.csv"))?;
    println!("density\tedges\tMRR\tHITS@10");
    for r in &rows {
        println!(
            "{:.2e}\t{}\t{:.2}\t{:.2}",
            r.density,
            r.base_edges,
            100.0 * r.report.mrr,
            100.0 * r.report.hits10
        );
    }
    Ok(())
}
