//! Command-line entry point: configuration loading, the synth / train /
//! eval / analyze commands, and reproducible experiment orchestration.
//!
//! Configuration is a flat `key=value` text file; `--set key=value` flags
//! override it. Primary outputs are byte-deterministic for a fixed seed;
//! wall-clock timing and timestamps live only in the run manifest.

use crate::evalkit::{gcd_weighted_distances, per_gcd_range_metrics};
use crate::gcdlayer::GcdModel;
use crate::graphstore::{
    generate_synthetic, load_graph, save_graph, stratified_split, AuditedLabels, GraphError,
    LabelAudit, MultiRelationGraph, Split, SynthParams,
};
use crate::protogcd::PrototypeState;
use crate::trainer::{
    configure_ablation, eval_forward, evaluate_split, fit, Ablation, ModelConfig, TrainReport,
    SPLIT_RATIOS,
};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser)]
#[command(name = "gcdnet", about = "GCD-GNN fraud detection toolkit", disable_version_flag = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic camouflage graph and write it as a graph file.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. --set n_nodes=500
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train over several seeds; write per-seed reports, checkpoints and a summary.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write GCD diagnostics: distance report, per-GCD-range metrics, embeddings.
    Analyze {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Effective run configuration: hyperparameters plus the graph source and
/// command options. Exactly one of `graph` / `synth=yes` may be active.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub graph: Option<PathBuf>,
    pub use_synth: bool,
    pub synth: SynthParams,
    /// Number of training trials; trial k runs with seed = seed + k.
    pub seeds: usize,
    pub sample_size: usize,
    pub bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            graph: None,
            use_synth: false,
            synth: SynthParams::default(),
            seeds: 5,
            sample_size: 20,
            bins: 20,
        }
    }
}

impl RunConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<(), GraphError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, GraphError> {
            value.parse().map_err(|_| {
                GraphError::Config(format!("invalid value '{value}' for key '{key}'"))
            })
        }
        match key {
            // hyperparameters, keyed after the reference configuration table
            "learning_rate" => self.model.learning_rate = parse(key, value)?,
            "batch_size" => self.model.batch_size = parse(key, value)?,
            "dropout" => self.model.dropout = parse(key, value)?,
            "hidden_dimension" => self.model.hidden_dimension = parse(key, value)?,
            "n_layer" => self.model.n_layer = parse(key, value)?,
            "weight_decay" => self.model.weight_decay = parse(key, value)?,
            "thres" => self.model.thres = parse(key, value)?,
            "gcd_drop" => self.model.gcd_drop = parse(key, value)?,
            "tau" => self.model.tau = parse(key, value)?,
            "patience" => self.model.patience = parse(key, value)?,
            "max_epochs" => self.model.max_epochs = parse(key, value)?,
            "seed" => self.model.seed = parse(key, value)?,
            "leaky_slope" => self.model.leaky_slope = parse(key, value)?,
            "weighted_loss" => self.model.weighted_loss = parse_bool(key, value)?,
            "ablation" => self.model.ablation = configure_ablation(value)?,
            // graph source
            "graph" => self.graph = Some(PathBuf::from(value)),
            "synth" => self.use_synth = parse_bool(key, value)?,
            // synthetic generator
            "n_nodes" => self.synth.n_nodes = parse(key, value)?,
            "fraud_ratio" => self.synth.fraud_ratio = parse(key, value)?,
            "feature_dim" => self.synth.feature_dim = parse(key, value)?,
            "n_relations" => self.synth.n_relations = parse(key, value)?,
            "avg_degree" => self.synth.avg_degree = parse(key, value)?,
            "homophily" => self.synth.homophily = parse(key, value)?,
            "camouflage_rate" => self.synth.camouflage_rate = parse(key, value)?,
            "camouflage_strength" => self.synth.camouflage_strength = parse(key, value)?,
            "unlabeled_ratio" => self.synth.unlabeled_ratio = parse(key, value)?,
            "synth_seed" => self.synth.seed = parse(key, value)?,
            // command options
            "seeds" => self.seeds = parse(key, value)?,
            "sample_size" => self.sample_size = parse(key, value)?,
            "bins" => self.bins = parse(key, value)?,
            other => {
                return Err(GraphError::Config(format!("unknown configuration key '{other}'")))
            }
        }
        Ok(())
    }

    /// Stable hash of the effective configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().fold(String::new(), |mut acc, b| {
            let _ = write!(acc, "{b:02x}");
            acc
        })
    }

    fn load_source_graph(&self) -> Result<MultiRelationGraph, GraphError> {
        match (&self.graph, self.use_synth) {
            (Some(path), false) => load_graph(path),
            (None, true) => generate_synthetic(&self.synth),
            (Some(_), true) => Err(GraphError::Config(
                "config sets both graph=<path> and synth=yes; pick one".into(),
            )),
            (None, false) => Err(GraphError::Config(
                "no graph source: set graph=<path> or synth=yes".into(),
            )),
        }
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool, GraphError> {
    match value.to_ascii_lowercase().as_str() {
        "yes" | "true" | "1" => Ok(true),
        "no" | "false" | "0" => Ok(false),
        _ => Err(GraphError::Config(format!("invalid boolean '{value}' for key '{key}'"))),
    }
}

/// Parses a flat key=value config file. Blank lines and `#` comments are
/// skipped.
fn apply_config_file(cfg: &mut RunConfig, path: &Path) -> Result<(), GraphError> {
    let text = std::fs::read_to_string(path)?;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| GraphError::Parse {
            line: i + 1,
            msg: format!("expected key=value, got '{line}'"),
        })?;
        cfg.set(key.trim(), value.trim())?;
    }
    Ok(())
}

fn build_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, GraphError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = path {
        apply_config_file(&mut cfg, path)?;
    }
    for item in overrides {
        let (key, value) = item.split_once('=').ok_or_else(|| {
            GraphError::Config(format!("--set expects key=value, got '{item}'"))
        })?;
        cfg.set(key.trim(), value.trim())?;
    }
    Ok(cfg)
}

// ── Checkpoints ─────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Versioned, self-describing container for all parameter tensors.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    version: u32,
    seed: u64,
    config_hash: String,
    ablation: Ablation,
    in_dim: usize,
    hidden_dimension: usize,
    n_layer: usize,
    leaky_slope: f64,
    thres: f64,
    tau: f64,
    prototypes: Option<PrototypeState>,
    params: Vec<ParamEntry>,
}

impl Checkpoint {
    fn from_model(
        model: &GcdModel,
        prototypes: Option<&PrototypeState>,
        cfg: &ModelConfig,
        seed: u64,
        config_hash: &str,
    ) -> Checkpoint {
        let params = model
            .store
            .iter()
            .map(|(id, p)| ParamEntry {
                name: model.store.name(id).to_string(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.data().to_vec(),
            })
            .collect();
        Checkpoint {
            version: 1,
            seed,
            config_hash: config_hash.to_string(),
            ablation: cfg.ablation,
            in_dim: model.arch.in_dim,
            hidden_dimension: cfg.hidden_dimension,
            n_layer: cfg.n_layer,
            leaky_slope: cfg.leaky_slope,
            thres: cfg.thres,
            tau: cfg.tau,
            prototypes: prototypes.cloned(),
            params,
        }
    }

    fn load(path: &Path) -> Result<Checkpoint, GraphError> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| GraphError::Parse {
            line: e.line(),
            msg: format!("checkpoint {}: {e}", path.display()),
        })?;
        if ckpt.version != 1 {
            return Err(GraphError::Config(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    /// Rebuilds the model and overwrites its parameters; the graph's
    /// feature dimension must match the checkpoint.
    fn instantiate(
        &self,
        graph: &MultiRelationGraph,
    ) -> Result<(GcdModel, Option<PrototypeState>, ModelConfig), GraphError> {
        if graph.feature_dim() != self.in_dim {
            return Err(GraphError::Config(format!(
                "checkpoint expects feature dimension {}, graph has {}",
                self.in_dim,
                graph.feature_dim()
            )));
        }
        let cfg = ModelConfig {
            hidden_dimension: self.hidden_dimension,
            n_layer: self.n_layer,
            leaky_slope: self.leaky_slope,
            thres: self.thres,
            tau: self.tau,
            seed: self.seed,
            ablation: self.ablation,
            ..ModelConfig::default()
        };
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed);
        let mut model = GcdModel::new(cfg.arch(self.in_dim), &mut rng);
        if model.store.len() != self.params.len() {
            return Err(GraphError::Config(format!(
                "checkpoint holds {} tensors, architecture expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
        for (id, entry) in ids.into_iter().zip(&self.params) {
            let name = model.store.name(id).to_string();
            let param = model.store.get_mut(id);
            if name != entry.name || param.tensor.shape() != entry.shape.as_slice() {
                return Err(GraphError::Config(format!(
                    "checkpoint tensor '{}' {:?} does not match architecture tensor '{}' {:?}",
                    entry.name,
                    entry.shape,
                    name,
                    param.tensor.shape()
                )));
            }
            param.tensor.data_mut().copy_from_slice(&entry.data);
        }
        Ok((model, self.prototypes.clone(), cfg))
    }
}

// ── Command implementations ─────────────────────────────────────────────

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), GraphError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| GraphError::Config(format!("serialization failed: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    config_hash: String,
    timestamp_unix: u64,
    seconds: Vec<f64>,
    label_reads: Vec<serde_json::Value>,
}

fn manifest(command: &str, hash: &str, seconds: Vec<f64>, label_reads: Vec<serde_json::Value>) -> Manifest {
    Manifest {
        command: command.to_string(),
        config_hash: hash.to_string(),
        timestamp_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        seconds,
        label_reads,
    }
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<(), GraphError> {
    std::fs::create_dir_all(out)?;
    let graph = generate_synthetic(&cfg.synth)?;
    let path = out.join("graph.txt");
    save_graph(&graph, &path)?;
    let edges: Vec<usize> =
        (0..graph.n_relations()).map(|r| graph.relation(r).entry_count() / 2).collect();
    let fraud = graph.labels().iter().filter(|l| **l == crate::graphstore::Label::Fraud).count();
    println!(
        "wrote {}: nodes={} relations={} edges={:?} fraud_ratio={:.4} realized_homophily={:.4}",
        path.display(),
        graph.n_nodes(),
        graph.n_relations(),
        edges,
        fraud as f64 / graph.n_nodes() as f64,
        graph.realized_homophily()
    );
    write_json(&out.join("manifest.json"), &manifest("synth", &cfg.hash(), vec![], vec![]))?;
    Ok(())
}

/// Mean and sample standard deviation, plus the display scaling used by the
/// summary (means x100, stds x10).
#[derive(Serialize)]
struct MetricSummary {
    mean: f64,
    std: f64,
    display_mean: f64,
    display_std: f64,
    n: usize,
}

fn summarize(values: &[f64]) -> MetricSummary {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    MetricSummary { mean, std, display_mean: 100.0 * mean, display_std: 10.0 * std, n }
}

/// Serializes one seed's report as JSONL: one epoch record per line, then a
/// final summary record. Wall-clock timing is excluded (it goes into the
/// manifest), so reruns are byte-identical.
fn report_jsonl(report: &TrainReport) -> Result<String, GraphError> {
    let mut out = String::new();
    for epoch in &report.epochs {
        let line = serde_json::to_string(epoch)
            .map_err(|e| GraphError::Config(format!("serialization failed: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    let summary = serde_json::json!({
        "seed": report.seed,
        "ablation": report.ablation,
        "best_epoch": report.best_epoch,
        "final_test": report.final_test,
        "skipped_batches": report.skipped_batches,
    });
    out.push_str(&summary.to_string());
    out.push('\n');
    Ok(out)
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<(), GraphError> {
    if cfg.seeds == 0 {
        return Err(GraphError::Config("seeds must be >= 1".into()));
    }
    cfg.model.validate()?;
    std::fs::create_dir_all(out)?;
    let graph = cfg.load_source_graph()?;
    let hash = cfg.hash();

    let mut aucs = Vec::new();
    let mut f1s = Vec::new();
    let mut gms = Vec::new();
    let mut seed_list = Vec::new();
    let mut seconds = Vec::new();
    let mut label_reads = Vec::new();
    for k in 0..cfg.seeds {
        let seed = cfg.model.seed + k as u64;
        let trial = ModelConfig { seed, ..cfg.model.clone() };
        let t0 = std::time::Instant::now();
        let result = fit(&graph, &trial)?;
        seconds.push(t0.elapsed().as_secs_f64());

        std::fs::write(
            out.join(format!("report_seed{seed}.jsonl")),
            report_jsonl(&result.report)?,
        )?;
        let ckpt = Checkpoint::from_model(
            &result.model,
            result.prototypes.as_ref(),
            &trial,
            seed,
            &hash,
        );
        write_json(&out.join(format!("model_seed{seed}.json")), &ckpt)?;

        let test = &result.report.final_test;
        println!(
            "seed {seed}: best_epoch={} test auc={} f1_macro={:.6} g_mean={:.6}",
            result.report.best_epoch,
            test.auc.map(|a| format!("{a:.6}")).unwrap_or_else(|| "absent".into()),
            test.f1_macro,
            test.g_mean
        );
        if let Some(a) = test.auc {
            aucs.push(a);
        }
        f1s.push(test.f1_macro);
        gms.push(test.g_mean);
        seed_list.push(seed);
        label_reads.push(serde_json::json!({
            "seed": seed,
            "train": result.label_reads.train,
            "valid": result.label_reads.valid,
            "test": result.label_reads.test,
        }));
    }

    let summary = serde_json::json!({
        "seeds": seed_list,
        "ablation": cfg.model.ablation,
        "auc": summarize(&aucs),
        "f1_macro": summarize(&f1s),
        "g_mean": summarize(&gms),
        "auc_absent": cfg.seeds - aucs.len(),
    });
    write_json(&out.join("summary.json"), &summary)?;
    write_json(&out.join("manifest.json"), &manifest("train", &hash, seconds, label_reads))?;
    println!(
        "summary: auc mean={:.6} std={:.6} over {} seeds",
        summarize(&aucs).mean,
        summarize(&aucs).std,
        cfg.seeds
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<(), GraphError> {
    std::fs::create_dir_all(out)?;
    let graph = cfg.load_source_graph()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let (model, prototypes, model_cfg) = ckpt.instantiate(&graph)?;

    let split = stratified_split(&graph, SPLIT_RATIOS, model_cfg.seed)?;
    let audit = LabelAudit::new();
    let labels = AuditedLabels::new(graph.labels(), &split, &audit);
    let (probs, _, _, _) = eval_forward(&model, &graph, prototypes.as_ref(), &labels);
    let test = evaluate_split(&probs, &graph, &split, Split::Test, model_cfg.thres);

    let payload = serde_json::json!({
        "seed": model_cfg.seed,
        "config_hash": ckpt.config_hash,
        "test": test,
    });
    write_json(&out.join("metrics.json"), &payload)?;
    println!(
        "test: auc={} f1_macro={:.6} g_mean={:.6}",
        test.auc.map(|a| format!("{a:.6}")).unwrap_or_else(|| "absent".into()),
        test.f1_macro,
        test.g_mean
    );
    write_json(&out.join("manifest.json"), &manifest("eval", &ckpt.config_hash, vec![], vec![]))?;
    Ok(())
}

fn cmd_analyze(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<(), GraphError> {
    std::fs::create_dir_all(out)?;
    let graph = cfg.load_source_graph()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let (model, prototypes, model_cfg) = ckpt.instantiate(&graph)?;
    if model.arch.backbone {
        return Err(GraphError::Config(
            "analyze requires a GCD-based checkpoint; the backbone has no GCD".into(),
        ));
    }

    let split = stratified_split(&graph, SPLIT_RATIOS, model_cfg.seed)?;
    let audit = LabelAudit::new();
    let labels = AuditedLabels::new(graph.labels(), &split, &audit);
    let (probs, gcd, artifacts, tape) = eval_forward(&model, &graph, prototypes.as_ref(), &labels);
    let gcd = gcd.expect("non-backbone evaluation yields GCD");
    let layer_input = tape.value(artifacts.layer_input).to_vec();

    // distance report over the layer-input features and eval-mode attention
    let distances = gcd_weighted_distances(
        &graph,
        &layer_input,
        &artifacts.attention,
        &gcd,
        cfg.sample_size,
        model_cfg.seed,
    );
    let mut jsonl = String::new();
    for row in &distances.rows {
        jsonl.push_str(
            &serde_json::to_string(row)
                .map_err(|e| GraphError::Config(format!("serialization failed: {e}")))?,
        );
        jsonl.push('\n');
    }
    std::fs::write(out.join("distances.jsonl"), jsonl)?;

    // per-GCD-range metrics over the test split
    let bin_width = 2.0 / cfg.bins as f64;
    let test_nodes = split.nodes_in(Split::Test);
    let scores: Vec<f64> = test_nodes.iter().map(|&i| probs[i]).collect();
    let truth: Vec<bool> =
        test_nodes.iter().map(|&i| graph.label(i) == crate::graphstore::Label::Fraud).collect();
    let g_test: Vec<f64> = test_nodes.iter().map(|&i| gcd.g[i]).collect();
    let bins = per_gcd_range_metrics(&scores, &truth, &g_test, bin_width, model_cfg.thres);
    let mut jsonl = String::new();
    for bin in &bins {
        jsonl.push_str(
            &serde_json::to_string(bin)
                .map_err(|e| GraphError::Config(format!("serialization failed: {e}")))?,
        );
        jsonl.push('\n');
    }
    std::fs::write(out.join("gcd_range_metrics.jsonl"), jsonl)?;

    // embeddings: original features next to the mixed features
    crate::evalkit::export_embeddings(
        graph.features().data(),
        &layer_input,
        graph.labels(),
        graph.feature_dim(),
        &out.join("embeddings.csv"),
    )?;

    let payload = serde_json::json!({
        "command": "analyze",
        "seed": model_cfg.seed,
        "config_hash": ckpt.config_hash,
        "sample_size": cfg.sample_size,
        "bins": cfg.bins,
    });
    write_json(&out.join("analyze.json"), &payload)?;
    write_json(&out.join("manifest.json"), &manifest("analyze", &ckpt.config_hash, vec![], vec![]))?;
    println!(
        "analyze: {} sampled nodes, {} populated GCD bins, embeddings for {} nodes",
        distances.rows.len(),
        bins.len(),
        graph.n_nodes()
    );
    Ok(())
}

fn exit_code_for(err: &GraphError) -> i32 {
    match err {
        GraphError::Config(_) | GraphError::Parse { .. } | GraphError::Validation(_) => EXIT_USAGE,
        GraphError::Io(_) => EXIT_RUNTIME,
    }
}

/// Runs the CLI; returns the process exit code (0 ok, 1 usage/config,
/// 2 runtime).
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successful exits
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let run = || -> Result<(), GraphError> {
        match &cli.command {
            Command::Synth { config, set, out } => {
                let cfg = build_config(config.as_deref(), set)?;
                cmd_synth(&cfg, out)
            }
            Command::Train { config, set, out } => {
                let cfg = build_config(config.as_deref(), set)?;
                cmd_train(&cfg, out)
            }
            Command::Eval { config, set, checkpoint, out } => {
                let cfg = build_config(config.as_deref(), set)?;
                cmd_eval(&cfg, checkpoint, out)
            }
            Command::Analyze { config, set, checkpoint, out } => {
                let cfg = build_config(config.as_deref(), set)?;
                cmd_analyze(&cfg, checkpoint, out)
            }
        }
    };
    match run() {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
