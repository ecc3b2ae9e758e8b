//! Config-driven runs: generate a task, build and adapt a model, train it and
//! write metrics, checkpoints, the prune log and reports to a directory.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::thread;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{AdapterKind, AdapterPlan, AdapterSet, AdapterTargetSpec, FfnMatrices, PRESETS};
use crate::allocator::{read_prune_log, write_prune_log, PruneEvent};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result, StageExt};
use crate::qformer::{QFormer, QFormerConfig};
use crate::report::{
    check_budget_log, collect_final_ranks, parse_csv, replay_prune_log, LayerRanks, MatrixRank,
    ParamBudgetReport, RankDistributionReport,
};
use crate::scalar::Real;
use crate::tasks::{generate, TaskSpec};
use crate::trainer::{evaluate, prepare, train, EpochMetrics, NoObserver, RunConfig};

pub const ENV_OUTPUT_DIR: &str = "QPEFT_OUTPUT_DIR";
pub const ENV_THREADS: &str = "QPEFT_THREADS";
pub const SWEEP_RANKS: [usize; 4] = [1, 2, 4, 8];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// No adapters; every base weight trains.
    Full,
    Lora,
    #[default]
    AdaLora,
}

impl Method {
    pub fn adapter_kind(self) -> Option<AdapterKind> {
        match self {
            Method::Full => None,
            Method::Lora => Some(AdapterKind::Lora),
            Method::AdaLora => Some(AdapterKind::AdaLora),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub method: Method,
    /// Target preset: ffn, attn, self-attn, cross-attn or all.
    pub spec: String,
    /// LoRA rank, or the initial rank of SVD-form adapters.
    pub rank: usize,
    pub ffn_matrices: FfnMatrices,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            method: Method::AdaLora,
            spec: "all".into(),
            rank: 12,
            ffn_matrices: FfnMatrices::Both,
        }
    }
}

impl AdapterConfig {
    pub fn target_spec(&self) -> Result<AdapterTargetSpec> {
        Ok(AdapterTargetSpec::preset(&self.spec)?.with_ffn_matrices(self.ffn_matrices))
    }

    pub fn plan(&self) -> Result<Option<AdapterPlan>> {
        Ok(match self.method.adapter_kind() {
            None => None,
            Some(kind) => Some(AdapterPlan {
                kind,
                spec: self.target_spec()?,
                rank: self.rank,
            }),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    /// Independent seed replicas `seed, seed+1, ...`.
    pub replicas: usize,
    /// Worker threads for replicas; defaults to the available parallelism.
    pub threads: Option<usize>,
    pub output_dir: PathBuf,
    pub precision: Precision,
    pub model: QFormerConfig,
    pub adapter: AdapterConfig,
    pub task: TaskSpec,
    pub train: RunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 0,
            replicas: 1,
            threads: None,
            output_dir: PathBuf::from("runs/run"),
            precision: Precision::F64,
            model: QFormerConfig::default(),
            adapter: AdapterConfig::default(),
            task: TaskSpec::default(),
            train: RunConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    /// SHA-256 of the resolved config as written to `config.toml`.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.train.validate()?;
        if self.replicas == 0 {
            return Err(Error::Config("replicas must be positive".into()));
        }
        let (m, t) = (&self.model, &self.task);
        if t.image_dim != m.image_dim || t.num_classes != m.num_classes {
            return Err(Error::Config(format!(
                "task (image_dim {}, {} classes) does not match model (image_dim {}, {} classes)",
                t.image_dim, t.num_classes, m.image_dim, m.num_classes
            )));
        }
        if t.vocab_size > m.vocab_size || t.text_len > m.max_text_len {
            return Err(Error::Config("task text exceeds the model vocabulary or length".into()));
        }
        self.adapter.target_spec()?;
        Ok(())
    }

    /// Applies `QPEFT_OUTPUT_DIR` and `QPEFT_THREADS` through `get`.
    pub fn apply_overrides(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(dir) = get(ENV_OUTPUT_DIR) {
            self.output_dir = PathBuf::from(dir);
        }
        if let Some(t) = get(ENV_THREADS) {
            let n: usize = t
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Config(format!("{ENV_THREADS} must be a positive integer, got {t:?}")))?;
            self.threads = Some(n);
        }
        Ok(())
    }

    pub fn apply_env_overrides(&mut self) -> Result<()> {
        self.apply_overrides(|k| std::env::var(k).ok())
    }

    pub fn replica_seed(&self, replica: usize) -> u64 {
        self.seed.wrapping_add(replica as u64)
    }

    pub fn replica_dir(&self, replica: usize) -> PathBuf {
        if self.replicas == 1 {
            self.output_dir.clone()
        } else {
            self.output_dir.join(format!("seed-{}", self.replica_seed(replica)))
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// The rank × target-preset grid around `base`, one config per cell.
pub fn sweep_grid(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let mut out = Vec::new();
    for spec in PRESETS {
        for rank in SWEEP_RANKS {
            let mut c = base.clone();
            if c.adapter.method == Method::Full {
                c.adapter.method = Method::Lora;
            }
            c.adapter.spec = spec.to_string();
            c.adapter.rank = rank;
            c.name = format!("{}-{spec}-r{rank}", base.name);
            c.output_dir = base.output_dir.join(format!("{spec}-r{rank}"));
            out.push(c);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub config_sha256: String,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Accuracy of the best-epoch state on the test split, if there is one.
    pub test_accuracy: Option<f64>,
    pub epochs_run: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub retried: bool,
    pub final_active_rank: Option<usize>,
}

/// Everything a replica produces, before it is written out.
#[derive(Clone, Debug)]
pub struct ReplicaOutput {
    pub summary: RunSummary,
    pub metrics: Vec<EpochMetrics>,
    pub param_report: ParamBudgetReport,
    pub rank_report: Option<RankDistributionReport>,
    pub initial_ranks: Vec<MatrixRank>,
    pub prune_events: Vec<PruneEvent>,
    pub best: Checkpoint,
    pub last: Checkpoint,
}

/// Runs one replica in memory.
pub fn run_replica(config: &ExperimentConfig, replica: usize) -> Result<ReplicaOutput> {
    match config.precision {
        Precision::F64 => run_replica_as::<f64>(config, replica),
        Precision::F32 => run_replica_as::<f32>(config, replica),
    }
}

fn run_replica_as<T: Real>(config: &ExperimentConfig, replica: usize) -> Result<ReplicaOutput> {
    config.validate().stage("config")?;
    let seed = config.replica_seed(replica);
    let task = TaskSpec {
        seed: config.task.seed.wrapping_add(replica as u64),
        ..config.task.clone()
    };
    let data = generate(&task).stage("generate")?;

    let mut model = QFormer::<T>::new(config.model.clone(), seed).stage("model")?;
    let plan = config.adapter.plan().stage("attach")?;
    let mut adapters = match &plan {
        Some(p) => Some(
            AdapterSet::attach(&mut model, &p.spec, p.kind, p.rank, seed ^ 0xA5A5_5A5A).stage("attach")?,
        ),
        None => None,
    };
    let param_report = match &plan {
        Some(p) => ParamBudgetReport::new(&config.model, p),
        None => Ok(ParamBudgetReport::full_finetune(&config.model)),
    }
    .stage("param report")?;
    let initial_ranks = adapters
        .as_ref()
        .map(|s| {
            s.adapters()
                .iter()
                .map(|a| MatrixRank {
                    address: a.target(),
                    rank: a.rank(),
                })
                .collect()
        })
        .unwrap_or_default();

    let run_cfg = RunConfig {
        seed,
        ..config.train.clone()
    };
    let result = train(&mut model, adapters.as_mut(), &data, &run_cfg, &mut NoObserver).stage("train")?;

    let test = prepare::<T>(&data.test, task.n_img, task.image_dim).stage("evaluate")?;
    let test_accuracy = if test.is_empty() {
        None
    } else {
        Some(evaluate(&result.best.model, result.best.adapters.as_ref(), &test).stage("evaluate")?)
    };
    let rank_report = match &adapters {
        Some(s) if s.kind() == AdapterKind::AdaLora => {
            Some(collect_final_ranks(s, &config.model).stage("report")?)
        }
        _ => None,
    };
    let summary = RunSummary {
        name: config.name.clone(),
        seed,
        config_sha256: config.hash().stage("config")?,
        best_epoch: result.best_epoch,
        best_val_accuracy: result.best_val_accuracy,
        test_accuracy,
        epochs_run: result.epochs.len(),
        steps: result.steps,
        learning_rate: result.learning_rate,
        retried: result.retried,
        final_active_rank: adapters.as_ref().map(|s| s.total_active_rank()),
    };
    info!(
        "{} seed {seed}: best epoch {} val {:.4} test {:?}",
        config.name, summary.best_epoch, summary.best_val_accuracy, test_accuracy
    );
    Ok(ReplicaOutput {
        summary,
        metrics: result.epochs,
        param_report,
        rank_report,
        initial_ranks,
        prune_events: result.prune_events,
        best: Checkpoint::capture(&result.best.model, result.best.adapters.as_ref()),
        last: Checkpoint::capture(&model, adapters.as_ref()),
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<V: Serialize>(v: &V) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Parse(e.to_string()))
}

/// Writes a replica's artifacts into `dir`.
pub fn write_replica(config: &ExperimentConfig, out: &ReplicaOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("config.toml"), config.to_toml()?)?;
    write_file(&dir.join("config.sha256"), format!("{}\n", out.summary.config_sha256))?;
    let mut metrics = String::new();
    for m in &out.metrics {
        metrics.push_str(&serde_json::to_string(m).map_err(|e| Error::Parse(e.to_string()))?);
        metrics.push('\n');
    }
    write_file(&dir.join("metrics.jsonl"), metrics)?;
    write_file(&dir.join("summary.json"), to_json(&out.summary)?)?;
    write_file(&dir.join("param_report.json"), to_json(&out.param_report)?)?;
    out.best.save(&dir.join("checkpoint_best.json"))?;
    out.last.save(&dir.join("checkpoint_final.json"))?;
    if let Some(rep) = &out.rank_report {
        let mut log = Vec::new();
        write_prune_log(&mut log, &out.prune_events)?;
        write_file(&dir.join("prune_log.jsonl"), log)?;
        write_file(&dir.join("initial_ranks.json"), to_json(&out.initial_ranks)?)?;
        write_file(&dir.join("rank_report.csv"), rep.to_csv())?;
        write_file(&dir.join("rank_detail.csv"), rep.detail_csv())?;
        write_file(&dir.join("heatmap.svg"), rep.to_svg())?;
    }
    Ok(())
}

/// Runs every replica (in parallel when more than one thread is allowed)
/// and writes each to its directory. Results come back in replica order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ReplicaOutput>> {
    config.validate().stage("config")?;
    let threads = config
        .threads
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, config.replicas);
    let replicas: Vec<usize> = (0..config.replicas).collect();
    let mut results: Vec<Option<Result<ReplicaOutput>>> = (0..config.replicas).map(|_| None).collect();
    for chunk in replicas.chunks(threads) {
        let done: Vec<(usize, Result<ReplicaOutput>)> = thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&i| (i, s.spawn(move || run_replica(config, i))))
                .collect();
            handles
                .into_iter()
                .map(|(i, h)| {
                    let r = h
                        .join()
                        .unwrap_or_else(|_| Err(Error::State(format!("replica {i} panicked"))));
                    (i, r)
                })
                .collect()
        });
        for (i, r) in done {
            results[i] = Some(r);
        }
    }
    let mut outputs = Vec::with_capacity(config.replicas);
    for (i, r) in results.into_iter().enumerate() {
        let out = r.expect("every replica ran")?;
        write_replica(config, &out, &config.replica_dir(i)).stage("write")?;
        outputs.push(out);
    }
    Ok(outputs)
}

/// Reads the heatmap rows of a finished run directory.
pub fn load_heatmap(dir: &Path) -> Result<Vec<LayerRanks>> {
    let path = dir.join("rank_report.csv");
    if !path.exists() {
        if dir.join("summary.json").exists() {
            return Err(Error::Config(format!("no adaptive ranks in {}", dir.display())));
        }
        return Err(Error::Input(format!("{} is not a run directory", dir.display())));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_csv(&text)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifySummary {
    pub events: usize,
    pub adapters: usize,
    pub layers: usize,
}

/// Replays the prune log of a run directory and checks it against the
/// written heatmap (byte for byte), the logged budgets and the final
/// checkpoint's masks.
pub fn verify_run(dir: &Path) -> Result<VerifySummary> {
    let config = ExperimentConfig::load(&dir.join("config.toml"))?;
    if config.adapter.method != Method::AdaLora {
        return Err(Error::Config(format!("no adaptive ranks in {}", dir.display())));
    }
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    };
    let initial: Vec<MatrixRank> =
        serde_json::from_str(&read("initial_ranks.json")?).map_err(|e| Error::Parse(e.to_string()))?;
    let log_path = dir.join("prune_log.jsonl");
    let file = fs::File::open(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let events = read_prune_log(BufReader::new(file))?;

    let replayed = replay_prune_log(&config.model, &initial, &events)?;
    if replayed.to_csv() != read("rank_report.csv")? {
        return Err(Error::State("rank_report.csv differs from the prune-log replay".into()));
    }
    check_budget_log(initial.iter().map(|m| m.rank).sum(), &events)?;
    let (_, set) = Checkpoint::load(&dir.join("checkpoint_final.json"))?.restore::<f64>()?;
    let set = set.ok_or_else(|| Error::State("final checkpoint has no adapters".into()))?;
    if collect_final_ranks(&set, &config.model)? != replayed {
        return Err(Error::State("final checkpoint masks differ from the prune-log replay".into()));
    }
    Ok(VerifySummary {
        events: events.len(),
        adapters: initial.len(),
        layers: replayed.layers.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::TaskKind;

    pub(crate) fn tiny_config(method: Method, out: &Path) -> ExperimentConfig {
        let mut model = QFormerConfig::tiny(2, 8, 2);
        model.num_queries = 2;
        model.image_dim = 6;
        model.num_classes = 3;
        let mut c = ExperimentConfig {
            name: "tiny".into(),
            output_dir: out.to_path_buf(),
            model,
            adapter: AdapterConfig {
                method,
                spec: "all".into(),
                rank: if method == Method::Lora { 2 } else { 4 },
                ..AdapterConfig::default()
            },
            task: TaskSpec {
                kind: TaskKind::Alignment,
                num_classes: 3,
                n_train: 32,
                n_val: 8,
                n_test: 8,
                n_img: 3,
                image_dim: 6,
                ..TaskSpec::default()
            },
            ..ExperimentConfig::default()
        };
        c.train.max_epochs = 4;
        c.train.allocator.r_target = 2;
        c.train.allocator.final_epochs = 3;
        c
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = tiny_config(Method::AdaLora, Path::new("out"));
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
        assert_eq!(c.hash().unwrap(), ExperimentConfig::from_toml(&text).unwrap().hash().unwrap());
        assert_eq!(c.hash().unwrap().len(), 64);
        let err = ExperimentConfig::from_toml("bogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
        let err = ExperimentConfig::from_toml("[train]\nlearning_rate = 1.0\n").unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
        let partial = ExperimentConfig::from_toml("seed = 7\n[adapter]\nmethod = \"lora\"\nrank = 2\n").unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.adapter.method, Method::Lora);
    }

    #[test]
    fn mismatched_task_is_rejected() {
        let mut c = tiny_config(Method::Lora, Path::new("out"));
        c.task.image_dim = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn overrides() {
        let mut c = ExperimentConfig::default();
        c.apply_overrides(|k| match k {
            ENV_OUTPUT_DIR => Some("/tmp/x".into()),
            ENV_THREADS => Some("3".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(c.output_dir, PathBuf::from("/tmp/x"));
        assert_eq!(c.threads, Some(3));
        assert!(c.apply_overrides(|k| (k == ENV_THREADS).then(|| "0".into())).is_err());
    }

    #[test]
    fn sweep_covers_grid() {
        let grid = sweep_grid(&ExperimentConfig::default());
        assert_eq!(grid.len(), 20);
        let cells: std::collections::BTreeSet<_> =
            grid.iter().map(|c| (c.adapter.spec.clone(), c.adapter.rank)).collect();
        assert_eq!(cells.len(), 20);
        assert!(grid.iter().all(|c| c.validate().is_ok()));
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let mut c = tiny_config(Method::Lora, Path::new("out"));
        c.adapter.rank = 100;
        let err = run_replica(&c, 0).unwrap_err();
        assert!(err.to_string().starts_with("attach stage failed"), "{err}");
    }

    #[test]
    fn adaptive_run_writes_verifiable_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_config(Method::AdaLora, dir.path());
        let out = run_experiment(&c).unwrap();
        for f in [
            "config.toml",
            "config.sha256",
            "metrics.jsonl",
            "summary.json",
            "param_report.json",
            "checkpoint_best.json",
            "checkpoint_final.json",
            "prune_log.jsonl",
            "rank_report.csv",
            "heatmap.svg",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let v = verify_run(dir.path()).unwrap();
        assert_eq!(v.events, out[0].prune_events.len());
        assert!(v.events > 0);
        let on_disk = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
        let written = fs::read_to_string(dir.path().join("config.toml")).unwrap();
        assert_eq!(sha256_hex(written.as_bytes()), out[0].summary.config_sha256);
        assert_eq!(on_disk, c);

        fs::write(dir.path().join("rank_report.csv"), "layer,self_attn,cross_attn,ffn\n").unwrap();
        assert!(matches!(verify_run(dir.path()), Err(Error::State(_))));
    }

    #[test]
    fn lora_run_has_param_report_only() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_config(Method::Lora, dir.path());
        let out = run_experiment(&c).unwrap();
        assert!(out[0].rank_report.is_none());
        assert!(dir.path().join("param_report.json").exists());
        assert!(!dir.path().join("rank_report.csv").exists());
        let err = load_heatmap(dir.path()).unwrap_err();
        assert!(err.to_string().contains("no adaptive ranks"));
    }

    #[test]
    fn replicas_match_sequential_runs() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny_config(Method::AdaLora, dir.path());
        c.replicas = 2;
        c.threads = Some(2);
        c.train.max_epochs = 3;
        let par = run_experiment(&c).unwrap();
        for (i, out) in par.iter().enumerate() {
            let solo = run_replica(&c, i).unwrap();
            assert_eq!(solo.summary, out.summary);
            assert_eq!(solo.rank_report, out.rank_report);
            assert!(c.replica_dir(i).join("rank_report.csv").exists());
        }
        assert_ne!(par[0].summary.seed, par[1].summary.seed);
    }

    #[test]
    fn single_precision_runs() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny_config(Method::Lora, dir.path());
        c.precision = Precision::F32;
        c.train.max_epochs = 2;
        let out = run_replica(&c, 0).unwrap();
        assert_eq!(out.summary.epochs_run, 2);
    }
}
