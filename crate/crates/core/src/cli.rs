//! The `snare` command line.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 verification failure. Every command that writes into `--out` also
//! writes `manifest.json` there.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::data::{
    instance_statistics, load_dataset, Dataset, FoldTable, PairFold, TaskInstance, ViewIndex,
    FOLDS_FILE, INSTANCES_FILE, OBJECTS_FILE,
};
use crate::evaluation::{
    evaluate, render_table, rotation_report, to_jsonl, EvalError, EvalOptions,
};
use crate::grounding::{LagorScorer, MatchScorer, ReferentScorer, ViewMode, ZeroShot};
use crate::heads::{
    gradient_check, load_checkpoint, load_match_head, load_view_head, save_checkpoint,
    Checkpoint, GradCheckConfig, HeadKind, MatchHead, ViewHead,
};
use crate::manifest::RunManifest;
use crate::store::{decode_store, encode_store, EmbeddingVector, FeatureStore, StoreMeta};
use crate::synth::{separable, SynthConfig};
use crate::tools::{
    classify_pairs, descriptor_for, lexical_profile, pairs_from_instances, split_folds,
    CategoryInput, HypernymClosure, SplitConfig, ToolError, WordVectorTable,
};
use crate::training::{train_lagor, train_match, TrainConfig, TrainError};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_VERIFY: u8 = 4;

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: EXIT_USAGE,
            error: error.into(),
        }
    }

    pub fn data(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: EXIT_DATA,
            error: error.into(),
        }
    }

    pub fn verify(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: EXIT_VERIFY,
            error: error.into(),
        }
    }
}

type CmdResult = Result<(), Failure>;

trait OrFail<T> {
    fn usage(self) -> Result<T, Failure>;
    fn data(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrFail<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(Failure::usage)
    }
    fn data(self) -> Result<T, Failure> {
        self.map_err(Failure::data)
    }
}

#[derive(Debug, Parser)]
#[command(name = "snare", version, about = "Referent selection over multi-view object embeddings")]
pub struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Assign categories to folds and summarize pair folds.
    Split(SplitArgs),
    /// Train a match head or LaGOR heads.
    Train(TrainArgs),
    /// Evaluate a scorer and write the report and prediction log.
    Eval(EvalArgs),
    /// Gradient checks, format round trips, checkpoint and manifest checks.
    Verify(VerifyArgs),
    /// Expression statistics and lexical profile.
    Stats(StatsArgs),
    /// Match-score change when the gold object's view is rotated.
    RotateReport(RotateArgs),
    /// Write a separable synthetic dataset and feature store.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Word-vector text file.
    #[arg(long, required_unless_present = "folds")]
    pub vectors: Option<PathBuf>,
    /// TOML with `[anchors]` (fold -> words) and `[proportions]` (fold -> share).
    #[arg(long, required_unless_present = "folds")]
    pub anchors: Option<PathBuf>,
    /// JSONL of `{category, descriptor}` overriding the name heuristics.
    #[arg(long)]
    pub descriptors: Option<PathBuf>,
    /// Use this fold file instead of splitting.
    #[arg(long, conflicts_with_all = ["vectors", "anchors", "descriptors"])]
    pub folds: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TrainMode {
    Match,
    Lagor,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML training config.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, value_enum)]
    pub mode: TrainMode,
    /// Pretrained match checkpoint (required for lagor).
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Fold file overriding the dataset's.
    #[arg(long)]
    pub folds: Option<PathBuf>,
    /// Pair folds to train on.
    #[arg(long, value_delimiter = ',', default_value = "train-train")]
    pub train_folds: Vec<String>,
    /// Pair folds for checkpoint selection; empty keeps the last epoch.
    #[arg(long, value_delimiter = ',', default_value = "val-val")]
    pub val_folds: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Match checkpoint, or `zeroshot` for the cosine baseline.
    #[arg(long)]
    pub checkpoint: String,
    /// View checkpoint; with it the scorer is reported as LaGOR.
    #[arg(long)]
    pub view_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, value_enum)]
    pub views: ViewMode,
    /// Seed of the per-instance view selection; required for single and two.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub folds: Option<PathBuf>,
    /// Pair folds to evaluate; `all` ignores folds.
    #[arg(long, value_delimiter = ',', default_value = "val-val")]
    pub eval_folds: Vec<String>,
    /// Name of the evaluated fold in the report.
    #[arg(long, default_value = "val")]
    pub fold_name: String,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub skip_missing: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 128)]
    pub probes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoints that must load cleanly.
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    /// Feature stores that must decode and re-encode to identical bytes.
    #[arg(long)]
    pub store: Vec<PathBuf>,
    /// Run manifests whose digests must still match.
    #[arg(long)]
    pub manifest: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Hypernym closure (`word<TAB>ancestor` lines).
    #[arg(long)]
    pub closure: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "color,shape")]
    pub targets: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RotateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub folds: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "val-val")]
    pub eval_folds: Vec<String>,
    /// Ring positions to rotate by.
    #[arg(long, default_value_t = 1, allow_negative_numbers = true)]
    pub steps: i64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML synthetic config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    /// Add linearly separable view codes.
    #[arg(long)]
    pub view_codes: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Split(a) => cmd_split(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Stats(a) => cmd_stats(&a),
        Command::RotateReport(a) => cmd_rotate(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn require_file(path: &Path, what: &str) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::usage(anyhow!("{what} file not found: {}", path.display())))
    }
}

fn create_out(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .usage()
}

fn write_out(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> CmdResult {
    let path = dir.join(name);
    fs::write(&path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .data()
}

fn add_dataset_inputs(m: &mut RunManifest, dir: &Path) -> CmdResult {
    for name in [OBJECTS_FILE, INSTANCES_FILE, FOLDS_FILE] {
        let p = dir.join(name);
        if p.is_file() {
            m.add_input(&p).data()?;
        }
    }
    Ok(())
}

fn finish(m: &mut RunManifest, out: &Path, outputs: &[&str]) -> CmdResult {
    for name in outputs {
        m.add_output(out, name).data()?;
    }
    m.write(out).data()?;
    Ok(())
}

fn load_with_folds(dataset: &Path, folds: Option<&Path>) -> Result<Dataset, Failure> {
    if !dataset.is_dir() {
        return Err(Failure::usage(anyhow!(
            "dataset directory not found: {}",
            dataset.display()
        )));
    }
    let mut d = load_dataset(dataset).data()?;
    if let Some(f) = folds {
        require_file(f, "fold")?;
        d.folds = Some(FoldTable::load(f).data()?);
    }
    Ok(d)
}

fn parse_pair_folds(labels: &[String]) -> Result<Option<Vec<PairFold>>, Failure> {
    if labels.iter().any(|l| l == "all") {
        return Ok(None);
    }
    labels
        .iter()
        .filter(|l| !l.is_empty())
        .map(|l| {
            PairFold::ALL
                .iter()
                .copied()
                .find(|p| p.label().eq_ignore_ascii_case(l))
                .ok_or_else(|| {
                    Failure::usage(anyhow!(
                        "unknown pair fold `{l}` (expected one of: {}, all)",
                        PairFold::ALL.map(|p| p.label().to_lowercase()).join(", ")
                    ))
                })
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Some)
}

fn select(dataset: &Dataset, labels: &[String]) -> Result<Vec<TaskInstance>, Failure> {
    match parse_pair_folds(labels)? {
        None => Ok(dataset.instances.clone()),
        Some(wanted) if wanted.is_empty() => Ok(Vec::new()),
        Some(wanted) => {
            if dataset.folds.is_none() {
                return Err(Failure::data(anyhow!(
                    "dataset has no {FOLDS_FILE} and no --folds was given"
                )));
            }
            Ok(dataset.select(&wanted))
        }
    }
}

fn open_store(path: &Path) -> Result<FeatureStore, Failure> {
    require_file(path, "feature store")?;
    FeatureStore::open(path)
        .with_context(|| format!("reading {}", path.display()))
        .data()
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::Config(_) => Failure::usage(e),
        other => Failure::data(other),
    }
}

fn cmd_split(a: &SplitArgs) -> CmdResult {
    let mut manifest = RunManifest::new("split", None, serde_json::Value::Null);
    let mut dataset = load_with_folds(&a.dataset, None)?;
    add_dataset_inputs(&mut manifest, &a.dataset)?;

    let (folds, warnings) = if let Some(f) = &a.folds {
        require_file(f, "fold")?;
        manifest.add_input(f).data()?;
        (FoldTable::load(f).data()?, Vec::new())
    } else {
        let vectors_path = a.vectors.as_ref().expect("required by clap");
        let anchors_path = a.anchors.as_ref().expect("required by clap");
        require_file(vectors_path, "vectors")?;
        require_file(anchors_path, "anchors")?;
        let text = fs::read_to_string(anchors_path).usage()?;
        let config: SplitConfig = toml::from_str(&text)
            .with_context(|| format!("parsing {}", anchors_path.display()))
            .usage()?;
        manifest.config = serde_json::to_value(&config).expect("config serializes");
        let vectors = WordVectorTable::load(vectors_path).data()?;
        manifest.add_input(vectors_path).data()?;
        manifest.add_input(anchors_path).data()?;

        let mut overrides = BTreeMap::new();
        if let Some(p) = &a.descriptors {
            require_file(p, "descriptors")?;
            manifest.add_input(p).data()?;
            let text = fs::read_to_string(p).data()?;
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                #[derive(serde::Deserialize)]
                #[serde(deny_unknown_fields)]
                struct Row {
                    category: String,
                    descriptor: String,
                }
                let row: Row = serde_json::from_str(line)
                    .with_context(|| format!("{}:{}", p.display(), n + 1))
                    .data()?;
                overrides.insert(row.category, row.descriptor);
            }
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for o in &dataset.objects {
            *counts.entry(o.category.as_str()).or_default() += 1;
        }
        let categories: Vec<CategoryInput> = counts
            .into_iter()
            .map(|(c, n)| CategoryInput {
                category: c.to_string(),
                descriptor: overrides.get(c).cloned().unwrap_or_else(|| descriptor_for(c)),
                object_count: n,
            })
            .collect();
        let outcome = split_folds(&categories, &vectors, &config).map_err(|e| match e {
            ToolError::Config(_) | ToolError::NoAnchor(_) => Failure::usage(e),
            other => Failure::data(other),
        })?;
        for w in &outcome.warnings {
            log::warn!("{w}");
        }
        (FoldTable::from_assignments(outcome.assignments).data()?, outcome.warnings)
    };

    dataset.folds = Some(folds.clone());
    let pairs = pairs_from_instances(&dataset.instances);
    let (report, flags) = classify_pairs(&pairs, &folds).data()?;

    create_out(&a.out)?;
    folds.save(&a.out.join(FOLDS_FILE)).data()?;
    write_out(&a.out, "pair_report.txt", report.render())?;
    write_out(&a.out, "pair_report.jsonl", to_jsonl(&report.rows))?;
    let flagged: Vec<serde_json::Value> = pairs
        .iter()
        .zip(&flags)
        .map(|(p, f)| json!({"object_a": p.object_a, "object_b": p.object_b, "usability": f}))
        .collect();
    write_out(&a.out, "pair_usability.jsonl", to_jsonl(&flagged))?;
    write_out(&a.out, "warnings.txt", warnings.join("\n"))?;
    print!("{}", report.render());
    finish(
        &mut manifest,
        &a.out,
        &[FOLDS_FILE, "pair_report.txt", "pair_report.jsonl", "pair_usability.jsonl", "warnings.txt"],
    )
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    require_file(&a.config, "config")?;
    let config = TrainConfig::load(&a.config).map_err(train_failure)?;
    if a.mode == TrainMode::Lagor && a.pretrained.is_none() {
        return Err(Failure::usage(anyhow!(
            "--mode lagor needs --pretrained <match checkpoint>"
        )));
    }
    let dataset = load_with_folds(&a.dataset, a.folds.as_deref())?;
    let store = open_store(&a.store)?;
    let train = select(&dataset, &a.train_folds)?;
    let val = select(&dataset, &a.val_folds)?;
    if train.is_empty() {
        return Err(Failure::data(anyhow!(
            "no instances in pair folds {:?}",
            a.train_folds
        )));
    }

    let mut manifest = RunManifest::new(
        &format!("train {}", if a.mode == TrainMode::Match { "match" } else { "lagor" }),
        Some(config.seed),
        serde_json::to_value(&config).expect("config serializes"),
    );
    manifest.add_input(&a.config).data()?;
    add_dataset_inputs(&mut manifest, &a.dataset)?;
    if let Some(f) = &a.folds {
        manifest.add_input(f).data()?;
    }
    manifest.add_input(&a.store).data()?;

    log::info!("training on {} instances, selecting on {}", train.len(), val.len());
    let started = Instant::now();
    create_out(&a.out)?;
    let outputs: Vec<&str> = match a.mode {
        TrainMode::Match => {
            let out = train_match(&config, &train, &val, &store).map_err(train_failure)?;
            save_checkpoint(
                &a.out.join("match.ckpt"),
                &Checkpoint {
                    kind: HeadKind::Match,
                    seed: config.seed,
                    step: out.steps,
                    mlp: out.head.into_mlp(),
                },
            )
            .data()?;
            write_out(&a.out, "record.jsonl", out.record.to_jsonl())?;
            vec!["match.ckpt", "record.jsonl"]
        }
        TrainMode::Lagor => {
            let path = a.pretrained.as_ref().expect("checked above");
            require_file(path, "pretrained checkpoint")?;
            manifest.add_input(path).data()?;
            let (head, _) = load_match_head(path, store.dimension()).data()?;
            let out = train_lagor(&config, &train, &val, &store, head).map_err(train_failure)?;
            for (name, kind, mlp) in [
                ("match.ckpt", HeadKind::Match, out.match_head.into_mlp()),
                ("view.ckpt", HeadKind::View, out.view_head.into_mlp()),
            ] {
                save_checkpoint(
                    &a.out.join(name),
                    &Checkpoint {
                        kind,
                        seed: config.seed,
                        step: out.steps,
                        mlp,
                    },
                )
                .data()?;
            }
            write_out(&a.out, "record.jsonl", out.record.to_jsonl())?;
            vec!["match.ckpt", "view.ckpt", "record.jsonl"]
        }
    };
    log::info!("trained in {:.1}s", started.elapsed().as_secs_f64());
    finish(&mut manifest, &a.out, &outputs)
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    if a.views.is_stochastic() && a.seed.is_none() {
        return Err(Failure::usage(anyhow!(
            "--views {} selects random views per instance; pass --seed",
            a.views
        )));
    }
    let dataset = load_with_folds(&a.dataset, a.folds.as_deref())?;
    let store = open_store(&a.store)?;
    let instances = select(&dataset, &a.eval_folds)?;

    let mut manifest = RunManifest::new(
        "eval",
        a.seed,
        json!({
            "checkpoint": a.checkpoint,
            "view_checkpoint": a.view_checkpoint,
            "views": a.views,
            "eval_folds": a.eval_folds,
            "fold_name": a.fold_name,
            "skip_missing": a.skip_missing,
        }),
    );
    add_dataset_inputs(&mut manifest, &a.dataset)?;
    if let Some(f) = &a.folds {
        manifest.add_input(f).data()?;
    }
    manifest.add_input(&a.store).data()?;

    let match_head: Option<MatchHead> = if a.checkpoint == "zeroshot" {
        None
    } else {
        let p = Path::new(&a.checkpoint);
        require_file(p, "checkpoint")?;
        manifest.add_input(p).data()?;
        Some(load_match_head(p, store.dimension()).data()?.0)
    };
    let view_head: Option<ViewHead> = match &a.view_checkpoint {
        Some(p) => {
            require_file(p, "view checkpoint")?;
            manifest.add_input(p).data()?;
            Some(load_view_head(p, store.dimension()).data()?.0)
        }
        None => None,
    };
    let zero = ZeroShot;
    let matcher;
    let lagor;
    let scorer: &dyn ReferentScorer = match (&match_head, &view_head) {
        (None, None) => &zero,
        (None, Some(_)) => {
            return Err(Failure::usage(anyhow!("--view-checkpoint needs a match checkpoint")))
        }
        (Some(h), None) => {
            matcher = MatchScorer(h);
            &matcher
        }
        (Some(h), Some(v)) => {
            lagor = LagorScorer {
                head: h,
                view: Some(v),
            };
            &lagor
        }
    };
    let options = EvalOptions {
        skip_missing: a.skip_missing,
        workers: a.workers,
    };
    let eval = evaluate(scorer, &instances, &store, a.views, a.seed, &a.fold_name, &options)
        .map_err(|e| match e {
            EvalError::SeedRequired(_) => Failure::usage(e),
            other => Failure::data(other),
        })?;

    create_out(&a.out)?;
    let table = render_table(std::slice::from_ref(&eval.report));
    write_out(&a.out, "report.txt", &table)?;
    write_out(&a.out, "report.jsonl", to_jsonl(std::slice::from_ref(&eval.report)))?;
    write_out(&a.out, "predictions.jsonl", eval.log_jsonl())?;
    print!("{table}");
    finish(&mut manifest, &a.out, &["report.txt", "report.jsonl", "predictions.jsonl"])
}

fn check_line(ok: bool, name: &str, detail: &str) -> bool {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

/// Random store round trip: decode(encode(s)) re-encodes to the same bytes.
fn store_round_trip(seed: u64, languages: usize, objects: usize) -> Result<bool, anyhow::Error> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 16;
    let mut store = FeatureStore::new(StoreMeta::new("verify", dim));
    let vector = |rng: &mut ChaCha8Rng| {
        EmbeddingVector::new((0..dim).map(|_| rng.gen_range(-4.0f32..4.0)).collect())
    };
    for i in 0..languages {
        store.insert_language(format!("e{i}"), vector(&mut rng)?)?;
    }
    for o in 0..objects {
        for v in ViewIndex::all() {
            store.insert_view(format!("o{o}"), v, vector(&mut rng)?)?;
        }
    }
    let bytes = encode_store(&store.to_entries())?;
    let back = decode_store(&bytes)?;
    Ok(encode_store(&back.to_entries())? == bytes && back.to_entries() == store.to_entries())
}

fn cmd_verify(a: &VerifyArgs) -> CmdResult {
    let mut ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let heads = [
        ("match head gradients", MatchHead::standard(512, &mut rng).data()?.into_mlp()),
        ("view head gradients", ViewHead::standard(512, &mut rng).data()?.into_mlp()),
    ];
    for (name, mlp) in heads {
        let config = GradCheckConfig {
            probes: a.probes,
            tolerance: a.tolerance,
            seed: a.seed,
            ..GradCheckConfig::default()
        };
        let report = gradient_check(&mlp, &config).map_err(Failure::verify)?;
        ok &= check_line(
            report.passed,
            name,
            &format!(
                "{} probes, max relative error {:.3e} (tolerance {:.0e}), {} redrawn",
                report.probes, report.max_rel_error, report.tolerance, report.redrawn
            ),
        );
    }
    for (languages, objects) in [(0, 0), (1, 0), (0, 1), (5, 3)] {
        let passed = store_round_trip(a.seed, languages, objects).map_err(Failure::verify)?;
        ok &= check_line(
            passed,
            "store round trip",
            &format!("{languages} language and {} view records", 8 * objects),
        );
    }
    for p in &a.store {
        let result = fs::read(p)
            .map_err(anyhow::Error::from)
            .and_then(|bytes| {
                let s = decode_store(&bytes)?;
                Ok(encode_store(&s.to_entries())? == bytes)
            });
        ok &= check_line(
            matches!(result, Ok(true)),
            "store file",
            &match result {
                Ok(true) => format!("{} re-encodes identically", p.display()),
                Ok(false) => format!("{} re-encodes differently", p.display()),
                Err(e) => format!("{}: {e:#}", p.display()),
            },
        );
    }
    for p in &a.checkpoint {
        let result = load_checkpoint(p);
        ok &= check_line(
            result.is_ok(),
            "checkpoint",
            &match &result {
                Ok(c) => format!("{} loads ({:?} head, step {})", p.display(), c.kind, c.step),
                Err(e) => format!("{}: {e}", p.display()),
            },
        );
    }
    for p in &a.manifest {
        let dir = p.parent().unwrap_or(Path::new("."));
        match RunManifest::read(p) {
            Ok(m) => {
                let bad = m.verify(dir);
                ok &= check_line(
                    bad.is_empty(),
                    "manifest",
                    &if bad.is_empty() {
                        format!("{} digests match", p.display())
                    } else {
                        let names: Vec<&str> = bad.iter().map(|b| b.path.as_str()).collect();
                        format!("{} mismatched: {}", p.display(), names.join(", "))
                    },
                );
            }
            Err(e) => ok &= check_line(false, "manifest", &e.to_string()),
        }
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::verify(anyhow!("verification failed")))
    }
}

fn cmd_stats(a: &StatsArgs) -> CmdResult {
    let dataset = load_with_folds(&a.dataset, None)?;
    let stats = instance_statistics(&dataset.instances);
    let mut text = String::new();
    for (name, m) in [
        ("overall", &stats.overall),
        ("visual", &stats.visual),
        ("blindfolded", &stats.blindfolded),
    ] {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        text.push_str(&format!(
            "{name:<12} expressions {:>7}  tokens {:>8}  types {:>7}  length {} ± {}\n",
            m.count,
            m.tokens,
            m.types,
            fmt(m.mean),
            fmt(m.stddev)
        ));
    }
    let mut records = vec![serde_json::to_value(&stats).expect("stats serialize")];
    let mut manifest = RunManifest::new("stats", None, json!({"targets": a.targets}));
    add_dataset_inputs(&mut manifest, &a.dataset)?;
    if let Some(p) = &a.closure {
        require_file(p, "closure")?;
        manifest.add_input(p).data()?;
        let closure = HypernymClosure::load(p).data()?;
        let targets: Vec<&str> = a.targets.iter().map(String::as_str).collect();
        let profile =
            lexical_profile(dataset.instances.iter().map(|i| &i.expression), &closure, &targets);
        text.push('\n');
        text.push_str(&profile.render());
        records.push(serde_json::to_value(&profile).expect("profile serializes"));
    }
    print!("{text}");
    if let Some(out) = &a.out {
        create_out(out)?;
        write_out(out, "stats.txt", &text)?;
        write_out(out, "stats.jsonl", to_jsonl(&records))?;
        finish(&mut manifest, out, &["stats.txt", "stats.jsonl"])?;
    }
    Ok(())
}

fn cmd_rotate(a: &RotateArgs) -> CmdResult {
    let dataset = load_with_folds(&a.dataset, a.folds.as_deref())?;
    let store = open_store(&a.store)?;
    require_file(&a.checkpoint, "checkpoint")?;
    let (head, _) = load_match_head(&a.checkpoint, store.dimension()).data()?;
    let instances = select(&dataset, &a.eval_folds)?;
    let missing = store.missing_keys(&instances);
    if !missing.is_empty() {
        return Err(Failure::data(anyhow!("missing embeddings: {}", missing.join(", "))));
    }
    let records = rotation_report(&head, &instances, &store, a.steps).data()?;

    let with_pct: Vec<f64> = records.iter().filter_map(|r| r.delta.percent).collect();
    let mean_delta = records.iter().map(|r| r.delta.delta).sum::<f64>() / records.len().max(1) as f64;
    let summary = json!({
        "rotations": records.len(),
        "steps": a.steps,
        "mean_delta": mean_delta,
        "with_percent": with_pct.len(),
        "zero_baseline": records.len() - with_pct.len(),
        "mean_percent": (!with_pct.is_empty()).then(|| with_pct.iter().sum::<f64>() / with_pct.len() as f64),
    });

    let mut manifest = RunManifest::new("rotate-report", None, json!({"steps": a.steps, "eval_folds": a.eval_folds}));
    add_dataset_inputs(&mut manifest, &a.dataset)?;
    if let Some(f) = &a.folds {
        manifest.add_input(f).data()?;
    }
    manifest.add_input(&a.store).data()?;
    manifest.add_input(&a.checkpoint).data()?;
    create_out(&a.out)?;
    write_out(&a.out, "rotations.jsonl", to_jsonl(&records))?;
    let mut s = serde_json::to_string_pretty(&summary).expect("summary serializes");
    s.push('\n');
    write_out(&a.out, "summary.json", &s)?;
    print!("{s}");
    finish(&mut manifest, &a.out, &["rotations.jsonl", "summary.json"])
}

fn cmd_synth(a: &SynthArgs) -> CmdResult {
    let mut config = match &a.config {
        Some(p) => {
            require_file(p, "synth config")?;
            let text = fs::read_to_string(p).usage()?;
            toml::from_str::<SynthConfig>(&text)
                .with_context(|| format!("parsing {}", p.display()))
                .usage()?
        }
        None => SynthConfig::default(),
    };
    config.seed = a.seed;
    config.view_codes |= a.view_codes;
    let fixture = separable(&config).usage()?;
    let mut manifest = RunManifest::new(
        "synth",
        Some(a.seed),
        serde_json::to_value(&config).expect("config serializes"),
    );
    if let Some(p) = &a.config {
        manifest.add_input(p).data()?;
    }
    let dataset_dir = a.out.join("dataset");
    fixture.dataset.save(&dataset_dir).data()?;
    fixture.store.save(&a.out.join("store.bin")).data()?;
    println!(
        "{} objects, {} instances, store dimension {}",
        fixture.dataset.objects.len(),
        fixture.dataset.instances.len(),
        fixture.store.dimension()
    );
    finish(
        &mut manifest,
        &a.out,
        &[
            "dataset/objects.jsonl",
            "dataset/instances.jsonl",
            "dataset/folds.jsonl",
            "store.bin",
        ],
    )
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
    }
}
