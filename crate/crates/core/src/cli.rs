//! Command implementations behind the `scenegcn` binary.
//!
//! Every command is deterministic given its inputs and seed, and writes a
//! run manifest (`<out>.manifest.json`) listing content digests of all
//! inputs and outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::ablation::AblationConfig;
use crate::config::{generator_config_from_file, train_config_from_file};
use crate::datamodel::{load_dataset, save_dataset, TaskMode};
use crate::error::{Error, Result};
use crate::metrics::{parse_per_predicate_csv, MetricReport};
use crate::model::{evaluate_frequency_baseline, Model, ModelConfig, ModelParams};
use crate::prior::{build_cooccurrence, frequency_baseline, load_csv, save_csv, CooccurrenceMatrix};
use crate::synthgen::{generate_dataset, FeatureOracle};
use crate::training::{history_to_csv, Checkpoint, Trainer};

#[derive(Debug, Serialize)]
struct ArtifactDigest {
    path: String,
    sha256: String,
}

/// Reproducibility record: config snapshot plus digests of every file the
/// run read or wrote.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    inputs: Vec<ArtifactDigest>,
    outputs: Vec<ArtifactDigest>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn digests(paths: &[&Path]) -> Result<Vec<ArtifactDigest>> {
    paths
        .iter()
        .map(|p| {
            Ok(ArtifactDigest {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

pub fn manifest_path(out: &Path) -> PathBuf {
    PathBuf::from(format!("{}.manifest.json", out.display()))
}

fn write_manifest(
    command: &str,
    seed: Option<u64>,
    config: serde_json::Value,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        seed,
        config,
        inputs: digests(inputs)?,
        outputs: digests(outputs)?,
    };
    let path = manifest_path(outputs[0]);
    let mut json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Data(format!("manifest encode: {e}")))?;
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn run_gen_data(config_path: &Path, out: &Path) -> Result<()> {
    let config = generator_config_from_file(config_path)?;
    let dataset = generate_dataset(&config)?;
    save_dataset(&dataset, out)?;
    write_manifest(
        "gen-data",
        Some(config.seed),
        serde_json::to_value(&config).unwrap(),
        &[config_path],
        &[out],
    )?;
    println!(
        "wrote {} images ({} relations) to {}",
        dataset.images.len(),
        dataset.images.iter().map(|i| i.relations.len()).sum::<usize>(),
        out.display()
    );
    Ok(())
}

pub fn run_build_prior(data: &Path, out: &Path) -> Result<()> {
    let dataset = load_dataset(data)?;
    let matrix = build_cooccurrence(&dataset)?;
    save_csv(&matrix, out)?;
    write_manifest(
        "build-prior",
        None,
        serde_json::json!({ "num_predicates": matrix.size() }),
        &[data],
        &[out],
    )?;
    println!("wrote {0}x{0} co-occurrence matrix to {1}", matrix.size(), out.display());
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub data: PathBuf,
    pub prior: PathBuf,
    pub config: PathBuf,
    pub task: String,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub no_object_branch: bool,
    pub no_relation_branch: bool,
    pub no_prior: bool,
    pub heads: usize,
    pub single_node_coefficients: bool,
}

impl TrainArgs {
    fn ablation(&self) -> AblationConfig {
        AblationConfig {
            use_object_branch: !self.no_object_branch,
            use_relation_branch: !self.no_relation_branch,
            use_prior: !self.no_prior,
            num_heads: self.heads,
            single_node_coefficients: self.single_node_coefficients,
        }
    }
}

pub fn run_train(args: &TrainArgs) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let task = TaskMode::parse(&args.task)?;
    let (train_config, overrides) = train_config_from_file(&args.config)?;
    let prior = load_csv(&args.prior)?;

    let mut trainer = match &args.resume {
        Some(ckpt_path) => {
            let ckpt = Checkpoint::load(ckpt_path)?;
            Trainer::from_checkpoint(ckpt, &dataset)?
        }
        None => {
            let ablation = args.ablation();
            let mut model_config = ModelConfig::for_meta(&dataset.meta);
            overrides.apply(&mut model_config);
            if prior.size() != model_config.num_predicates {
                return Err(Error::Data(format!(
                    "prior is {}x{0} but dataset has {} predicate classes",
                    prior.size(),
                    model_config.num_predicates
                )));
            }
            let params = ModelParams::new(model_config, ablation.num_heads, train_config.seed);
            let model = crate::ablation::assemble(params, ablation, prior)?;
            Trainer::new(model, &dataset, task, train_config)?
        }
    };

    while !trainer.is_done() {
        let stats = trainer.run_epoch()?;
        println!(
            "epoch {:>3}  loss {:.4}  val R@50 {:.4}  val mR@50 {:.4}  lr {:.2e}",
            stats.epoch,
            stats.train_loss,
            stats.val_recall_at_50,
            stats.val_mean_recall_at_50,
            stats.learning_rate
        );
    }
    trainer.finalize()?;

    trainer.checkpoint().save(&args.out)?;
    let history_path = PathBuf::from(format!("{}.history.csv", args.out.display()));
    fs::write(&history_path, history_to_csv(&trainer.history))
        .map_err(|e| Error::io(history_path.display().to_string(), e))?;

    write_manifest(
        "train",
        Some(trainer.config.seed),
        serde_json::json!({
            "task": task.as_str(),
            "train": serde_json::to_value(&trainer.config).unwrap(),
            "ablation": trainer.model.ablation.describe(),
            "resumed": args.resume.is_some(),
        }),
        &[&args.data, &args.prior, &args.config],
        &[&args.out, &history_path],
    )?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub data: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub freq_from: Option<PathBuf>,
    pub task: String,
    pub out: PathBuf,
}

/// Rebuild a trained model from its checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
    let prior = CooccurrenceMatrix::from_rows(ckpt.model_config.num_predicates, ckpt.prior.clone())?;
    let params = ModelParams::new(ckpt.model_config.clone(), ckpt.ablation.num_heads, 0);
    let model = crate::ablation::assemble(params, ckpt.ablation.clone(), prior)?;
    let mut model = model;
    model.params.pool.load_named(&ckpt.params)?;
    Ok(model)
}

pub fn run_evaluate(args: &EvaluateArgs) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let oracle = FeatureOracle::for_dataset(&dataset)?;
    let task = TaskMode::parse(&args.task)?;

    let (report, inputs): (MetricReport, Vec<&Path>) = match (&args.checkpoint, &args.freq_from) {
        (Some(ckpt_path), None) => {
            let ckpt = Checkpoint::load(ckpt_path)?;
            if ckpt.task != task {
                return Err(Error::Config(format!(
                    "checkpoint was trained for task `{}`, asked to evaluate `{}`",
                    ckpt.task.as_str(),
                    task.as_str()
                )));
            }
            if ckpt.model_config.num_predicates != dataset.meta.num_predicates {
                return Err(Error::Data(format!(
                    "checkpoint has {} predicate classes, dataset has {}",
                    ckpt.model_config.num_predicates, dataset.meta.num_predicates
                )));
            }
            let model = model_from_checkpoint(&ckpt)?;
            (
                model.evaluate_on(&oracle, &dataset.images, task, task.as_str())?,
                vec![args.data.as_path(), ckpt_path.as_path()],
            )
        }
        (None, Some(train_path)) => {
            let train_data = load_dataset(train_path)?;
            let baseline = frequency_baseline(&train_data)?;
            (
                evaluate_frequency_baseline(
                    &baseline,
                    &oracle,
                    &dataset.images,
                    task,
                    task.as_str(),
                    dataset.meta.num_predicates,
                )?,
                vec![args.data.as_path(), train_path.as_path()],
            )
        }
        _ => {
            return Err(Error::Config(
                "pass exactly one of --checkpoint or --freq-from".into(),
            ))
        }
    };

    fs::write(&args.out, report.to_csv())
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    let per_pred_path = args.out.with_extension("per_predicate.csv");
    fs::write(&per_pred_path, report.per_predicate_csv())
        .map_err(|e| Error::io(per_pred_path.display().to_string(), e))?;

    write_manifest(
        "evaluate",
        None,
        serde_json::json!({ "task": task.as_str() }),
        &inputs,
        &[&args.out, &per_pred_path],
    )?;
    for row in report.rows() {
        println!(
            "{} {} {}@{} = {:.4}",
            row.task, row.mode, row.metric, row.k, row.value
        );
    }
    Ok(())
}

/// Per-predicate recall deltas between two reports, ordered by frequency.
pub fn run_report(report_a: &Path, report_b: &Path, out: &Path) -> Result<()> {
    let a = parse_per_predicate_csv(
        &fs::read_to_string(report_a).map_err(|e| Error::io(report_a.display().to_string(), e))?,
    )?;
    let b = parse_per_predicate_csv(
        &fs::read_to_string(report_b).map_err(|e| Error::io(report_b.display().to_string(), e))?,
    )?;

    let set_a: std::collections::BTreeSet<usize> = a.iter().map(|r| r.predicate).collect();
    let set_b: std::collections::BTreeSet<usize> = b.iter().map(|r| r.predicate).collect();
    if set_a != set_b {
        let only_a: Vec<usize> = set_a.difference(&set_b).cloned().collect();
        let only_b: Vec<usize> = set_b.difference(&set_a).cloned().collect();
        return Err(Error::Data(format!(
            "predicate sets differ: only in first {only_a:?}, only in second {only_b:?}"
        )));
    }

    // frequency rank from the first report's ground-truth counts
    let mut order: Vec<&crate::metrics::PredicateRecallRow> = a.iter().collect();
    order.sort_by(|x, y| y.gt_count.cmp(&x.gt_count).then(x.predicate.cmp(&y.predicate)));
    let recall_b = |p: usize| b.iter().find(|r| r.predicate == p).unwrap().recall;

    let mut csv = String::from("predicate,freq_rank,recall_a,recall_b,delta\n");
    for (rank, row) in order.iter().enumerate() {
        let rb = recall_b(row.predicate);
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.predicate,
            rank + 1,
            row.recall,
            rb,
            row.recall - rb
        ));
    }
    fs::write(out, csv).map_err(|e| Error::io(out.display().to_string(), e))?;
    write_manifest(
        "report",
        None,
        serde_json::json!({}),
        &[report_a, report_b],
        &[out],
    )?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AblateArgs {
    pub data: PathBuf,
    pub test_data: PathBuf,
    pub prior: PathBuf,
    pub config: PathBuf,
    pub task: String,
    pub out_dir: PathBuf,
    pub variants: Vec<String>,
}

pub fn ablation_variant(name: &str) -> Result<AblationConfig> {
    let base = AblationConfig::default();
    Ok(match name {
        "full" => base,
        "no-object-branch" => AblationConfig {
            use_object_branch: false,
            ..base
        },
        "no-relation-branch" => AblationConfig {
            use_relation_branch: false,
            ..base
        },
        "no-prior" => AblationConfig {
            use_prior: false,
            ..base
        },
        other => {
            if let Some(n) = other.strip_prefix("heads-") {
                let heads: usize = n
                    .parse()
                    .map_err(|_| Error::Config(format!("bad head count in variant `{other}`")))?;
                AblationConfig {
                    num_heads: heads,
                    ..base
                }
            } else {
                return Err(Error::Config(format!(
                    "unknown ablation variant `{other}` (expected full, no-object-branch, \
                     no-relation-branch, no-prior, or heads-N)"
                )));
            }
        }
    })
}

/// Train and evaluate a set of ablation variants, writing one summary CSV
/// plus a checkpoint per variant.
pub fn run_ablate(args: &AblateArgs) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let test_data = load_dataset(&args.test_data)?;
    let oracle = FeatureOracle::for_dataset(&test_data)?;
    let task = TaskMode::parse(&args.task)?;
    let (train_config, overrides) = train_config_from_file(&args.config)?;
    let prior = load_csv(&args.prior)?;
    fs::create_dir_all(&args.out_dir)
        .map_err(|e| Error::io(args.out_dir.display().to_string(), e))?;

    let mut csv = String::from("variant,r20,r50,r100,mr20,mr50,mr100\n");
    let mut outputs: Vec<PathBuf> = Vec::new();
    for name in &args.variants {
        let ablation = ablation_variant(name)?;
        let mut model_config = ModelConfig::for_meta(&dataset.meta);
        overrides.apply(&mut model_config);
        let params = ModelParams::new(model_config, ablation.num_heads, train_config.seed);
        let model = crate::ablation::assemble(params, ablation, prior.clone())?;
        let mut trainer = Trainer::new(model, &dataset, task, train_config.clone())?;
        trainer.run_to_completion()?;
        let report =
            trainer
                .model
                .evaluate_on(&oracle, &test_data.images, task, task.as_str())?;
        let c = &report.constrained;
        let np = dataset.meta.num_predicates;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            name,
            c.recall_at(20),
            c.recall_at(50),
            c.recall_at(100),
            c.mean_recall_at(20, np, false),
            c.mean_recall_at(50, np, false),
            c.mean_recall_at(100, np, false),
        ));
        let ckpt_path = args.out_dir.join(format!("{name}.ckpt.json"));
        trainer.checkpoint().save(&ckpt_path)?;
        outputs.push(ckpt_path);
        println!("variant {name}: R@50 {:.4} mR@50 {:.4}", c.recall_at(50), c.mean_recall_at(50, np, false));
    }

    let summary = args.out_dir.join("ablation_summary.csv");
    fs::write(&summary, csv).map_err(|e| Error::io(summary.display().to_string(), e))?;
    let mut all_outputs: Vec<&Path> = vec![summary.as_path()];
    all_outputs.extend(outputs.iter().map(PathBuf::as_path));
    write_manifest(
        "ablate",
        Some(train_config.seed),
        serde_json::json!({
            "task": task.as_str(),
            "variants": args.variants,
            "train": serde_json::to_value(&train_config).unwrap(),
        }),
        &[&args.data, &args.test_data, &args.prior, &args.config],
        &all_outputs,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_variants_parse() {
        assert!(ablation_variant("full").unwrap().use_object_branch);
        assert!(!ablation_variant("no-prior").unwrap().use_prior);
        assert_eq!(ablation_variant("heads-8").unwrap().num_heads, 8);
        assert!(ablation_variant("bogus").is_err());
    }

    #[test]
    fn report_delta_schema_and_self_delta() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        fs::write(&a, "predicate,gt_count,recall\n1,10,0.9\n2,5,0.4\n").unwrap();
        let out = dir.path().join("delta.csv");
        run_report(&a, &a, &out).unwrap();
        let text = fs::read_to_string(&out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "predicate,freq_rank,recall_a,recall_b,delta");
        assert_eq!(lines.next().unwrap(), "1,1,0.9,0.9,0");
        assert_eq!(lines.next().unwrap(), "2,2,0.4,0.4,0");
    }

    #[test]
    fn report_rejects_mismatched_predicate_sets() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        fs::write(&a, "predicate,gt_count,recall\n1,10,0.9\n").unwrap();
        fs::write(&b, "predicate,gt_count,recall\n2,10,0.9\n").unwrap();
        let out = dir.path().join("delta.csv");
        let err = run_report(&a, &b, &out).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1]") && msg.contains("[2]"), "{msg}");
    }
}
