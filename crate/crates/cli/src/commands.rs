use std::path::{Path, PathBuf};

use plasmid_attr::bpe::BpeModel;
use plasmid_attr::config::{Precision, RunConfig};
use plasmid_attr::data::{
    parse_dataset, parse_fasta_queries, relabel_small_labs, DatasetFormat, LabCatalog,
    ParsedDataset, PlasmidRecord,
};
use plasmid_attr::error::{Error, Result};
use plasmid_attr::eval;
use plasmid_attr::interpret;
use plasmid_attr::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelWeights};
use plasmid_attr::scalar::Scalar;
use plasmid_attr::split::{
    group_lab_sequences, make_cv_folds, split_grouped, Assignment, GroupThreshold, SplitFile,
    SplitPlan,
};
use plasmid_attr::train::{fit, write_metrics_csv, FitOutcome};

use crate::{ctx, Command};

/// Runs one subcommand against the filesystem.
pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::BpeTrain {
            data,
            sidecar,
            out,
            vocab,
            split,
        } => cmd_bpe_train(&data, sidecar.as_deref(), &out, vocab, split.as_deref()),
        Command::Split {
            data,
            sidecar,
            out,
            threshold,
            val_frac,
            folds,
            seed,
            min_lab_count,
        } => cmd_split(
            &data,
            sidecar.as_deref(),
            &out,
            &threshold,
            val_frac,
            folds,
            seed,
            min_lab_count,
        ),
        Command::Train {
            data,
            sidecar,
            split,
            fold,
            bpe,
            config,
            set,
            head,
            seed,
            epochs,
            out,
            metrics,
        } => cmd_train(
            &data,
            sidecar.as_deref(),
            &split,
            fold,
            &bpe,
            config.as_deref(),
            &set,
            head.as_deref(),
            seed,
            epochs,
            &out,
            metrics.as_deref(),
        ),
        Command::Rank {
            ckpt,
            query,
            sidecar,
            out,
            tta,
            top,
        } => cmd_rank(&ckpt, &query, sidecar.as_deref(), &out, tta, top),
        Command::Eval {
            ckpt,
            data,
            sidecar,
            split,
            out,
            tta,
        } => cmd_eval(&ckpt, &data, sidecar.as_deref(), &split, &out, tta),
        Command::Fewshot {
            ckpt,
            data,
            sidecar,
            out,
            holdout,
            samples,
            sample_frac,
            repetitions,
            seed,
            tta,
            aggregate,
            quantiles_out,
        } => cmd_fewshot(
            &ckpt,
            &data,
            sidecar.as_deref(),
            &out,
            holdout,
            samples,
            sample_frac,
            repetitions,
            seed,
            tta,
            &aggregate,
            quantiles_out.as_deref(),
        ),
        Command::Mutate {
            ckpt,
            data,
            sidecar,
            sequence_id,
            out,
            n_list,
            runs,
            seed,
            tta,
        } => cmd_mutate(
            &ckpt,
            &data,
            sidecar.as_deref(),
            sequence_id.as_deref(),
            &out,
            n_list.as_deref(),
            runs,
            seed,
            tta,
        ),
        Command::Explain {
            ckpt,
            data,
            sidecar,
            lab,
            sequence_id,
            out,
            top,
            top_out,
            diff_out,
        } => cmd_explain(
            &ckpt,
            &data,
            sidecar.as_deref(),
            lab.as_deref(),
            sequence_id.as_deref(),
            &out,
            top,
            top_out.as_deref(),
            diff_out.as_deref(),
        ),
        Command::Cluster {
            ckpt,
            out,
            k_min,
            k_max,
            k,
            assignments_out,
            seed,
        } => cmd_cluster(&ckpt, &out, k_min, k_max, k, assignments_out.as_deref(), seed),
        Command::Export {
            ckpt,
            data,
            sidecar,
            out,
            tta,
        } => cmd_export(&ckpt, data.as_deref(), sidecar.as_deref(), &out, tta),
    }
}

// ---- shared helpers -----------------------------------------------------------

fn is_fasta(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("fasta") | Some("fa") | Some("fna")
    )
}

/// Labeled dataset ingest: CSV, or FASTA plus a mandatory sidecar.
fn load_labeled(data: &Path, sidecar: Option<&Path>) -> Result<ParsedDataset> {
    let parsed = if is_fasta(data) {
        let sidecar = sidecar.ok_or_else(|| {
            Error::InvalidInput(format!(
                "{}: FASTA datasets need --sidecar for labels and metadata",
                data.display()
            ))
        })?;
        parse_dataset(data, DatasetFormat::FastaWithSidecar { sidecar })
    } else {
        parse_dataset(data, DatasetFormat::Csv)
    }
    .map_err(|e| ctx(data, e))?;
    report_rejections(&parsed);
    Ok(parsed)
}

/// Query ingest: like [`load_labeled`] but FASTA works without a sidecar
/// (zero metadata, unknown lab).
fn load_queries(data: &Path, sidecar: Option<&Path>) -> Result<ParsedDataset> {
    if is_fasta(data) && sidecar.is_none() {
        let parsed = parse_fasta_queries(data).map_err(|e| ctx(data, e))?;
        report_rejections(&parsed);
        return Ok(parsed);
    }
    load_labeled(data, sidecar)
}

fn report_rejections(parsed: &ParsedDataset) {
    for r in &parsed.rejections {
        eprintln!("warning: {r}");
    }
}

fn parse_threshold(s: &str) -> Result<GroupThreshold> {
    if s.contains('.') {
        s.parse::<f64>()
            .map(GroupThreshold::FractionOfShorter)
            .map_err(|_| Error::Config(format!("bad threshold {s:?}")))
    } else {
        s.parse::<usize>()
            .map(GroupThreshold::Absolute)
            .map_err(|_| Error::Config(format!("bad threshold {s:?}")))
    }
}

fn sha256_hex(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| {
        Error::InvalidInput(format!("{}: {e}", path.display()))
    })?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn open_checkpoint(path: &Path) -> Result<(Checkpoint, String)> {
    let hash = sha256_hex(path)?;
    let ckpt = load_checkpoint(path).map_err(|e| ctx(path, e))?;
    Ok((ckpt, hash))
}

/// Provenance comment lines embedded in every report.
fn provenance(run_config: Option<&RunConfig>, ckpt_hash: Option<&str>) -> Vec<String> {
    let mut lines = Vec::new();
    if let Some(cfg) = run_config {
        lines.push(format!(
            "run_config: {}",
            cfg.to_kv_string().lines().collect::<Vec<_>>().join(" ")
        ));
    }
    if let Some(hash) = ckpt_hash {
        lines.push(format!("checkpoint_sha256: {hash}"));
    }
    lines
}

fn embedded_bpe(ckpt: &Checkpoint, path: &Path) -> Result<BpeModel> {
    ckpt.bpe.clone().ok_or_else(|| {
        Error::Checkpoint(format!(
            "{}: checkpoint has no embedded tokenizer",
            path.display()
        ))
    })
}

macro_rules! with_model {
    ($ckpt:expr, |$m:ident| $body:expr) => {
        match &$ckpt.model {
            ModelWeights::F32($m) => $body,
            ModelWeights::F64($m) => $body,
        }
    };
}

// ---- subcommands -----------------------------------------------------------------

fn cmd_bpe_train(
    data: &Path,
    sidecar: Option<&Path>,
    out: &Path,
    vocab: usize,
    split: Option<&Path>,
) -> Result<()> {
    let parsed = load_labeled(data, sidecar)?;
    let corpus: Vec<&str> = match split {
        Some(split_path) => {
            let split_file = SplitFile::read_csv(split_path).map_err(|e| ctx(split_path, e))?;
            let plan = split_file.plan();
            parsed
                .records
                .iter()
                .filter(|r| plan.assignment(&r.sequence_id) == Some(Assignment::Train))
                .map(|r| r.sequence.as_str())
                .collect()
        }
        None => parsed.records.iter().map(|r| r.sequence.as_str()).collect(),
    };
    if corpus.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no sequences available for tokenizer training",
            data.display()
        )));
    }
    let model = BpeModel::train(&corpus, vocab)?;
    model.save(out)?;
    println!(
        "trained tokenizer: vocab {} ({} merges) from {} sequences -> {}",
        model.vocab_size(),
        model.merges().len(),
        corpus.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_split(
    data: &Path,
    sidecar: Option<&Path>,
    out: &Path,
    threshold: &str,
    val_frac: f64,
    folds: Option<usize>,
    seed: u64,
    min_lab_count: usize,
) -> Result<()> {
    let parsed = load_labeled(data, sidecar)?;
    let records = relabel_small_labs(&parsed.records, min_lab_count);
    let threshold = parse_threshold(threshold)?;

    let (test_records, rest): (Vec<_>, Vec<_>) =
        records.into_iter().partition(|r| r.held_out_test);
    let groups = group_lab_sequences(&rest, threshold);

    let mut file = match folds {
        Some(k) => {
            let fold_plans = make_cv_folds(&groups, k, seed)?;
            SplitFile::from_folds(&fold_plans)
        }
        None => {
            let outcome = split_grouped(&groups, val_frac, seed);
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            SplitFile::from_plan(&outcome.plan)
        }
    };
    file.add_test_ids(test_records.iter().map(|r| r.sequence_id.clone()));
    file.write_csv(out)?;
    println!(
        "split {} sequences ({} groups, {} pre-assigned test) -> {}",
        file.rows.len(),
        groups.len(),
        test_records.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    sidecar: Option<&Path>,
    split: &Path,
    fold: Option<usize>,
    bpe_path: &Path,
    config: Option<&Path>,
    set: &[String],
    head: Option<&str>,
    seed: Option<u64>,
    epochs: Option<usize>,
    out: &Path,
    metrics: Option<&Path>,
) -> Result<()> {
    let mut run_cfg = match config {
        Some(path) => RunConfig::from_file(path).map_err(|e| ctx(path, e))?,
        None => RunConfig::default(),
    };
    for pair in set {
        let (k, v) = pair.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects key=value, got {pair:?}"))
        })?;
        run_cfg.set(k.trim(), v.trim())?;
    }
    if let Some(h) = head {
        run_cfg.set("head", h)?;
    }
    if let Some(s) = seed {
        run_cfg.seed = s;
    }
    if let Some(e) = epochs {
        run_cfg.epochs = e;
    }

    let parsed = load_labeled(data, sidecar)?;
    let records = relabel_small_labs(&parsed.records, run_cfg.min_lab_count);
    let catalog = LabCatalog::from_records(&records);
    let split_file = SplitFile::read_csv(split).map_err(|e| ctx(split, e))?;
    let plan = match fold {
        Some(f) => split_file.plan_for_fold(f)?,
        None => split_file.plan(),
    };

    let bpe = BpeModel::load(bpe_path).map_err(|e| ctx(bpe_path, e))?;
    if bpe.vocab_size() > run_cfg.vocab_size {
        return Err(Error::Config(format!(
            "tokenizer vocab {} exceeds configured vocab_size {}",
            bpe.vocab_size(),
            run_cfg.vocab_size
        )));
    }

    let metrics_path = match metrics {
        Some(p) => p.to_path_buf(),
        None => PathBuf::from(format!("{}.metrics.csv", out.display())),
    };

    match run_cfg.precision {
        Precision::F32 => train_and_save::<f32>(
            &run_cfg, &records, &catalog, &plan, &bpe, out, &metrics_path,
        ),
        Precision::F64 => train_and_save::<f64>(
            &run_cfg, &records, &catalog, &plan, &bpe, out, &metrics_path,
        ),
    }
}

fn train_and_save<T: Scalar>(
    run_cfg: &RunConfig,
    records: &[PlasmidRecord],
    catalog: &LabCatalog,
    plan: &SplitPlan,
    bpe: &BpeModel,
    out: &Path,
    metrics_path: &Path,
) -> Result<()> {
    let outcome: FitOutcome<T> = fit(run_cfg, records, catalog, plan, bpe)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    save_checkpoint(&outcome.model, catalog, Some(bpe), Some(run_cfg), out)?;
    write_metrics_csv(metrics_path, &outcome.metrics)?;
    let last = outcome.metrics.last();
    println!(
        "trained {} epochs (best epoch {}); final val_top1 {:.4} val_top10 {:.4}",
        outcome.metrics.len(),
        outcome.best_epoch,
        last.map_or(0.0, |m| m.val_top1),
        last.map_or(0.0, |m| m.val_top10),
    );
    println!("checkpoint -> {}", out.display());
    println!("metrics -> {}", metrics_path.display());
    Ok(())
}

fn cmd_rank(
    ckpt_path: &Path,
    query: &Path,
    sidecar: Option<&Path>,
    out: &Path,
    tta: usize,
    top: usize,
) -> Result<()> {
    let (ckpt, hash) = open_checkpoint(ckpt_path)?;
    let bpe = embedded_bpe(&ckpt, ckpt_path)?;
    let queries = load_queries(query, sidecar)?;
    if queries.records.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no valid query sequences",
            query.display()
        )));
    }
    let results = with_model!(ckpt, |m| eval::score_records(m, &bpe, &queries.records, tta))?;
    let lines = provenance(ckpt.run_config.as_ref(), Some(&hash));
    eval::write_rankings_csv(out, &results, &ckpt.labs, top, &lines)?;
    println!(
        "ranked {} queries (top {top}, tta {tta}) -> {}",
        results.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(
    ckpt_path: &Path,
    data: &Path,
    sidecar: Option<&Path>,
    split: &Path,
    out: &Path,
    tta: usize,
) -> Result<()> {
    let (ckpt, hash) = open_checkpoint(ckpt_path)?;
    let bpe = embedded_bpe(&ckpt, ckpt_path)?;
    let parsed = load_labeled(data, sidecar)?;
    let records = relabel_small_labs(
        &parsed.records,
        ckpt.run_config.as_ref().map_or(10, |c| c.min_lab_count),
    );
    let split_file = SplitFile::read_csv(split).map_err(|e| ctx(split, e))?;
    let plan = split_file.plan();

    let mut subset: Vec<&PlasmidRecord> = records
        .iter()
        .filter(|r| plan.assignment(&r.sequence_id) == Some(Assignment::Test))
        .collect();
    let mut which = "test";
    if subset.is_empty() {
        which = "validation";
        eprintln!("warning: split has no test rows; evaluating the validation split");
        subset = records
            .iter()
            .filter(|r| plan.assignment(&r.sequence_id) == Some(Assignment::Validation))
            .collect();
    }
    if subset.is_empty() {
        return Err(Error::InvalidInput(
            "split contains neither test nor validation rows".into(),
        ));
    }

    let mut truths = Vec::with_capacity(subset.len());
    let mut eval_records = Vec::with_capacity(subset.len());
    for r in subset {
        match ckpt.labs.index_of(&r.lab_id) {
            Some(li) => {
                truths.push(li);
                eval_records.push(r.clone());
            }
            None => eprintln!(
                "warning: {} has lab {:?} unknown to the checkpoint; skipped",
                r.sequence_id, r.lab_id
            ),
        }
    }
    let results =
        with_model!(ckpt, |m| eval::score_records(m, &bpe, &eval_records, tta))?;
    let top1 = eval::top_k_accuracy(&results, &truths, 1)?;
    let top10 = eval::top_k_accuracy(&results, &truths, 10)?;

    let mut lines = provenance(ckpt.run_config.as_ref(), Some(&hash));
    lines.push(format!("evaluated_split: {which} ({} records, tta {tta})", results.len()));
    lines.push(format!(
        "reference full-scale top-10 (not reproduced at this scale): triplet {} softmax {}",
        eval::reference::FULL_SCALE_TOP10_TRIPLET,
        eval::reference::FULL_SCALE_TOP10_SOFTMAX
    ));
    let rows = vec![
        ("top1".to_string(), top1),
        ("top10".to_string(), top10),
        ("n_queries".to_string(), results.len() as f64),
    ];
    eval::write_accuracy_csv(out, &rows, &lines)?;
    println!("{which} top-1 {top1:.4}, top-10 {top10:.4} -> {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_fewshot(
    ckpt_path: &Path,
    data: &Path,
    sidecar: Option<&Path>,
    out: &Path,
    holdout: usize,
    samples: usize,
    sample_frac: Option<f64>,
    repetitions: usize,
    seed: u64,
    tta: usize,
    aggregate: &str,
    quantiles_out: Option<&Path>,
) -> Result<()> {
    let (ckpt, hash) = open_checkpoint(ckpt_path)?;
    let bpe = embedded_bpe(&ckpt, ckpt_path)?;
    let parsed = load_labeled(data, sidecar)?;

    let aggregate = match aggregate {
        "max" => eval::ExemplarAggregate::Max,
        "mean" => eval::ExemplarAggregate::Mean,
        other => {
            return Err(Error::Config(format!(
                "aggregate must be max or mean, got {other:?}"
            )))
        }
    };
    let cfg = eval::FewShotConfig {
        holdout_labs: holdout,
        sample: match sample_frac {
            Some(f) => eval::SampleSpec::Fraction(f),
            None => eval::SampleSpec::Count(samples),
        },
        repetitions,
        seed,
        tta_rounds: tta,
        aggregate,
        top_k: 10,
    };
    let outcome = with_model!(ckpt, |m| eval::few_shot_protocol(
        m,
        &bpe,
        &parsed.records,
        &ckpt.labs,
        &cfg
    ))?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }

    let mut lines = provenance(ckpt.run_config.as_ref(), Some(&hash));
    lines.push(format!(
        "protocol: holdout {holdout} labs, {} exemplars, {repetitions} repetitions, tta {tta}",
        match cfg.sample {
            eval::SampleSpec::Count(c) => c.to_string(),
            eval::SampleSpec::Fraction(f) => format!("{:.0}%", f * 100.0),
        }
    ));
    lines.push(format!(
        "reference full-scale one-shot top-10 (not reproduced at this scale): {}",
        eval::reference::FULL_SCALE_ONE_SHOT_TOP10
    ));
    let mut rows = vec![
        ("top10_mean".to_string(), outcome.mean_top_k),
        ("top10_std".to_string(), outcome.std_top_k),
    ];
    for (i, acc) in outcome.per_repetition.iter().enumerate() {
        rows.push((format!("repetition{i}_top10"), *acc));
    }
    eval::write_accuracy_csv(out, &rows, &lines)?;
    println!(
        "few-shot top-10: {:.4} +- {:.4} over {repetitions} repetitions -> {}",
        outcome.mean_top_k,
        outcome.std_top_k,
        out.display()
    );

    if let Some(qpath) = quantiles_out {
        let quantiles = eval::one_shot_quantiles(&outcome.query_ranks)?;
        eval::write_quantiles_csv(qpath, &quantiles, &lines)?;
        println!("rank quantiles -> {}", qpath.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_mutate(
    ckpt_path: &Path,
    data: &Path,
    sidecar: Option<&Path>,
    sequence_id: Option<&str>,
    out: &Path,
    n_list: Option<&str>,
    runs: usize,
    seed: u64,
    tta: usize,
) -> Result<()> {
    let (ckpt, hash) = open_checkpoint(ckpt_path)?;
    let bpe = embedded_bpe(&ckpt, ckpt_path)?;
    let parsed = load_labeled(data, sidecar)?;
    let record = match sequence_id {
        Some(id) => parsed
            .records
            .iter()
            .find(|r| r.sequence_id == id)
            .ok_or_else(|| {
                Error::InvalidInput(format!("sequence_id {id:?} not found in {}", data.display()))
            })?,
        None => parsed.records.first().ok_or_else(|| {
            Error::InvalidInput(format!("{}: dataset is empty", data.display()))
        })?,
    };
    let true_lab = ckpt.labs.index_of(&record.lab_id).ok_or_else(|| {
        Error::InvalidInput(format!(
            "lab {:?} unknown to the checkpoint",
            record.lab_id
        ))
    })?;
    let ns: Vec<usize> = match n_list {
        Some(s) => s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("bad n list {s:?}")))?,
        None => (1..=10).collect(),
    };
    let rows = with_model!(ckpt, |m| eval::mutation_robustness(
        m, &bpe, record, true_lab, &ns, runs, seed, tta
    ))?;
    let mut lines = provenance(ckpt.run_config.as_ref(), Some(&hash));
    lines.push(format!(
        "mutation sweep: sequence {} ({} runs per n, tta {tta})",
        record.sequence_id, runs
    ));
    eval::write_robustness_csv(out, &rows, &lines)?;
    println!(
        "mutation robustness over n = {:?} ({} runs each) -> {}",
        ns,
        runs,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_explain(
    ckpt_path: &Path,
    data: &Path,
    sidecar: Option<&Path>,
    lab: Option<&str>,
    sequence_id: Option<&str>,
    out: &Path,
    top: usize,
    top_out: Option<&Path>,
    diff_out: Option<&Path>,
) -> Result<()> {
    let (ckpt, hash) = open_checkpoint(ckpt_path)?;
    let bpe = embedded_bpe(&ckpt, ckpt_path)?;
    let parsed = load_labeled(data, sidecar)?;
    let target = interpret::ImportanceTarget::PredictedLab;

    let (importance, described) = match (lab, sequence_id) {
        (Some(lab_id), None) => {
            let members: Vec<PlasmidRecord> = parsed
                .records
                .iter()
                .filter(|r| r.lab_id == lab_id)
                .cloned()
                .collect();
            if members.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "no records for lab {lab_id:?} in {}",
                    data.display()
                )));
            }
            let imp = with_model!(ckpt, |m| interpret::lab_token_importance(
                m, &bpe, &members, target
            ))?;
            (imp, format!("lab {lab_id:?} ({} records)", members.len()))
        }
        (None, Some(id)) => {
            let record = parsed
                .records
                .iter()
                .find(|r| r.sequence_id == id)
                .ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "sequence_id {id:?} not found in {}",
                        data.display()
                    ))
                })?;
            let imp =
                with_model!(ckpt, |m| interpret::token_importance(m, &bpe, record, target))?;
            (imp, format!("sequence {id:?}"))
        }
        _ => {
            return Err(Error::Config(
                "pass exactly one of --lab or --sequence-id".into(),
            ))
        }
    };

    let mut lines = provenance(ckpt.run_config.as_ref(), Some(&hash));
    lines.push(format!("importance target: {described}"));
    interpret::write_importance_csv(out, &importance, &lines)?;

    let top_path = match top_out {
        Some(p) => p.to_path_buf(),
        None => PathBuf::from(format!("{}.top.csv", out.display())),
    };
    let (nti, constant) = interpret::normalize_nti(&importance);
    if constant {
        eprintln!("warning: constant importance vector; NTI is all zeros");
    }
    write_top_tokens(&top_path, &importance, &nti, &bpe, top, &lines)?;

    if let Some(diff_path) = diff_out {
        let global = with_model!(ckpt, |m| interpret::lab_token_importance(
            m,
            &bpe,
            &parsed.records,
            target
        ))?;
        let (global_nti, _) = interpret::normalize_nti(&global);
        let diff = interpret::nti_difference(&nti, &global_nti)?;
        write_nti_difference(diff_path, &nti, &global_nti, &diff, &bpe, &lines)?;
        let top_diff_path = PathBuf::from(format!("{}.top.csv", diff_path.display()));
        write_top_differences(&top_diff_path, &diff, &bpe, top, &lines)?;
        println!("difference vs global -> {}", diff_path.display());
    }

    println!("token importance for {described} -> {}", out.display());
    println!("top {top} tokens -> {}", top_path.display());
    Ok(())
}

fn write_top_tokens(
    path: &Path,
    importance: &interpret::TokenImportance,
    nti: &[f64],
    bpe: &BpeModel,
    top: usize,
    provenance_lines: &[String],
) -> Result<()> {
    use std::io::Write as _;
    let mut out = String::new();
    for line in provenance_lines {
        out.push_str(&format!("# {line}\n"));
    }
    out.push_str("rank,token_id,token,importance,nti\n");
    for (rank, (token_id, value)) in importance.top_tokens(top).into_iter().enumerate() {
        let token = bpe.token_string(token_id).unwrap_or("?");
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            rank + 1,
            token_id,
            token,
            value,
            nti[token_id as usize]
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

fn write_nti_difference(
    path: &Path,
    lab_nti: &[f64],
    global_nti: &[f64],
    diff: &[f64],
    bpe: &BpeModel,
    provenance_lines: &[String],
) -> Result<()> {
    use std::io::Write as _;
    let mut out = String::new();
    for line in provenance_lines {
        out.push_str(&format!("# {line}\n"));
    }
    out.push_str("token_id,token,lab_nti,global_nti,difference\n");
    for (i, ((l, g), d)) in lab_nti.iter().zip(global_nti).zip(diff).enumerate() {
        let token = bpe.token_string(i as u32).unwrap_or("?");
        out.push_str(&format!("{i},{token},{l},{g},{d}\n"));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Most over-represented tokens for the lab relative to the global profile.
fn write_top_differences(
    path: &Path,
    diff: &[f64],
    bpe: &BpeModel,
    top: usize,
    provenance_lines: &[String],
) -> Result<()> {
    use std::io::Write as _;
    let mut order: Vec<usize> = (0..diff.len()).collect();
    order.sort_by(|&a, &b| diff[b].total_cmp(&diff[a]).then(a.cmp(&b)));
    let mut out = String::new();
    for line in provenance_lines {
        out.push_str(&format!("# {line}\n"));
    }
    out.push_str("rank,token_id,token,difference\n");
    for (rank, &i) in order.iter().take(top).enumerate() {
        if diff[i] <= 0.0 {
            break;
        }
        let token = bpe.token_string(i as u32).unwrap_or("?");
        out.push_str(&format!("{},{},{},{}\n", rank + 1, i, token, diff[i]));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

fn cmd_cluster(
    ckpt_path: &Path,
    out: &Path,
    k_min: usize,
    k_max: usize,
    k: Option<usize>,
    assignments_out: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let (ckpt, hash) = open_checkpoint(ckpt_path)?;
    let points: Vec<Vec<f64>> = with_model!(ckpt, |m| m
        .normalized_lab_rows()
        .map(|rows| rows
            .iter()
            .map(|r| r.iter().map(|v| v.as_f64()).collect())
            .collect()))?;

    let k_hi = k_max.min(points.len());
    if k_hi < k_max {
        eprintln!(
            "warning: only {} labs; clamping elbow range to {k_min}..={k_hi}",
            points.len()
        );
    }
    if k_min > k_hi {
        return Err(Error::InvalidInput(format!(
            "elbow range {k_min}..={k_hi} is empty for {} labs",
            points.len()
        )));
    }
    let scores = interpret::elbow_scores(&points, k_min..=k_hi, seed)?;
    let lines = provenance(ckpt.run_config.as_ref(), Some(&hash));
    interpret::write_elbow_csv(out, &scores, &lines)?;
    println!("elbow table k = {k_min}..={k_hi} -> {}", out.display());

    if let Some(chosen) = k {
        let path = assignments_out.ok_or_else(|| {
            Error::Config("--k needs --assignments-out for the cluster table".into())
        })?;
        let clusters = interpret::kmeans(&points, chosen, seed)?;
        use std::io::Write as _;
        let mut text = String::new();
        for line in &lines {
            text.push_str(&format!("# {line}\n"));
        }
        text.push_str(&format!("# k: {chosen}, distortion: {}\n", clusters.distortion));
        text.push_str("lab_id,cluster\n");
        for (li, cl) in clusters.labels.iter().enumerate() {
            text.push_str(&format!("{},{}\n", ckpt.labs.lab(li), cl));
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(text.as_bytes())?;
        println!("assignments at k={chosen} -> {}", path.display());
    }
    Ok(())
}

fn cmd_export(
    ckpt_path: &Path,
    data: Option<&Path>,
    sidecar: Option<&Path>,
    out: &Path,
    tta: usize,
) -> Result<()> {
    let (ckpt, hash) = open_checkpoint(ckpt_path)?;
    let bpe = embedded_bpe(&ckpt, ckpt_path)?;
    let records = match data {
        Some(path) => load_labeled(path, sidecar)?.records,
        None => Vec::new(),
    };
    let lines = provenance(ckpt.run_config.as_ref(), Some(&hash));
    with_model!(ckpt, |m| interpret::export_embeddings(
        m,
        &bpe,
        &ckpt.labs,
        &records,
        tta,
        out,
        &lines
    ))?;
    println!(
        "exported {} lab + {} sequence embeddings -> {}",
        ckpt.labs.len(),
        records.len(),
        out.display()
    );
    Ok(())
}
