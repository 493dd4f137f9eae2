use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ldpp::analysis::{
    assign_codes, assignments_csv, clustering_quality, codebook_usage, dead_codes, points_csv, project_2d,
    representative_utterances, representatives_markdown, usage_csv,
};
use ldpp::corpus::critic::{Critic, Domain, ScriptedCritic};
use ldpp::corpus::{
    annotate_rewards, augment_context_completion, decompose, generate_synthetic, load_corpus, load_tuples,
    save_corpus, save_tuples, write_atomic, AnnotateOptions, DialogueCompleter, DialogueRecord, SyntheticSpec,
    TemplateCompleter, TrainingTuple,
};
use ldpp::external::{ChatClient, LlmCompleter, LlmCritic, LlmUser, PromptTemplates};
use ldpp::models::{
    checkpoint_hash, load_checkpoint, save_checkpoint, DecodeParams, Stage, StageManifest,
    Tokenizer,
};
use ldpp::selfplay::{
    compute_metrics, logs_to_jsonl, metrics_csv, run_cases, synthetic_cases, EpisodeParams, PlannerMode,
    ScriptedUser, UserSimulator,
};
use ldpp::training::{
    check_stage_order, load_config, pretrain_generator, pseudo_label, train_stage1, train_stage2, train_stage3,
    write_reports, RunOptions, StageOutcome, TrainConfig,
};
use ldpp::{Bundle, Error};

use crate::run::{RunDir, RunManifest};
use crate::{
    AnalyzeArgs, AnnotateArgs, AugmentArgs, EvaluateArgs, GenCorpusArgs, LabelArgs, StageArgs, Stage1Args,
};

fn spec_from(path: Option<&Path>) -> Result<SyntheticSpec> {
    let spec = match path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .map_err(|e| Error::config("spec", e.to_string()))?,
        None => SyntheticSpec::default(),
    };
    spec.validate()?;
    Ok(spec)
}

fn train_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn record_config(m: &mut RunManifest, cfg: &TrainConfig) -> Result<()> {
    m.config_hash = Some(cfg.hash());
    m.config = Some(serde_json::to_value(cfg)?);
    m.seed = Some(cfg.seed);
    Ok(())
}

fn manifest_path(run: &RunDir, command: &str) -> PathBuf {
    run.path(&format!("logs/{command}.manifest.json"))
}

fn read_tuples(path: &Path) -> Result<Vec<TrainingTuple>> {
    let tuples = load_tuples(path)?;
    if tuples.is_empty() {
        return Err(Error::Validation(format!("{} holds no tuples", path.display())).into());
    }
    Ok(tuples)
}

pub fn gen_corpus(a: &GenCorpusArgs) -> Result<()> {
    let spec = spec_from(a.spec.as_deref())?;
    let records = generate_synthetic(&spec, a.n, a.seed)?;
    // A `.json` target is written as-is; anything else is a run directory.
    if a.out.extension().is_some_and(|e| e == "json") {
        save_corpus(&a.out, &records)?;
        let mut m = RunManifest::new("gen-corpus");
        m.seed = Some(a.seed);
        m.output(&a.out)?;
        return m.finish(&a.out.with_extension("manifest.json"));
    }
    let run = RunDir::open(&a.out)?;
    let path = run.path("corpus/corpus.json");
    save_corpus(&path, &records)?;
    let mut m = RunManifest::new("gen-corpus");
    m.seed = Some(a.seed);
    m.output(&path)?;
    m.finish(&manifest_path(&run, "gen-corpus"))
}

fn scripted_critic(records: &[DialogueRecord], spec: &SyntheticSpec) -> Result<ScriptedCritic> {
    Ok(ScriptedCritic::new(spec.max_state).with_records(records)?)
}

fn external(templates: Option<&Path>) -> Result<(ChatClient, PromptTemplates)> {
    let client = ChatClient::from_env()?;
    let templates = match templates {
        Some(d) => PromptTemplates::load(d)?,
        None => PromptTemplates::default(),
    };
    Ok((client, templates))
}

pub fn annotate(a: &AnnotateArgs) -> Result<()> {
    let run = RunDir::open(&a.out)?;
    let records = load_corpus(&a.corpus)?;
    let spec = spec_from(a.spec.as_deref())?;
    let tuples = decompose(&records);
    let critic: Box<dyn Critic> = if a.external {
        let (client, templates) = external(a.templates.as_deref())?;
        Box::new(LlmCritic { client, templates, domain: Domain::Support })
    } else {
        Box::new(scripted_critic(&records, &spec)?)
    };
    let opts = AnnotateOptions { votes: a.votes, seed: a.seed, ..AnnotateOptions::default() };
    let out = run.path("tuples/annotated.jsonl");
    let annotated = match annotate_rewards(&tuples, critic.as_ref(), &opts) {
        Ok(t) => t,
        Err(e) => {
            let partial = run.path("tuples/annotated.partial.jsonl");
            save_tuples(&partial, &e.completed)?;
            return Err(anyhow::Error::new(e).context(format!("partial results kept in {}", partial.display())));
        }
    };
    save_tuples(&out, &annotated)?;
    let mut m = RunManifest::new("annotate");
    m.seed = Some(a.seed);
    m.input(&a.corpus);
    m.output(&out)?;
    m.finish(&manifest_path(&run, "annotate"))
}

pub fn augment(a: &AugmentArgs) -> Result<()> {
    let run = RunDir::open(&a.out)?;
    let records = load_corpus(&a.corpus)?;
    let completer: Box<dyn DialogueCompleter> = if a.external {
        let (client, templates) = external(a.templates.as_deref())?;
        Box::new(LlmCompleter { client, templates })
    } else {
        Box::new(TemplateCompleter::new(spec_from(a.spec.as_deref())?))
    };
    let outcome =
        augment_context_completion(&records, completer.as_ref(), a.min_prefix..=a.max_prefix, a.per_dialogue, a.seed)?;
    let out = run.path("corpus/augmented.json");
    save_corpus(&out, &outcome.records)?;
    let skipped = run.path("logs/augment_skipped.json");
    write_atomic(&skipped, serde_json::to_string_pretty(&outcome.skipped)?.as_bytes())?;
    println!("{} augmented dialogues, {} skipped", outcome.records.len(), outcome.skipped.len());
    let mut m = RunManifest::new("augment");
    m.seed = Some(a.seed);
    m.input(&a.corpus);
    m.output(&out)?;
    m.output(&skipped)?;
    m.finish(&manifest_path(&run, "augment"))
}

fn save_stage(
    run: &RunDir,
    bundle: &Bundle,
    name: &str,
    stage: Stage,
    outcome: &StageOutcome,
    cfg: &TrainConfig,
    parent: Option<String>,
    skipped_stage2: bool,
    m: &mut RunManifest,
) -> Result<String> {
    let dir = run.path(&format!("checkpoints/{name}"));
    let manifest = StageManifest {
        stage,
        epochs_done: outcome.epochs_done,
        config_hash: cfg.hash(),
        parent_hash: parent,
        skipped_stage2,
    };
    let hash = save_checkpoint(bundle, &dir, &manifest)?;
    write_reports(&run.path("logs"), name, &outcome.reports)?;
    m.output(&dir)?;
    m.output(&run.path(&format!("logs/{name}.jsonl")))?;
    m.output(&run.path(&format!("logs/{name}.csv")))?;
    Ok(hash)
}

fn no_hook(_: usize, _: &Bundle) -> ldpp::Result<()> {
    Ok(())
}

pub fn train_stage1_cmd(a: &Stage1Args) -> Result<()> {
    let run = RunDir::open(&a.out)?;
    let cfg = train_config(a.config.as_deref(), a.seed)?;
    let tuples = read_tuples(&a.tuples)?;
    let opts = RunOptions { max_steps: a.max_steps };
    let mut m = RunManifest::new("train-stage1");
    record_config(&mut m, &cfg)?;
    m.input(&a.tuples);
    let (mut bundle, parent) = match &a.from {
        Some(dir) => {
            let (b, manifest) = load_checkpoint::<f32>(dir)?;
            check_stage_order(&manifest, Stage::Stage1, false)?;
            m.input(dir);
            (b, Some(checkpoint_hash(dir)?))
        }
        None => {
            let texts = tuples.iter().flat_map(|t| t.next_history.iter().map(|x| x.text.as_str()));
            let mut b = Bundle::new(cfg.model(), Tokenizer::build(texts), cfg.seed)?;
            let out = pretrain_generator(&mut b, &tuples, &cfg, opts, &mut no_hook)?;
            let hash = save_stage(&run, &b, "pretrain", Stage::GeneratorPretrain, &out, &cfg, None, false, &mut m)?;
            (b, Some(hash))
        }
    };
    let out = train_stage1(&mut bundle, &tuples, &cfg, opts, &mut no_hook)?;
    save_stage(&run, &bundle, "stage1", Stage::Stage1, &out, &cfg, parent, false, &mut m)?;
    m.finish(&manifest_path(&run, "train-stage1"))
}

pub fn label(a: &LabelArgs) -> Result<()> {
    let run = RunDir::open(&a.out)?;
    let (bundle, manifest) = load_checkpoint::<f32>(&a.from)?;
    if manifest.stage < Stage::Stage1 {
        return Err(Error::Precondition(format!("labelling needs a stage-1 checkpoint, found {}", manifest.stage.name())).into());
    }
    let tuples = read_tuples(&a.tuples)?;
    let labeled = pseudo_label(&bundle, &tuples);
    let out = run.path("tuples/labeled.jsonl");
    save_tuples(&out, &labeled)?;
    let mut m = RunManifest::new("label");
    m.input(&a.from);
    m.input(&a.tuples);
    m.output(&out)?;
    m.finish(&manifest_path(&run, "label"))
}

pub fn train_later(a: &StageArgs, stage: Stage) -> Result<()> {
    let run = RunDir::open(&a.out)?;
    let cfg = train_config(a.config.as_deref(), a.seed)?;
    let (mut bundle, parent) = load_checkpoint::<f32>(&a.from)?;
    let skip = stage == Stage::Stage3 && a.skip_stage2;
    check_stage_order(&parent, stage, skip)?;
    let tuples = read_tuples(&a.tuples)?;
    let opts = RunOptions { max_steps: a.max_steps };
    let name = stage.name();
    let mut m = RunManifest::new(&format!("train-{name}"));
    record_config(&mut m, &cfg)?;
    m.input(&a.from);
    m.input(&a.tuples);
    let out = if stage == Stage::Stage2 {
        train_stage2(&mut bundle, &tuples, &cfg, opts, &mut no_hook)?
    } else {
        train_stage3(&mut bundle, &tuples, &cfg, opts, &mut no_hook)?
    };
    save_stage(&run, &bundle, name, stage, &out, &cfg, Some(checkpoint_hash(&a.from)?), skip, &mut m)?;
    m.finish(&manifest_path(&run, &format!("train-{name}")))
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let run = RunDir::open(&a.out)?;
    let (bundle, _) = load_checkpoint::<f32>(&a.from)?;
    let spec = spec_from(a.spec.as_deref())?;
    let (user, critic): (Box<dyn UserSimulator>, Box<dyn Critic>) = if a.external {
        let (client, templates) = external(a.templates.as_deref())?;
        (
            Box::new(LlmUser { client: client.clone(), templates: templates.clone() }),
            Box::new(LlmCritic { client, templates, domain: Domain::Support }),
        )
    } else {
        (Box::new(ScriptedUser::new(spec.clone())), Box::new(ScriptedCritic::new(spec.max_state)))
    };
    let params = EpisodeParams {
        max_turns: a.max_turns,
        eta: a.eta,
        votes: a.votes,
        decode: DecodeParams { max_new_tokens: a.max_new_tokens, ..DecodeParams::default() },
        planner: a.planner.into(),
        ..EpisodeParams::default()
    };
    let cases = synthetic_cases(&spec, a.cases, a.seed);
    let logs = run_cases(&bundle, user.as_ref(), critic.as_ref(), &cases, &params, a.seed)?;
    let scored: Vec<_> = if a.exclude_aborted { logs.iter().filter(|l| !l.aborted()).cloned().collect() } else { logs.clone() };
    let metrics = compute_metrics(&scored, a.eta)?;
    let episodes = run.path("eval/episodes.jsonl");
    let mjson = run.path("eval/metrics.json");
    let mcsv = run.path("eval/metrics.csv");
    write_atomic(&episodes, logs_to_jsonl(&logs)?.as_bytes())?;
    write_atomic(&mjson, serde_json::to_string_pretty(&metrics)?.as_bytes())?;
    let name = match PlannerMode::from(a.planner) {
        PlannerMode::Mixture => "mixture",
        PlannerMode::Argmax => "argmax",
        PlannerMode::Random => "random",
    };
    write_atomic(&mcsv, metrics_csv(&[(name, metrics)]).as_bytes())?;
    println!("SSR {:.4}  SR {:.4}  AvgT {:.2}  (n={})", metrics.ssr, metrics.sr, metrics.avg_t, metrics.n_cases);
    let mut m = RunManifest::new("evaluate");
    m.seed = Some(a.seed);
    m.input(&a.from);
    for p in [&episodes, &mjson, &mcsv] {
        m.output(p)?;
    }
    m.finish(&manifest_path(&run, "evaluate"))
}

pub fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let run = RunDir::open(&a.out)?;
    let (bundle, _) = load_checkpoint::<f32>(&a.from)?;
    let tuples = read_tuples(&a.tuples)?;
    let codebook = bundle.codebook();
    let k = codebook.k();
    let assignments = assign_codes(&codebook, &tuples)?;
    let usage = codebook_usage(&assignments, k);
    let truth: Option<Vec<usize>> = match &a.corpus {
        Some(p) => {
            let records = load_corpus(p)?;
            let by_id: HashMap<&str, &DialogueRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
            let labels: Option<Vec<usize>> = tuples
                .iter()
                .map(|t| by_id.get(t.dialogue_id.as_str())?.ground_truth_labels.as_ref()?.get(t.turn_index).copied())
                .collect();
            if labels.is_none() {
                bail!(Error::Validation("corpus lacks ground-truth labels for some tuples".into()));
            }
            labels
        }
        None => None,
    };
    let latents: Vec<_> = assignments.iter().map(|x| x.latent.clone()).collect();
    let points = project_2d(&latents)?;
    let codes: Vec<usize> = assignments.iter().map(|x| x.hard_code).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| usage[y].cmp(&usage[x]).then(x.cmp(&y)));
    let mut sections = Vec::new();
    for &code in order.iter().take(a.top_codes).filter(|&&c| usage[c] > 0) {
        sections.push((code, usage[code], representative_utterances(&assignments, &tuples, code, k, a.top_n)?));
    }
    let files = [
        ("analysis/assignments.csv", assignments_csv(&assignments)),
        ("analysis/usage.csv", usage_csv(&usage)),
        ("analysis/points.csv", points_csv(&points, &codes, truth.as_deref())),
        ("analysis/representatives.md", representatives_markdown(&sections)),
    ];
    let mut m = RunManifest::new("analyze");
    m.input(&a.from);
    m.input(&a.tuples);
    for (rel, text) in &files {
        let p = run.path(rel);
        write_atomic(&p, text.as_bytes())?;
        m.output(&p)?;
    }
    let dead = dead_codes(&usage, 0.001);
    let mut summary = serde_json::json!({ "k": k, "n": assignments.len(), "usage": usage, "dead_codes": dead });
    if let Some(truth) = &truth {
        let pred: Vec<usize> = tuples.iter().map(|t| t.pseudo_label.as_ref().map_or(0, |l| l.argmax())).collect();
        let q = clustering_quality(&pred, truth)?;
        println!("NMI {:.4}  purity {:.4}", q.nmi, q.purity);
        summary["quality"] = serde_json::to_value(q)?;
    }
    let p = run.path("analysis/summary.json");
    write_atomic(&p, serde_json::to_string_pretty(&summary)?.as_bytes())?;
    m.output(&p)?;
    m.finish(&manifest_path(&run, "analyze"))
}
