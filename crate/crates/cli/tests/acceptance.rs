//! Acceptance checks A1-A7. Runs without the libtest harness so every criterion
//! prints one PASS/FAIL line. `ACCEPTANCE_ONLY=A1,A5` restricts the run.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ldpp::analysis::clustering_quality;
use ldpp::autograd::{Graph, Var};
use ldpp::corpus::critic::{critic_reward, CriticLabel, CriticQuery, ScriptedCritic, SequenceCritic};
use ldpp::corpus::{
    annotate_rewards, augment_context_completion, decompose, generate_synthetic, validate_corpus, AnnotateOptions,
    DialogueRecord, SyntheticSpec, TemplateCompleter, TrainingTuple, Turn,
};
use ldpp::models::{
    ModelBundle, ModelConfig, PolicyDistribution, Tokenizer, Trainable, CODEBOOK, ENCODER, PFORMER, PLANNER,
    Q_HEAD, V_HEAD,
};
use ldpp::selfplay::{
    compute_metrics, run_cases, synthetic_cases, EpisodeLog, EpisodeParams, EpisodeStatus, PlannerMode,
    ScriptedUser,
};
use ldpp::tensor::Tensor;
use ldpp::training::losses::{
    advantage_weight, awr_term, distill_term, expectile_loss, expectile_term, q_term, reconstruction_term, td_term,
    token_term,
};
use ldpp::training::{
    load_config, pretrain_generator, pseudo_label, train_stage1, train_stage2, train_stage3, QInputMode, RunOptions,
    TrainConfig,
};
use ldpp::{Bundle, Bundle64};
use rand::Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn desk_config(seed: u64) -> TrainConfig {
    let mut cfg = load_config(&workspace().join("configs/desk.toml")).expect("desk config");
    cfg.seed = seed;
    cfg
}

// ---- A1 ------------------------------------------------------------------

fn tiny_bundle(seed: u64) -> Bundle64 {
    let cfg = ModelConfig {
        num_codes: 5,
        policy_tokens: 2,
        pformer_layers: 1,
        latent_dim: 6,
        width: 8,
        heads: 2,
        encoder_layers: 1,
        generator_layers: 1,
        head_hidden: 8,
        max_seq_len: 12,
    };
    let tok = Tokenizer::build(["i feel bad about work", "tell me what happened", "that is hard"]);
    let mut b = ModelBundle::<f64>::new(cfg, tok, seed).unwrap();
    // Zero-initialised heads would make most probes trivially zero.
    let mut rng = ldpp::rng::rng_for(seed, "jitter");
    let noise = Normal::new(0.0, 0.2).unwrap();
    for group in 0..7u8 {
        for t in b.params_mut(group).tensors_mut() {
            for x in t.data_mut() {
                *x += noise.sample(&mut rng);
            }
        }
    }
    b
}

fn tiny_tuple(k: usize) -> TrainingTuple {
    let history = vec![Turn::user("i feel bad about work")];
    let sys = Turn::system("tell me what happened");
    let mut next = history.clone();
    next.push(sys.clone());
    next.push(Turn::user("that is hard"));
    let probs: Vec<f64> = (0..k).map(|i| 1.0 + i as f64).collect();
    let total: f64 = probs.iter().sum();
    TrainingTuple {
        dialogue_id: "probe".into(),
        turn_index: 0,
        history,
        sys_utterance: sys,
        usr_reply: Some(Turn::user("that is hard")),
        next_history: next,
        reward: Some(0.37),
        pseudo_label: Some(PolicyDistribution::new(probs.iter().map(|p| p / total).collect()).unwrap()),
        is_terminal: false,
    }
}

fn loss_value<F>(b: &Bundle64, build: &F) -> f64
where
    F: for<'p> Fn(&'p Bundle64, &mut Graph<'p, f64>) -> Var,
{
    let mut g = Graph::new();
    let v = build(b, &mut g);
    g.scalar(v)
}

/// Central-difference check on `probes` coordinates with nonzero analytic gradient.
fn fd_check<F>(b: &mut Bundle64, groups: &[u8], probes: usize, seed: u64, build: F) -> Result<f64, String>
where
    F: for<'p> Fn(&'p Bundle64, &mut Graph<'p, f64>) -> Var,
{
    let step = 1e-5;
    let grads = {
        let mut g = Graph::new();
        let v = build(b, &mut g);
        g.backward(v)
    };
    let mut coords = Vec::new();
    for &group in groups {
        for idx in 0..b.params(group).len() as u32 {
            if let Some(t) = grads.get(&b.params(group).key(idx)) {
                for (e, &a) in t.data().iter().enumerate() {
                    if a.abs() > 1e-8 {
                        coords.push((group, idx, e, a));
                    }
                }
            }
        }
    }
    if coords.len() < probes {
        return Err(format!("only {} coordinates carry gradient", coords.len()));
    }
    let mut rng = ldpp::rng::rng_for(seed, "probes");
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let (group, idx, e, analytic) = coords[rng.gen_range(0..coords.len())];
        let orig = b.params(group).get(idx).data()[e];
        b.params_mut(group).get_mut(idx).data_mut()[e] = orig + step;
        let up = loss_value(b, &build);
        b.params_mut(group).get_mut(idx).data_mut()[e] = orig - step;
        let down = loss_value(b, &build);
        b.params_mut(group).get_mut(idx).data_mut()[e] = orig;
        let numeric = (up - down) / (2.0 * step);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn a1() -> Outcome {
    let start = Instant::now();
    let probes = 32;
    let mut b = tiny_bundle(11);
    let t = tiny_tuple(b.num_codes());
    let label = t.pseudo_label.clone().unwrap();
    let stage1 = Trainable { encoder: true, codebook: true, pformer: true, ..Trainable::NONE };
    let planner = Trainable { planner: true, ..Trainable::NONE };
    let heads = Trainable { q_head: true, v_head: true, ..Trainable::NONE };
    let low = Trainable { pformer: true, codebook: true, ..Trainable::NONE };
    let out = b.planner_outputs(&t.history);
    let adv = out.q.iter().zip(label.probs()).map(|(q, p)| q * p).sum::<f64>() - out.v;
    let w_high = advantage_weight(adv, 1.0, 20.0);
    let v_next = b.v_value(&t.next_history);
    let tt = &t;
    let lb = &label;
    let mut checks: Vec<(&str, Result<f64, String>)> = Vec::new();
    checks.push(("stage1", fd_check(&mut b, &[ENCODER, CODEBOOK, PFORMER], probes, 1, |b, g| {
        reconstruction_term(g, b, tt, stage1).unwrap()
    })));
    checks.push(("distill", fd_check(&mut b, &[PLANNER], probes, 2, |b, g| {
        let ids = b.planner_ids(&tt.history);
        let s = b.planner_state(g, &ids, planner);
        let l = b.policy_logits(g, s, planner);
        distill_term(g, l, lb)
    })));
    checks.push(("expectile", fd_check(&mut b, &[V_HEAD], probes, 3, |b, g| {
        let ids = b.planner_ids(&tt.history);
        let s = b.planner_state(g, &ids, heads);
        let qrow = b.q_head(g, s, heads);
        let q = q_term(g, qrow, lb, QInputMode::Expected);
        let v = b.v_head(g, s, heads);
        expectile_term(g, q, v, 0.7)
    })));
    checks.push(("q_td", fd_check(&mut b, &[Q_HEAD], probes, 4, |b, g| {
        let ids = b.planner_ids(&tt.history);
        let s = b.planner_state(g, &ids, heads);
        let qrow = b.q_head(g, s, heads);
        let q = q_term(g, qrow, lb, QInputMode::Expected);
        td_term(g, q, 0.37, v_next, 0.999, false)
    })));
    checks.push(("awr_planner", fd_check(&mut b, &[PLANNER], probes, 5, |b, g| {
        let ids = b.planner_ids(&tt.history);
        let s = b.planner_state(g, &ids, planner);
        let l = b.policy_logits(g, s, planner);
        awr_term(g, l, lb, w_high)
    })));
    checks.push(("token_reinforce", fd_check(&mut b, &[PFORMER, CODEBOOK], probes, 6, |b, g| {
        token_term(g, b, tt, lb, w_high, low).unwrap()
    })));
    let mut report = Vec::new();
    let mut failed = Vec::new();
    for (name, r) in checks {
        match r {
            Ok(e) if e < 1e-4 => report.push(format!("{name} {e:.1e}")),
            Ok(e) => failed.push(format!("{name} rel err {e:.2e}")),
            Err(m) => failed.push(format!("{name}: {m}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs > 120.0 {
        failed.push(format!("runtime {secs:.0}s > 120s"));
    }
    if failed.is_empty() {
        Ok(format!("6 losses x {probes} probes, max rel err: {}; {secs:.1}s", report.join(", ")))
    } else {
        Err(failed.join("; "))
    }
}

// ---- A2 ------------------------------------------------------------------

fn a2(logs: &[EpisodeLog]) -> Outcome {
    let b = tiny_bundle(5);
    let t = tiny_tuple(b.num_codes());
    let label = t.pseudo_label.clone().unwrap();
    let mut notes = Vec::new();

    // (a) literal REINFORCE: reward exp(A) at the last token, zero before, gamma = 1.
    for adv in [-0.8, 0.0, 0.37, 1.9] {
        let weight = advantage_weight(adv, 1.0, 20.0);
        let mut g = Graph::new();
        let v = token_term(&mut g, &b, &t, &label, weight, Trainable::NONE).unwrap();
        let ours = g.scalar(v);
        let tokens = b.pformer_transform(&b.mix_latent(&label).unwrap()).unwrap();
        let logp = b.target_log_probs(&tokens, &t.history, &t.sys_utterance).unwrap();
        let mut rewards = vec![0.0; logp.len()];
        *rewards.last_mut().unwrap() = adv.exp();
        let gamma = 1.0;
        let mut ret = 0.0;
        let mut returns = vec![0.0; logp.len()];
        for i in (0..logp.len()).rev() {
            ret = rewards[i] + gamma * ret;
            returns[i] = ret;
        }
        let oracle: f64 = -returns.iter().zip(&logp).map(|(g, l)| g * l).sum::<f64>();
        let rel = (ours - oracle).abs() / oracle.abs();
        if rel > 1e-12 {
            return Err(format!("(a) A={adv}: token loss {ours} vs REINFORCE {oracle} (rel {rel:.1e})"));
        }
    }
    notes.push("(a) REINFORCE identity to 1e-12".to_string());

    // (b) symmetric expectile.
    let mut rng = ldpp::rng::rng_for(0, "a2b");
    for _ in 0..1000 {
        let (q, v): (f64, f64) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        if expectile_loss(q, v, 0.5) != 0.5 * (q - v) * (q - v) {
            return Err(format!("(b) expectile at tau=0.5 differs for q={q}, v={v}"));
        }
        let mut g: Graph<'_, f64> = Graph::new();
        let qv = g.constant(Tensor::scalar(q));
        let vv = g.constant(Tensor::scalar(v));
        let e = expectile_term(&mut g, qv, vv, 0.5);
        if g.scalar(e) != 0.5 * (q - v) * (q - v) {
            return Err("(b) graph expectile at tau=0.5 differs from 0.5 * MSE".into());
        }
    }
    notes.push("(b) exact".into());

    // (c) mixture identities.
    let cb = b.codebook();
    for k in 0..cb.k() {
        let z = b.mix_latent(&PolicyDistribution::one_hot(cb.k(), k)).unwrap();
        if z.vector.iter().zip(cb.row(k)).any(|(a, b)| a != b) {
            return Err(format!("(c) one-hot {k} does not select its row"));
        }
    }
    let z = b.mix_latent(&PolicyDistribution::uniform(cb.k())).unwrap();
    for (j, v) in z.vector.iter().enumerate() {
        let mean = (0..cb.k()).map(|k| cb.row(k)[j]).sum::<f64>() / cb.k() as f64;
        if (v - mean).abs() > 1e-12 {
            return Err(format!("(c) uniform mixture column {j}: {v} vs mean {mean}"));
        }
    }
    notes.push("(c) one-hot/uniform".into());

    // (d) success flag on every emitted log.
    if logs.is_empty() {
        return Err("(d) no episode logs were produced".into());
    }
    if let Some(l) = logs.iter().find(|l| l.success != (l.final_reward > 0.6)) {
        return Err(format!("(d) {}: success={} with final reward {}", l.case_id, l.success, l.final_reward));
    }
    notes.push(format!("(d) {} logs", logs.len()));
    Ok(notes.join("; "))
}

// ---- A3 / A4 ---------------------------------------------------------------

struct SeedRun {
    seed: u64,
    records: Vec<DialogueRecord>,
    tuples: Vec<TrainingTuple>,
    stage1: Bundle,
    secs: f64,
    nmi: f64,
    purity: f64,
}

fn stage1_run(seed: u64) -> SeedRun {
    let start = Instant::now();
    let spec = SyntheticSpec::default();
    let records = generate_synthetic(&spec, 2000, seed).unwrap();
    let tuples = decompose(&records);
    let cfg = desk_config(seed);
    let texts = records.iter().flat_map(|r| r.turns.iter().map(|t| t.text.as_str()));
    let mut b = Bundle::new(cfg.model(), Tokenizer::build(texts), seed).unwrap();
    pretrain_generator(&mut b, &tuples, &cfg, RunOptions::default(), &mut |_, _| Ok(())).unwrap();
    train_stage1(&mut b, &tuples, &cfg, RunOptions::default(), &mut |_, _| Ok(())).unwrap();
    let labeled = pseudo_label(&b, &tuples);
    let by_id: BTreeMap<&str, &DialogueRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let truth: Vec<usize> = labeled
        .iter()
        .map(|t| by_id[t.dialogue_id.as_str()].ground_truth_labels.as_ref().unwrap()[t.turn_index])
        .collect();
    let pred: Vec<usize> = labeled.iter().map(|t| t.pseudo_label.as_ref().unwrap().argmax()).collect();
    let q = clustering_quality(&pred, &truth).unwrap();
    let secs = start.elapsed().as_secs_f64();
    SeedRun { seed, records, tuples: labeled, stage1: b, secs, nmi: q.nmi, purity: q.purity }
}

fn a3(runs: &[SeedRun]) -> Outcome {
    let cfg = desk_config(0);
    let lines: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {}: NMI {:.3} purity {:.3} in {:.0}s", r.seed, r.nmi, r.purity, r.secs))
        .collect();
    let ok = runs.iter().filter(|r| r.nmi >= 0.6 && r.purity >= 0.7 && r.secs <= 900.0).count();
    let summary = format!(
        "K={} T={} L={} width={}, {} epochs; {}; {ok}/{} seeds meet NMI>=0.6, purity>=0.7, <=15 min",
        cfg.num_codes,
        cfg.policy_tokens,
        cfg.pformer_layers,
        cfg.d_model,
        cfg.epochs_per_stage,
        lines.join("; "),
        runs.len()
    );
    if ok >= 2 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

struct AblationRun {
    full: f64,
    without_stage3: f64,
    random: f64,
    logs: Vec<EpisodeLog>,
}

fn ablation(run: &SeedRun) -> AblationRun {
    let spec = SyntheticSpec::default();
    let cfg = desk_config(run.seed);
    let critic = ScriptedCritic::new(spec.max_state).with_records(&run.records).unwrap();
    let start = Instant::now();
    let opts = AnnotateOptions { votes: 10, seed: run.seed, ..AnnotateOptions::default() };
    let tuples = annotate_rewards(&run.tuples, &critic, &opts).unwrap();
    let mut stage2 = run.stage1.clone();
    train_stage2(&mut stage2, &tuples, &cfg, RunOptions::default(), &mut |_, _| Ok(())).unwrap();
    eprintln!("seed {}: stage 2 done at {:.0}s", run.seed, start.elapsed().as_secs_f64());
    let mut full = stage2.clone();
    train_stage3(&mut full, &tuples, &cfg, RunOptions::default(), &mut |_, _| Ok(())).unwrap();
    eprintln!("seed {}: stage 3 done at {:.0}s", run.seed, start.elapsed().as_secs_f64());
    let user = ScriptedUser::new(spec.clone());
    let eval_critic = ScriptedCritic::new(spec.max_state);
    let cases = synthetic_cases(&spec, 200, run.seed);
    let mut logs = Vec::new();
    let mut ssr = |b: &Bundle, planner: PlannerMode| {
        let params = EpisodeParams { planner, ..EpisodeParams::default() };
        let l = run_cases(b, &user, &eval_critic, &cases, &params, run.seed).unwrap();
        let m = compute_metrics(&l, params.eta).unwrap();
        logs.extend(l);
        m.ssr
    };
    let f = ssr(&full, PlannerMode::Mixture);
    let w = ssr(&stage2, PlannerMode::Mixture);
    let r = ssr(&full, PlannerMode::Random);
    eprintln!("seed {}: evaluated at {:.0}s", run.seed, start.elapsed().as_secs_f64());
    AblationRun { full: f, without_stage3: w, random: r, logs }
}

fn a4(runs: &[AblationRun], secs: f64) -> Outcome {
    let n = runs.len() as f64;
    let mean = |f: fn(&AblationRun) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let (full, wo, rnd) = (mean(|r| r.full), mean(|r| r.without_stage3), mean(|r| r.random));
    let per: Vec<String> =
        runs.iter().map(|r| format!("[{:.3} {:.3} {:.3}]", r.full, r.without_stage3, r.random)).collect();
    let summary = format!(
        "mean SSR full {full:.3}, w/o stage 3 {wo:.3}, random {rnd:.3} (per seed {}); need +0.05 / +0.10; {secs:.0}s",
        per.join(" ")
    );
    if full >= wo + 0.05 && full >= rnd + 0.10 && secs <= 1800.0 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

// ---- A5 ------------------------------------------------------------------

fn a5() -> Outcome {
    let log = |final_reward: f64, num_turns: usize| EpisodeLog {
        case_id: format!("hand-{num_turns}"),
        turns: vec![],
        turn_rewards: vec![final_reward],
        success: final_reward > 0.6,
        num_turns,
        final_reward,
        seed: 0,
        policy_trace: vec![],
        status: EpisodeStatus::Completed,
        error: None,
    };
    let logs = [log(1.0, 3), log(-0.5, 10), log(0.7, 5)];
    let m = compute_metrics(&logs, 0.6).map_err(|e| e.to_string())?;
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    if !(close(m.ssr, 0.4) && close(m.sr, 2.0 / 3.0) && m.avg_t == 6.0 && (m.sr * 1e4).round() / 1e4 == 0.6667) {
        return Err(format!("got SSR {} SR {} AvgT {}", m.ssr, m.sr, m.avg_t));
    }
    let mut votes = vec![CriticLabel::Solved; 6];
    votes.extend([CriticLabel::Better; 4]);
    let critic = SequenceCritic::new(votes);
    let q = CriticQuery { item_id: "hand", conversation: &[], meta: None, transition: None };
    let r = critic_reward(&critic, &q, 10, 0).map_err(|e| e.to_string())?;
    if !close(r, 0.64) || r <= 0.6 {
        return Err(format!("vote mean {r}"));
    }
    Ok(format!("SSR {:.4} SR {:.4} AvgT {:.1}; 6 solved + 4 better -> {r:.2}", m.ssr, m.sr, m.avg_t))
}

// ---- A6 ------------------------------------------------------------------

fn ldpp(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ldpp")).args(args).env("RUST_LOG", "warn").output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("ldpp {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn tree(root: &Path) -> std::io::Result<Vec<String>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/"));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn pipeline_once(dir: &Path, config: &Path) -> Result<(), String> {
    let run = dir.to_str().unwrap();
    let cfg = config.to_str().unwrap();
    ldpp(&["gen-corpus", "--n", "60", "--seed", "7", "--out", run])?;
    let corpus = dir.join("corpus/corpus.json");
    ldpp(&["annotate", "--corpus", corpus.to_str().unwrap(), "--out", run, "--seed", "7"])?;
    let tuples = dir.join("tuples/annotated.jsonl");
    ldpp(&["train-stage1", "--tuples", tuples.to_str().unwrap(), "--out", run, "--config", cfg, "--max-steps", "50"])?;
    let ckpt = dir.join("checkpoints/stage1");
    ldpp(&["evaluate", "--from", ckpt.to_str().unwrap(), "--out", run, "--cases", "10", "--seed", "3", "--max-new-tokens", "12"])
}

fn a6() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tmp.path().join("tiny.toml");
    std::fs::write(
        &config,
        "K = 6\nT = 2\nL = 1\nd = 8\nd_model = 16\nhead_hidden = 16\nheads = 2\nmax_seq_len = 24\nseed = 7\n",
    )
    .map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline_once(&a, &config)?;
    pipeline_once(&b, &config)?;
    let files = tree(&a).map_err(|e| e.to_string())?;
    if files != tree(&b).map_err(|e| e.to_string())? {
        return Err("runs produced different file sets".into());
    }
    let mut compared = 0;
    for rel in &files {
        // Run manifests carry wall-clock timestamps.
        if rel.starts_with("logs/") && rel.ends_with(".manifest.json") {
            continue;
        }
        let x = std::fs::read(a.join(rel)).map_err(|e| format!("{rel}: {e}"))?;
        let y = std::fs::read(b.join(rel)).map_err(|e| format!("{rel}: {e}"))?;
        if x != y {
            return Err(format!("{rel} differs between runs"));
        }
        compared += 1;
    }
    Ok(format!("gen-corpus, annotate, train-stage1 (50 steps), evaluate: {compared} artifacts byte-identical"))
}

// ---- A7 ------------------------------------------------------------------

fn a7() -> Outcome {
    let spec = SyntheticSpec::default();
    let sources = generate_synthetic(&spec, 797, 7).map_err(|e| e.to_string())?;
    let out = augment_context_completion(&sources, &TemplateCompleter::new(spec), 2..=8, 7, 7).map_err(|e| e.to_string())?;
    validate_corpus(&out.records).map_err(|e| e.to_string())?;
    if out.records.len() != 5579 || !out.skipped.is_empty() {
        return Err(format!("{} outputs, {} skipped", out.records.len(), out.skipped.len()));
    }
    Ok("797 x 7 -> 5579 dialogues, alternation valid".into())
}

// ---- driver ----------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    })
}

fn main() {
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').map(|x| x.trim().to_string()).collect());
    let wanted = |id: &str| only.as_ref().is_none_or(|o| o.iter().any(|x| x == id));
    let mut results: Vec<(&str, Outcome)> = Vec::new();

    if wanted("A1") {
        results.push(("A1", guarded(a1)));
    }
    let mut runs = Vec::new();
    if wanted("A3") || wanted("A4") {
        for seed in [7, 8, 9] {
            match guarded(|| {
                let r = stage1_run(seed);
                eprintln!("stage 1 seed {seed}: NMI {:.3} purity {:.3} ({:.0}s)", r.nmi, r.purity, r.secs);
                runs.push(r);
                Ok(String::new())
            }) {
                Ok(_) => {}
                Err(e) => results.push(("A3", Err(format!("seed {seed}: {e}")))),
            }
        }
    }
    if wanted("A3") && runs.len() == 3 {
        results.push(("A3", a3(&runs)));
    }
    let mut logs = Vec::new();
    if wanted("A4") && runs.len() == 3 {
        let start = Instant::now();
        let out = guarded(|| {
            let abl: Vec<AblationRun> = runs.iter().map(ablation).collect();
            let secs = start.elapsed().as_secs_f64() + runs.iter().map(|r| r.secs).sum::<f64>();
            for a in &abl {
                logs.extend(a.logs.iter().cloned());
            }
            a4(&abl, secs)
        });
        results.push(("A4", out));
    }
    if wanted("A2") {
        if logs.is_empty() {
            // Without the ablation run, score a quick self-play batch with an untrained bundle.
            let spec = SyntheticSpec::default();
            let cfg = ModelConfig { num_codes: 4, policy_tokens: 2, pformer_layers: 1, width: 16, head_hidden: 16, latent_dim: 8, max_seq_len: 24, ..ModelConfig::default() };
            let texts: Vec<String> = spec.vocabulary().into_iter().collect();
            let b = Bundle::new(cfg, Tokenizer::build(texts.iter().map(String::as_str)), 1).unwrap();
            let params = EpisodeParams { decode: ldpp::models::DecodeParams { max_new_tokens: 8, ..Default::default() }, ..EpisodeParams::default() };
            let cases = synthetic_cases(&spec, 20, 1);
            logs = run_cases(&b, &ScriptedUser::new(spec.clone()), &ScriptedCritic::new(spec.max_state), &cases, &params, 1).unwrap();
        }
        results.push(("A2", guarded(|| a2(&logs))));
    }
    if wanted("A5") {
        results.push(("A5", guarded(a5)));
    }
    if wanted("A6") {
        results.push(("A6", guarded(a6)));
    }
    if wanted("A7") {
        results.push(("A7", guarded(a7)));
    }

    results.sort_by_key(|(id, _)| *id);
    let mut failed = 0;
    println!();
    for (id, r) in &results {
        match r {
            Ok(msg) => println!("{id} PASS  {msg}"),
            Err(msg) => {
                failed += 1;
                println!("{id} FAIL  {msg}");
            }
        }
    }
    println!("\nacceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
