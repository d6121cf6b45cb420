//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Run with `cargo test -p dlpo-core --test acceptance`.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dlpo_core::checkpoint::encode;
use dlpo_core::verify::{run_suite, CheckLine, Suite, VerifyOptions};
use dlpo_core::*;

const GRAD_BUDGET: Duration = Duration::from_secs(60);
const BIAS_BUDGET: Duration = Duration::from_secs(60);
const TRAIN_BUDGET: Duration = Duration::from_secs(15 * 60);
const MIN_PROXY_GAIN: f64 = 0.3;
const MAX_EVAL_DROP: f64 = 0.1;
/// Episodes averaged at the end of a run when comparing with the baseline.
const TAIL: usize = 20;
const TEST_SAMPLES_PER_CONDITION: usize = 4;

struct Outcome {
    name: &'static str,
    passed: bool,
}

fn report(out: &mut Vec<Outcome>, name: &'static str, passed: bool, detail: String) {
    println!("[{}] {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    out.push(Outcome { name, passed });
}

fn failing(lines: &[CheckLine]) -> Vec<String> {
    lines.iter().filter(|l| !l.passed).map(|l| l.to_string()).collect()
}

fn suite(s: Suite) -> (Vec<CheckLine>, Duration) {
    let t = Instant::now();
    let lines = run_suite(s, &VerifyOptions::default()).expect("suite runs");
    (lines, t.elapsed())
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = walk(dir)
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn main() -> ExitCode {
    let mut out = Vec::new();

    let (grad, took) = suite(Suite::Grad);
    let bad = failing(&grad);
    report(
        &mut out,
        "gradient correctness",
        bad.is_empty() && took < GRAD_BUDGET,
        format!(
            "{}/{} finite-difference checks within 1e-4 in {:.1}s (budget 60s) {bad:?}",
            grad.len() - bad.len(),
            grad.len(),
            took.as_secs_f64()
        ),
    );

    let (bias, took) = suite(Suite::Bias);
    let key: Vec<&CheckLine> = bias.iter().filter(|l| l.name == "ddpo_beta0" || l.name == "dlpo_beta0").collect();
    let ok = key.len() == 2 && key.iter().all(|l| l.passed) && failing(&bias).is_empty();
    let details: Vec<String> = key.iter().map(|l| format!("{} {}", l.name, l.detail)).collect();
    report(
        &mut out,
        "estimator unbiasedness",
        ok && took < BIAS_BUDGET,
        format!("{} | {:.1}s (budget 60s)", details.join(" | "), took.as_secs_f64()),
    );

    let (red, _) = suite(Suite::Reduction);
    let bad = failing(&red);
    report(
        &mut out,
        "reduction lattice",
        bad.is_empty(),
        format!(
            "{}/{} bitwise gradient and end-to-end comparisons identical {bad:?}",
            red.len() - bad.len(),
            red.len()
        ),
    );

    let (sched, _) = suite(Suite::Schedule);
    let (density, identities): (Vec<&CheckLine>, Vec<&CheckLine>) =
        sched.iter().partition(|l| l.name == "reverse_density_integrates_to_one");
    let bad: Vec<String> = identities.iter().filter(|l| !l.passed).map(|l| l.to_string()).collect();
    let summary: Vec<String> = identities.iter().map(|l| format!("{} {}", l.name, l.detail)).collect();
    report(&mut out, "schedule and marginal identities", bad.is_empty(), summary.join(" | "));
    report(
        &mut out,
        "density sanity",
        density.len() == 1 && density[0].passed,
        density.iter().map(|l| l.detail.clone()).collect::<Vec<_>>().join(""),
    );

    let cfg = RunConfig::default();
    let started = Instant::now();
    let (fine, coarse) = cfg.schedules().unwrap();
    let scorer = cfg.scorer().unwrap();
    let lab = Lab {
        scorer: &scorer,
        fine: &fine,
        coarse: &coarse,
    };
    let (p_pre, pre_report) = cfg.pretrain_model(&scorer, &fine).unwrap();
    let train_conds = scorer.corpus().conditions_in(SplitName::Train);
    let test_conds = scorer.corpus().conditions_in(SplitName::Test);
    let base_train = evaluate_checkpoint(&p_pre, &lab, &train_conds, 1, cfg.seed).unwrap();
    let base_test = evaluate_checkpoint(&p_pre, &lab, &test_conds, TEST_SAMPLES_PER_CONDITION, cfg.seed).unwrap();
    let dlpo = finetune(&p_pre, &lab, &cfg.train_config()).unwrap();
    let dlpo_test = evaluate_checkpoint(&dlpo.best().params, &lab, &test_conds, TEST_SAMPLES_PER_CONDITION, cfg.seed).unwrap();
    let took = started.elapsed();
    let gain = dlpo.mean_reward_last(TAIL) - base_train.proxy.mean;
    let eval_change = dlpo.mean_eval_last(TAIL) - base_train.eval.mean;
    let beats = dlpo_test.proxy.mean > base_test.proxy.mean && dlpo_test.eval.mean > base_test.eval.mean;
    report(
        &mut out,
        "direction of effect",
        gain >= MIN_PROXY_GAIN && eval_change >= -MAX_EVAL_DROP && beats && took < TRAIN_BUDGET,
        format!(
            "pretrain loss {:.3}; proxy {:.3} -> {:.3} (gain {gain:+.3}, need >= {MIN_PROXY_GAIN}); eval {:.3} -> {:.3} ({eval_change:+.3}, floor -{MAX_EVAL_DROP}); \
             test proxy {:.3} vs {:.3}, test eval {:.3} vs {:.3} (best checkpoint ep {} vs pretrained); {:.0}s (budget 900s)",
            pre_report.final_loss,
            base_train.proxy.mean,
            dlpo.mean_reward_last(TAIL),
            base_train.eval.mean,
            dlpo.mean_eval_last(TAIL),
            dlpo_test.proxy.mean,
            base_test.proxy.mean,
            dlpo_test.eval.mean,
            base_test.eval.mean,
            dlpo.best().episode,
            took.as_secs_f64()
        ),
    );

    let mut only_cfg = cfg.clone();
    only_cfg.algo = Algo::Onlydl;
    let only = finetune(&p_pre, &lab, &only_cfg.train_config()).unwrap();
    let only_gain = only.mean_reward_last(TAIL) - base_train.proxy.mean;
    report(
        &mut out,
        "diffusion-loss-only ablation",
        only_gain < gain,
        format!(
            "onlydl proxy gain {only_gain:+.3} vs dlpo {gain:+.3}; onlydl penalty_mean last {:.3}, mean_reward last {:.3}",
            only.metrics.last().map(|m| m.penalty_mean).unwrap_or(f64::NAN),
            only.mean_reward_last(TAIL)
        ),
    );

    let mut one_cfg = cfg.clone();
    one_cfg.loss_guidance_steps = 1;
    let one = finetune(&p_pre, &lab, &one_cfg.train_config()).unwrap();
    let comparable = one.metrics.len() == cfg.episodes && one.metrics.iter().all(|m| m.mean_reward.is_finite());
    report(
        &mut out,
        "loss-guidance steps",
        comparable && dlpo.mean_eval_last(TAIL) >= one.mean_eval_last(TAIL),
        format!(
            "steps=10 reward {:.3} eval {:.3}; steps=1 reward {:.3} eval {:.3}",
            dlpo.mean_reward_last(TAIL),
            dlpo.mean_eval_last(TAIL),
            one.mean_reward_last(TAIL),
            one.mean_eval_last(TAIL)
        ),
    );

    let mut small = cfg.clone();
    small.pretrain_steps = 200;
    small.episodes = 6;
    let run_once = |dir: &Path| {
        let (p, _) = small.pretrain_model(&scorer, &fine).unwrap();
        let pre_bytes = encode(&p, &small.checkpoint_meta(small.pretrain_steps, 0)).unwrap();
        let art = finetune(&p, &lab, &small.train_config()).unwrap();
        art.write(dir, &small.checkpoint_meta(0, 0)).unwrap();
        (pre_bytes, dir_bytes(dir))
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (pa, fa) = run_once(a.path());
    let (pb, fb) = run_once(b.path());
    report(
        &mut out,
        "determinism",
        pa == pb && fa == fb,
        format!(
            "pretrained checkpoint identical={}; {} run files identical={} ({})",
            pa == pb,
            fa.len(),
            fa == fb,
            fa.iter().map(|f| f.0.as_str()).collect::<Vec<_>>().join(", ")
        ),
    );

    let failed: Vec<&str> = out.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    println!("acceptance: {}/{} criteria passed", out.len() - failed.len(), out.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
