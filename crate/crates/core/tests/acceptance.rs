//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! The curriculum comparison trains twelve full-length runs and takes a
//! while; set `ATR_ACCEPTANCE_ONLY=1,2,7` to run a subset.

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use atr_core::harness::eval::OracleActors;
use atr_core::harness::gradcheck::run_gradcheck;
use atr_core::harness::sequential::{families, run_sequential_eval, MAX_STEPS};
use atr_core::harness::{run_training, ExperimentConfig, MetricsRow};
use atr_core::policy::make_oracle_policy;
use atr_core::rng::{derive_seed, derived, seeded};
use atr_core::sampler::{
    density_estimate, euclidean, knn_distance, select_task, SamplerConfig, SamplerMode, SamplerModel,
};
use atr_core::symbolic::{extract_scene_graph, goal_satisfied, plan, schemas, simulate_plan, successors, SceneGraph};
use atr_core::taskspace::{sample_prior, ObjectId, PriorConfig, Relation, Skill, SkillContext, TaskParam};
use atr_core::world::{instantiate, WorldConstants};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// -- 1 ----------------------------------------------------------------------

fn gradients() -> Outcome {
    let t = Instant::now();
    let r = run_gradcheck(100, 1).expect("gradcheck runs");
    let el = t.elapsed();
    outcome(
        r.passed() && el < Duration::from_secs(60),
        format!(
            "100 instances, {} coords checked, {} kink-excluded, max rel err {:.2e} ({:?}), {:.1}s",
            r.checked,
            r.excluded,
            r.max_rel_err,
            r.worst,
            secs(el)
        ),
    )
}

// -- 2 ----------------------------------------------------------------------

fn knn() -> Outcome {
    let t = Instant::now();
    let mut rng = seeded(2);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let dim = rng.random_range(1..=8);
        let n = rng.random_range(1..=300);
        let k = rng.random_range(1..=n.min(10));
        let subset: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut all: Vec<f64> = subset.iter().map(|x| euclidean(&q, x)).collect();
        all.sort_by(f64::total_cmp);
        if knn_distance(&q, &subset, k).unwrap() != all[k - 1] {
            mismatches += 1;
        }
    }
    let el = t.elapsed();
    outcome(mismatches == 0 && el < Duration::from_secs(10), format!("1000 triples, {mismatches} mismatches, {:.2}s", secs(el)))
}

// -- 3 ----------------------------------------------------------------------

fn density() -> Outcome {
    let (m, k, trials) = (1000, 5, 100);
    let mut rng = seeded(3);
    let mut sum = 0.0;
    for _ in 0..trials {
        let pts: Vec<Vec<f64>> = (0..m).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let q = [rng.random::<f64>(), rng.random::<f64>()];
        let d = knn_distance(&q, &pts, k).unwrap();
        sum += density_estimate(d, k, m, 2);
    }
    let mean = sum / trials as f64;
    outcome(
        (mean - 1.0).abs() <= 0.2,
        format!("unit square, m={m}, K={k}, {trials} trials: mean estimate {mean:.3} (estimator mean is about K/(K-1) = 1.25 away from edges)"),
    )
}

// -- 4 ----------------------------------------------------------------------

fn relabel(w: &TaskParam, perm: &[u8]) -> TaskParam {
    let map = |id: ObjectId| if id.is_table() { id } else { ObjectId(perm[id.index() - 1]) };
    let mut objects: Vec<_> = w
        .objects
        .iter()
        .map(|o| {
            let mut o = o.clone();
            o.id = map(o.id);
            o
        })
        .collect();
    objects.sort_by_key(|o| o.id);
    TaskParam {
        objects,
        init_relations: w.init_relations.iter().map(|r| Relation { kind: r.kind, src: map(r.src), dst: map(r.dst) }).collect(),
        contexts: w.contexts.iter().map(|c| SkillContext { skill: c.skill, i: map(c.i), j: map(c.j) }).collect(),
        env: w.env,
    }
}

fn invariances() -> Outcome {
    let mut rng = seeded(4);
    let cfg = PriorConfig { contexts_per_task: 2, stack_prob: 0.4, nextto_prob: 0.5, ..PriorConfig::default() };
    let mut model = SamplerModel::new(&mut rng);
    let (mut edge_fail, mut label_fail) = (0, 0);
    for t in 0..1000 {
        if t % 100 == 0 {
            model = SamplerModel::new(&mut rng);
        }
        let w = sample_prior(&mut rng, &cfg).unwrap();
        let e = model.encode(&w);
        let mut shuffled = w.clone();
        shuffled.init_relations.shuffle(&mut rng);
        if model.encode(&shuffled) != e {
            edge_fail += 1;
        }
        let mut perm: Vec<u8> = (1..w.objects.len() as u8).collect();
        perm.shuffle(&mut rng);
        if model.encode(&relabel(&w, &perm)) != e {
            label_fail += 1;
        }
    }
    outcome(
        edge_fail == 0 && label_fail == 0,
        format!("1000 tasks: {edge_fail} edge-permutation and {label_fail} relabeling differences"),
    )
}

// -- 5 ----------------------------------------------------------------------

fn iddfs(g: &SceneGraph, goal: &BTreeSet<Relation>, max: usize) -> Option<usize> {
    fn dfs(g: &SceneGraph, goal: &BTreeSet<Relation>, left: usize) -> bool {
        goal_satisfied(g, goal) || (left > 0 && successors(g, &schemas()).iter().any(|(_, n)| dfs(n, goal, left - 1)))
    }
    (0..=max).find(|&d| dfs(g, goal, d))
}

fn planner() -> Outcome {
    let t = Instant::now();
    let mut rng = seeded(5);
    let cfg = PriorConfig { max_objects: 5, ..PriorConfig::default() };
    let c = WorldConstants::default();
    let (mut n, mut wrong_len, mut unsound, mut lengths) = (0, 0, 0, [0usize; 5]);
    while n < 500 {
        let w = sample_prior(&mut rng, &cfg).unwrap();
        let Ok(world) = instantiate(&w, &mut rng, &c) else { continue };
        let start = extract_scene_graph(&world);
        let mut g = start.clone();
        for _ in 0..rng.random_range(1..=4) {
            let next = successors(&g, &schemas());
            let Some((_, s)) = next.choose(&mut rng) else { break };
            g = s.clone();
        }
        let new: Vec<Relation> = g.edges.difference(&start.edges).copied().collect();
        if new.is_empty() {
            continue;
        }
        let k = rng.random_range(1..=new.len().min(3));
        let goal: BTreeSet<Relation> = new.choose_multiple(&mut rng, k).copied().collect();
        n += 1;
        let p = plan(&start, &goal).expect("goal reached by a walk is reachable");
        lengths[p.len().min(4)] += 1;
        if Some(p.len()) != iddfs(&start, &goal, 4) {
            wrong_len += 1;
        }
        if !simulate_plan(&start, &p).is_ok_and(|end| goal_satisfied(&end, &goal)) {
            unsound += 1;
        }
    }
    let el = t.elapsed();
    outcome(
        wrong_len == 0 && unsound == 0 && el < Duration::from_secs(30),
        format!(
            "500 instances (plan lengths 0..4+: {lengths:?}): {wrong_len} longer than IDDFS, {unsound} unsound, {:.1}s",
            secs(el)
        ),
    )
}

// -- 6 ----------------------------------------------------------------------

fn oracle_sequential() -> Outcome {
    let r = run_sequential_eval(&OracleActors, &families(), 200, 6, &WorldConstants::default(), MAX_STEPS);
    let pass = r.iter().all(|f| f.successes == f.trials);
    let detail = r.iter().map(|f| format!("{} {}/{} ({:.2} steps)", f.name, f.successes, f.trials, f.mean_steps)).collect::<Vec<_>>();
    outcome(pass, detail.join(", "))
}

// -- 7 ----------------------------------------------------------------------

fn epsilon() -> Outcome {
    let mut rng = seeded(7);
    let model = SamplerModel::new(&mut rng);
    let prior = PriorConfig::default();
    let cfg = SamplerConfig::default();
    let tasks: Vec<TaskParam> = (0..cfg.warmup_len() + cfg.candidates).map(|_| sample_prior(&mut rng, &prior).unwrap()).collect();
    let (past, candidates) = tasks.split_at(cfg.warmup_len());
    let subset: Vec<Vec<f64>> = past.iter().map(|w| model.encode(w)).collect();
    let mut hits = 0;
    for s in 0..10_000u64 {
        let sel = select_task(candidates, &model, &subset, past.len(), SamplerMode::Atr, &cfg, &mut derived(7, s)).unwrap();
        hits += usize::from(sel.prior_branch);
    }
    let f = hits as f64 / 10_000.0;
    outcome((0.08..=0.12).contains(&f), format!("prior branch taken in {f:.4} of 10000 selections"))
}

// -- 8 ----------------------------------------------------------------------

/// Area under the ROC curve by pairwise comparison, ties counting half.
fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (s_pos, _) in scores.iter().zip(labels).filter(|(_, l)| **l) {
        for (s_neg, _) in scores.iter().zip(labels).filter(|(_, l)| !**l) {
            pairs += 1.0;
            num += if s_pos > s_neg {
                1.0
            } else if s_pos == s_neg {
                0.5
            } else {
                0.0
            };
        }
    }
    num / pairs
}

fn value_learning() -> Outcome {
    let t = Instant::now();
    let c = WorldConstants::default();
    let mut rng = seeded(8);
    let prior = PriorConfig::default();
    let tasks: Vec<TaskParam> = (0..2000).map(|_| sample_prior(&mut rng, &prior).unwrap()).collect();
    let labels: Vec<bool> = tasks
        .iter()
        .enumerate()
        .map(|(k, w)| {
            let ctx = w.contexts[0];
            instantiate(w, &mut seeded(derive_seed(8, k as u64)), &c)
                .is_ok_and(|world| make_oracle_policy(ctx.skill).solves(&world, &ctx))
        })
        .collect();
    let (train, test) = (0..1600, 1600..2000);
    let mut model = SamplerModel::new(&mut rng);
    for _ in 0..3000 {
        let batch: Vec<(&TaskParam, f64)> = (0..128)
            .map(|_| {
                let k = rng.random_range(train.clone());
                (&tasks[k], if labels[k] { 1.0 } else { 0.0 })
            })
            .collect();
        model.value_update(&batch).unwrap();
    }
    let v: Vec<f64> = tasks.iter().map(|w| model.value(&model.encode(w))).collect();
    let train_auc = auc(&v[train.clone()], &labels[train]);
    let test_auc = auc(&v[test.clone()], &labels[test]);
    let el = t.elapsed();
    let rate = labels.iter().filter(|l| **l).count() as f64 / labels.len() as f64;
    outcome(
        test_auc > 0.9 && el < Duration::from_secs(300),
        format!(
            "2000 tasks ({:.0}% feasible), 3000 updates: held-out AUC {test_auc:.3}, training AUC {train_auc:.3}, {:.0}s",
            rate * 100.0,
            secs(el)
        ),
    )
}

// -- 9, 10, 11 --------------------------------------------------------------

const MODES: [SamplerMode; 4] = [SamplerMode::Atr, SamplerMode::Uniform, SamplerMode::FeasibilityOnly, SamplerMode::DiversityOnly];
const SEEDS: [u64; 3] = [0, 1, 2];

fn out_root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn run_dir(mode: SamplerMode, seed: u64) -> PathBuf {
    out_root().join(format!("{}-{seed}", mode.name()))
}

/// Final per-skill success of every (mode, seed) run, in `MODES` order.
struct Experiment {
    finals: Vec<Vec<[f64; 4]>>,
    rows: Vec<Vec<Vec<MetricsRow>>>,
    elapsed: Duration,
}

fn experiment() -> Experiment {
    let t = Instant::now();
    let mut finals = vec![Vec::new(); MODES.len()];
    let mut rows = vec![Vec::new(); MODES.len()];
    for &seed in &SEEDS {
        for (k, &mode) in MODES.iter().enumerate() {
            let cfg = ExperimentConfig { seed, mode, out_dir: Some(run_dir(mode, seed)), ..ExperimentConfig::default() };
            let run = Instant::now();
            let out = run_training(cfg).expect("training run");
            let last = out.metrics.last().expect("final metrics row").success;
            println!("  run {:<16} seed {seed}: final {:?} ({:.0}s)", mode.name(), last, secs(run.elapsed()));
            finals[k].push(last);
            rows[k].push(out.metrics);
        }
    }
    Experiment { finals, rows, elapsed: t.elapsed() }
}

fn skill_means(runs: &[[f64; 4]]) -> [f64; 4] {
    std::array::from_fn(|s| runs.iter().map(|r| r[s]).sum::<f64>() / runs.len() as f64)
}

fn mean4(v: &[f64; 4]) -> f64 {
    v.iter().sum::<f64>() / 4.0
}

fn print_table(e: &Experiment) {
    println!("  {:<18} {:>10} {:>12} {:>10} {:>9} {:>7}", "mode", "place-onto", "place-nextto", "push-under", "pull-with", "mean");
    for (k, mode) in MODES.iter().enumerate() {
        let m = skill_means(&e.finals[k]);
        println!("  {:<18} {:>10.3} {:>12.3} {:>10.3} {:>9.3} {:>7.3}", mode.name(), m[0], m[1], m[2], m[3], mean4(&m));
    }
    // Training-episode success after 5 000 iterations, for reference.
    let late = |k: usize| {
        let v: Vec<f64> = e.rows[k].iter().flat_map(|r| r.iter().filter(|m| m.iteration > 5000).map(|m| m.success_fraction)).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    println!("  training r=1 fraction after 5000 iterations: atr {:.4}, uniform {:.4}", late(0), late(1));
}

fn curriculum(e: &Experiment) -> Outcome {
    let atr = skill_means(&e.finals[0]);
    let uni = skill_means(&e.finals[1]);
    let diff: [f64; 4] = std::array::from_fn(|s| atr[s] - uni[s]);
    let place = Skill::PlaceOnto.index();
    let pull = Skill::PullWith.index();
    let pass = atr[place] >= uni[place] && atr[pull] >= uni[pull] && mean4(&diff) > 0.0 && e.elapsed < Duration::from_secs(3600);
    outcome(
        pass,
        format!(
            "atr - uniform per skill {:?}, mean {:+.3}; 12 runs in {:.1} min",
            diff.map(|d| (d * 1000.0).round() / 1000.0),
            mean4(&diff),
            secs(e.elapsed) / 60.0
        ),
    )
}

fn ablations(e: &Experiment) -> Outcome {
    let m: Vec<f64> = (0..MODES.len()).map(|k| mean4(&skill_means(&e.finals[k]))).collect();
    outcome(
        m[0] >= m[2] && m[0] >= m[3],
        format!("cross-skill mean: atr {:.3}, feasibility-only {:.3}, diversity-only {:.3}", m[0], m[2], m[3]),
    )
}

fn determinism() -> Outcome {
    let first = run_dir(SamplerMode::Atr, 0).join("metrics.csv");
    let dir = out_root().join("atr-0-repeat");
    let cfg = ExperimentConfig { seed: 0, mode: SamplerMode::Atr, out_dir: Some(dir.clone()), ..ExperimentConfig::default() };
    if !first.exists() {
        let mut c = cfg.clone();
        c.out_dir = Some(run_dir(SamplerMode::Atr, 0));
        run_training(c).expect("training run");
    }
    run_training(cfg).expect("training run");
    let a = fs::read(&first).unwrap();
    let b = fs::read(dir.join("metrics.csv")).unwrap();
    outcome(a == b && !a.is_empty(), format!("metrics.csv of two atr seed-0 runs: {} vs {} bytes, identical: {}", a.len(), b.len(), a == b))
}

fn main() -> ExitCode {
    let only: Option<BTreeSet<u32>> =
        std::env::var("ATR_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |k: u32| only.as_ref().is_none_or(|o| o.contains(&k));
    let mut failed = Vec::new();
    let mut report = |k: u32, name: &str, o: Outcome| {
        println!("criterion {k:>2} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(k);
        }
    };
    let simple: [(u32, &str, fn() -> Outcome); 8] = [
        (1, "gradient check", gradients),
        (2, "knn oracle", knn),
        (3, "density estimate", density),
        (4, "encoder invariances", invariances),
        (5, "planner optimality", planner),
        (6, "oracle sequential", oracle_sequential),
        (7, "epsilon calibration", epsilon),
        (8, "value learning", value_learning),
    ];
    for (k, name, f) in simple {
        if wanted(k) {
            report(k, name, f());
        }
    }
    if wanted(9) || wanted(10) {
        let e = experiment();
        print_table(&e);
        if wanted(9) {
            report(9, "curriculum vs uniform", curriculum(&e));
        }
        if wanted(10) {
            report(10, "ablation ordering", ablations(&e));
        }
    }
    if wanted(11) {
        report(11, "determinism", determinism());
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
