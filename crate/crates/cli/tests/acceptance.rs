//! End-to-end acceptance checks. Each test prints one PASS/FAIL line with
//! the measured values. The simulated-teacher sweep (every environment and
//! scenario, six seeds) runs once and is shared by the tests that need it.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use calib_core::env::{EnvKind, EnvironmentSpec, FeatureId};
use calib_core::experiments::{export, reproduces, run_experiment_with, ExperimentConfig, ExperimentPlan, ExperimentResult, Manifest, Method, MANIFEST_FILE, RESULT_FILE};
use calib_core::learning::{max_gradient_error, train_reward, CalibratedFeature, CalibratedRepresentation, FeatureRep, Featurizer, LossWeights, PairInputs, Query, QueryDataset, Representation};
use calib_core::oracle::{bt_prob, gt_calibrated, respond_values, GroundTruth, GtCalibratedFn, Label, OracleConfig, Scenario};
use calib_core::rng::rng_from;
use calib_core::tinynet::{InitMode, MlpModel, MlpSpec, TrainHyper};
use calib_core::Error;
use calib_service::{AppState, SessionLog, Teacher, TeacherConfig};
use rand::Rng as _;

const SEEDS: u64 = 6;
const TABLE_TOLERANCE: f64 = 0.05;
const MIN_ROWS_BEATING_BASELINE: usize = 10;
const LOW_DATA_GAIN: f64 = 0.10;
const MIN_ROWS_WITH_LOW_DATA_GAIN: usize = 4;
const EVALUABLE_RANGE: (f64, f64) = (900.0, 1000.0);
const ANTISYMMETRY_TOL: f64 = 1e-12;
const GRADIENT_TOL: f64 = 1e-3;
const GRADIENT_TRIALS: u64 = 20;
/// Wider probe step; a tenth of it is also tried for every parameter.
const FD_STEP: f64 = 1e-5;
const CHECKPOINT_BUDGET: Duration = Duration::from_secs(120);
const SWEEP_BUDGET: Duration = Duration::from_secs(2 * 3600);

/// Published calibrated-feature accuracy at 5 and 10 reward queries.
const PUBLISHED: [(EnvKind, &str, f64, f64); 12] = [
    (EnvKind::WeightedBlock, "all", 0.808, 0.848),
    (EnvKind::WeightedBlock, "single:stove_dist", 0.802, 0.841),
    (EnvKind::WeightedBlock, "single:table_dist", 0.804, 0.844),
    (EnvKind::WeightedBlock, "single:laptop_dist", 0.794, 0.828),
    (EnvKind::Cup, "all", 0.807, 0.824),
    (EnvKind::Cup, "single:stove_dist", 0.747, 0.813),
    (EnvKind::Cup, "single:cup_angle", 0.763, 0.835),
    (EnvKind::Cup, "single:laptop_dist", 0.814, 0.840),
    (EnvKind::Utensil, "all", 0.793, 0.823),
    (EnvKind::Utensil, "single:stove_dist", 0.855, 0.867),
    (EnvKind::Utensil, "single:human_dist", 0.827, 0.853),
    (EnvKind::Utensil, "single:point_at_human", 0.802, 0.825),
];

fn verdict(name: &str, pass: bool, detail: &str) -> bool {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

struct Sweep {
    rows: Vec<ExperimentResult>,
    dirs: Vec<PathBuf>,
    elapsed: Duration,
    _out: tempfile::TempDir,
}

fn sweep() -> &'static Sweep {
    static SWEEP: OnceLock<Sweep> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let out = tempfile::tempdir().unwrap();
        let start = Instant::now();
        let (mut rows, mut dirs) = (Vec::new(), Vec::new());
        for (k, &(env, scenario, _, _)) in PUBLISHED.iter().enumerate() {
            let scenario: Scenario = scenario.parse().unwrap();
            let plan = ExperimentPlan::new(env, scenario, (0..SEEDS).collect(), ExperimentConfig::default()).unwrap();
            let t = Instant::now();
            let result = run_experiment_with(&plan, None).unwrap();
            let dir = out.path().join(format!("row{k:02}"));
            export(&result, &dir).unwrap();
            println!("  ran {env} / {scenario} in {:.0}s", t.elapsed().as_secs_f64());
            rows.push(result);
            dirs.push(dir);
        }
        Sweep {
            rows,
            dirs,
            elapsed: start.elapsed(),
            _out: out,
        }
    })
}

fn row_label(r: &ExperimentResult) -> String {
    format!("{}/{}", r.plan.env, r.plan.scenario)
}

#[test]
fn reward_accuracy_table() {
    let s = sweep();
    let mut within = 0;
    let mut beats = 0;
    for (r, &(_, _, p5, p10)) in s.rows.iter().zip(&PUBLISHED) {
        let a5 = r.low_data_row(5).unwrap();
        let a10 = r.low_data_row(10).unwrap();
        let ok5 = (a5.calibrated - p5).abs() <= TABLE_TOLERANCE;
        let ok10 = (a10.calibrated - p10).abs() <= TABLE_TOLERANCE;
        within += ok5 as usize + ok10 as usize;
        let beat = a5.calibrated > a5.baseline && a10.calibrated > a10.baseline;
        beats += beat as usize;
        println!(
            "  {:<34} cf@5 {:.3} (pub {p5:.3}{}) cf@10 {:.3} (pub {p10:.3}{}) best baseline {:.3}/{:.3}",
            row_label(r),
            a5.calibrated,
            if ok5 { "" } else { ", off" },
            a10.calibrated,
            if ok10 { "" } else { ", off" },
            a5.baseline,
            a10.baseline
        );
    }
    let pass = within == 24 && beats >= MIN_ROWS_BEATING_BASELINE;
    let runtime_ok = s.elapsed <= SWEEP_BUDGET;
    let detail = format!(
        "{within}/24 values within ±{TABLE_TOLERANCE}, cf beats best baseline at 5 and 10 queries in {beats}/12 rows (need {MIN_ROWS_BEATING_BASELINE}), sweep {:.0}s",
        s.elapsed.as_secs_f64()
    );
    assert!(verdict("reward accuracy table", pass && runtime_ok, &detail), "{detail}");
}

#[test]
fn low_data_advantage() {
    let s = sweep();
    let gains: Vec<f64> = s
        .rows
        .iter()
        .map(|r| {
            let row = r.low_data_row(5).unwrap();
            row.calibrated - row.baseline
        })
        .collect();
    let hits = gains.iter().filter(|&&g| g >= LOW_DATA_GAIN).count();
    let best = gains.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let detail = format!(
        "{hits}/12 rows gain ≥ {:.0} points at 5 queries (need {MIN_ROWS_WITH_LOW_DATA_GAIN}), best {:+.1}",
        100.0 * LOW_DATA_GAIN,
        100.0 * best
    );
    assert!(verdict("low-data advantage", hits >= MIN_ROWS_WITH_LOW_DATA_GAIN, &detail), "{detail}");
}

#[test]
fn calibrated_feature_learning_curves() {
    let s = sweep();
    // Feature streams do not depend on the scenario, so the three
    // all-features rows cover every calibrated function.
    let mut by_fn: BTreeMap<(&str, usize), Vec<f64>> = BTreeMap::new();
    for r in s.rows.iter().filter(|r| r.plan.scenario == Scenario::All) {
        for rec in &r.feature {
            by_fn.entry((rec.function.name(), rec.query_count)).or_default().push(rec.mse);
        }
    }
    let mean = |f: &str, q: usize| {
        let v = &by_fn[&(f, q)];
        v.iter().sum::<f64>() / v.len() as f64
    };
    let mut pass = true;
    let mut seen = 0;
    for f in GtCalibratedFn::ALL {
        if !by_fn.contains_key(&(f.name(), 100)) {
            pass = false;
            println!("  {}: missing", f.name());
            continue;
        }
        seen += 1;
        let (m0, m10, m100) = (mean(f.name(), 0), mean(f.name(), 10), mean(f.name(), 100));
        let ok = m100 < m0 && m100 <= m10;
        pass &= ok;
        println!("  {:<20} mse@0 {m0:.4} @10 {m10:.4} @100 {m100:.4}{}", f.name(), if ok { "" } else { "  <-" });
    }
    let detail = format!("{seen}/7 functions measured; mse@100 below untrained and ≤ mse@10 for all: {pass}");
    assert!(verdict("calibrated feature learning curves", pass && seen == 7, &detail), "{detail}");
}

#[test]
fn oracle_properties() {
    let mut rng = rng_from(99, &[]);
    let mut anti = 0.0f64;
    for _ in 0..100_000 {
        let (v1, v2, beta) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(0.1..50.0));
        anti = anti.max((bt_prob(v1, v2, beta) + bt_prob(v2, v1, beta) - 1.0).abs());
    }
    let mut in_range = true;
    for f in GtCalibratedFn::ALL {
        for i in 0..=100 {
            for j in 0..=100 {
                let v = gt_calibrated(f, i as f64 / 100.0, j as f64 / 100.0).unwrap();
                in_range &= (0.0..=1.0).contains(&v);
            }
        }
    }
    let cfg = OracleConfig::default();
    let mut all_equal = true;
    for _ in 0..100_000 {
        let v1 = rng.gen_range(0.0..1.0);
        let d = rng.gen_range(-cfg.epsilon..=cfg.epsilon);
        all_equal &= respond_values(v1, v1 + d, &cfg, &mut rng) == Label::Equal;
    }
    let pass = anti <= ANTISYMMETRY_TOL && in_range && all_equal;
    let detail = format!("antisymmetry error {anti:.1e}, ground truth in [0,1] on 101x101 grid: {in_range}, |Δ|≤ε always equal: {all_equal}");
    assert!(verdict("oracle properties", pass, &detail), "{detail}");
}

fn random_pairs(dim: usize, n: usize, groups: usize, weighted: bool, seed: u64) -> PairInputs {
    let labels = [Label::First, Label::Equal, Label::Second];
    let mut rng = rng_from(seed, &[]);
    let mut d = PairInputs::new(dim);
    for i in 0..n {
        let x1: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x2: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = if weighted { rng.gen_range(0.5..3.0) } else { 1.0 };
        d.push(&x1, &x2, labels[rng.gen_range(0..3)], i % groups, w);
    }
    d
}

/// Builds `(nets, groups, trainable_from, weights)` for one random trial.
type MakeCase = dyn Fn(u64) -> (Vec<MlpModel>, usize, usize, LossWeights);

#[test]
fn loss_gradients_match_finite_differences() {
    let xavier = InitMode::XavierLeaky;
    let cases: Vec<(&str, Box<MakeCase>)> = vec![
        (
            "calibrated feature",
            Box::new(move |s| {
                let net = MlpModel::init(MlpSpec { hidden: vec![8, 8], ..MlpSpec::calibrated_feature(5) }, s, xavier).unwrap();
                (vec![net], 1, 0, LossWeights { lambda_equiv: 10.0, lambda_reg: 1e-4 })
            }),
        ),
        (
            "multi-task trunk and heads",
            Box::new(move |s| {
                let trunk = MlpModel::init(MlpSpec { hidden: vec![6, 6], ..MlpSpec::trunk(5, 3) }, s, xavier).unwrap();
                let heads = MlpModel::init(MlpSpec::linear(3, 4, true), s + 1000, xavier).unwrap();
                (vec![trunk, heads], 4, 0, LossWeights { lambda_equiv: 10.0, lambda_reg: 1e-4 })
            }),
        ),
        (
            "reward head on frozen trunk",
            Box::new(move |s| {
                let trunk = MlpModel::init(MlpSpec { hidden: vec![6], ..MlpSpec::trunk(5, 3) }, s, xavier).unwrap();
                let head = MlpModel::init(MlpSpec::reward_head(3), s + 1000, InitMode::Default).unwrap();
                (vec![trunk, head], 1, 1, LossWeights { lambda_equiv: 1.0, lambda_reg: 1e-3 })
            }),
        ),
        (
            "reward head with unfrozen trunk",
            Box::new(move |s| {
                let trunk = MlpModel::init(MlpSpec { hidden: vec![6], ..MlpSpec::trunk(5, 3) }, s, xavier).unwrap();
                let head = MlpModel::init(MlpSpec::reward_head(3), s + 1000, InitMode::Default).unwrap();
                (vec![trunk, head], 1, 0, LossWeights { lambda_equiv: 1.0, lambda_reg: 1e-3 })
            }),
        ),
        (
            "linear reward",
            Box::new(|s| {
                let net = MlpModel::init(MlpSpec::linear(3, 1, false), s, InitMode::Default).unwrap();
                (vec![net], 1, 0, LossWeights { lambda_equiv: 0.0, lambda_reg: 0.0 })
            }),
        ),
    ];
    let mut worst = 0.0f64;
    for (name, make) in &cases {
        let mut case_worst = 0.0f64;
        for trial in 0..GRADIENT_TRIALS {
            let (nets, groups, from, w) = make(trial + 1);
            let data = random_pairs(nets[0].spec.input_dim, 6, groups, groups > 1, 500 + trial);
            case_worst = case_worst.max(max_gradient_error(&nets, &data, w, from, FD_STEP).unwrap());
        }
        println!("  {name:<32} max relative error {case_worst:.2e}");
        worst = worst.max(case_worst);
    }
    let detail = format!("max relative error {worst:.2e} over {GRADIENT_TRIALS} random nets and batches per loss (tolerance {GRADIENT_TOL:.0e})");
    assert!(verdict("gradient check", worst < GRADIENT_TOL, &detail), "{detail}");
}

#[test]
fn evaluable_pairs_per_test_set() {
    let s = sweep();
    let counts: Vec<f64> = s.rows.iter().flat_map(|r| r.evaluable.iter().map(|e| e.evaluable as f64)).collect();
    let mean = counts.iter().sum::<f64>() / counts.len() as f64;
    let mut sorted = counts.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    for r in &s.rows {
        let m = r.evaluable.iter().map(|e| e.evaluable as f64).sum::<f64>() / r.evaluable.len() as f64;
        println!("  {:<34} mean {m:.1}", row_label(r));
    }
    let pass = (EVALUABLE_RANGE.0..=EVALUABLE_RANGE.1).contains(&mean);
    let detail = format!("mean {mean:.1}, median {median} over {} test sets (need [{}, {}])", counts.len(), EVALUABLE_RANGE.0, EVALUABLE_RANGE.1);
    assert!(verdict("evaluable pairs", pass, &detail), "{detail}");
}

#[test]
fn frozen_versus_unfrozen() {
    // Calibrated features are always frozen: fine-tuning them is rejected,
    // so the frozen variant is the method itself.
    let env = EnvironmentSpec::with_default_layout(EnvKind::Cup);
    let set = calib_core::env::build_state_set(&env, 100, 0).unwrap();
    let norm = calib_core::env::Normalizer::fit(&set.states, &env).unwrap();
    let fz = Featurizer::new(env, norm);
    let rep = CalibratedRepresentation::new(vec![
        FeatureRep::Learned(CalibratedFeature::untrained(FeatureId::StoveDist, 0, 0).unwrap()),
        FeatureRep::Identity,
        FeatureRep::Identity,
    ])
    .unwrap();
    let data = QueryDataset::new(vec![Query { s1: set.states[0], s2: set.states[1], label: Label::First }]);
    let unfrozen = train_reward(Representation::Calibrated(&rep), &data, &fz, &TrainHyper::calibrated_reward(), false, 0);
    let cf_always_frozen = matches!(unfrozen, Err(Error::CalibratedAlwaysFrozen));

    let s = sweep();
    let mut pass = cf_always_frozen;
    for env in EnvKind::ALL {
        let rows: Vec<&ExperimentResult> = s.rows.iter().filter(|r| r.plan.env == env).collect();
        let top = *rows[0].plan.config.reward_query_grid.iter().max().unwrap();
        let mut diffs = Vec::new();
        for r in &rows {
            for &heads in r.plan.config.multitask_heads.iter().filter(|&&h| h > 1) {
                let f = r.mean_accuracy(Method::MultiTask { heads, frozen: true }, top).unwrap();
                let u = r.mean_accuracy(Method::MultiTask { heads, frozen: false }, top).unwrap();
                diffs.push(u - f);
            }
        }
        let gap = diffs.iter().sum::<f64>() / diffs.len() as f64;
        pass &= gap >= 0.0;
        println!("  {env:<16} joint unfrozen - frozen @{top}: {:+.1} points", 100.0 * gap);
    }
    let detail = format!("calibrated features always frozen: {cf_always_frozen}; joint unfrozen ≥ frozen at the largest budget per environment: {pass}");
    assert!(verdict("frozen versus unfrozen", pass, &detail), "{detail}");
}

#[test]
fn experiment_cells_reproduce_from_manifest() {
    let s = sweep();
    let dir = &s.dirs[0];
    let manifest = Manifest::load(&dir.join(MANIFEST_FILE)).unwrap();
    let stored = ExperimentResult::load(&dir.join(RESULT_FILE)).unwrap();
    let same_plan = manifest.plan == stored.plan && manifest.reward_grids == stored.reward_grids;
    let seed = manifest.plan.seeds[SEEDS as usize - 1];
    let exact = reproduces(&stored, seed).unwrap();
    let reexport = tempfile::tempdir().unwrap();
    export(&stored, reexport.path()).unwrap();
    let mut identical_files = true;
    for f in &manifest.files {
        identical_files &= std::fs::read(dir.join(f)).unwrap() == std::fs::read(reexport.path().join(f)).unwrap();
    }
    let pass = same_plan && exact && identical_files;
    let detail = format!("{} seed {seed}: rerun bit-exact {exact}, manifest matches {same_plan}, re-export byte-identical {identical_files}", row_label(&stored));
    assert!(verdict("determinism", pass, &detail), "{detail}");
}

#[test]
fn teaching_session_replays_bit_exactly() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TeacherConfig::new(EnvKind::Utensil, FeatureId::HumanDist);
    let (id, recorded, slowest) = rt.block_on(async {
        let state: Arc<AppState> = AppState::open(Teacher::new(cfg.clone()).unwrap(), dir.path()).unwrap();
        let teacher = state.teacher.clone();
        let gt = GroundTruth::new(teacher.fz.env, teacher.fz.normalizer.clone());
        let mut rng = rng_from(5, &[]);
        let oracle = OracleConfig::default();
        let id = state.create_session().unwrap();
        let app = calib_service::router(state.clone());
        for i in 0..teacher.query_count() {
            let (s1, s2) = teacher.query(i).unwrap();
            let (v1, v2) = (gt.feature_value(teacher.index, &s1).unwrap(), gt.feature_value(teacher.index, &s2).unwrap());
            let label = respond_values(v1, v2, &oracle, &mut rng);
            let body = serde_json::json!({ "index": i, "label": label }).to_string();
            let req = axum::http::Request::post(format!("/session/{id}/label"))
                .header("content-type", "application/json")
                .body(axum::body::Body::from(body))
                .unwrap();
            let resp = tower::ServiceExt::oneshot(app.clone(), req).await.unwrap();
            assert_eq!(resp.status(), axum::http::StatusCode::OK);
        }
        let mut recorded = BTreeMap::new();
        let mut slowest = Duration::ZERO;
        for c in calib_service::CHECKPOINTS {
            let cp = loop {
                if let Some(cp) = state.checkpoint(&id, c) {
                    break cp;
                }
                tokio::time::sleep(Duration::from_millis(100)).await;
            };
            slowest = slowest.max(cp.train_time);
            recorded.insert(c, cp.model.clone());
        }
        (id, recorded, slowest)
    });

    // Replay from the log alone, in a fresh service and offline.
    let events = SessionLog::read(&dir.path().join(format!("{id}.jsonl"))).unwrap();
    let labels = events.iter().filter(|e| matches!(e, calib_service::Event::Label { .. })).count();
    let offline = Teacher::new(cfg.clone()).unwrap().replay(&events).unwrap();
    let restarted = rt.block_on(async {
        let state = AppState::open(Teacher::new(cfg).unwrap(), dir.path()).unwrap();
        let mut out = BTreeMap::new();
        for c in calib_service::CHECKPOINTS {
            loop {
                if let Some(cp) = state.checkpoint(&id, c) {
                    out.insert(c, cp.model.clone());
                    break;
                }
                tokio::time::sleep(Duration::from_millis(100)).await;
            }
        }
        out
    });
    let bits = |m: &BTreeMap<usize, calib_service::teacher::TrainedModel>| serde_json::to_string(m).unwrap();
    let exact = bits(&recorded) == bits(&offline) && bits(&recorded) == bits(&restarted) && recorded.len() == 4;
    let fast = slowest <= CHECKPOINT_BUDGET;
    let detail = format!(
        "{labels}-label session, {} checkpoints identical after replay and restart: {exact}; slowest checkpoint {:.2}s (budget {}s)",
        recorded.len(),
        slowest.as_secs_f64(),
        CHECKPOINT_BUDGET.as_secs()
    );
    assert!(verdict("teaching session replay", exact && fast && labels == 100, &detail), "{detail}");
}
